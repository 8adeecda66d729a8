"""Semi-supervised multi-output 3D segmentation with an EMA teacher."""

from .augment import SpatialTransform, apply_transform, invert, sample_transform
from .ema import TeacherState, init_teacher, predict_pseudo_label, update_teacher
from .experiments import ExperimentReport, ExperimentSpec, emit_report, make_setting, run_experiment, shuffle_split
from .losses import LossConfig, combined_loss, dice_score, focal_loss, generalized_dice_loss
from .network import NetworkConfig, SegmentationModel, build_model, forward
from .preprocess import PreprocessConfig, preprocess_pipeline
from .trainer import TrainConfig, TrainHistory, Trainer, evaluate, train
from .volume_io import (
    DatasetSplit,
    LabelVolume,
    MaskTensor,
    Sample,
    Volume,
    generate_phantom,
    labels_to_masks,
    load_volume,
    save_volume,
)

__version__ = "0.1.0"
