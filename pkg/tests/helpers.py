from semiseg3d.network import NetworkConfig
from semiseg3d.preprocess import PreprocessConfig
from semiseg3d.experiments import DatasetSpec, load_dataset
from semiseg3d.volume_io import PhantomParams

TINY_NET = NetworkConfig(stage_channels=[4, 8], bottleneck_dim=8, head_channels=2, input_size=16)
TINY_PRE = PreprocessConfig(target_dims=(16, 16, 16), xy_resize=16, xy_border_crop=0)
TINY_PHANTOM = PhantomParams(tl_radius=2.0, fl_radius=2.5, flt_radius=2.0, n_distractors=1, distractor_radius=2.0)


def tiny_dataset(n, seed=0):
    return load_dataset(DatasetSpec(n_samples=n, dims=16, seed=seed, phantom=TINY_PHANTOM), TINY_PRE)
