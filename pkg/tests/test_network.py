import numpy as np
import pytest
import torch

from semiseg3d.losses import combined_loss
from semiseg3d.network import (
    NetworkConfig,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from semiseg3d.volume_io import Volume

SMALL = NetworkConfig(stage_channels=[4, 8], bottleneck_dim=8, head_channels=2, input_size=8)


def expected_param_count(cfg: NetworkConfig) -> int:
    """Layer-by-layer arithmetic, independent of the module tree."""
    k3, kf = 3**3, cfg.downscale_factor**3
    ch = cfg.stage_channels

    def conv(cin, cout, k):
        return cin * cout * k + cout

    def block(cin, cout):  # conv + group norm affine
        return conv(cin, cout, k3) + 2 * cout

    n = block(cfg.in_channels, ch[0])
    n += sum(block(ch[i - 1], ch[i]) for i in range(1, len(ch)))
    side = cfg.input_size // cfg.downscale_factor ** (len(ch) - 1)
    n += conv(ch[-1], cfg.bottleneck_dim, 1) + cfg.bottleneck_dim * side**3
    n += block(cfg.bottleneck_dim, ch[-1])
    for i in range(len(ch) - 1, 0, -1):
        n += conv(ch[i], ch[i - 1], kf) + block(2 * ch[i - 1], ch[i - 1])
    n += cfg.num_classes * (conv(ch[0], cfg.head_channels, k3) + conv(cfg.head_channels, 1, 1))
    return n


@pytest.mark.parametrize("cfg", [NetworkConfig(), SMALL, NetworkConfig(stage_channels=[6, 12, 24, 48], num_classes=2)])
def test_parameter_count(cfg):
    m = build_model(cfg)
    assert sum(p.numel() for p in m.parameters()) == expected_param_count(cfg)


def test_build_deterministic_and_rng_untouched():
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    a = build_model(SMALL, init_seed=3)
    assert torch.rand(1).item() == before.item()
    b = build_model(SMALL, init_seed=3)
    c = build_model(SMALL, init_seed=4)
    for (ka, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_head_groups():
    m = build_model(NetworkConfig())
    groups = m.parameter_groups()
    assert sorted(groups) == ["head0", "head1", "head2", "trunk"]
    names = [n for g in groups.values() for n in g]
    assert len(names) == len(set(names)) == len(list(m.parameters()))


def test_output_shape_and_range():
    m = build_model(NetworkConfig())
    x = torch.randn(2, 1, 32, 32, 32)
    y = m(x)
    assert y.shape == (2, 3, 32, 32, 32)
    assert y.min() > 0 and y.max() < 1


def test_forward_volumes(rng):
    m = build_model(SMALL)
    out = forward(m, [Volume(rng.normal(size=(8, 8, 8)).astype(np.float32))])
    assert out[0].classes == ["ALL", "TL", "FL"] and out[0].dims == (3, 8, 8, 8)


def test_zeroing_head_changes_only_its_channel():
    m = build_model(SMALL)
    x = torch.randn(2, 1, 8, 8, 8)
    with torch.no_grad():
        before = m(x)
        for p in m.heads[1].parameters():
            p.zero_()
        after = m(x)
    assert torch.equal(before[:, 0], after[:, 0]) and torch.equal(before[:, 2], after[:, 2])
    assert not torch.equal(before[:, 1], after[:, 1])


def test_batch_permutation_equivariance():
    m = build_model(SMALL)
    x = torch.randn(3, 1, 8, 8, 8)
    order = [2, 0, 1]
    with torch.no_grad():
        assert torch.allclose(m(x)[order], m(x[order]), atol=1e-6, rtol=0)


def test_bad_input_dims():
    m = build_model(SMALL)
    with pytest.raises(ValueError):
        m(torch.randn(1, 1, 8, 8, 4))
    with pytest.raises(ValueError):
        NetworkConfig(input_size=30)


def test_gradient_flow():
    m = build_model(NetworkConfig())
    x = torch.randn(2, 1, 32, 32, 32)
    y = (torch.rand(2, 3, 32, 32, 32) > 0.7).float()
    combined_loss(m(x), y).backward()
    trunk = set(m.parameter_groups()["trunk"])
    nonzero = total = 0
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all()
        if name in trunk:
            nonzero += int((p.grad != 0).sum())
            total += p.grad.numel()
    assert nonzero / total >= 0.99


def test_head_locality_finite_difference():
    m = build_model(SMALL).double()
    x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    p = m.heads[2].conv.weight
    with torch.no_grad():
        base = m(x)
        p.view(-1)[0] += 1e-3
        moved = m(x)
    assert torch.equal(base[:, :2], moved[:, :2])
    assert (base[:, 2] - moved[:, 2]).abs().max() > 0


def test_checkpoint_round_trip(tmp_path):
    m = build_model(SMALL, init_seed=11)
    save_checkpoint(m, tmp_path / "m.ckpt", ema=True)
    back, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["ema"] is True
    assert {e["name"] for e in manifest["params"]} == set(m.state_dict())
    for k, v in m.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    assert back.cfg == m.cfg
