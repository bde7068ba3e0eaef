import numpy as np
import pytest
import torch

from flexctrl.control import (
    FDN,
    ConditionBundle,
    ConditionExtractor,
    ConditionInstance,
    ZeroConv,
    attach_control,
    build_union_mask,
    loss_layer_records,
    merge_homogeneous,
)
from flexctrl.denoiser import UNetConfig, build_unet
from flexctrl.errors import DimensionError, InputError
from flexctrl.numerics import channel_norm, grad_check

D = torch.float64
SMALL = UNetConfig(base_channels=4, token_dim=8, time_dim=8)


def instance(ctype="edge", pixels=(), sparse=False):
    m = np.zeros((1, 16, 16), np.float32)
    for y, x in pixels:
        m[0, y, x] = 1.0
    return ConditionInstance(ctype, m, (m[0] > 0).astype(np.uint8), frozenset({0}), sparse)


def random_bundle(rng):
    insts = []
    for ctype in ("edge", "segmentation", "depth"):
        for _ in range(int(rng.integers(0, 3))):
            m = (rng.random((1, 16, 16)) * (rng.random((1, 16, 16)) < 0.2)).astype(np.float32)
            insts.append(ConditionInstance(ctype, m, (m[0] > 0).astype(np.uint8)))
    return ConditionBundle(tuple(insts))


def controlled(seed=0):
    return attach_control(build_unet(SMALL, seed, D), seed=seed)


# --- bundles and masks ---------------------------------------------------------------

def test_instance_validation():
    with pytest.raises(InputError):
        ConditionInstance("pose", np.zeros((1, 16, 16)), np.zeros((16, 16), np.uint8))
    with pytest.raises(InputError):
        ConditionInstance("edge", np.zeros((1, 16, 16)), np.full((16, 16), 2, np.uint8))


def test_fused_input_is_max_per_type():
    a = instance("edge", [(0, 0), (1, 1)])
    b = instance("edge", [(1, 1), (2, 2)])
    fused = ConditionBundle((a, b, instance("depth", [(5, 5)]))).fused_input
    assert fused.shape == (3, 16, 16)
    assert np.array_equal(fused[0], np.maximum(a.map, b.map)[0])
    assert not fused[1].any()
    assert fused[2, 5, 5] == 1


def test_union_mask_cases():
    pixels = [(i, 3) for i in range(12)]
    mask = build_union_mask(ConditionBundle((instance("edge", pixels),)))
    assert mask.sum() == 12 and all(mask[y, x] == 1 for y, x in pixels)
    sparse = ConditionBundle((instance("edge", [(0, 0)]), instance("depth", [], sparse=True)))
    assert (build_union_mask(sparse) == 1).all()
    assert not build_union_mask(ConditionBundle(())).any()


def test_union_mask_is_binary_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        bundle = random_bundle(rng)
        mask = build_union_mask(bundle)
        assert set(np.unique(mask)) <= {0, 1}
        extra = ConditionBundle(bundle.instances + random_bundle(rng).instances)
        assert (build_union_mask(extra) >= mask).all()


def test_merge_homogeneous_cases():
    a = instance("edge", [(0, 0)]).map
    b = instance("edge", [(4, 4)]).map
    assert np.array_equal(merge_homogeneous([a]), a)
    assert np.array_equal(merge_homogeneous([a, b]) > 0, (a > 0) | (b > 0))
    assert np.array_equal(merge_homogeneous([a, a]), a)
    with pytest.raises(InputError):
        merge_homogeneous([])


# --- building blocks ------------------------------------------------------------------

def test_extractor_zero_input_gives_biases():
    ext = ConditionExtractor(3, [4, 8, 16]).to(D)
    with torch.no_grad():
        for b in ext.biases:
            b.copy_(torch.randn(b.shape, dtype=D))
    feats = ext(torch.zeros(1, 3, 16, 16, dtype=D))
    assert [tuple(f.shape[1:]) for f in feats] == [(4, 16, 16), (8, 8, 8), (16, 4, 4)]
    for f, b in zip(feats, ext.biases):
        assert torch.equal(f[0], b[:, None, None].expand_as(f[0]))


def test_extractor_gradients():
    torch.manual_seed(0)
    ext = ConditionExtractor(3, [2, 2, 2]).to(D)
    c = torch.rand(1, 3, 16, 16, dtype=D)
    leaves = list(ext.parameters())
    assert grad_check(lambda: sum((f**2).sum() for f in ext(c)), leaves) <= 1e-4


def test_zero_conv_contract():
    zc = ZeroConv(3, 3).to(D)
    x = torch.randn(2, 3, 5, 5, dtype=D)
    assert torch.equal(zc(x), torch.zeros_like(x))
    (zc(x) * torch.randn_like(x)).sum().backward()
    assert zc.weight.grad.abs().sum() > 0
    with torch.no_grad():
        zc.weight.copy_(torch.eye(3, dtype=D)[:, :, None, None])
    assert torch.equal(zc(x), x)


def test_fdn_at_init_is_channel_norm():
    layer = FDN(4, 4).to(D)
    z, c = torch.randn(2, 4, 8, 8, dtype=D), torch.randn(2, 4, 8, 8, dtype=D)
    assert torch.equal(layer(z, c), channel_norm(z))
    with pytest.raises(DimensionError):
        layer(z, c[..., :4, :4])


def test_fdn_forced_minus_one():
    layer = FDN(2, 2).to(D)
    with torch.no_grad():
        layer.phi.weight.zero_()
        layer.phi.bias.fill_(-1.0)
    z, c = torch.randn(1, 2, 6, 6, dtype=D), torch.randn(1, 2, 6, 6, dtype=D)
    assert torch.equal(layer(z, c), torch.full_like(z, -1.0))


def test_fdn_phi_gradient():
    torch.manual_seed(1)
    layer = FDN(2, 2).to(D)
    with torch.no_grad():
        layer.zero.weight.copy_(torch.randn(layer.zero.weight.shape, dtype=D))
    z, c = torch.randn(1, 2, 6, 6, dtype=D), torch.randn(1, 2, 6, 6, dtype=D)
    probe = torch.randn(1, 2, 6, 6, dtype=D)
    leaves = [layer.phi.weight, layer.phi.bias]
    assert grad_check(lambda: (layer(z, c) * probe).sum(), leaves) <= 1e-4


# --- full branch ------------------------------------------------------------------------

def test_fresh_branch_is_bitwise_base():
    model = controlled(1)
    rng = np.random.default_rng(1)
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        z = torch.randn(2, 3, 16, 16, generator=g, dtype=D)
        t = torch.randint(200, (2,), generator=g)
        ids = torch.randint(24, (2, 6), generator=g)
        fused = torch.tensor(np.stack([random_bundle(rng).fused_input for _ in range(2)]), dtype=D)
        residuals, _ = model.control_forward(z, t, ids, fused)
        assert all(torch.equal(r, torch.zeros_like(r)) for r in residuals)
        assert [tuple(r.shape[1:]) for r in residuals] == model.base.feature_shapes()
        assert torch.equal(model(z, t, ids, fused)[0], model.base(z, t, ids)[0])


def test_base_is_frozen_and_branch_trains():
    model = controlled(2)
    assert not any(p.requires_grad for p in model.base.parameters())
    trainable = model.control.trainable_parameters()
    assert trainable and all(p.requires_grad for p in trainable)
    for lvl in model.control.encoder:
        if lvl.attn is not None:
            assert not lvl.attn.q.requires_grad


def test_one_step_makes_a_residual_nonzero():
    model = controlled(3)
    opt = torch.optim.SGD(model.control.trainable_parameters(), lr=1e-2)
    g = torch.Generator().manual_seed(3)
    z = torch.randn(2, 3, 16, 16, generator=g, dtype=D)
    t = torch.tensor([10, 90])
    ids = torch.randint(24, (2, 4), generator=g)
    fused = torch.rand(2, 3, 16, 16, generator=g, dtype=D)
    eps = torch.randn(2, 3, 16, 16, generator=g, dtype=D)
    ((model(z, t, ids, fused)[0] - eps) ** 2).mean().backward()
    opt.step()
    residuals, _ = model.control_forward(z, t, ids, fused)
    assert any(r.abs().max() > 0 for r in residuals)


def test_loss_layer_set():
    model = controlled(4)
    g = torch.Generator().manual_seed(4)
    z = torch.randn(1, 3, 16, 16, generator=g, dtype=D)
    _, base_recs, ctrl_recs = model(z, torch.tensor([5]), torch.tensor([[2, 5]]), torch.zeros(1, 3, 16, 16, dtype=D))
    recs = loss_layer_records(base_recs, ctrl_recs)
    assert [(r.layer_id, r.branch) for r in recs] == [
        ("dec2.attn", "base"), ("dec1.attn", "base"), ("enc1.attn", "control"), ("enc2.attn", "control")]
