import math

import numpy as np
import pytest
import torch

from nucgrade.core_types import MalformedInputError
from nucgrade.losses import categorical_ce, total_loss
from nucgrade.network import (CHRNet, CompositeConnection, ConfigError, NetworkConfig, build_aux_stem,
                              build_backbone, build_fusion_head, build_hrfe, forward,
                              load_backbone_weights, remap_fusion_weights)
from nucgrade.targets import downsample_4x

from conftest import TINY_NET

# GC attention mask biases only shift a softmax, so their gradient is identically zero
STRUCTURALLY_ZERO = "mask.bias"


def tiny_cfg(size=64, **kw):
    opts = dict(TINY_NET)
    opts.update(kw)
    return NetworkConfig(input_size=(size, size), **opts)


def random_targets(n, h, w, seed=1, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)

    def oh(c):
        return torch.nn.functional.one_hot(torch.randint(0, c, (n, h, w), generator=g), c) \
            .permute(0, 3, 1, 2).to(dtype)

    return dict(binary=torch.randint(0, 2, (n, 1, h, w), generator=g).to(dtype),
                distance=torch.rand(n, 1, h, w, generator=g, dtype=dtype),
                task1=oh(4), task2=oh(4), final=oh(5))


def test_backbone_levels_shapes():
    cfg = tiny_cfg()
    feats = build_backbone(cfg)(torch.rand(1, 3, 64, 64))
    w = cfg.backbone_widths
    assert [tuple(f.shape) for f in feats] == [(1, w[i], 64 >> (i + 1), 64 >> (i + 1)) for i in range(5)]


def test_hrfe_stream_shapes():
    cfg = tiny_cfg()
    feats = build_backbone(cfg)(torch.rand(2, 3, 64, 64))
    hrfe = build_hrfe(cfg, "task1")
    aux = build_aux_stem(cfg, "400x")(torch.rand(2, 3, 64, 64), (64, 64))
    s = cfg.hrfe_stream_widths
    xs = hrfe.streams(feats, aux)
    assert [tuple(x.shape) for x in xs] == [(2, s[0], 64, 64), (2, s[1], 32, 32), (2, s[2], 16, 16)]
    assert hrfe(feats, aux).shape == (2, 4, 64, 64)
    assert build_hrfe(cfg, "single")(feats, aux).shape == (2, 5, 64, 64)
    with pytest.raises(ConfigError):
        build_hrfe(cfg, "task3")


def test_composite_connection():
    cc = CompositeConnection(64, 16, tiny_cfg())
    assert cc(torch.rand(1, 64, 32, 32), (64, 64)).shape == (1, 16, 64, 64)
    with pytest.raises(ConfigError):
        cc(torch.rand(1, 64, 32, 32), (16, 16))


def test_aux_stem_shapes_and_constant_input():
    cfg = tiny_cfg()
    stem = build_aux_stem(cfg, "100x").eval()
    y = stem(torch.full((1, 3, 16, 16), 0.3), (64, 64))
    assert y.shape == (1, cfg.hrfe_stream_widths[0], 64, 64)
    # zero padding disturbs the border; the interior must stay constant
    inner = y[..., 12:-12, 12:-12]
    assert torch.allclose(inner, inner[..., :1, :1].expand_as(inner), atol=1e-6)
    with pytest.raises(ConfigError):
        build_aux_stem(cfg, "200x")


def test_remap_fusion_weights_recover_final_classes():
    w = remap_fusion_weights(1.0)
    assert w.shape == (5, 8)
    head = build_fusion_head(tiny_cfg())
    table1, table2 = [0, 1, 1, 2, 3], [0, 1, 2, 2, 3]
    for code in range(5):
        t1 = torch.zeros(1, 4, 1, 1)
        t2 = torch.zeros(1, 4, 1, 1)
        t1[0, table1[code]] = 1
        t2[0, table2[code]] = 1
        votes = w @ torch.cat([t1, t2], 1).flatten()
        assert int(votes.argmax()) == code and votes[code] == 2
        probs = head(t1, t2)
        assert int(probs.argmax(1)) == code
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)


def test_fusion_softmax_sums_to_one():
    cfg = tiny_cfg(fusion_init="random")
    head = build_fusion_head(cfg)
    t1 = torch.softmax(torch.randn(2, 4, 8, 8), 1)
    t2 = torch.softmax(torch.randn(2, 4, 8, 8), 1)
    out = head(t1, t2)
    assert torch.allclose(out.sum(1), torch.ones(2, 8, 8), atol=1e-6)


def test_full_forward_shapes_and_ranges():
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg()).eval()
    with torch.no_grad():
        out = model(torch.rand(2, 3, 64, 64))
    assert out["binary"].shape == out["distance"].shape == (2, 1, 64, 64)
    assert out["task1"].shape == out["task2"].shape == (2, 4, 64, 64)
    assert out["final"].shape == (2, 5, 64, 64)
    for k in ("binary", "distance"):
        assert 0 <= out[k].min() and out[k].max() <= 1
    for k in ("task1", "task2", "final"):
        assert torch.allclose(out[k].sum(1), torch.ones(2, 64, 64), atol=1e-5)


@pytest.mark.parametrize("variant,present", [
    ("mhr_udist", {"binary", "distance", "task1", "task2", "final"}),
    ("mhr", {"task1", "task2", "final"}),
    ("shr", {"final"})])
def test_variant_heads(variant, present):
    model = CHRNet(tiny_cfg(variant=variant)).eval()
    with torch.no_grad():
        out = model(torch.rand(1, 3, 64, 64))
    assert {k for k, v in out.items() if v is not None} == present
    assert out["final"].shape == (1, 5, 64, 64)


def test_numpy_forward_batch_and_single():
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg())
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (2, 64, 64, 3), dtype=np.uint8)
    aux = np.stack([downsample_4x(i) for i in imgs])
    batch = forward(model, imgs, aux)
    single = forward(model, imgs[1], aux[1])
    assert batch.final.shape == (2, 64, 64, 5) and single.final.shape == (64, 64, 5)
    np.testing.assert_allclose(batch.final[1], single.final, atol=1e-5)
    with pytest.raises(MalformedInputError):
        forward(model, imgs[0, :48], aux[0])
    with pytest.raises(MalformedInputError):
        forward(model, imgs[0], aux[0, :8])


def test_forward_is_deterministic():
    torch.manual_seed(3)
    model = CHRNet(tiny_cfg())
    img = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    a = forward(model, img, downsample_4x(img))
    b = forward(model, img, downsample_4x(img))
    np.testing.assert_array_equal(a.final, b.final)
    np.testing.assert_array_equal(a.distance, b.distance)


def test_untrained_final_is_near_uniform():
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg(fusion_init="random")).eval()
    with torch.no_grad():
        p = model(torch.rand(1, 3, 64, 64))["final"]
    entropy = float(-(p * p.clamp_min(1e-12).log()).sum(1).mean())
    assert abs(entropy - math.log(5)) < 0.3


def test_aux_stem_contributes():
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg()).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        before = model(x)["task1"].clone()
        for p in model.stem100.parameters():
            p.zero_()
        after = model(x)["task1"]
    assert not torch.allclose(before, after)


def test_gc_toggle_changes_params_not_shapes():
    with_gc, without = CHRNet(tiny_cfg()), CHRNet(tiny_cfg(use_gc_attention=False))
    n = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    assert n(with_gc) > n(without)
    with torch.no_grad():
        a = with_gc.eval()(torch.rand(1, 3, 64, 64))
        b = without.eval()(torch.rand(1, 3, 64, 64))
    assert all((a[k] is None) == (b[k] is None) and (a[k] is None or a[k].shape == b[k].shape)
               for k in a)


def test_every_parameter_receives_gradient():
    torch.manual_seed(0)
    cfg = tiny_cfg(backbone_widths=(32, 32, 32, 64, 64))
    model = CHRNet(cfg).train()
    out = model(torch.rand(2, 3, 64, 64))
    total_loss(out, random_targets(2, 64, 64)).backward()
    dead = [name for name, p in model.named_parameters()
            if STRUCTURALLY_ZERO not in name and (p.grad is None or p.grad.abs().max() == 0)]
    assert dead == []


def test_classification_loss_alone_reaches_backbone():
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg()).train()
    out = model(torch.rand(2, 3, 64, 64))
    categorical_ce(out["final"], random_targets(2, 64, 64)["final"]).backward()
    assert model.backbone.stem[0].weight.grad.abs().max() > 0
    assert all(p.grad is None for p in model.stage1.parameters())


def _directional_check(model, x, targets, group, rng_seed=0, eps=1e-7):
    params = [p for n, p in model.named_parameters()
              if n.startswith(group + ".") and STRUCTURALLY_ZERO not in n]
    g = torch.Generator().manual_seed(rng_seed)
    dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
    model.zero_grad()
    total_loss(model(x), targets).backward()
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
        up = float(total_loss(model(x), targets))
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d)
        down = float(total_loss(model(x), targets))
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    numeric = (up - down) / (2 * eps)
    return analytic, numeric


@pytest.mark.parametrize("group", ["backbone", "stage1", "lunet", "stem100", "stem400", "hrfe1",
                                   "hrfe2", "fusion"])
def test_finite_difference_gradients(group):
    torch.manual_seed(0)
    model = CHRNet(tiny_cfg(size=32)).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    targets = random_targets(1, 32, 32, dtype=torch.float64)
    analytic, numeric = _directional_check(model, x, targets, group)
    assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric), 1e-8)


def test_load_backbone_weights():
    cfg = tiny_cfg()
    src, dst = CHRNet(cfg), CHRNet(cfg)
    weights = {"backbone." + k: v.numpy() for k, v in src.backbone.state_dict().items()}
    loaded = load_backbone_weights(dst, weights, strict=True)
    assert len(loaded) == len(weights)
    for k, v in src.backbone.state_dict().items():
        assert torch.equal(v, dst.backbone.state_dict()[k])
    with pytest.raises(ValueError):
        load_backbone_weights(dst, {"stem.0.weight": np.zeros((1, 1, 1, 1))})
    with pytest.raises(KeyError):
        load_backbone_weights(dst, {"nonsense": np.zeros(1)}, strict=True)


@pytest.mark.parametrize("size", [(500, 512), (512, 48), (0, 32)])
def test_config_rejects_bad_sizes(size):
    with pytest.raises(ConfigError):
        NetworkConfig(input_size=size)


def test_config_rejects_bad_options():
    with pytest.raises(ConfigError):
        NetworkConfig(variant="tiny")
    with pytest.raises(ConfigError):
        NetworkConfig(hrfe_stream_widths=(32, 16, 64))
