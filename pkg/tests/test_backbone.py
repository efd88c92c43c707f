"""Convolutional backbone: block semantics, spatial bookkeeping, tap point."""

import numpy as np
import pytest

from effvit.backbone import Backbone, EffNetClassifier, FusedMBConv, MBConv
from effvit.configs import (
    BackboneConfig,
    StageSpec,
    reference_backbone_config,
    toy_backbone_config,
)
from effvit.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def rand(shape, seed=0):
    return rng(seed).normal(size=shape)


# -- fused MBConv ----------------------------------------------------------------


def test_fused_block_zero_projection_is_identity():
    spec = StageSpec("fused-mbconv", repeats=1, stride=1, channels=4, expansion=2)
    blk = FusedMBConv(4, spec, stride=1, rng=rng(1))
    blk.project.w.data[...] = 0.0  # residual branch carries the input through
    x = rand((2, 4, 6, 6), 2)
    np.testing.assert_array_equal(blk.forward(Tensor(x), train=False).data, x)


def test_fused_block_matches_composed_primitives():
    spec = StageSpec("fused-mbconv", repeats=1, stride=1, channels=5, expansion=2)
    blk = FusedMBConv(3, spec, stride=1, rng=rng(3))
    x = rand((2, 3, 5, 5), 4)
    out = blk.forward(Tensor(x), train=False).data

    def bn_eval(z, bn):
        rm = bn.running_mean[None, :, None, None]
        rv = bn.running_var[None, :, None, None]
        g = bn.gamma.data[None, :, None, None]
        b = bn.beta.data[None, :, None, None]
        return (z - rm) / np.sqrt(rv + bn.eps) * g + b

    from oracles import conv2d_naive

    h = bn_eval(conv2d_naive(x, blk.expand.w.data, stride=1, padding=1), blk.expand.bn)
    h = h / (1 + np.exp(-h))  # SiLU
    ref = bn_eval(conv2d_naive(h, blk.project.w.data, stride=1, padding=0), blk.project.bn)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_fused_block_stride2_halves_spatial():
    spec = StageSpec("fused-mbconv", repeats=1, stride=2, channels=6)
    blk = FusedMBConv(3, spec, stride=2, rng=rng(5))
    out = blk.forward(Tensor(rand((1, 3, 8, 8), 6)), train=False)
    assert out.shape == (1, 6, 4, 4)
    assert not blk.use_residual  # stride 2 cannot carry a residual


def test_fused_residual_requires_matching_channels():
    spec = StageSpec("fused-mbconv", repeats=1, stride=1, channels=8)
    assert not FusedMBConv(4, spec, stride=1, rng=rng(7)).use_residual
    spec2 = StageSpec("fused-mbconv", repeats=1, stride=1, channels=4)
    assert FusedMBConv(4, spec2, stride=1, rng=rng(8)).use_residual


# -- MBConv ------------------------------------------------------------------------


def test_mbconv_zero_projection_is_identity():
    spec = StageSpec("mbconv", repeats=1, stride=1, channels=4, expansion=2)
    blk = MBConv(4, spec, stride=1, rng=rng(9))
    blk.project.w.data[...] = 0.0
    x = rand((1, 4, 5, 5), 10)
    np.testing.assert_array_equal(blk.forward(Tensor(x), train=False).data, x)


def test_mbconv_saturated_se_gate_equals_no_se():
    spec = StageSpec("mbconv", repeats=1, stride=1, channels=6, expansion=2)
    blk = MBConv(4, spec, stride=1, rng=rng(11))
    blk.se.fc2.W.data[...] = 0.0
    blk.se.fc2.b.data[...] = 100.0  # gate saturates to exactly 1
    x = Tensor(rand((2, 4, 5, 5), 12))
    with_se = blk.forward(x, train=False).data

    def manual_no_se(z):
        y = blk.expand.forward(z, False)
        from effvit.tensor import silu

        y = silu(y)
        y = silu(blk.depthwise.forward(y, False))
        return blk.project.forward(y, False).data

    np.testing.assert_allclose(with_se, manual_no_se(x), atol=1e-12)


def test_mbconv_stride2_halves_spatial():
    spec = StageSpec("mbconv", repeats=1, stride=2, channels=8, expansion=2)
    blk = MBConv(4, spec, stride=2, rng=rng(13))
    out = blk.forward(Tensor(rand((1, 4, 6, 6), 14)), train=False)
    assert out.shape == (1, 8, 3, 3)


def test_mbconv_depthwise_is_grouped():
    spec = StageSpec("mbconv", repeats=1, stride=1, channels=4, expansion=3)
    blk = MBConv(4, spec, stride=1, rng=rng(15))
    assert blk.depthwise.w.shape == (12, 1, 3, 3)
    assert blk.depthwise.groups == 12


# -- full backbone -------------------------------------------------------------------


def test_toy_backbone_tap_shape():
    bb = Backbone(toy_backbone_config(), seed=0)
    feat = bb.forward(Tensor(rand((2, 3, 32, 32), 16)))
    assert feat.shape == (2, 32, 8, 8)  # 32 -> stem/1 -> /2 -> /2 -> 8


def test_toy_backbone_audit_trace():
    bb = Backbone(toy_backbone_config(), seed=0)
    audit = []
    bb.forward(Tensor(rand((1, 3, 32, 32), 17)), audit=audit)
    assert audit[0] == ("stem", (8, 32, 32))
    assert audit[-1] == ("stage3.block0", (32, 8, 8))


def test_reference_backbone_spatial_ledger():
    # 224 -> 112 (stem) -> 56 -> 28 -> 14 -> 12 (final stage pads 0)
    bb = Backbone(reference_backbone_config(), seed=0)
    audit = []
    feat = bb.forward(Tensor(rand((1, 3, 224, 224), 18).astype(np.float64)), audit=audit)
    assert feat.shape == (1, 256, 12, 12)
    shapes = dict(audit)
    assert shapes["stem"] == (24, 112, 112)
    assert shapes["stage0.block0"] == (48, 56, 56)
    assert shapes["stage1.block0"] == (64, 28, 28)
    assert shapes["stage2.block0"] == (128, 14, 14)
    assert shapes["stage3.block0"] == (256, 12, 12)


def test_backbone_forward_is_repeatable_in_eval_mode():
    bb = Backbone(toy_backbone_config(), seed=1)
    x = Tensor(rand((1, 3, 32, 32), 19))
    np.testing.assert_array_equal(bb.forward(x).data, bb.forward(x).data)


def test_backbone_frozen_by_default():
    bb = Backbone(toy_backbone_config(), seed=2)
    reg = bb.registry()
    assert reg.n_trainable() == 0
    assert reg.n_frozen() > 0


def test_backbone_train_mode_updates_buffers_not_params():
    import dataclasses

    cfg = dataclasses.replace(toy_backbone_config(), frozen=True)
    bb = Backbone(cfg, seed=3)
    reg = bb.registry()
    snap = reg.snapshot()
    before = [buf.copy() for _, buf in bb.buffers()]
    bb.forward(Tensor(rand((2, 3, 32, 32), 20)), train=True)
    assert reg.changed_since(snap) == []  # parameters untouched
    after = [buf for _, buf in bb.buffers()]
    assert any(not np.array_equal(a, b) for a, b in zip(before, after))


def test_backbone_single_image_promotion():
    bb = Backbone(toy_backbone_config(), seed=4)
    feat = bb.forward(Tensor(rand((3, 32, 32), 21)))
    assert feat.shape == (32, 8, 8)


def test_tap_stops_computation_early():
    cfg = BackboneConfig(
        stages=(
            StageSpec("fused-mbconv", repeats=2, stride=1, channels=4, expansion=1),
            StageSpec("fused-mbconv", repeats=1, stride=1, channels=6, expansion=1),
        ),
        stem_channels=4,
        stem_stride=1,
        tap_stage=0,
        tap_block=1,
    )
    bb = Backbone(cfg, seed=5)
    audit = []
    feat = bb.forward(Tensor(rand((1, 3, 8, 8), 22)), audit=audit)
    assert feat.shape == (1, 4, 8, 8)
    assert [n for n, _ in audit] == ["stem", "stage0.block0", "stage0.block1"]
    assert cfg.tap_channels == 4


def test_effnet_classifier_logits_shape():
    clf = EffNetClassifier(toy_backbone_config(), seed=6)
    logits = clf.forward(Tensor(rand((2, 3, 32, 32), 23)))
    assert logits.shape == (2, 3)
    trainable = {n for n, _ in clf.registry().trainable_items()}
    assert trainable == {"head.W", "head.b"}


def test_effnet_classifier_pools_before_head():
    clf = EffNetClassifier(toy_backbone_config(), seed=7)
    x = Tensor(rand((1, 3, 32, 32), 24))
    feat = clf.backbone.forward(x).data
    pooled = feat.mean(axis=(2, 3))
    ref = pooled @ clf.head.W.data + clf.head.b.data
    np.testing.assert_allclose(clf.forward(x).data, ref, atol=1e-12)
