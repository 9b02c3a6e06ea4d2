"""PMNet: attention-module identities, teacher input generation, parameter
sharing between branches, the part-transfer loss and feature bundles."""

import numpy as np
import pytest

from partreid import autograd as ag
from partreid import nn
from partreid.autograd import Tensor, grad_check
from partreid.panet import PartMaskSet, to_input
from partreid.pmnet import (DegeneratePartError, FeatureBundle, Mam,
                            PartStream, PmnetModel, extract_bundles,
                            part_transfer_loss, teacher_input)

F64 = np.float64


def full_mask_set(k=1, feat_hw=(8, 8), img=64):
    masks = np.ones((k, img, img), dtype=bool)
    boxes = [(0, 0, feat_hw[0] - 1, feat_hw[1] - 1)] * k
    return PartMaskSet("t", masks, boxes, np.zeros((k, 2)), feat_hw)


# ---------------------------------------------------------------------------
# multi-scale attention

def test_mam_zero_attention_is_bitexact_identity():
    rng = np.random.default_rng(0)
    mam = Mam(8, np.random.default_rng(1))
    x = Tensor(rng.standard_normal((2, 8, 5, 5)).astype(np.float32))
    out = mam(x, attention_override=(np.zeros((2, 8), np.float32),
                                     np.zeros((2, 1, 5, 5), np.float32)))
    assert np.array_equal(out.data, x.data)


def test_mam_all_ones_attention_doubles_input():
    rng = np.random.default_rng(2)
    mam = Mam(6, np.random.default_rng(3))
    x = Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
    out = mam(x, attention_override=(np.ones((1, 6), np.float32),
                                     np.ones((1, 1, 4, 4), np.float32)))
    assert np.array_equal(out.data, 2.0 * x.data)


def test_mam_masks_have_expected_shapes_and_ranges():
    rng = np.random.default_rng(4)
    mam = Mam(16, np.random.default_rng(5))
    x = Tensor(rng.standard_normal((3, 16, 6, 6)).astype(np.float32))
    cm = mam.channel_mask(x)
    sm = mam.spatial_mask(x)
    assert cm.shape == (3, 16)
    assert sm.shape == (3, 1, 6, 6)
    for arr in (cm.data, sm.data):
        assert arr.min() > 0.0 and arr.max() < 1.0


def test_mam_gradient_full_block():
    rng = np.random.default_rng(6)
    mam = Mam(6, np.random.default_rng(7), dtype=F64)
    x = Tensor(rng.standard_normal((2, 6, 4, 4)), dtype=F64)
    params = {"x": x, **dict(mam.named_parameters())}
    report = grad_check(lambda: ag.tsum(ag.mul(mam(x), mam(x))), params,
                        tolerance=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# teacher input

def test_teacher_input_full_mask_is_identity():
    rng = np.random.default_rng(8)
    f = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    ms = full_mask_set()
    out = teacher_input(f, [ms, ms], 0)
    assert np.array_equal(out.data, f.data)


def test_teacher_input_top_half_kills_bottom_gradient():
    rng = np.random.default_rng(9)
    f = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True, dtype=F64)
    masks = np.zeros((1, 64, 64), bool)
    masks[0, :32, :] = True
    ms = PartMaskSet("t", masks, [(0, 0, 3, 7)], np.zeros((1, 2)), (8, 8))
    out = teacher_input(f, [ms], 0)
    ag.tsum(ag.mul(out, out)).backward()
    assert np.abs(f.grad[:, :, 4:, :]).max() == 0.0
    assert np.abs(f.grad[:, :, :4, :]).max() > 0.0


def test_teacher_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    f = Tensor(rng.standard_normal((1, 2, 8, 8)), dtype=F64)
    masks = np.zeros((1, 64, 64), bool)
    masks[0, 16:56, 8:48] = True
    ms = PartMaskSet("t", masks, [(2, 1, 6, 5)], np.zeros((1, 2)), (8, 8))
    report = grad_check(
        lambda: ag.tsum(ag.mul(teacher_input(f, [ms], 0),
                               teacher_input(f, [ms], 0))),
        {"f": f}, tolerance=1e-4)
    assert report.passed, report


def test_teacher_input_degenerate_part_errors():
    f = Tensor(np.ones((1, 2, 8, 8), np.float32))
    masks = np.zeros((1, 64, 64), bool)   # dense mask empty inside the box
    ms = PartMaskSet("t", masks, [(2, 2, 4, 4)], np.zeros((1, 2)), (8, 8))
    with pytest.raises(DegeneratePartError, match="degenerate|empty"):
        teacher_input(f, [ms], 0)


# ---------------------------------------------------------------------------
# streams and parameter sharing

def test_student_teacher_share_parameters_and_premaps():
    stream = PartStream(4, 6, 5, np.random.default_rng(11))
    stream.eval()
    rng = np.random.default_rng(12)
    shared = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    f = stream.stream_map(shared)
    with ag.no_grad():
        _, map_s = stream.student(f)
        _, map_t = stream.teacher(f)      # same input -> same pre-pool map
    assert np.array_equal(map_s.data, map_t.data)


def test_parameter_sharing_survives_optimizer_step():
    model = PmnetModel(3, np.random.default_rng(13), k=2)
    stream = model.streams()[0]
    before = stream.mam.mlp1.w.data.copy()
    opt = nn.Adam(model.parameters(), lr=1e-2)
    x = to_input(np.random.default_rng(14).integers(
        0, 256, (4, 64, 64, 3)).astype(np.uint8))
    out = model.forward_features(x, [full_mask_set(k=2)] * 4)
    loss = ag.add(ag.tsum(ag.mul(out["f_s"], out["f_s"])),
                  ag.tsum(ag.mul(out["f_t"], out["f_t"])))
    model.zero_grad()
    loss.backward()
    opt.step()
    after = stream.mam.mlp1.w.data
    assert not np.array_equal(before, after)
    # student and teacher literally reference the same parameter slots
    assert stream.mam is model.streams()[0].mam


def test_student_gap_of_constant_map():
    stream = PartStream(2, 3, 4, np.random.default_rng(15))
    pre = Tensor(np.full((1, 4, 8, 8), 2.5, np.float32))
    emb = ag.global_avg_pool(pre)
    np.testing.assert_allclose(emb.data, 2.5)


def test_mmp_single_spike():
    pre = Tensor(np.zeros((1, 3, 4, 4), np.float32))
    pre.data[0, :, 2, 1] = 7.0
    np.testing.assert_array_equal(ag.global_max_pool(pre).data, 7.0)


# ---------------------------------------------------------------------------
# part transfer loss

def test_part_transfer_zero_for_identical_maps():
    rng = np.random.default_rng(16)
    m = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=F64)
    assert part_transfer_loss([m], [m]).item() == 0.0


def test_part_transfer_1x1_maps_absolute_difference():
    a = Tensor(np.array([[[[1.0]]], [[[3.0]]]]), dtype=F64)   # batch mean 2
    b = Tensor(np.array([[[[4.0]]], [[[6.0]]]]), dtype=F64)   # batch mean 5
    assert part_transfer_loss([a], [b]).item() == pytest.approx(3.0)


def test_part_transfer_matches_hand_reduction():
    rng = np.random.default_rng(17)
    s = rng.standard_normal((2, 2, 2, 2))
    t = rng.standard_normal((2, 2, 2, 2))
    got = part_transfer_loss([Tensor(s, dtype=F64)], [Tensor(t, dtype=F64)]).item()
    wanted = np.abs(t.mean(axis=(0, 1)) - s.mean(axis=(0, 1))).mean()
    assert got == pytest.approx(wanted, abs=1e-12)


def test_part_transfer_symmetric_and_multi_stream_sum():
    rng = np.random.default_rng(18)
    s1, t1 = (Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=F64) for _ in range(2))
    s2, t2 = (Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=F64) for _ in range(2))
    ab = part_transfer_loss([s1, s2], [t1, t2]).item()
    ba = part_transfer_loss([t1, t2], [s1, s2]).item()
    assert ab == pytest.approx(ba, abs=1e-12)
    single = (part_transfer_loss([s1], [t1]).item()
              + part_transfer_loss([s2], [t2]).item())
    assert ab == pytest.approx(single, abs=1e-12)


def test_part_transfer_squared_variant():
    a = Tensor(np.zeros((1, 1, 1, 1)), dtype=F64)
    b = Tensor(np.full((1, 1, 1, 1), 3.0), dtype=F64)
    assert part_transfer_loss([a], [b], squared=True).item() == pytest.approx(9.0)


def test_part_transfer_gradient_reaches_both_branches():
    rng = np.random.default_rng(19)
    s = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True, dtype=F64)
    t = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True, dtype=F64)
    part_transfer_loss([s], [t]).backward()
    assert np.abs(s.grad).max() > 0 and np.abs(t.grad).max() > 0


def test_part_transfer_shape_mismatch_errors():
    a = Tensor(np.zeros((1, 2, 3, 3)), dtype=F64)
    b = Tensor(np.zeros((1, 2, 4, 4)), dtype=F64)
    with pytest.raises(ag.ShapeError):
        part_transfer_loss([a], [b])


# ---------------------------------------------------------------------------
# bundles / modes

def test_forward_bundle_dims_default_config():
    model = PmnetModel(5, np.random.default_rng(20), k=3).eval()
    x = to_input(np.zeros((2, 64, 64, 3), np.uint8))
    with ag.no_grad():
        out = model.forward_features(x, [full_mask_set(k=3)] * 2)
    assert out["f_g"].shape == (2, 256)
    assert out["f_s"].shape == (2, 3 * 128)
    assert out["f_t"].shape == (2, 3 * 128)


def test_teacherless_mode_and_student_equality():
    model = PmnetModel(5, np.random.default_rng(21), k=2).eval()
    rng = np.random.default_rng(22)
    img = rng.integers(0, 256, (2, 64, 64, 3)).astype(np.uint8)
    x = to_input(img)
    with ag.no_grad():
        with_masks = model.forward_features(x, [full_mask_set(k=2)] * 2)
        without = model.forward_features(x, None)
    assert without["f_t"] is None
    assert np.array_equal(with_masks["f_g"].data, without["f_g"].data)
    assert np.array_equal(with_masks["f_s"].data, without["f_s"].data)


def test_teacher_requested_without_masks_errors():
    model = PmnetModel(3, np.random.default_rng(23), k=1)
    x = to_input(np.zeros((1, 64, 64, 3), np.uint8))
    with pytest.raises(ValueError, match="masks"):
        model.forward_features(x, None, want_teacher=True)


def test_global_head_deterministic_and_reaches_backbone():
    model = PmnetModel(4, np.random.default_rng(24), k=1)
    model.eval()
    rng = np.random.default_rng(25)
    img = rng.integers(0, 256, (1, 64, 64, 3)).astype(np.uint8)
    with ag.no_grad():
        a = model.global_head(to_input(img)).data
        b = model.global_head(to_input(img)).data
    assert np.array_equal(a, b)
    assert a.shape == (1, 256)
    model.train()
    model.zero_grad()
    ag.tsum(ag.mul(model.global_head(to_input(img)),
                   model.global_head(to_input(img)))).backward()
    stem_grad = model.backbone.stem.conv.w.grad
    assert stem_grad is not None and np.abs(stem_grad).max() > 0


def test_extract_bundles_roundtrip(tmp_path):
    from partreid import checkpoint

    model = PmnetModel(3, np.random.default_rng(26), k=2).eval()
    rng = np.random.default_rng(27)
    imgs = rng.integers(0, 256, (3, 64, 64, 3)).astype(np.uint8)
    bundles = extract_bundles(model, imgs, ["a", "b", "c"],
                              [full_mask_set(k=2)] * 3)
    assert all(b.f_t is not None for b in bundles)
    checkpoint.save_bundles(tmp_path / "b.pman", bundles)
    loaded = checkpoint.load_bundles(tmp_path / "b.pman")
    by_id = {b.image_id: b for b in loaded}
    for b in bundles:
        np.testing.assert_array_equal(by_id[b.image_id].f_g,
                                      b.f_g.astype(np.float32))
        np.testing.assert_array_equal(by_id[b.image_id].f_t,
                                      b.f_t.astype(np.float32))
