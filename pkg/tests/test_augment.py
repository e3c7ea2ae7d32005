import numpy as np
import pytest

from oracles import ForcedRng, color_pixelwise, resize_loops, resize_pixel
from pcvq2 import augment as A
from pcvq2.augment import (NONE_POLICY, PHASE_POLICIES, STANDARD_POLICY, AugmentError, PhasePolicy,
                           PhaseSchedule, SampleRng, policy_for_iteration)


def rand_img(rng, h=16, w=16):
    return rng.random((h, w, 3))


# schedule

@pytest.mark.parametrize("it, phase", [(0, 1), (9999, 1), (10000, 2), (29999, 3), (30000, 4),
                                       (44999, 5), (45000, 6), (49999, 6)])
def test_policy_for_iteration_phases(it, phase):
    got, policy = policy_for_iteration(PhaseSchedule.phased(), it)
    assert got == phase
    assert policy == PHASE_POLICIES[phase - 1]


def test_phase_table():
    p1, p2, p3, p4, p5, p6 = PHASE_POLICIES
    assert (p1.flip_enabled, p1.rotation_max_deg, p1.zoom_enabled, p1.color_param) == \
        (True, 180.0, True, 0.30)
    assert p2.rotation_max_deg == 18.0 and p2.zoom_enabled and p2.color_param == 0.30
    assert p3.rotation_max_deg == 0.0 and p3.zoom_enabled
    assert not p4.zoom_enabled and p4.color_param == 0.30
    assert p5.color_param == 0.15
    assert p6.color_param == 0.0 and p6.flip_enabled
    assert (p1.zoom_lo, p1.zoom_hi) == (1.05, 1.30)


def test_iteration_beyond_schedule():
    with pytest.raises(IndexError):
        policy_for_iteration(PhaseSchedule.phased(), 50000)
    with pytest.raises(IndexError):
        policy_for_iteration(PhaseSchedule.phased(), -1)


def test_boundaries_scale_one_and_scaled():
    assert PhaseSchedule.phased().boundaries == [10000, 20000, 30000, 40000, 45000, 50000]
    assert PhaseSchedule.phased(0.01).boundaries == [100, 200, 300, 400, 450, 500]
    assert PhaseSchedule.phased(1e-6).boundaries == [1, 2, 3, 4, 5, 6]


def test_baseline_modes_are_single_phase():
    std = PhaseSchedule.for_mode("standard", 0.01)
    assert std.boundaries == [500] and std.phases[0][0] == STANDARD_POLICY
    assert STANDARD_POLICY.color_param == 0.15 and STANDARD_POLICY.rotation_max_deg == 180.0
    assert PhaseSchedule.for_mode("none").phases[0][0] == NONE_POLICY
    with pytest.raises(AugmentError):
        PhaseSchedule.for_mode("heavy")


def test_monotone_restriction():
    for a, b in zip(PHASE_POLICIES, PHASE_POLICIES[1:]):
        assert a.rotation_max_deg >= b.rotation_max_deg
        assert a.zoom_enabled >= b.zoom_enabled
        assert a.color_param >= b.color_param
    assert all(p.flip_enabled for p in PHASE_POLICIES)


def test_policy_validation():
    with pytest.raises(AugmentError):
        PhasePolicy(rotation_max_deg=181)
    with pytest.raises(AugmentError):
        PhasePolicy(zoom_lo=1.3, zoom_hi=1.2)
    with pytest.raises(AugmentError):
        PhasePolicy(zoom_lo=0.9)
    with pytest.raises(AugmentError):
        PhasePolicy(color_param=1.5)


# flip

def test_flip_mirrors_on_low_draw():
    img = np.ones((8, 8, 3))
    img[:, :4] = 0.0
    out = A.flip(img, ForcedRng(0.2))
    assert np.all(out[:, 4:] == 0.0) and np.all(out[:, :4] == 1.0)
    assert np.array_equal(A.flip(img, ForcedRng(0.7)), img)


def test_flip_is_involution(rng):
    img = rand_img(rng)
    assert np.array_equal(A.flip(A.flip(img, ForcedRng(0.0)), ForcedRng(0.0)), img)


def test_flip_symmetric_image_unchanged(rng):
    half = rand_img(rng, 8, 4)
    img = np.concatenate([half, half[:, ::-1]], axis=1)
    for u in (0.1, 0.9):
        assert np.array_equal(A.flip(img, ForcedRng(u)), img)


# resampling

def test_resize_matches_scalar_oracle(rng):
    img = rand_img(rng, 7, 9)
    assert np.abs(A.resize(img, 11, 5) - resize_loops(img, 11, 5)).max() < 1e-12
    assert np.abs(A.resize(img, 14, 18) - resize_loops(img, 14, 18)).max() < 1e-12


# rotation

def test_zero_rotation_is_upscale_crop(rng):
    img = rand_img(rng)
    out = A.rotate(img, 0.0, ForcedRng())
    assert np.array_equal(out, A.upscale_crop(img))


def test_rotate_180_is_point_reflection(rng):
    img = rand_img(rng)
    big = resize_loops(img, 32, 32)
    # centre crop of the upscaled image, then index reversal
    ref = big[8:24, 8:24][::-1, ::-1]
    assert np.abs(A.rotate_by(img, 180.0) - ref).max() < 1e-9
    out = A.rotate(img, 180.0, ForcedRng(1.0))
    assert np.abs(out - ref).max() < 1e-9


def test_rotation_never_exposes_margin():
    gen = np.random.default_rng(7)
    img = gen.random((64, 64, 3))
    for theta in gen.uniform(-180, 180, size=1000):
        out = A.rotate_by(img, float(theta), fill=-1.0)
        assert not np.any(out == -1.0), theta


def test_rotation_requires_square():
    with pytest.raises(AugmentError):
        A.rotate_by(np.zeros((8, 10, 3)), 10.0)


# zoom

def test_zoom_of_constant_image(rng):
    img = np.full((20, 20, 3), 0.37)
    out = A.zoom(img, 1.05, 1.30, SampleRng(0, 1, 2))
    assert np.abs(out - 0.37).max() < 1e-14


def test_zoom_forced_factor_matches_oracle(rng):
    img = rand_img(rng, 100, 100)
    r = ForcedRng(1.0, 1.0, 0.5, 0.25)
    fh, fw, oy, ox = A.zoom_factors(100, 100, 1.05, 1.30, r)
    assert (round(fh * 100), round(fw * 100)) == (130, 130)
    assert (oy, ox) == (15, 7)
    out = A.zoom_by(img, fh, fw, oy, ox)
    assert out.shape == (100, 100, 3)
    for i, j in [(0, 0), (99, 99), (50, 3), (17, 88)]:
        ref = resize_pixel(img, 130, 130, i + oy, j + ox)
        assert np.abs(out[i, j] - ref).max() < 1e-12


def test_zoom_factor_range_over_10000_draws():
    lo, hi = np.inf, -np.inf
    for k in range(10_000):
        r = SampleRng(5, k, 0)
        fh, fw, oy, ox = A.zoom_factors(32, 32, 1.05, 1.30, r)
        lo, hi = min(lo, fh, fw), max(hi, fh, fw)
        assert 0 <= oy <= round(fh * 32) - 32 and 0 <= ox <= round(fw * 32) - 32
    assert 1.05 <= lo and hi <= 1.30


def test_degenerate_zoom():
    with pytest.raises(AugmentError):
        A.zoom_factors(32, 32, 1.001, 1.01, SampleRng(0))
    with pytest.raises(AugmentError):
        A.zoom_factors(32, 32, 0.9, 1.2, SampleRng(0))
    with pytest.raises(AugmentError):
        A.zoom_factors(8, 8, 1.05, 1.30, SampleRng(0))  # round(8.4) == 8


# colour

def test_color_zero_is_bitwise_identity(rng):
    img = rand_img(rng)
    assert np.array_equal(A.color_jitter(img, 0.0, SampleRng(0)), img)


def test_saturation_fixes_gray(rng):
    gray = np.repeat(rng.random((6, 6, 1)), 3, axis=2)
    for s in (0.0, 0.7, 1.3):
        assert np.abs(A.color_transform(gray, 1.0, s, 1.0) - gray).max() < 1e-15


def test_color_forced_factors_match_pixelwise_oracle(rng):
    img = rand_img(rng, 6, 5)
    out = A.color_transform(img, 1.2, 0.9, 1.1)
    assert np.abs(out - color_pixelwise(img, 1.2, 0.9, 1.1)).max() < 1e-6
    r = ForcedRng(0.5 + 0.2 / 0.6, 0.5 - 0.1 / 0.6, 0.5 + 0.1 / 0.6)
    assert np.abs(A.color_jitter(img, 0.3, r) - out).max() < 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0


# composition

def test_phase6_output_is_normalized_or_mirrored(rng):
    img = rand_img(rng)
    allowed = (A.upscale_crop(img), A.upscale_crop(A.mirror(img)))
    for k in range(10):
        out = A.apply(img, PHASE_POLICIES[5], SampleRng(0, 0, k))
        assert any(np.abs(out - a).max() < 1e-12 for a in allowed)


def test_none_policy_is_upscale_crop(rng):
    img = rand_img(rng)
    assert np.array_equal(A.apply(img, NONE_POLICY, SampleRng(3)), A.upscale_crop(img))


def test_identity_collapse():
    # with every stage disabled, the policy adds nothing beyond the normalization,
    # and the disabled stages compose to the identity
    gen = np.random.default_rng(0)
    img = A.upscale_crop(gen.random((16, 16, 3)))
    r = SampleRng(0)
    x = A.color_jitter(img, 0.0, r)
    assert np.array_equal(x, img)
    assert np.array_equal(A.color_jitter(x, 0.0, r), x)
    assert r.log is None or r.log == []
    for k in range(5):
        assert np.array_equal(A.apply(img, NONE_POLICY, SampleRng(0, 0, k)),
                              A.apply(img, NONE_POLICY, SampleRng(9, 9, k)))


def test_apply_is_deterministic(rng):
    img = rand_img(rng)
    for p in PHASE_POLICIES:
        assert np.array_equal(A.apply(img, p, SampleRng(11, 3, 4)), A.apply(img, p, SampleRng(11, 3, 4)))


@pytest.mark.parametrize("size", [10, 15, 32])
def test_resolution_preserved(size, rng):
    img = rand_img(rng, size, size)
    for p in PHASE_POLICIES + (STANDARD_POLICY, NONE_POLICY):
        assert A.apply(img, p, SampleRng(1, 2, 3)).shape == img.shape


def test_draws_are_uniform_and_policy_bound(rng):
    img = rand_img(rng)
    log = []
    A.apply(img, PHASE_POLICIES[0], SampleRng(0, 0, 0, log=log))
    ranges = [(lo, hi) for lo, hi, _ in log]
    assert ranges == [(0.0, 1.0), (-180.0, 180.0), (1.05, 1.30), (1.05, 1.30),
                      (0.0, 1.0), (0.0, 1.0), (0.7, 1.3), (0.7, 1.3), (0.7, 1.3)]
    assert all(lo <= u <= hi for lo, hi, u in log)
    log = []
    A.apply(img, PHASE_POLICIES[5], SampleRng(0, 0, 0, log=log))
    assert [(lo, hi) for lo, hi, _ in log] == [(0.0, 1.0)]


def test_batch_streams_depend_only_on_sample_key(rng):
    imgs = np.stack([rand_img(rng) for _ in range(4)])
    full = A.augment_batch(imgs, PHASE_POLICIES[0], 5, 17)
    part = A.augment_batch(imgs[2:], PHASE_POLICIES[0], 5, 17, indices=[2, 3])
    assert np.array_equal(full[2:], part)
    other = A.augment_batch(imgs, PHASE_POLICIES[0], 5, 18)
    assert not np.array_equal(full, other)
