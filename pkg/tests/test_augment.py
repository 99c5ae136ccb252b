import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pignight.augment import (
    AlternationSchedule, PatchMaskSpec, alternate_apply, class_mix_mask, cross_domain_mix,
    half_split_mask, mix_labels, mix_weights, patch_mask, prompt_mixture,
)

IGNORE = 255


def _pair(rng, h=8, w=8):
    return rng.random((h, w, 3)), rng.random((h, w, 3))


class _Fixed:
    def __init__(self, side):
        self.side = side

    def integers(self, lo, hi):
        return self.side


def test_side_one_puts_prompt_left(rng):
    x_p, x_t = _pair(rng)
    res = prompt_mixture(x_p, x_t, _Fixed(1))
    assert np.array_equal(res.image[:, :4], x_p[:, :4])
    assert np.array_equal(res.image[:, 4:], x_t[:, 4:])


def test_side_zero_puts_prompt_right(rng):
    x_p, x_t = _pair(rng)
    res = prompt_mixture(x_p, x_t, _Fixed(0))
    assert np.array_equal(res.image[:, :4], x_t[:, :4])
    assert np.array_equal(res.image[:, 4:], x_p[:, 4:])


def test_side_frequency():
    rng = np.random.default_rng(0)
    x = np.zeros((2, 2, 3))
    sides = [prompt_mixture(x, x, rng).side for _ in range(1000)]
    assert abs(np.mean(sides) - 0.5) <= 0.05


def test_prompt_mixture_extent_mismatch(rng):
    with pytest.raises(ValueError):
        prompt_mixture(rng.random((4, 4, 3)), rng.random((4, 6, 3)), rng)
    with pytest.raises(ValueError):
        half_split_mask(4, 5, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_image_and_label_share_mask(seed, h, half_w):
    rng = np.random.default_rng(seed)
    w = 2 * half_w
    x_p, x_t = _pair(rng, h, w)
    y_p, y_f = rng.integers(0, 4, (h, w)), rng.integers(4, 8, (h, w))
    res = prompt_mixture(x_p, x_t, rng)
    y = mix_labels(y_p, y_f, res.mask)
    # column provenance: prompt pixels and prompt labels exactly where the mask is 1
    img_src = np.where(res.mask[..., None] == 1, x_p, x_t)
    lab_src = np.where(res.mask == 1, y_p, y_f)
    assert np.array_equal(res.image, img_src)
    assert np.array_equal(y, lab_src)
    assert np.array_equal(y == y_p, res.mask == 1)
    cols = res.mask[0]
    assert np.all(res.mask == cols[None, :])
    assert set(cols[:half_w]) == {res.side} and set(cols[half_w:]) == {1 - res.side}


def test_mix_labels_extremes(rng):
    y_p, y_f = rng.integers(0, 4, (4, 4)), rng.integers(0, 4, (4, 4))
    assert np.array_equal(mix_labels(y_p, y_f, np.ones((4, 4))), y_p)
    assert np.array_equal(mix_labels(y_p, y_f, np.zeros((4, 4))), y_f)
    m = half_split_mask(4, 4, 1)
    out = mix_labels(y_p, y_f, m)
    for col in range(4):
        expected = y_p[:, col] if col < 2 else y_f[:, col]
        assert np.array_equal(out[:, col], expected)


def test_mix_weights():
    m = half_split_mask(2, 4, 1)
    w = mix_weights(m, np.full((2, 4), 0.25))
    assert w.tolist() == [[1, 1, 0.25, 0.25]] * 2


# --- patch masks -------------------------------------------------------------

def test_ratio_extremes():
    for seed in range(20):
        assert patch_mask(32, 32, PatchMaskSpec(8, 8, 0.0, seed)).min() == 1
        assert patch_mask(32, 32, PatchMaskSpec(8, 8, 1.0, seed)).max() == 0


def test_masked_fraction_monte_carlo():
    fractions = [1.0 - patch_mask(128, 128, PatchMaskSpec(16, 16, 0.7, seed)).mean() for seed in range(1000)]
    assert abs(np.mean(fractions) - 0.7) <= 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
       st.floats(0, 1), st.integers(0, 2**31))
def test_patch_constancy(p, q, gh, gw, r, seed):
    m = patch_mask(p * gh, q * gw, PatchMaskSpec(p, q, r, seed))
    tiles = m.reshape(gh, p, gw, q)
    assert np.all(tiles == tiles[:, :1, :, :1])
    assert np.array_equal(m, patch_mask(p * gh, q * gw, PatchMaskSpec(p, q, r, seed)))


def test_patch_mask_requires_tiling():
    with pytest.raises(ValueError):
        patch_mask(30, 32, PatchMaskSpec(16, 16))
    with pytest.raises(ValueError):
        PatchMaskSpec(ratio=1.5)


# --- alternation -------------------------------------------------------------

def test_schedule_half_rate(rng):
    s = AlternationSchedule(0.5)
    x = rng.random((4, 4, 3)) + 0.1
    m = np.zeros((4, 4), dtype=np.uint8)
    assert np.all(alternate_apply(x, m, 0, s) == 0)
    assert np.array_equal(alternate_apply(x, m, 1, s), x)
    assert [t for t in range(100) if s.applies(t)] == list(range(0, 100, 2))


def test_schedule_quarter_rate():
    s = AlternationSchedule(0.25)
    assert [t for t in range(8) if s.applies(t)] == [0, 4]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 1000))
def test_schedule_periodicity(beta, start):
    s = AlternationSchedule(beta)
    assert s.period >= 1 and s.effective_rate == 1 / s.period
    window = [s.applies(t) for t in range(start, start + s.period)]
    assert sum(window) == 1


def test_non_integer_period_rounds():
    s = AlternationSchedule(0.3)
    assert s.period == 3 and s.effective_rate == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        AlternationSchedule(0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 9))
def test_masked_pixels_zero_others_identical(seed, t):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 8, 3))
    m = patch_mask(8, 8, PatchMaskSpec(2, 2, 0.5, seed))
    out = alternate_apply(x, m, t, AlternationSchedule(0.5))
    if t % 2 == 0:
        assert np.all(out[m == 0] == 0)
        assert np.array_equal(out[m == 1], x[m == 1])
    else:
        assert np.array_equal(out, x)


def test_literal_formula_blanks_or_doubles(rng):
    s = AlternationSchedule(0.5, literal=True)
    x = rng.random((4, 4, 3))
    m = np.ones((4, 4), dtype=np.uint8)
    m[0, 0] = 0
    assert np.all(alternate_apply(x, m, 0, s) == 0)
    out = alternate_apply(x, m, 1, s)
    assert np.allclose(out[1:], 2 * x[1:]) and np.allclose(out[0, 0], x[0, 0])


def test_custom_fill(rng):
    x = rng.random((4, 4, 3))
    out = alternate_apply(x, np.zeros((4, 4)), 0, AlternationSchedule(1.0), fill=0.5)
    assert np.all(out == 0.5)


# --- cross-domain mixing -----------------------------------------------------

def test_single_class_always_pasted(rng):
    y = np.full((4, 4), 3)
    for _ in range(10):
        mask, chosen = class_mix_mask(y, rng)
        assert chosen == {3} and mask.all()


def test_half_of_four_classes(rng):
    y = np.repeat(np.arange(4), 4).reshape(4, 4)
    for _ in range(20):
        _, chosen = class_mix_mask(y, rng)
        assert len(chosen) == 2


def test_odd_count_rounds_up(rng):
    y = np.array([[0, 1, 2], [3, 4, IGNORE]])
    _, chosen = class_mix_mask(y, rng)
    assert len(chosen) == 3 and IGNORE not in chosen


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cdm_membership_oracle(seed):
    rng = np.random.default_rng(seed)
    x_s, x_t = _pair(rng, 6, 6)
    y_s = rng.choice([0, 1, 2, 3, IGNORE], (6, 6))
    y_t = rng.integers(4, 8, (6, 6))
    if np.all(y_s == IGNORE):
        y_s[0, 0] = 0
    img, lab, mask = cross_domain_mix(x_s, y_s, x_t, y_t, np.random.default_rng(seed), return_mask=True)
    _, chosen = class_mix_mask(y_s, np.random.default_rng(seed))
    for i in range(6):
        for j in range(6):
            if int(y_s[i, j]) in chosen:
                assert np.array_equal(img[i, j], x_s[i, j]) and lab[i, j] == y_s[i, j]
            else:
                assert np.array_equal(img[i, j], x_t[i, j]) and lab[i, j] == y_t[i, j]
    assert set(np.unique(lab)) <= set(np.unique(y_s)) | set(np.unique(y_t))


def test_cdm_requires_a_class(rng):
    with pytest.raises(ValueError):
        class_mix_mask(np.full((2, 2), IGNORE), rng)
