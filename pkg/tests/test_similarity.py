import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from pignight.datamodel import IGNORE, SyntheticConfig, render_scene
from pignight.similarity import (
    PERCEPTUAL, PSNR, PSNR_CAP_DB, SSIM, AveragedRanking, ClassRanking, EmptySourceLabelError,
    SimilarityBackend, average_ranking, extract_single_class, psnr, rank_classes, ranking_from_scores,
    score, ssim,
)
import oracles

images = hnp.arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1, width=32))
ALL = [SimilarityBackend(PERCEPTUAL), SimilarityBackend(SSIM, window_size=7), SimilarityBackend(PSNR)]


# --- single-class extraction -------------------------------------------------

def test_extract_uniform_label_is_identity(rng):
    x = rng.random((4, 4, 3))
    assert np.array_equal(extract_single_class(x, np.full((4, 4), 2), 2), x)


def test_extract_absent_class():
    assert extract_single_class(np.ones((2, 2, 3)), np.zeros((2, 2), dtype=int), 5) is None


def test_extract_diagonal(rng):
    x = rng.random((2, 2, 3))
    y = np.array([[3, 1], [1, 3]])
    out = extract_single_class(x, y, 3)
    for i in range(2):
        for j in range(2):
            expected = x[i, j] if i == j else np.zeros(3)
            assert np.array_equal(out[i, j], expected)


# --- backends ----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(images)
def test_perceptual_self_distance_zero(a):
    assert abs(score(a, a, ALL[0])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(images, images)
def test_perceptual_symmetric(a, b):
    assert abs(score(a, b, ALL[0]) - score(b, a, ALL[0])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(images, images)
def test_classical_scores_symmetric(a, b):
    for backend in ALL[1:]:
        assert score(a, b, backend) == score(b, a, backend)


@settings(max_examples=25, deadline=None)
@given(images)
def test_ssim_self_is_one(a):
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert score(a, a, SimilarityBackend(SSIM)) == pytest.approx(-1.0, abs=1e-12)


def test_ssim_matches_pixel_loop(rng):
    a = rng.random((9, 10, 1))
    b = rng.random((9, 10, 1))
    expected = oracles.ssim_pixelwise(a[..., 0].tolist(), b[..., 0].tolist(), 5)
    assert ssim(a, b, window_size=5) == pytest.approx(expected, abs=1e-12)


def test_psnr_constant_half_difference():
    a = np.full((8, 8, 3), 0.25)
    b = a + 0.5
    expected = oracles.psnr_closed_form(0.25)
    assert expected == pytest.approx(6.0206, abs=1e-4)
    assert psnr(a, b) == pytest.approx(expected, abs=1e-3)
    assert score(a, b, SimilarityBackend(PSNR)) == pytest.approx(-expected, abs=1e-3)


def test_psnr_identical_capped():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP_DB


def test_score_extent_mismatch():
    with pytest.raises(ValueError):
        score(np.zeros((4, 4, 3)), np.zeros((4, 6, 3)), ALL[2])


def test_unknown_backend():
    with pytest.raises(ValueError):
        SimilarityBackend("lpips")


def test_backend_identity_changes_with_parameters():
    assert SimilarityBackend(feature_seed=1).identity != SimilarityBackend(feature_seed=2).identity
    assert "custom" in SimilarityBackend(feature_extractor=lambda x: [x]).identity


def test_feature_extractor_adapter(rng):
    calls = []

    def extractor(x):
        calls.append(tuple(x.shape))
        return [x]

    backend = SimilarityBackend(PERCEPTUAL, feature_extractor=extractor, extractor_name="identity")
    a = rng.random((8, 8, 3))
    assert score(a, a, backend) == 0.0
    assert calls and backend.identity == "perceptual:identity"


def test_canonical_resize_flag(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    native = score(a, b, SimilarityBackend(PERCEPTUAL))
    resized = score(a, b, SimilarityBackend(PERCEPTUAL, canonical_size=(32, 32)))
    assert math.isfinite(resized) and resized != native


# --- ranking -----------------------------------------------------------------

@pytest.mark.parametrize("backend", ALL, ids=lambda b: b.kind)
def test_copied_class_ranks_below_inverted(rng, backend):
    x_s = rng.random((32, 32, 3))
    y_s = np.zeros((32, 32), dtype=int)
    y_s[:, 16:] = 1
    x_t = x_s.copy()
    x_t[:, 16:] = 1.0 - x_s[:, 16:]
    # direct scoring decides the order
    s0 = score(extract_single_class(x_s, y_s, 0), x_t, backend)
    s1 = score(extract_single_class(x_s, y_s, 1), x_t, backend)
    assert s1 > s0
    ranking = rank_classes(x_s, y_s, x_t, backend)
    assert ranking.class_ids == (1, 0)


def test_single_class_ranking(rng):
    x = rng.random((8, 8, 3))
    r = rank_classes(x, np.full((8, 8), 4), x, ALL[0])
    assert len(r) == 1 and r.class_ids == (4,)
    assert abs(r.entries[0][1]) < 1e-6


def test_empty_source_label(rng):
    with pytest.raises(EmptySourceLabelError, match="empty source label"):
        rank_classes(rng.random((4, 4, 3)), np.full((4, 4), IGNORE), rng.random((4, 4, 3)), ALL[0])


def test_ranking_excludes_ignore_and_absent(rng):
    y = np.array([[0, 0, IGNORE, 3]] * 4)
    r = rank_classes(rng.random((4, 4, 3)), y, rng.random((4, 4, 3)), ALL[2])
    assert r.present_classes == {0, 3}


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.integers(0, 18), st.floats(-50, 50, allow_nan=False), min_size=1, max_size=19),
       st.sampled_from(["exp", "affine", "cube"]))
def test_rank_invariant_under_monotone_transform(scores, kind):
    transform = {"exp": lambda v: math.exp(v / 10), "affine": lambda v: 3 * v + 7, "cube": lambda v: v ** 3}[kind]
    a = ranking_from_scores(scores)
    b = ranking_from_scores({c: transform(s) for c, s in scores.items()})
    # exact permutation equality (transforms are injective on these floats up to ties preserved)
    if len(set(scores.values())) == len({transform(s) for s in scores.values()}):
        assert a.class_ids == b.class_ids
    assert sorted(a.class_ids) == sorted(scores)
    values = [s for _, s in a.entries]
    assert all(x >= y for x, y in zip(values, values[1:]))


def test_ties_order_by_class_id():
    r = ranking_from_scores({5: 1.0, 2: 1.0, 9: 3.0, 0: 1.0})
    assert r.class_ids == (9, 0, 2, 5)


def test_ranking_repeatable(rng):
    x_s, x_t = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    y_s = rng.integers(0, 5, (16, 16))
    assert rank_classes(x_s, y_s, x_t, ALL[0]) == rank_classes(x_s, y_s, x_t, ALL[0])


def test_average_single_ranking_verbatim():
    r = ranking_from_scores({3: 2.0, 1: 1.0, 7: 0.5})
    avg = average_ranking([r])
    assert avg.mean_position == {1: 2.0, 3: 1.0, 7: 3.0}
    assert avg.ordered() == [3, 1, 7]


def test_average_ranking_arithmetic():
    r1 = ClassRanking(((4, 9.0), (2, 5.0), (1, 0.0)))
    r2 = ClassRanking(((2, 9.0), (1, 5.0), (4, 0.0)))
    avg = average_ranking([r1, r2])
    assert avg.mean_position[4] == 2.0
    assert avg.count == {1: 2, 2: 2, 4: 2}


def test_average_ranking_empty():
    with pytest.raises(ValueError):
        average_ranking([])


# --- synthetic low-similarity class -------------------------------------------

def _sky_positions(backend, n):
    cfg = SyntheticConfig(size=64, num_classes=8)
    sky = cfg.class_names.index("sky")
    positions = []
    for i in range(n):
        day, night, label = render_scene(21, i, cfg)
        positions.append(rank_classes(day, label, night, backend).position(sky))
    return positions


@pytest.mark.parametrize("backend", ALL, ids=lambda b: b.kind)
def test_low_similarity_class_in_top_two(backend):
    positions = _sky_positions(backend, 30)
    assert sum(p <= 2 for p in positions) / len(positions) >= 0.8


def test_low_similarity_mean_position_top_third():
    positions = _sky_positions(ALL[0], 50)
    assert np.mean(positions) <= 8 / 3
