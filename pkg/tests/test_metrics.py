import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from eeg3d.dataset import class_image_pixels
from eeg3d.metrics import (
    ColorHistogramEmbedder,
    GradientFeatures,
    IncompleteViews,
    MetricError,
    NwayConfig,
    PrecomputedEmbedder,
    TemplateClassifier,
    aggregate,
    clip_score,
    cosine,
    fid,
    fid_result,
    frechet_distance,
    inception_score,
    inception_score_from_probs,
    lpips_distance,
    lpips_from_layers,
    nway_hits,
    nway_per_view,
    nway_topk,
    pixel_key,
    read_feature_file,
    write_feature_file,
)
from eeg3d.renderer import VIEW_LABELS

from oracles import gaussian_frechet_diag, nway_exhaustive


def solid(rgb, side=4):
    return np.tile(np.array(rgb, dtype=np.uint8), (side, side, 1))


class FixedEmbedder:
    provider_id = "fixed"

    def __init__(self, table):
        self.table = table

    def embed(self, pixels):
        return self.table[int(pixels[0, 0, 0])]


# -- CLIPScore ---------------------------------------------------------------------

def test_clip_score_identical_images():
    img = class_image_pixels(3, 16)
    assert clip_score(img, img, ColorHistogramEmbedder()) == pytest.approx(1.0, abs=1e-9)


def test_clip_score_orthogonal_embeddings():
    emb = FixedEmbedder({1: np.array([1.0, 0.0]), 2: np.array([0.0, 3.0])})
    assert clip_score(solid((1, 0, 0)), solid((2, 0, 0)), emb) == 0.0


def test_clip_score_histogram_hand_computed():
    # 2x2 images: x has pixels (0,0,0),(255,255,255) twice; v has three blacks and one mid gray
    x = np.array([[[0, 0, 0], [255, 255, 255]], [[0, 0, 0], [255, 255, 255]]], dtype=np.uint8)
    v = np.array([[[0, 0, 0], [0, 0, 0]], [[0, 0, 0], [128, 128, 128]]], dtype=np.uint8)
    # per channel bins (low, mid, high): x -> (.5, 0, .5), v -> (.75, .25, 0)
    hx = np.array([0.5, 0, 0.5] * 3)
    hv = np.array([0.75, 0.25, 0] * 3)
    expected = (hx @ hv) / (np.linalg.norm(hx) * np.linalg.norm(hv))
    assert clip_score(x, v, ColorHistogramEmbedder(3)) == pytest.approx(expected, abs=1e-9)
    assert np.allclose(ColorHistogramEmbedder(3).embed(x), hx)


def test_clip_score_rejects_zero_norm_and_mismatched_dims():
    with pytest.raises(MetricError, match="zero-norm"):
        clip_score(solid((1, 0, 0)), solid((2, 0, 0)), FixedEmbedder({1: np.zeros(2), 2: np.ones(2)}))
    with pytest.raises(MetricError, match="dimensions"):
        clip_score(solid((1, 0, 0)), solid((2, 0, 0)), FixedEmbedder({1: np.ones(2), 2: np.ones(3)}))


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, s, t):
    a, b = np.array(a), np.array(b)
    assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert cosine(b, a) == pytest.approx(c, abs=1e-12)
    assert cosine(s * a, t * b) == pytest.approx(c, abs=1e-9)


# -- LPIPS -------------------------------------------------------------------------

def test_lpips_identical_is_zero():
    img = class_image_pixels(5, 32)
    assert lpips_distance(img, img, GradientFeatures()) == 0.0


def test_lpips_orthogonal_unit_features_give_two():
    assert lpips_from_layers([np.array([[1.0, 0.0]])], [np.array([[0.0, 1.0]])], [1.0]) == pytest.approx(2.0, abs=1e-9)


def test_lpips_weighted_sum_over_layers():
    fx = [np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])]
    fv = [np.array([[0.0, 1.0]]), np.array([[1.0, 0.0], [1.0, 0.0]])]
    # layer 1 distance 2; layer 2 mean of (0, 2) = 1
    assert lpips_from_layers(fx, fv, [0.5, 3.0]) == pytest.approx(0.5 * 2 + 3.0 * 1, abs=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
def test_lpips_invariant_to_feature_scale(seed, s):
    rng = np.random.default_rng(seed)
    fx = [rng.normal(size=(3, 3, 4)), rng.normal(size=(2, 5))]
    fv = [rng.normal(size=(3, 3, 4)), rng.normal(size=(2, 5))]
    base = lpips_from_layers(fx, fv)
    assert base >= 0
    assert lpips_from_layers([2 * f for f in fx], fv) == pytest.approx(base, rel=1e-9)
    assert lpips_from_layers([s * f for f in fx], [s * f for f in fv]) == pytest.approx(base, rel=1e-9)


def test_lpips_shape_mismatch():
    with pytest.raises(MetricError, match="shapes"):
        lpips_from_layers([np.ones((2, 3))], [np.ones((3, 3))])
    with pytest.raises(MetricError):
        lpips_from_layers([], [])


def test_lpips_distinguishes_classes():
    feats = GradientFeatures()
    a, b = class_image_pixels(0, 32), class_image_pixels(1, 32)
    assert lpips_distance(a, b, feats) > 0
    assert lpips_distance(a, b, feats) == pytest.approx(lpips_distance(b, a, feats), rel=1e-12)


# -- Inception Score ---------------------------------------------------------------

@pytest.mark.parametrize("k", [2, 5, 10, 40])
def test_is_one_hot_distinct_classes_equals_k(k):
    mean, std = inception_score_from_probs(np.eye(k), splits=1)
    assert mean == pytest.approx(k, rel=1e-12)
    assert std == 0.0


def test_is_identical_and_uniform_distributions_give_one():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(7))
    assert inception_score_from_probs(np.tile(p, (20, 1)), splits=4)[0] == pytest.approx(1.0, abs=1e-12)
    assert inception_score_from_probs(np.full((12, 6), 1 / 6), splits=3) == pytest.approx((1.0, 0.0), abs=1e-12)


def test_is_split_mean_and_population_std():
    # split 1: one-hot on 2 classes -> 2; split 2: identical rows -> 1
    p = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1]], dtype=float)
    assert inception_score_from_probs(p, splits=2) == pytest.approx((1.5, 0.5), abs=1e-12)


def test_is_errors():
    with pytest.raises(MetricError, match="splits"):
        inception_score_from_probs(np.eye(3), splits=4)
    with pytest.raises(MetricError):
        inception_score_from_probs(np.array([[0.5, 0.6]]), splits=1)
    with pytest.raises(MetricError, match="splits"):
        inception_score([class_image_pixels(0, 8)], TemplateClassifier(4), splits=2)


def test_is_with_template_classifier_on_class_pictures():
    clf = TemplateClassifier(num_classes=8)
    imgs = [class_image_pixels(c, 32) for c in range(8)]
    mean, _ = inception_score(imgs, clf, splits=1)
    assert 4.0 < mean <= 8.0


# -- FID ---------------------------------------------------------------------------

def test_fid_identical_sets_zero():
    a = np.random.default_rng(0).normal(size=(50, 6))
    assert fid(a, a) <= 1e-6


def test_fid_degenerate_sets():
    a = np.zeros((5, 2))
    b = np.tile([2.0, 0.0], (5, 1))
    assert fid(a, b) == pytest.approx(4.0, abs=1e-12)


def test_fid_matches_closed_form_gaussians():
    rng = np.random.default_rng(7)
    d = 8
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    var1, var2 = rng.uniform(0.5, 2.0, size=d), rng.uniform(0.5, 2.0, size=d)
    a = mu1 + np.sqrt(var1) * rng.standard_normal((10000, d))
    b = mu2 + np.sqrt(var2) * rng.standard_normal((10000, d))
    expected = gaussian_frechet_diag(mu1, var1, mu2, var2)
    assert fid(a, b) == pytest.approx(expected, rel=0.02)


def test_frechet_distance_known_covariances_exact():
    s1 = np.diag([1.0, 4.0])
    s2 = np.diag([9.0, 1.0])
    # (1-3)^2 + (2-1)^2 + |mu diff|^2 = 4 + 1 + 2
    assert frechet_distance([0, 0], s1, [1, 1], s2).value == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 30), d=st.integers(1, 6))
def test_fid_symmetric_and_self_zero(seed, n, d):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, d))
    b = rng.normal(1.0, 2.0, size=(n + 3, d))
    assert fid(a, a) <= 1e-6
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)
    assert fid(a, b) >= 0


def test_fid_reports_regularization_on_rank_deficient_sets():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 8))  # rank 2 covariance in 8 dims
    b = rng.normal(size=(3, 8))
    res = fid_result(a, b)
    assert res.value >= 0
    full = fid_result(rng.normal(size=(200, 3)), rng.normal(size=(200, 3)))
    assert not full.regularized


def test_fid_rejects_clearly_negative_eigenvalues():
    with pytest.raises(MetricError, match="eigenvalue"):
        frechet_distance([0, 0], np.diag([1.0, -0.5]), [0, 0], np.eye(2))


def test_fid_errors():
    with pytest.raises(MetricError, match="at least 2"):
        fid(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(MetricError, match="dimensions"):
        fid(np.zeros((4, 3)), np.zeros((4, 2)))


# -- n-way top-k -------------------------------------------------------------------

def test_nway_config_validation():
    with pytest.raises(MetricError):
        NwayConfig(n=1, k=1, num_classes=5)
    with pytest.raises(MetricError):
        NwayConfig(n=3, k=3, num_classes=5)
    with pytest.raises(MetricError):
        NwayConfig(n=6, k=1, num_classes=5)
    with pytest.raises(MetricError):
        NwayConfig(n=2, k=1, num_classes=5, trials=0)


@pytest.mark.parametrize("n,k", [(2, 1), (5, 1), (5, 4), (10, 2)])
def test_nway_oracle_classifier_is_perfect(n, k):
    gt = np.eye(12)[4]
    assert nway_topk(gt, [gt] * 6, NwayConfig(n, k, 12, trials=30, seed=1)) == (1.0, 0.0)


def test_nway_target_strictly_last_is_zero():
    k_classes = 6
    gt = np.eye(k_classes)[0]
    view = np.array([0.0, 0.1, 0.2, 0.2, 0.25, 0.25])
    assert nway_topk(gt, [view] * 6, NwayConfig(4, 3, k_classes, trials=25))[0] == 0.0


def test_nway_ties_break_toward_lower_index():
    gt = np.eye(4)[2]
    view = np.full(4, 0.25)
    # classes 0 and 1 outrank 2 on ties, class 3 does not
    hits = nway_hits(gt, [view], NwayConfig(2, 1, 4, trials=200, seed=3))
    assert 0 < hits.mean() < 1
    assert nway_topk(np.eye(4)[0], [view], NwayConfig(4, 1, 4, trials=5)) == (1.0, 0.0)


def test_nway_rejects_malformed():
    cfg = NwayConfig(2, 1, 4)
    with pytest.raises(MetricError):
        nway_topk(np.eye(4)[0], [np.array([0.5, 0.5, 0.5, 0.5])], cfg)
    with pytest.raises(MetricError):
        nway_topk(np.eye(5)[0], [np.eye(5)[0]], cfg)
    with pytest.raises(MetricError):
        nway_topk(np.eye(4)[0], [], cfg)


def test_nway_matches_exhaustive_enumeration():
    rng = np.random.default_rng(11)
    gt = rng.dirichlet(np.ones(5))
    views = list(rng.dirichlet(np.ones(5), size=6))
    cfg = NwayConfig(3, 1, 5, trials=10000, seed=2)
    mean, std = nway_topk(gt, views, cfg)
    exact = nway_exhaustive(gt, views, 3, 1)
    assert abs(mean - exact) <= 3 * std / math.sqrt(cfg.trials) + 1e-12


def test_nway_deterministic_for_seed():
    rng = np.random.default_rng(0)
    gt, views = rng.dirichlet(np.ones(9)), list(rng.dirichlet(np.ones(9), size=6))
    cfg = NwayConfig(4, 2, 9, trials=50, seed=9)
    assert nway_topk(gt, views, cfg) == nway_topk(gt, views, cfg)
    assert np.array_equal(nway_per_view(gt, views, cfg), nway_hits(gt, views, cfg).mean(axis=0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 7))
def test_nway_monotone_in_k(seed, n):
    rng = np.random.default_rng(seed)
    gt, views = rng.dirichlet(np.ones(8)), list(rng.dirichlet(np.ones(8), size=6))
    accs = [nway_topk(gt, views, NwayConfig(n, k, 8, trials=40, seed=seed))[0] for k in range(1, n)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))


def test_nway_two_way_view_independent_classifier_converges():
    rng = np.random.default_rng(5)
    gt = rng.dirichlet(np.ones(6))
    view = rng.dirichlet(np.ones(6))
    cfg = NwayConfig(2, 1, 6, trials=10000, seed=4)
    mean, std = nway_topk(gt, [view] * 6, cfg)
    assert abs(mean - nway_exhaustive(gt, [view] * 6, 2, 1)) <= 3 * std / math.sqrt(cfg.trials) + 1e-12


# -- aggregation -------------------------------------------------------------------

def scores_for(objects, rng, metrics=("clip", "lpips")):
    return {(obj, label): {m: float(rng.uniform()) for m in metrics} for obj in objects for label in VIEW_LABELS}


def test_aggregate_constant_object():
    per_view = {("a", label): {"clip": 0.4} for label in VIEW_LABELS}
    rep = aggregate(per_view)
    assert rep.per_object["a"]["clip"] == pytest.approx(0.4, abs=1e-12)
    assert rep.global_["clip"] == pytest.approx((0.4, 0.0), abs=1e-12)


def test_aggregate_two_objects_population_std():
    per_view = {("a", label): {"m": 0.2} for label in VIEW_LABELS}
    per_view.update({("b", label): {"m": 0.8} for label in VIEW_LABELS})
    mean, std = aggregate(per_view).global_["m"]
    assert mean == pytest.approx(0.5, abs=1e-12) and std == pytest.approx(0.3, abs=1e-12)


def test_aggregate_rejects_missing_view():
    per_view = {("a", label): {"m": 1.0} for label in VIEW_LABELS if label != "back"}
    with pytest.raises(IncompleteViews, match="back"):
        aggregate(per_view)


def test_aggregate_rejects_inconsistent_metrics():
    per_view = scores_for(["a"], np.random.default_rng(0))
    per_view[("a", "left")] = {"clip": 0.1}
    with pytest.raises(MetricError):
        aggregate(per_view)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_obj=st.integers(1, 6), k=st.integers(-4, 4))
def test_aggregate_means_and_linearity(seed, n_obj, k):
    rng = np.random.default_rng(seed)
    per_view = scores_for([f"o{i}" for i in range(n_obj)], rng)
    rep = aggregate(per_view)
    for obj, vals in rep.per_object.items():
        for m, v in vals.items():
            assert abs(v - sum(per_view[(obj, label)][m] for label in VIEW_LABELS) / 6) <= 1e-9
    # powers of two scale every sum exactly
    alpha = 2.0 ** k
    scaled = aggregate({key: {m: alpha * v for m, v in s.items()} for key, s in per_view.items()})
    for obj in rep.per_object:
        for m in rep.per_object[obj]:
            assert scaled.per_object[obj][m] == alpha * rep.per_object[obj][m]
    for m in rep.global_:
        assert scaled.global_[m][0] == alpha * rep.global_[m][0]


def test_aggregate_linearity_generic_scale():
    rng = np.random.default_rng(2)
    per_view = scores_for(["a", "b", "c"], rng)
    rep = aggregate(per_view)
    scaled = aggregate({key: {m: 0.37 * v for m, v in s.items()} for key, s in per_view.items()})
    for m in rep.global_:
        assert scaled.global_[m][0] == pytest.approx(0.37 * rep.global_[m][0], rel=1e-14)


# -- feature files and toy providers -----------------------------------------------

def test_feature_file_round_trip(tmp_path):
    imgs = [class_image_pixels(c, 8) for c in range(3)]
    ids = [pixel_key(i) for i in imgs]
    feats = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_feature_file(tmp_path / "f.fea", tmp_path / "f.ids", ids, feats)
    raw = (tmp_path / "f.fea").read_bytes()
    assert raw[:4] == b"FEA1" and raw[4:12] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    table = read_feature_file(tmp_path / "f.fea", tmp_path / "f.ids")
    assert np.array_equal(table[ids[1]], feats[1].astype(np.float64))
    emb = PrecomputedEmbedder.from_files(tmp_path / "f.fea", tmp_path / "f.ids")
    assert np.array_equal(emb.embed(imgs[2]), feats[2])
    with pytest.raises(MetricError, match="no precomputed"):
        emb.embed(class_image_pixels(9, 8))


def test_feature_file_corruption(tmp_path):
    write_feature_file(tmp_path / "f.fea", tmp_path / "f.ids", ["a", "b"], np.ones((2, 3)))
    data = (tmp_path / "f.fea").read_bytes()
    (tmp_path / "g.fea").write_bytes(data[:-4])
    with pytest.raises(MetricError, match="size"):
        read_feature_file(tmp_path / "g.fea", tmp_path / "f.ids")
    (tmp_path / "h.fea").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(MetricError, match="not a feature file"):
        read_feature_file(tmp_path / "h.fea", tmp_path / "f.ids")
    (tmp_path / "f.ids").write_text("a\n")
    with pytest.raises(MetricError, match="ids"):
        read_feature_file(tmp_path / "f.fea", tmp_path / "f.ids")


def test_template_classifier_recognizes_class_pictures():
    clf = TemplateClassifier(num_classes=64)
    for c in (0, 7, 33, 63):
        p = clf.probs(class_image_pixels(c, 64))
        assert int(np.argmax(p)) == c
        assert abs(p.sum() - 1) < 1e-12
