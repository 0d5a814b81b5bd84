import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.stats import ortho_group

from relaygeom import harness, synthetic
from relaygeom.ejt import (DegenerateMetricError, EjtBaseline, EjtSplit, ejt_at, ejt_zscore, eigen_split,
                           feature_loadings, fit_baseline, loading_similarity, metric_tensor, soft_alignment,
                           top_loading_features)
from relaygeom.population import GLOBAL, GUARD, cluster_centers, role_labels


def triple_loop_product(J):
    rows, cols = len(J), len(J[0])
    M = [[0.0] * cols for _ in range(cols)]
    for i in range(cols):
        for j in range(cols):
            acc = 0.0
            for r in range(rows):
                acc += J[r][i] * J[r][j]
            M[i][j] = acc
    return np.array(M)


def cumulative_k(spectrum, threshold):
    total = sum(spectrum)
    acc = 0.0
    for k, lam in enumerate(sorted(spectrum, reverse=True), start=1):
        acc += lam
        if acc / total >= threshold:
            return k
    return len(spectrum)


def split_from_spectrum(spectrum, seed=0):
    Q = ortho_group.rvs(17, random_state=seed)
    return eigen_split(Q @ np.diag(spectrum) @ Q.T), Q


# -- metric tensor ----------------------------------------------------------------

def test_zero_jacobian():
    np.testing.assert_array_equal(metric_tensor(np.zeros((32, 17))), np.zeros((17, 17)))


def test_orthonormal_rows_give_projector():
    Q = ortho_group.rvs(32, random_state=1)[:10, :17]
    Q, _ = np.linalg.qr(Q.T)
    J = Q.T  # 10 orthonormal rows
    w = np.linalg.eigvalsh(metric_tensor(J))
    assert np.all((np.abs(w) < 1e-12) | (np.abs(w - 1) < 1e-12))
    assert np.sum(np.abs(w - 1) < 1e-12) == 10


def test_metric_matches_triple_loop():
    J = np.random.default_rng(2).normal(size=(32, 17))
    M = metric_tensor(J)
    np.testing.assert_allclose(M, triple_loop_product(J.tolist()), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(M, M.T)


def test_non_finite_jacobian_rejected():
    J = np.zeros((32, 17))
    J[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        metric_tensor(J)


# -- eigen split ------------------------------------------------------------------

def test_identity_metric_needs_sixteen():
    s = eigen_split(np.eye(17))
    assert s.k == 16
    assert s.V_soft.shape == (17, 1)


def test_constructed_spectrum_puts_ninety_percent_in_nine():
    spectrum = [1.0] * 9 + [0.125] * 8
    assert sum(spectrum[:9]) / sum(spectrum) == 0.9
    assert cumulative_k(spectrum, 0.9) == 9
    assert eigen_split(np.diag(spectrum)).k == 9


def test_rank_one_metric():
    v = np.random.default_rng(3).normal(size=17)
    s = eigen_split(np.outer(v, v))
    assert s.k == 1
    assert s.V_soft.shape == (17, 16)
    np.testing.assert_allclose(s.V_soft.T @ v, 0, atol=1e-10)


def test_zero_trace_is_degenerate():
    with pytest.raises(DegenerateMetricError):
        eigen_split(np.zeros((17, 17)))


def test_split_invariants():
    J = np.random.default_rng(4).normal(size=(32, 17))
    M = metric_tensor(J)
    s = eigen_split(M)
    assert np.all(s.eigenvalues >= 0) and np.all(np.diff(s.eigenvalues) <= 0)
    np.testing.assert_allclose(s.V_stiff.T @ s.V_stiff, np.eye(s.k), atol=1e-10)
    np.testing.assert_allclose(s.V_soft.T @ s.V_soft, np.eye(17 - s.k), atol=1e-10)
    np.testing.assert_allclose(s.V_stiff.T @ s.V_soft, 0, atol=1e-10)
    assert s.k == cumulative_k(list(s.eigenvalues), 0.9)


spectra = hnp.arrays(np.float64, 17, elements=st.floats(0, 100)).filter(lambda w: w.sum() > 1e-3)


@given(spectra, st.integers(0, 50))
def test_reconstruction(spectrum, seed):
    Q = ortho_group.rvs(17, random_state=seed)
    M = Q @ np.diag(spectrum) @ Q.T
    s = eigen_split(M)
    R = s.eigenvectors @ np.diag(s.eigenvalues) @ s.eigenvectors.T
    assert np.linalg.norm(R - M) <= 1e-8 * np.linalg.norm(M)


@given(spectra, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_k_monotone_in_threshold(spectrum, t1, t2):
    lo, hi = sorted((t1, t2))
    M = np.diag(spectrum)
    assert eigen_split(M, lo).k <= eigen_split(M, hi).k


# -- soft alignment ---------------------------------------------------------------

@pytest.fixture(scope="module")
def split():
    s, _ = split_from_spectrum(np.linspace(10, 0.1, 17))
    return s


def test_alpha_examples(split):
    s, t = split.V_stiff[:, 0], split.V_soft[:, 0]
    assert soft_alignment(t, split).alpha == pytest.approx(1.0, abs=1e-12)
    assert soft_alignment(s, split).alpha == pytest.approx(0.0, abs=1e-12)
    assert soft_alignment((s + t) / np.sqrt(2), split).alpha == pytest.approx(0.5, abs=1e-12)


def test_near_zero_displacement_is_undefined(split):
    r = soft_alignment(np.full(17, 1e-9), split)
    assert r.alpha is None and not r.defined
    assert r.note == "directionally undefined"


vectors = hnp.arrays(np.float64, 17, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vectors, st.floats(1e-3, 1e3))
def test_alpha_bounds_and_scale_invariance(split, d, c):
    r = soft_alignment(d, split)
    assert 0 <= r.alpha <= 1
    assert r.alpha + r.stiff_ratio == pytest.approx(1.0, abs=1e-10)
    assert soft_alignment(c * d, split).alpha == pytest.approx(r.alpha, abs=1e-10)


@given(vectors, st.integers(0, 100))
def test_alpha_invariant_to_block_rotations(split, d, seed):
    k = split.k
    Rs = ortho_group.rvs(k, random_state=seed) if k > 1 else np.eye(1)
    Rt = ortho_group.rvs(17 - k, random_state=seed + 1) if 17 - k > 1 else np.eye(17 - k)
    V = split.eigenvectors
    block = np.zeros((17, 17))
    block[:k, :k] = Rs
    block[k:, k:] = Rt
    rotated = V @ block @ V.T @ d
    assert soft_alignment(rotated, split).alpha == pytest.approx(soft_alignment(d, split).alpha, abs=1e-10)


# -- z-scores and baselines ---------------------------------------------------------

def test_default_baseline_constants():
    b = EjtBaseline()
    assert (b.mean, b.std, b.frozen) == (0.750, 0.113, True)


def test_zscore_examples():
    b = EjtBaseline()
    assert ejt_zscore(0.750, b) == 0.0
    assert ejt_zscore(0.524, b) == pytest.approx(-2.0, abs=1e-12)
    alpha = 0.750 - 4.38 * 0.113
    assert alpha == pytest.approx(0.2551, abs=1e-4)
    assert ejt_zscore(alpha, b) == pytest.approx(-4.38, abs=1e-12)


def test_unfrozen_baseline_rejected():
    with pytest.raises(ValueError):
        ejt_zscore(0.5, EjtBaseline(frozen=False))
    with pytest.raises(ValueError):
        EjtBaseline(std=0.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(-1, 1), st.floats(1e-3, 1))
def test_zscore_is_affine(a1, a2, mean, std):
    b = EjtBaseline(mean, std)
    if abs(a1 - a2) < 1e-3:
        return
    z1, z2 = ejt_zscore(a1, b), ejt_zscore(a2, b)
    std_back = (a1 - a2) / (z1 - z2)
    assert std_back == pytest.approx(std, rel=1e-6)
    assert a1 - z1 * std_back == pytest.approx(mean, abs=1e-6)


def test_fit_baseline_two_points():
    b = fit_baseline([0.6, 0.9])
    assert b.mean == pytest.approx(0.75)
    assert b.std == pytest.approx(0.2121, abs=1e-4)
    assert b.frozen


def test_fit_baseline_rejects_constant_and_short():
    with pytest.raises(ValueError):
        fit_baseline([0.7] * 5)
    with pytest.raises(ValueError):
        fit_baseline([0.7])


def test_fourteen_stable_windows_reproduce_alpha_moments():
    frames = synthetic.generate_population(synthetic.SyntheticConfig(n_relays=600, n_windows=100, seed=0))
    models = harness.train_models(frames[:6], harness.TrainingConfig().with_seed(0))
    states = [harness.frame_state(f, models) for f in frames[6:]]
    alphas = np.array([harness.pair_geometry(a, b, models).alignments[GLOBAL].alpha
                       for a, b in zip(states, states[1:])])
    base = harness.fit_baselines(frames[6:21], models).global_
    assert len(base.source_windows) == 2
    assert base.mean == pytest.approx(alphas.mean(), rel=0.10)
    assert base.std == pytest.approx(alphas.std(ddof=1), rel=0.10)


# -- loadings -----------------------------------------------------------------------

def test_rank_one_axis_is_top_loaded():
    M = np.zeros((17, 17))
    M[5, 5] = 3.0
    M += 1e-9 * np.eye(17)
    assert 5 in top_loading_features(eigen_split(M), n=1)


def test_diagonal_metric_loadings():
    diag = np.array([3, 9, 1, 7, 5, 2, 8, 4, 6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01], float)
    s = eigen_split(np.diag(diag))
    expected = frozenset(np.argsort(-diag)[:s.k].tolist())
    assert top_loading_features(s, n=s.k) == expected


def test_loading_ties_break_to_lower_index():
    s = eigen_split(np.eye(17))
    assert top_loading_features(s, n=3) == frozenset({0, 1, 2}) or len(set(np.round(feature_loadings(s), 12))) > 1


def test_planted_anisotropy_in_top_ten():
    frames = synthetic.generate_population(synthetic.SyntheticConfig(n_windows=8, seed=0))
    models = harness.train_models(frames[:6], harness.TrainingConfig().with_seed(0))
    sch = models.schema
    planted = {sch.clean_position(n) for n in ("latitude", "longitude", "days_since_restart")}
    for frame in frames[6:]:
        models.scaled_clean(frame)
        centers = cluster_centers(frame, role_labels(frame.role_probs))
        for point in (centers.center(GUARD), centers.global_mean):
            assert planted <= top_loading_features(ejt_at(models.cdae, point))


def test_loading_similarity_examples():
    a = frozenset(range(10))
    assert loading_similarity(a, a) == 1.0
    assert loading_similarity(a, frozenset(range(10, 20))) == 0.0
    assert loading_similarity(a, frozenset(range(1, 11))) == 0.9
    with pytest.raises(ValueError):
        loading_similarity(a, frozenset(range(9)))


def test_split_record():
    s = eigen_split(np.eye(17), label=GUARD)
    rec = s.as_record()
    assert rec["k"] == 16 and rec["label"] == GUARD and len(rec["spectrum"]) == 17
    assert isinstance(s, EjtSplit)
