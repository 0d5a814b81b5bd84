"""The twelve acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``CRITERION n PASS|FAIL`` line before asserting.
"""

import dataclasses
import time

import numpy as np
import pytest

from relaygeom import cli, fixtures, harness, synthetic
from relaygeom.cca import fit_cca, rotation_angle
from relaygeom.cdae import CdaeTrainingConfig, train_cdae
from relaygeom.ejt import EjtBaseline, ejt_at, ejt_zscore, soft_alignment
from relaygeom.gates import MODE_F, PRECURSOR, REGIME_D, REGIME_E, REGIME_K_CANDIDATE, restart_age_bimodality
from relaygeom.population import GUARD, RobustScaler, cluster_centers, role_labels
from relaygeom.schema import FeatureSchema
from test_cca import planted_pair
from test_grbm import term_sum_free_energy

SCHEMA = FeatureSchema.default()
CLEAN = list(SCHEMA.clean_indices)


@pytest.fixture
def criterion(capsys):
    """Report one pass/fail line, then fail the test if the criterion failed."""
    start = time.perf_counter()

    def report(n, title, checks, budget_s):
        elapsed = time.perf_counter() - start
        checks = dict(checks)
        checks[f"runtime {elapsed:.1f}s < {budget_s:g}s"] = elapsed < budget_s
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
                  + ("" if ok else f"  failed: {'; '.join(failed)}"))
        assert ok, failed

    return report


@pytest.fixture(scope="module")
def stable_seed0():
    return harness.prepare_stable(synthetic.SyntheticConfig(seed=0, n_windows=30))


def scaled_clean(frames):
    raw = np.vstack([f.features[:, CLEAN] for f in frames])
    return RobustScaler().fit(raw).transform(raw)


def test_c01_jacobian_matches_finite_differences(criterion, small_models, small_frames):
    model = small_models.cdae
    X = small_models.scaled_clean(small_frames[7])
    points = X[np.random.default_rng(0).choice(len(X), 10, replace=False)]
    h = 1e-6
    worst = 0.0
    for x in points:
        J = model.jacobian(x)
        fd = np.empty_like(J)
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h
            fd[:, j] = (model.encode(x + e) - model.encode(x - e)) / (2 * h)
        worst = max(worst, np.max(np.abs(J - fd)) / np.max(np.abs(fd)))
    criterion(1, f"Jacobian vs central differences, max rel err {worst:.2e}",
              {"max relative error < 1e-4": worst < 1e-4}, 10)


def test_c02_contraction_penalty_lowers_jacobian_norm(criterion):
    rows = []
    for seed in range(3):
        X = scaled_clean(synthetic.generate_population(synthetic.SyntheticConfig(seed=seed, n_windows=2)))
        plain = train_cdae(X, CdaeTrainingConfig(lambda_c=0.0, seed=seed)).contraction(X).mean()
        pen = train_cdae(X, CdaeTrainingConfig(lambda_c=0.001, seed=seed)).contraction(X).mean()
        rows.append((plain, pen))
    plain_mean = np.mean([r[0] for r in rows])
    pen_mean = np.mean([r[1] for r in rows])
    criterion(2, f"mean |J|_F^2 {pen_mean:.3f} (lambda 1e-3) vs {plain_mean:.3f} (lambda 0)",
              {"mean over seeds strictly lower": pen_mean < plain_mean,
               "lower on every seed": all(p < q for q, p in rows)}, 300)


def test_c03_free_energy_oracle(criterion, small_models):
    grbm = small_models.grbm
    X = np.random.default_rng(0).normal(size=(1000, grbm.n_features_in_))
    got = grbm.visible_free_energy(X)
    oracle = np.array([term_sum_free_energy(x, grbm.visible_bias_, grbm.sigma_) for x in X])
    rel = np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-300))
    at_bias = grbm.visible_free_energy(grbm.visible_bias_[None, :])[0]
    criterion(3, f"free energy vs term-sum oracle, max rel err {rel:.1e}; F(b) = {at_bias}",
              {"relative error <= 1e-12": rel <= 1e-12, "F(b) == 0": at_bias == 0.0}, 5)


def test_c04_ejt_algebra(criterion, small_models, small_frames):
    frame = small_frames[7]
    small_models.scaled_clean(frame)
    center = cluster_centers(frame, role_labels(frame.role_probs)).center(GUARD)
    split = ejt_at(small_models.cdae, center)
    M = small_models.cdae.jacobian(center).T @ small_models.cdae.jacobian(center)
    V, lam = split.eigenvectors, split.eigenvalues
    recon = np.linalg.norm(V @ np.diag(lam) @ V.T - M)
    rng = np.random.default_rng(0)
    alphas = np.array([soft_alignment(d, split).alpha for d in rng.normal(size=(10_000, 17))])
    soft = soft_alignment(split.V_soft[:, 0], split).alpha
    stiff = soft_alignment(split.V_stiff[:, 0], split).alpha
    diag = soft_alignment(split.V_soft[:, 0] + split.V_stiff[:, 0], split).alpha
    criterion(4, f"EJT algebra: recon {recon:.1e}, k = {split.k}, 45-degree alpha {diag:.12f}",
              {"reconstruction < 1e-8": recon < 1e-8,
               "alpha in [0, 1] on 10,000 draws": bool(np.all((alphas >= 0) & (alphas <= 1))),
               "alpha(soft) == 1": abs(soft - 1) <= 1e-12, "alpha(stiff) == 0": abs(stiff) <= 1e-12,
               "alpha(45 degrees) = 0.5 +/- 1e-10": abs(diag - 0.5) <= 1e-10}, 30)


def test_c05_zscore_arithmetic(criterion):
    b = EjtBaseline(0.750, 0.113)
    z = [ejt_zscore(a, b) for a in (0.750, 0.524, 0.2551)]
    criterion(5, f"z-scores {z[0]:.4f}, {z[1]:.4f}, {z[2]:.4f}",
              {"0.750 -> 0": z[0] == 0.0, "0.524 -> -2.0": abs(z[1] + 2.0) < 1e-12,
               "0.2551 -> -4.38 +/- 0.01": abs(z[2] + 4.38) <= 0.01}, 1)


def test_c06_cca_oracle(criterion):
    Z1, Z2, *_ = planted_pair(0.8, 5000, seed=0)
    fit = fit_cca(Z1, Z2)
    A = np.random.default_rng(1).normal(size=(500, 6))
    ident = fit_cca(A, A, regularization=0.0)
    e = np.eye(len(fit.u1))
    same = rotation_angle(fit, fit)
    orth = rotation_angle(dataclasses.replace(fit, u1=e[0]), dataclasses.replace(fit, u1=e[1]))
    criterion(6, f"planted rho* 0.8 -> {fit.rho1:.4f}; identical views {ident.rho1:.10f}; "
                 f"theta {same:.1f} / {orth:.1f}",
              {"planted within 0.05": abs(fit.rho1 - 0.8) <= 0.05,
               "identical views 1 +/- 1e-8": abs(ident.rho1 - 1) <= 1e-8,
               "theta(identical) = 0": same == 0.0, "theta(orthogonal) = 90": abs(orth - 90) <= 1e-9},
              60)


def test_c07_activation_log_replay(criterion):
    expected = {"Jan 23-26": PRECURSOR, "Jan 27": REGIME_D, "Feb 05-13": REGIME_E, "Feb 20": REGIME_E,
                "Mar 06": REGIME_D, "Apr 03": MODE_F, "Apr 07-08": REGIME_K_CANDIDATE}
    results = fixtures.replay_all()
    checks = {f"{name} -> {label}": set(results[name][1]) == {label} for name, label in expected.items()}
    jan22 = next(r for r in fixtures.activation_log_rows() if r.name == "Jan 22")
    checks["Jan 22 exception documented"] = jan22.expected is None and "exception" in jan22.note
    criterion(7, "activation-log replay over 7 rows plus the Jan 22 exception", checks, 1)


def test_c08_scenario_detectability(criterion):
    checks = {}
    for seed in range(5):
        stable = harness.prepare_stable(synthetic.SyntheticConfig(seed=seed, n_windows=30))
        for kind in synthetic.EVENT_KINDS:
            out = harness.run_scenario(stable, synthetic.default_script(kind), seed=seed)
            checks[f"seed {seed} {kind}: detected"] = out.detected
            checks[f"seed {seed} {kind}: no false {out.target}"] = not out.false_positive_dates
    n_ok = sum(checks.values())
    criterion(8, f"4 scenarios x 5 seeds, {n_ok}/{len(checks)} checks", checks, 600)


def test_c09_null_separation(criterion, stable_seed0):
    models = stable_seed0.models
    state = harness.frame_state(stable_seed0.frames[20], models)
    res = harness.monte_carlo_null(models, iterations=200, seed=0, n_samples=state.n_relays,
                                   empirical_rho1=state.cca.rho1)
    criterion(9, f"rho1 {state.cca.rho1:.4f} vs null {res.null_mean:.4f} +/- {res.null_std:.4f}: "
                 f"{res.separation_sigma:.1f} sigma",
              {">= 5 null stds": res.separation_sigma >= 5.0}, 600)


def test_c10_fpr_harness(criterion):
    run = harness.fpr_harness(seed=0)
    f = run.fpr
    criterion(10, f"FPR over {len(run.records)} stable windows: CH5 {f['CH5_CV']:.3f}, "
                  f"CH6_GLOBAL {f['CH6_GLOBAL_EJT']:.3f}, CH1 {f['CH1_ROTATION']:.3f}",
              {"24 windows": len(run.records) == 24, "CH5 zero": f["CH5_CV"] == 0.0,
               "CH6_GLOBAL zero": f["CH6_GLOBAL_EJT"] == 0.0,
               "CH1 exceeds both": f["CH1_ROTATION"] > max(f["CH5_CV"], f["CH6_GLOBAL_EJT"])}, 120)


def test_c11_restart_age_statistic(criterion):
    confirmed = restart_age_bimodality(28.0 + np.array([-6.0, -3.0, 0.0, 3.0, 6.0]),
                                       603.0 + np.array([-60.0, -30.0, 0.0, 30.0, 60.0]))
    flags = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ages = rng.exponential(60.0, 400)
        split = rng.random(400) < 0.5
        flags += restart_age_bimodality(ages[split], ages[~split]).bimodal
    criterion(11, f"ratio {confirmed.ratio:.2f}, flag {confirmed.bimodal}; unimodal churn flagged {flags}/100",
              {"ratio in [21, 22]": 21 <= confirmed.ratio <= 22, "bimodal flag": confirmed.bimodal,
               "unimodal flag false in >= 95/100": 100 - flags >= 95}, 30)


CLI_CONFIG = """
[paths]
store = store
[training]
start = 2026-01-01
end = 2026-01-08
seed = 0
[baseline]
start = 2026-01-01
end = 2026-01-15
[sweep]
start = 2026-01-16
"""


def _cli_run(root):
    root.mkdir()
    cfg = root / "pipeline.ini"
    cfg.write_text(CLI_CONFIG)
    codes = [cli.main(list(map(str, argv))) for argv in (
        ("synth", "--config", cfg, "--relays", 2000, "--windows", 24, "--seed", 0),
        ("train", "--config", cfg, "--seed", 0),
        ("baseline", "--config", cfg),
        ("sweep", "--config", cfg, "--seed", 0, "--out", root / "sweep.ndjson"),
    )]
    files = ("models/encoder.rgm", "models/grbm.rgm", "models/baselines.json", "sweep.ndjson")
    return codes, {f: (root / f).read_bytes() for f in files}


def test_c12_determinism(criterion, tmp_path):
    a_codes, a = _cli_run(tmp_path / "a")
    b_codes, b = _cli_run(tmp_path / "b")
    checks = {"all commands exit 0": a_codes == b_codes == [0, 0, 0, 0]}
    checks.update({f"{name} byte-identical": a[name] == b[name] for name in a})
    criterion(12, "train + sweep twice with equal seeds", checks, 300)
