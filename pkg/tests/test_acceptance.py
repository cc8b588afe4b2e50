"""Acceptance gate: ten numbered criteria, one printed pass/fail line each.

Determinism (criterion 10) is judged on timing-free result files: wall-clock
columns are excluded because elapsed time is not reproducible bit-for-bit.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from svbfit import (
    AslPcaslDesign,
    Custom,
    DesignGrid,
    GaussianSpec,
    LinearModel,
    OptimizerConfig,
    PosteriorScenario,
    PriorScenario,
    Problem,
    SimulationSpec,
    Structure,
    SweepSpec,
    elbo_gradient,
    estimate_elbo,
    fit,
    get_model,
    kl_mvn,
    make_init,
    make_prior,
    normalize_components,
    oracle_linear_conjugate,
    oracle_mcmc,
    oracle_nlls,
    run_init_study,
    run_sweep,
    simulate,
)
from svbfit.harness import write_rows_csv
from svbfit.models import model_evaluate

ARTIFACT_DIR = Path(tempfile.mkdtemp(prefix="svbfit-acceptance-"))
_CACHE = {}

SHARED_SIM = SimulationSpec(n_points=100, noise_sd=1.0, n_realizations=100, seed=42)
SHARED_PRIOR = make_prior(PriorScenario.INFORMATIVE, SHARED_SIM)
SHARED_INIT = make_init(PosteriorScenario.TRUE, SHARED_PRIOR, SHARED_SIM)

LEARNING_RATE_GRID = (0.005, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5)


def _cached(key, fn):
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


def _report(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {num:2d}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {num}: {detail}"


# --- criterion 1: pathwise gradients match finite differences -------------------


def _fd_gradient(prob, q, prior, eps, step=1e-6):
    """Central differences in the optimized coordinates: mean entries,
    log-diagonal factor entries, strict-lower factor entries."""
    p = q.dim

    def value(mean, factor):
        spec = GaussianSpec(mean=mean, factor=factor, structure=q.structure)
        return estimate_elbo(prob, spec, prior, eps).value

    d_mean = np.zeros(p)
    for i in range(p):
        up, dn = q.mean.copy(), q.mean.copy()
        up[i] += step
        dn[i] -= step
        d_mean[i] = (value(up, q.factor) - value(dn, q.factor)) / (2 * step)

    d_factor = np.zeros((p, p))
    for i in range(p):
        for j in range(i + 1):
            up, dn = q.factor.copy(), q.factor.copy()
            if i == j:
                up[i, i] = np.exp(np.log(q.factor[i, i]) + step)
                dn[i, i] = np.exp(np.log(q.factor[i, i]) - step)
            else:
                if q.structure is Structure.DIAGONAL:
                    continue
                up[i, j] += step
                dn[i, j] -= step
            d_factor[i, j] = (value(q.mean, up) - value(q.mean, dn)) / (2 * step)
    return d_mean, d_factor


def _gradient_cases():
    rng = np.random.default_rng(0)
    cases = []

    design = DesignGrid(times=np.linspace(0, 5, 30))
    biexp = get_model("biexp")
    y = model_evaluate(biexp, np.array([10, 1, 10, 10.0]), design)
    y = y + rng.normal(0, 1.0, 30)
    cases.append((
        "biexp", Problem(y=y, model=biexp, design=design),
        np.array([10, 1, 10, 10, 0.0]),
    ))

    linear = LinearModel(degree=2, basis="fourier", period=5.0)
    x = linear.design_matrix(design)
    y = x @ np.array([2.0, -1.0, 1.5]) + rng.normal(0, 0.3, 30)
    cases.append((
        "linear", Problem(y=y, model=linear, design=design),
        np.array([2.0, -1.0, 1.5, np.log(0.09)]),
    ))

    asl_design = AslPcaslDesign(
        plds=np.array([0.25, 0.5, 0.75, 1.0, 1.25, 1.5]), label_duration=1.8
    )
    asl = get_model("asl-pcasl")
    y = model_evaluate(asl, np.array([10.0, 0.625]), asl_design)
    y = y + rng.normal(0, 0.1, 6)
    cases.append((
        "asl", Problem(y=y, model=asl, design=asl_design),
        np.array([10.0, 0.625, np.log(0.01)]),
    ))
    return cases


def _random_q(rng, ref, structure, mean_jitter, sd_center, sd_spread):
    p = ref.size
    mean = ref + mean_jitter * rng.standard_normal(p)
    factor = np.diag(np.exp(np.log(sd_center) + sd_spread * rng.standard_normal(p)))
    if structure is Structure.FULL:
        lower = np.tril(0.02 * rng.standard_normal((p, p)), k=-1)
        factor = factor + lower
    return GaussianSpec(mean=mean, factor=factor, structure=structure)


def test_criterion_01_gradient_matches_finite_differences(capsys):
    prior_by_dim = {
        5: GaussianSpec.from_mean_sd(np.array([10, 1, 10, 10, 0.0]), np.full(5, 2.0)),
        4: GaussianSpec.from_mean_sd(np.array([2, -1, 1.5, np.log(0.09)]), np.full(4, 2.0)),
        3: GaussianSpec.from_mean_sd(np.array([10, 0.625, np.log(0.01)]), np.full(3, 2.0)),
    }
    worst = 0.0
    for name, prob, ref in _gradient_cases():
        prior = prior_by_dim[ref.size]
        for structure in (Structure.FULL, Structure.DIAGONAL):
            rng = np.random.default_rng(abs(hash((name, structure.value))) % 2**32)
            mean_jitter = 0.02 if name == "asl" else 0.1
            for _ in range(100):
                q = _random_q(rng, ref, structure, mean_jitter, 0.02, 0.3)
                eps = rng.standard_normal((2, ref.size))
                grad = elbo_gradient(prob, q, prior, eps)
                fd_mean, fd_factor = _fd_gradient(prob, q, prior, eps)
                for got, want in ((grad.d_mean, fd_mean), (grad.d_factor, fd_factor)):
                    scale = np.maximum(np.abs(want), np.abs(got))
                    err = np.abs(got - want) - (1e-8 + 1e-5 * scale)
                    worst = max(worst, float(err.max()))
    ok = worst <= 0.0
    _report(capsys, 1, ok,
            f"600 random points x 3 models x 2 structures; worst excess over "
            f"(1e-8 abs + 1e-5 rel) tolerance = {worst:.3e}")


# --- criterion 2: analytic Gaussian divergence ------------------------------------


def test_criterion_02_kl_against_quadrature_and_monte_carlo(capsys):
    rng = np.random.default_rng(1)
    worst_quad = 0.0
    for _ in range(50):
        mq, mp = rng.normal(0, 3, 2)
        sq, sp = np.exp(rng.normal(0, 0.7, 2))
        q = GaussianSpec.from_mean_sd(np.array([mq]), np.array([sq]))
        p = GaussianSpec.from_mean_sd(np.array([mp]), np.array([sp]))
        analytic = kl_mvn(q, p)

        def integrand(x):
            log_q = -0.5 * ((x - mq) / sq) ** 2 - np.log(sq * np.sqrt(2 * np.pi))
            log_p = -0.5 * ((x - mp) / sp) ** 2 - np.log(sp * np.sqrt(2 * np.pi))
            return np.exp(log_q) * (log_q - log_p)

        numeric, _ = quad(integrand, mq - 14 * sq, mq + 14 * sq, limit=200)
        worst_quad = max(worst_quad, abs(analytic - numeric))

    worst_z = 0.0
    for _ in range(10):
        mean_q = rng.normal(0, 2, 3)
        mean_p = rng.normal(0, 2, 3)
        a = rng.normal(0, 0.5, (3, 3))
        q = GaussianSpec.from_mean_cov(mean_q, a @ a.T + np.eye(3))
        b = rng.normal(0, 0.5, (3, 3))
        p = GaussianSpec.from_mean_cov(mean_p, b @ b.T + np.eye(3))
        analytic = kl_mvn(q, p)
        eps = rng.standard_normal((1_000_000, 3))
        draws = q.mean + eps @ q.factor.T

        def logpdf_many(spec, x):
            diff = x - spec.mean
            sol = np.linalg.solve(spec.factor, diff.T).T
            logdet = np.sum(np.log(np.diag(spec.factor)))
            k = spec.dim
            return -0.5 * np.sum(sol**2, axis=1) - logdet - 0.5 * k * np.log(2 * np.pi)

        log_ratio = logpdf_many(q, draws) - logpdf_many(p, draws)
        mc = log_ratio.mean()
        se = log_ratio.std(ddof=1) / np.sqrt(log_ratio.size)
        worst_z = max(worst_z, abs(analytic - mc) / se)

    ok = worst_quad <= 1e-6 and worst_z <= 4.0
    _report(capsys, 2, ok,
            f"quadrature worst |diff| = {worst_quad:.2e} (tol 1e-6); "
            f"Monte-Carlo worst |z| = {worst_z:.2f} (tol 4 se)")


# --- criterion 3: linear-Gaussian exactness ----------------------------------------


def _run_criterion_3():
    model = LinearModel(degree=2, basis="fourier", period=5.0)
    design = DesignGrid(times=np.linspace(0, 5, 50))
    x = model.design_matrix(design)
    rng = np.random.default_rng(0)
    sd = 0.3
    lam = float(np.log(sd**2))
    truth = np.array([2.0, -1.0, 1.5])
    y = x @ truth + rng.normal(0, sd, 50)

    theta_prior = GaussianSpec.from_mean_sd(np.zeros(3), np.full(3, 3.0))
    exact = oracle_linear_conjugate(x, y, np.exp(-lam), theta_prior)

    prior = GaussianSpec.from_mean_sd(
        np.array([0, 0, 0, lam]), np.array([3, 3, 3, 1e-6])
    )
    prob = Problem(y=y, model=model, design=design)
    init = Custom(mean=prior.mean, sd=np.array([1, 1, 1, 1e-6]))
    cfg = OptimizerConfig(learning_rate=0.05, sample_count=50, batch_size=None,
                          max_epochs=2000, seed=7, structure=Structure.FULL)
    res = fit(prob, prior, init, cfg)

    est_mean = res.posterior.mean[:3]
    est_sds = res.posterior.marginal_sds()[:3]
    rows = [
        {
            "parameter": f"c{j}",
            "posterior_mean": float(est_mean[j]),
            "posterior_sd": float(est_sds[j]),
            "exact_mean": float(exact.mean[j]),
            "exact_sd": float(exact.marginal_sds()[j]),
        }
        for j in range(3)
    ]
    mean_err = float(np.max(np.abs(est_mean - exact.mean) / np.abs(exact.mean)))
    sd_err = float(np.max(np.abs(est_sds - exact.marginal_sds()) / exact.marginal_sds()))
    return rows, mean_err, sd_err


def test_criterion_03_linear_gaussian_exactness(capsys):
    rows, mean_err, sd_err = _cached("c3", _run_criterion_3)
    write_rows_csv(ARTIFACT_DIR / "criterion3.csv", rows)
    ok = mean_err <= 0.02 and sd_err <= 0.05
    _report(capsys, 3, ok,
            f"vs conjugate posterior: worst mean error {mean_err:.2%} (tol 2%), "
            f"worst sd error {sd_err:.2%} (tol 5%)")


# --- criterion 4: biexponential recovery vs truth and least squares ------------------


def _run_criterion_4(include_timing=True):
    sweep = SweepSpec(learning_rates=(0.05,), sample_counts=(20,), batch_sizes=(10,),
                      structures=(Structure.FULL,), max_epochs=500, seed=1)
    result = run_sweep(SHARED_SIM, sweep, SHARED_PRIOR, SHARED_INIT,
                       include_timing=include_timing)
    cell = result.cells[0]
    svb = normalize_components(np.stack([r.posterior.mean[:4] for r in cell.results]))
    ps = simulate(SHARED_SIM)
    nlls = normalize_components(np.stack([
        oracle_nlls(p.y, p.model, p.design, SHARED_SIM.truth).theta
        for p in ps.problems
    ]))
    svb_med = np.median(svb, axis=0)
    nlls_med = np.median(nlls, axis=0)
    rows = list(result.rows)
    for j, name in enumerate(result.param_names):
        rows[0][f"{name}_nlls_median"] = float(nlls_med[j])
    return rows, svb_med, nlls_med


def test_criterion_04_biexponential_recovery(capsys):
    rows, svb_med, nlls_med = _cached("c4", lambda: _run_criterion_4())
    write_rows_csv(ARTIFACT_DIR / "criterion4.csv", _strip_timing(rows))
    truth = SHARED_SIM.truth
    vs_truth = float(np.max(np.abs(svb_med - truth) / truth))
    vs_nlls = float(np.max(np.abs(svb_med - nlls_med) / np.abs(nlls_med)))
    ok = vs_truth <= 0.15 and vs_nlls <= 0.10
    _report(capsys, 4, ok,
            f"medians over 100 noisy realizations: worst error vs truth "
            f"{vs_truth:.2%} (tol 15%), vs least squares {vs_nlls:.2%} (tol 10%)")


# --- criterion 5: learning-rate ordering ---------------------------------------------


def _strip_timing(rows):
    return [
        {k: v for k, v in row.items()
         if k not in ("mean_wall_time_s", "median_wall_time_s")}
        for row in rows
    ]


def _run_criterion_5(include_timing=True):
    sweep = SweepSpec(learning_rates=LEARNING_RATE_GRID, sample_counts=(20,),
                      batch_sizes=(None,), structures=(Structure.FULL,),
                      max_epochs=500, seed=1)
    result = run_sweep(SHARED_SIM, sweep, SHARED_PRIOR, SHARED_INIT,
                       include_timing=include_timing)
    return result.rows


def test_criterion_05_learning_rate_ordering(capsys):
    rows = _cached("c5", lambda: _run_criterion_5())
    write_rows_csv(ARTIFACT_DIR / "criterion5.csv", _strip_timing(rows))
    grid = [row["learning_rate"] for row in rows]
    mean_f = [row["mean_best_F"] for row in rows]
    best_idx = int(np.argmax(mean_f))
    idx_05 = grid.index(0.05)
    frac_unconverged_half = 1.0 - rows[grid.index(0.5)]["fraction_converged"]
    ok = abs(best_idx - idx_05) <= 1 and frac_unconverged_half >= 0.5
    _report(capsys, 5, ok,
            f"mean best F peaks at learning rate {grid[best_idx]} "
            f"(0.05 within one grid step: {abs(best_idx - idx_05) <= 1}); "
            f"rate 0.5 unconverged in {frac_unconverged_half:.0%} of realizations "
            f"(need >= 50%)")


# --- criterion 6: minibatching converges faster in wall time ---------------------------


def _run_criterion_6(include_timing=True):
    sweep = SweepSpec(learning_rates=(0.05,), sample_counts=(20,),
                      batch_sizes=(10, None), structures=(Structure.FULL,),
                      max_epochs=3000, seed=1)
    result = run_sweep(SHARED_SIM, sweep, SHARED_PRIOR, SHARED_INIT,
                       include_timing=include_timing)
    return result.rows


def test_criterion_06_batch_size_benefit(capsys):
    rows = _cached("c6", lambda: _run_criterion_6())
    write_rows_csv(ARTIFACT_DIR / "criterion6.csv", _strip_timing(rows))
    by_batch = {row["batch_size"]: row for row in rows}
    wall_10 = by_batch[10]["median_wall_time_s"]
    wall_n = by_batch["N"]["median_wall_time_s"]
    ok = wall_10 is not None and wall_n is not None and wall_10 < wall_n
    _report(capsys, 6, ok,
            f"median wall time to convergence: batch 10 = "
            f"{wall_10 if wall_10 is None else round(wall_10, 2)}s, "
            f"full batch = {wall_n if wall_n is None else round(wall_n, 2)}s "
            f"(batch 10 must be strictly faster)")


# --- criterion 7: free energy insensitive to sample count beyond a few draws ----------


def _run_criterion_7(include_timing=True):
    sweep = SweepSpec(learning_rates=(0.05,), sample_counts=(10, 100),
                      batch_sizes=(10,), structures=(Structure.FULL,),
                      max_epochs=500, seed=1)
    result = run_sweep(SHARED_SIM, sweep, SHARED_PRIOR, SHARED_INIT,
                       include_timing=include_timing)
    return result.rows


def test_criterion_07_sample_size_floor(capsys):
    rows = _cached("c7", lambda: _run_criterion_7())
    write_rows_csv(ARTIFACT_DIR / "criterion7.csv", _strip_timing(rows))
    by_l = {row["sample_count"]: row["mean_best_F"] for row in rows}
    rel = abs(by_l[10] - by_l[100]) / abs(by_l[100])
    ok = rel <= 0.01
    _report(capsys, 7, ok,
            f"mean best F: 10 draws vs 100 draws differ by {rel:.3%} (tol 1%)")


# --- criterion 8: initialization robustness ---------------------------------------------


def _run_criterion_8(include_timing=True):
    sweep = SweepSpec(learning_rates=(0.05,), sample_counts=(20,), batch_sizes=(10,),
                      structures=(Structure.FULL,), max_epochs=3000, seed=1)
    result = run_init_study(
        SHARED_SIM, sweep,
        prior_scenarios=(PriorScenario.INFORMATIVE,),
        posterior_scenarios=(PosteriorScenario.TRUE, PosteriorScenario.DATA,
                             PosteriorScenario.WRONG),
        include_timing=include_timing,
    )
    return result.rows


def test_criterion_08_initialization_robustness(capsys):
    rows = _cached("c8", lambda: _run_criterion_8())
    write_rows_csv(ARTIFACT_DIR / "criterion8.csv", _strip_timing(rows))
    mean_f = {row["initial_posterior"]: row["mean_best_F"] for row in rows}
    epochs = {row["initial_posterior"]: row["median_epochs_to_convergence"]
              for row in rows}
    values = list(mean_f.values())
    spread = (max(values) - min(values)) / abs(min(values))
    slower = epochs["wrong"] >= epochs["true"]
    ok = spread <= 0.02 and slower
    _report(capsys, 8, ok,
            f"mean best F spread across True/Data/Wrong starts = {spread:.3%} "
            f"(tol 2%); Wrong start median epochs {epochs['wrong']:.0f} >= "
            f"True start {epochs['true']:.0f}: {slower}")


# --- criterion 9: agreement with Markov-chain Monte Carlo -------------------------------


def _run_criterion_9():
    sim = SimulationSpec(n_points=50, noise_sd=1.0, n_realizations=1, seed=0)
    prob = simulate(sim).problems[0]
    prior = make_prior(PriorScenario.INFORMATIVE, sim)
    init = make_init(PosteriorScenario.TRUE, prior, sim)
    cfg = OptimizerConfig(learning_rate=0.05, sample_count=20, batch_size=10,
                          max_epochs=1000, seed=1)
    res = fit(prob, prior, init, cfg)
    mcmc = oracle_mcmc(prob, prior, n_samples=40_000, seed=0)
    rows = [
        {
            "parameter": name,
            "svb_mean": float(res.posterior.mean[j]),
            "mcmc_mean": float(mcmc.means[j]),
            "mcmc_standard_error": float(mcmc.standard_errors[j]),
        }
        for j, name in enumerate(list(prob.model.param_names) + ["noise_lambda"])
    ]
    return rows, res.posterior.mean, mcmc


def test_criterion_09_mcmc_cross_check(capsys):
    rows, svb_mean, mcmc = _cached("c9", _run_criterion_9)
    write_rows_csv(ARTIFACT_DIR / "criterion9.csv", rows)
    tol = 3 * mcmc.standard_errors + 0.10 * np.abs(mcmc.means)
    diffs = np.abs(svb_mean - mcmc.means)
    margin = float(np.max(diffs / tol))
    ok = margin <= 1.0
    _report(capsys, 9, ok,
            f"all posterior means within 3 sampler standard errors + 10%; "
            f"worst |diff|/tolerance = {margin:.2f} (need <= 1)")


# --- criterion 10: byte-identical reruns ---------------------------------------------


def test_criterion_10_determinism(capsys):
    reruns = {
        "criterion3.csv": lambda: _run_criterion_3()[0],
        "criterion4.csv": lambda: _strip_timing(_run_criterion_4(include_timing=False)[0]),
        "criterion5.csv": lambda: _strip_timing(_run_criterion_5(include_timing=False)),
        "criterion6.csv": lambda: _strip_timing(_run_criterion_6(include_timing=False)),
        "criterion7.csv": lambda: _strip_timing(_run_criterion_7(include_timing=False)),
        "criterion8.csv": lambda: _strip_timing(_run_criterion_8(include_timing=False)),
        "criterion9.csv": lambda: _run_criterion_9()[0],
    }
    mismatched = []
    for name, recompute in reruns.items():
        first = ARTIFACT_DIR / name
        assert first.exists(), f"{name} missing; earlier criterion did not run"
        again = ARTIFACT_DIR / f"rerun-{name}"
        write_rows_csv(again, recompute())
        if first.read_bytes() != again.read_bytes():
            mismatched.append(name)
    ok = not mismatched
    _report(capsys, 10, ok,
            "criteria 3-9 result files byte-identical across reruns"
            + ("" if ok else f"; mismatches: {mismatched}"))
