"""Simulated-data generation, convergence sweeps, and verification oracles.

The sweeps reproduce the biexponential convergence experiments: varying
learning rate, posterior sample count and batch size over many noisy
realizations, scoring cells by mean best free energy and time to convergence.
Convergence within a sweep is judged against each realization's best free
energy across all cells (so an unstable cell can fail to converge even though
its own trace has a maximum).
"""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import least_squares

from .errors import DimensionMismatch, NonConvergence, NotPositiveDefinite
from .free_energy import log_likelihood
from .gaussian import GaussianSpec, Structure, cholesky, mvn_logpdf
from .models import DesignGrid, get_model, model_evaluate, model_jacobian
from .optimizer import (
    Custom,
    DataDriven,
    OptimizerConfig,
    PriorMatched,
    Problem,
    ProblemSet,
    convergence_time,
    fit_many,
)

log = logging.getLogger(__name__)

# Paper-style axis menus for the convergence experiments.
LEARNING_RATE_GRID = (0.005, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5)
SAMPLE_COUNT_GRID = (1, 2, 5, 10, 20, 50, 100, 200)
BATCH_SIZE_GRID = (5, 10, 20, 50, 100)

BIEXP_TRUTH = np.array([10.0, 1.0, 10.0, 10.0])


@dataclass(frozen=True)
class SimulationSpec:
    model_name: str = "biexp"
    truth: np.ndarray = field(default_factory=lambda: BIEXP_TRUTH.copy())
    n_points: int = 100
    noise_sd: float = 1.0
    n_realizations: int = 1000
    seed: int = 0
    t_min: float = 0.0
    t_max: float = 5.0

    def __post_init__(self):
        truth = np.array(self.truth, dtype=float)
        truth.setflags(write=False)
        object.__setattr__(self, "truth", truth)
        if self.noise_sd <= 0:
            raise DimensionMismatch("noise_sd must be positive")
        if self.n_points < 2:
            raise DimensionMismatch("n_points must be >= 2")

    @property
    def noise_lambda(self) -> float:
        """True noise coordinate lam = -log(phi) = log(sd^2)."""
        return float(np.log(self.noise_sd**2))

    @property
    def truth_latent(self) -> np.ndarray:
        return np.concatenate([self.truth, [self.noise_lambda]])

    def design(self) -> DesignGrid:
        return DesignGrid(times=np.linspace(self.t_min, self.t_max, self.n_points))


def simulate(spec: SimulationSpec) -> ProblemSet:
    """Noiseless model curve plus iid N(0, sd^2) draws, one series per row."""
    model = get_model(spec.model_name)
    design = spec.design()
    curve = model_evaluate(model, spec.truth, design)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((spec.n_realizations, spec.n_points)) * spec.noise_sd
    return ProblemSet(
        problems=tuple(Problem(y=curve + row, model=model, design=design) for row in noise)
    )


def normalize_components(theta_est) -> np.ndarray:
    """Relabel biexponential components so the first has the slower rate."""
    theta = np.asarray(theta_est, dtype=float)
    if theta.shape[-1] != 4:
        raise DimensionMismatch("expected (A1, R1, A2, R2)")
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    out = theta.copy()
    swap = theta[:, 1] > theta[:, 3]
    out[swap] = theta[swap][:, [2, 3, 0, 1]]
    return out[0] if single else out


# --- prior / initial-posterior scenarios ------------------------------------


class PriorScenario(Enum):
    INFORMATIVE = "informative"
    NONINFORMATIVE = "noninformative"


class PosteriorScenario(Enum):
    TRUE = "true"
    DATA = "data"
    WRONG = "wrong"
    UNINFORMED = "uninformed"


def make_prior(kind: PriorScenario, spec: SimulationSpec) -> GaussianSpec:
    p = spec.truth.shape[0] + 1
    if kind is PriorScenario.INFORMATIVE:
        return GaussianSpec.from_mean_sd(spec.truth_latent, np.full(p, 2.0))
    return GaussianSpec.from_mean_sd(np.full(p, 1.0), np.full(p, 1e6))


def make_init(kind: PosteriorScenario, prior: GaussianSpec, spec: SimulationSpec):
    sds = prior.marginal_sds()
    if kind is PosteriorScenario.TRUE:
        return Custom(mean=spec.truth_latent, sd=sds)
    if kind is PosteriorScenario.DATA:
        return DataDriven(base_mean=spec.truth_latent)
    if kind is PosteriorScenario.WRONG:
        # amplitudes deliberately far (100), rates 1.0; neutral noise start
        if prior.dim != 5:
            raise DimensionMismatch("the Wrong scenario is defined for the biexponential")
        return Custom(mean=np.array([100.0, 1.0, 100.0, 1.0, 0.0]), sd=sds)
    return Custom(mean=np.full(prior.dim, 1.0), sd=np.full(prior.dim, 1e6))


# --- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    learning_rates: tuple = (0.05,)
    sample_counts: tuple = (20,)
    batch_sizes: tuple = (None,)  # None means B = N
    structures: tuple = (Structure.FULL,)
    max_epochs: int = 500
    convergence_tolerance_fraction: float = 0.01
    seed: int = 0

    def cells(self, n: int):
        sizes = []
        for b in self.batch_sizes:
            if b is not None and b > n:
                log.info("dropping batch size %d > N=%d from sweep", b, n)
                continue
            sizes.append(b)
        return list(
            itertools.product(self.learning_rates, self.sample_counts, sizes, self.structures)
        )


@dataclass
class SweepCell:
    learning_rate: float
    sample_count: int
    batch_size: int | None
    structure: Structure
    results: list
    traces: np.ndarray  # (M, epochs)
    epoch_wall_times: np.ndarray
    wall_time_s: float


@dataclass
class SweepResult:
    rows: list
    cells: list
    param_names: tuple

    def to_csv(self, path):
        write_rows_csv(path, self.rows)


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path, rows):
    """Rows of dicts to CSV with a header; floats at full precision."""
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format_cell(row[f]) for f in fields])


def _cell_summary(cell: SweepCell, conv_epochs, model, param_names, include_timing):
    best = np.array(
        [r.best_free_energy if r.best_free_energy is not None else np.nan for r in cell.results]
    )
    n_failed = sum(r.failed for r in cell.results)
    converged = np.array([e is not None for e in conv_epochs])
    epochs_arr = np.array([e if e is not None else np.nan for e in conv_epochs], dtype=float)
    wall_arr = np.array(
        [
            cell.epoch_wall_times[int(e)] if e is not None else np.nan
            for e in conv_epochs
        ]
    )
    row = {
        "learning_rate": cell.learning_rate,
        "sample_count": cell.sample_count,
        "batch_size": cell.batch_size if cell.batch_size is not None else "N",
        "structure": cell.structure.value,
        "mean_best_F": float(np.nanmean(best)) if np.any(np.isfinite(best)) else None,
        "mean_convergence_epoch": (
            float(np.nanmean(epochs_arr)) if np.any(converged) else None
        ),
        "fraction_converged": float(np.mean(converged)),
        "n_failed": int(n_failed),
    }
    if include_timing:
        row["mean_wall_time_s"] = float(np.nanmean(wall_arr)) if np.any(converged) else None
        row["median_wall_time_s"] = (
            float(np.nanmedian(wall_arr)) if np.any(converged) else None
        )
    estimates = np.stack([r.posterior.mean[:-1] for r in cell.results])
    if model.name == "biexp":
        estimates = normalize_components(estimates)
    for j, name in enumerate(param_names):
        q1, med, q3 = np.percentile(estimates[:, j], [25, 50, 75])
        row[f"{name}_median"] = float(med)
        row[f"{name}_iqr"] = float(q3 - q1)
    return row


def _cross_cell_convergence(cells, tolerance):
    """Per-cell convergence epochs judged against each realization's best F
    over all cells (None where a trace never reaches the threshold)."""
    best_all = np.full(cells[0].traces.shape[0], -np.inf)
    for cell in cells:
        with np.errstate(invalid="ignore"):
            cell_best = np.nanmax(
                np.where(np.isfinite(cell.traces), cell.traces, -np.inf), axis=1
            )
        best_all = np.maximum(best_all, cell_best)
    out = []
    for cell in cells:
        threshold = best_all - tolerance * np.abs(best_all)
        epochs = []
        for i in range(cell.traces.shape[0]):
            hits = np.nonzero(
                np.isfinite(cell.traces[i]) & (cell.traces[i] >= threshold[i])
            )[0]
            epochs.append(int(hits[0]) if hits.size else None)
        out.append(epochs)
    return out


def _run_cells(problem_set, prior, init, sweep: SweepSpec, cell_coords):
    cells = []
    n = problem_set.design.n
    for alpha, l_count, b, structure in cell_coords:
        config = OptimizerConfig(
            learning_rate=alpha,
            sample_count=l_count,
            batch_size=b,
            max_epochs=sweep.max_epochs,
            seed=sweep.seed,
            convergence_tolerance_fraction=sweep.convergence_tolerance_fraction,
            structure=structure,
        )
        t0 = time.perf_counter()
        results, _ = fit_many(problem_set, prior, init, config, on_error="isolate")
        elapsed = time.perf_counter() - t0
        cells.append(
            SweepCell(
                learning_rate=alpha,
                sample_count=l_count,
                batch_size=b,
                structure=structure,
                results=results,
                traces=np.stack([r.free_energy_trace for r in results]),
                epoch_wall_times=results[0].epoch_wall_times,
                wall_time_s=elapsed,
            )
        )
    return cells


def run_sweep(sim: SimulationSpec, sweep: SweepSpec, prior: GaussianSpec, init,
              include_timing: bool = True) -> SweepResult:
    """One row per (alpha, L, B, structure) cell over a shared simulation."""
    problem_set = simulate(sim)
    model = problem_set.model
    param_names = tuple(model.param_names)
    cells = _run_cells(problem_set, prior, init, sweep, sweep.cells(sim.n_points))
    conv = _cross_cell_convergence(cells, sweep.convergence_tolerance_fraction)
    rows = [
        _cell_summary(cell, conv_epochs, model, param_names, include_timing)
        for cell, conv_epochs in zip(cells, conv)
    ]
    return SweepResult(rows=rows, cells=cells, param_names=param_names)


def run_init_study(sim: SimulationSpec, sweep: SweepSpec,
                   prior_scenarios=tuple(PriorScenario),
                   posterior_scenarios=tuple(PosteriorScenario),
                   include_timing: bool = True) -> SweepResult:
    """Cross product of prior and initial-posterior scenarios.

    Convergence is judged against the per-realization best F within the same
    prior scenario (free energies are not comparable across priors).
    """
    problem_set = simulate(sim)
    model = problem_set.model
    param_names = tuple(model.param_names)
    if len(sweep.learning_rates) != 1 or len(sweep.sample_counts) != 1 or len(sweep.batch_sizes) != 1:
        raise ValueError("the init study uses a single optimizer setting")
    alpha = sweep.learning_rates[0]
    l_count = sweep.sample_counts[0]
    b = sweep.batch_sizes[0]
    rows = []
    all_cells = []
    for prior_kind in prior_scenarios:
        prior = make_prior(prior_kind, sim)
        cells = []
        kinds = list(posterior_scenarios)
        for post_kind in kinds:
            init = make_init(post_kind, prior, sim)
            coords = [(alpha, l_count, b, sweep.structures[0])]
            cells.extend(_run_cells(problem_set, prior, init, sweep, coords))
        conv = _cross_cell_convergence(cells, sweep.convergence_tolerance_fraction)
        for post_kind, cell, conv_epochs in zip(kinds, cells, conv):
            row = _cell_summary(cell, conv_epochs, model, param_names, include_timing)
            row["prior"] = prior_kind.value
            row["initial_posterior"] = post_kind.value
            epochs = [e for e in conv_epochs if e is not None]
            row["median_epochs_to_convergence"] = (
                float(np.median(epochs)) if epochs else None
            )
            rows.append(row)
        all_cells.extend(cells)
    # put scenario keys first for readability
    rows = [
        {
            "prior": r["prior"],
            "initial_posterior": r["initial_posterior"],
            **{k: v for k, v in r.items() if k not in ("prior", "initial_posterior")},
        }
        for r in rows
    ]
    return SweepResult(rows=rows, cells=all_cells, param_names=param_names)


# --- oracles -----------------------------------------------------------------


@dataclass(frozen=True)
class NllsResult:
    theta: np.ndarray
    residual_sum_squares: float
    n_evaluations: int


def oracle_nlls(y, model, design, theta0, max_evaluations: int = 500) -> NllsResult:
    """Levenberg-Marquardt least squares using the model's analytic Jacobian."""
    y = np.asarray(y, dtype=float)

    def residual(theta):
        return model_evaluate(model, theta, design) - y

    def jac(theta):
        return model_jacobian(model, theta, design)

    res = least_squares(
        residual, np.asarray(theta0, dtype=float), jac=jac, method="lm",
        max_nfev=max_evaluations,
    )
    if not res.success:
        raise NonConvergence(f"least squares did not converge: {res.message}")
    return NllsResult(
        theta=res.x,
        residual_sum_squares=float(2.0 * res.cost),
        n_evaluations=int(res.nfev),
    )


@dataclass(frozen=True)
class McmcResult:
    means: np.ndarray
    cov: np.ndarray
    ess: np.ndarray
    standard_errors: np.ndarray
    acceptance_rate: float
    samples: np.ndarray


def _ess_autocorr(samples: np.ndarray) -> np.ndarray:
    """Effective sample size per coordinate (Geyer initial positive sequence)."""
    n, p = samples.shape
    out = np.empty(p)
    for j in range(p):
        x = samples[:, j] - samples[:, j].mean()
        var = np.dot(x, x) / n
        if var == 0:
            out[j] = n
            continue
        nfft = 1 << (2 * n - 1).bit_length()
        f = np.fft.rfft(x, nfft)
        acf = np.fft.irfft(f * np.conj(f), nfft)[:n].real / (n * var)
        # sum consecutive pairs until one goes non-positive
        tau = 1.0
        for lag in range(1, n - 1, 2):
            pair = acf[lag] + acf[lag + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
        out[j] = n / tau
    return out


def oracle_mcmc(problem: Problem, prior: GaussianSpec, n_samples: int, seed: int,
                burn_in: int | None = None, initial=None) -> McmcResult:
    """Random-walk Metropolis over the latent vector (model params + lam).

    Step scale adapts during burn-in only; the kept chain is a fixed-kernel
    Metropolis sampler targeting prior x likelihood.
    """
    rng = np.random.default_rng(seed)
    p = prior.dim
    burn = burn_in if burn_in is not None else max(n_samples // 4, 500)
    x = np.asarray(initial, dtype=float).copy() if initial is not None else prior.mean.copy()

    def log_target(z):
        try:
            g = model_evaluate(problem.model, z[:-1], problem.design)
        except Exception:
            return -np.inf
        with np.errstate(over="ignore"):
            ll = log_likelihood(problem.y, g, z[-1])
        lp = mvn_logpdf(prior, z)
        total = ll + lp
        return total if np.isfinite(total) else -np.inf

    current = log_target(x)
    step_sds = np.minimum(prior.marginal_sds(), 10.0) * 0.1
    scale = 1.0
    window_accepts = 0
    adapt_window = 100
    history = np.empty((burn, p))

    for i in range(burn):
        prop = x + rng.standard_normal(p) * step_sds * scale
        cand = log_target(prop)
        if np.log(rng.random()) < cand - current:
            x, current = prop, cand
            window_accepts += 1
        history[i] = x
        if (i + 1) % adapt_window == 0:
            rate = window_accepts / adapt_window
            if rate < 0.15:
                scale *= 0.7
            elif rate > 0.40:
                scale *= 1.4
            window_accepts = 0
            if i + 1 == burn // 2:
                # refine per-coordinate steps from the chain so far
                sds = history[: i + 1].std(axis=0)
                positive = sds > 0
                step_sds[positive] = sds[positive]
                scale = 2.4 / np.sqrt(p)

    samples = np.empty((n_samples, p))
    accepts = 0
    for i in range(n_samples):
        prop = x + rng.standard_normal(p) * step_sds * scale
        cand = log_target(prop)
        if np.log(rng.random()) < cand - current:
            x, current = prop, cand
            accepts += 1
        samples[i] = x

    ess = _ess_autocorr(samples)
    sds = samples.std(axis=0, ddof=1)
    return McmcResult(
        means=samples.mean(axis=0),
        cov=np.cov(samples.T),
        ess=ess,
        standard_errors=sds / np.sqrt(np.maximum(ess, 1.0)),
        acceptance_rate=accepts / n_samples,
        samples=samples,
    )


def oracle_linear_conjugate(x_design, y, phi: float, prior: GaussianSpec) -> GaussianSpec:
    """Exact Gaussian posterior for a linear model with known noise precision.

    posterior precision = C0^-1 + phi X^T X;
    posterior mean = C (C0^-1 m0 + phi X^T y).
    """
    x_design = np.asarray(x_design, dtype=float)
    y = np.asarray(y, dtype=float)
    if phi <= 0:
        raise NotPositiveDefinite("noise precision must be positive")
    k = prior.dim
    if x_design.shape != (y.shape[0], k):
        raise DimensionMismatch("design matrix shape does not match y and prior")
    lp = prior.factor
    c0_inv = cho_solve((lp, True), np.eye(k))
    precision = c0_inv + phi * x_design.T @ x_design
    l_prec = cholesky(precision)
    rhs = c0_inv @ prior.mean + phi * x_design.T @ y
    mean = cho_solve((l_prec, True), rhs)
    cov = cho_solve((l_prec, True), np.eye(k))
    cov = 0.5 * (cov + cov.T)
    return GaussianSpec.from_mean_cov(mean, cov)
