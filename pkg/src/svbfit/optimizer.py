"""Adam-driven stochastic gradient ascent of the ELBO.

One problem binds a data series to a model, design, prior and posterior
state; a problem set holds many independent problems sharing the model and
design, optimized jointly with the loss defined as the mean free energy over
the set.  Per-problem RNG streams are derived from (seed, problem index) so
serial and fan-out execution produce identical results.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyTrace,
    InvalidBatchSize,
    ModelEvaluationFailure,
)
from .free_energy import _batched_elbo
from .gaussian import GaussianSpec, Structure


@dataclass(frozen=True)
class Problem:
    """One data series bound to a forward model and design grid."""

    y: np.ndarray
    model: object
    design: object

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if y.ndim != 1:
            raise DimensionMismatch("y must be a vector")
        if y.shape[0] != self.design.n:
            raise DimensionMismatch(
                f"y length {y.shape[0]} != design length {self.design.n}"
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.model.param_count + 1


@dataclass(frozen=True)
class ProblemSet:
    """Independent problems sharing one model and design."""

    problems: tuple

    def __post_init__(self):
        problems = tuple(self.problems)
        object.__setattr__(self, "problems", problems)
        if not problems:
            raise DimensionMismatch("problem set must not be empty")
        first = problems[0]
        for prob in problems[1:]:
            if prob.model is not first.model or prob.design is not first.design:
                raise DimensionMismatch("all problems must share model and design")

    def __len__(self):
        return len(self.problems)

    def __iter__(self):
        return iter(self.problems)

    @property
    def model(self):
        return self.problems[0].model

    @property
    def design(self):
        return self.problems[0].design

    def stacked_y(self) -> np.ndarray:
        return np.stack([p.y for p in self.problems])


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    sample_count: int = 20
    batch_size: int | None = None  # None means B = N (no batching)
    max_epochs: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    convergence_tolerance_fraction: float = 0.01
    structure: Structure = Structure.FULL

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DimensionMismatch("learning_rate must be positive")
        if self.sample_count < 1:
            raise DimensionMismatch("sample_count must be >= 1")
        if self.max_epochs < 0:
            raise DimensionMismatch("max_epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidBatchSize("batch_size must be >= 1")

    def to_json_dict(self) -> dict:
        out = {
            "learning_rate": self.learning_rate,
            "sample_count": self.sample_count,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
            "seed": self.seed,
            "convergence_tolerance_fraction": self.convergence_tolerance_fraction,
            "structure": self.structure.value,
        }
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        if "structure" in data:
            data["structure"] = Structure(data["structure"])
        return cls(**data)


# --- initialization strategies --------------------------------------------


@dataclass(frozen=True)
class PriorMatched:
    """Initial posterior equal to the prior."""


@dataclass(frozen=True)
class DataDriven:
    """Amplitude parameters start at half the maximum data amplitude.

    Other coordinates start at ``base_mean`` (typically the prior mean with
    true decay rates).  With ``noise_from_data`` the noise coordinate starts
    at log(sample variance) with posterior sd 1.0.
    """

    base_mean: np.ndarray
    noise_from_data: bool = False


@dataclass(frozen=True)
class Custom:
    mean: np.ndarray
    factor: np.ndarray | None = None
    sd: np.ndarray | None = None


def resolve_init(init, problem: Problem, prior: GaussianSpec, structure: Structure):
    """Initial (mean, factor) for one problem under the given structure."""
    p = prior.dim
    if isinstance(init, PriorMatched):
        mean = prior.mean.copy()
        factor = prior.factor.copy()
    elif isinstance(init, DataDriven):
        mean = np.asarray(init.base_mean, dtype=float).copy()
        if mean.shape != (p,):
            raise DimensionMismatch("base_mean must have the latent dimension")
        for idx in problem.model.amplitude_param_indices:
            mean[idx] = 0.5 * float(np.max(problem.y))
        factor = prior.factor.copy()
        if init.noise_from_data:
            var = float(np.var(problem.y))
            mean[-1] = np.log(var) if var > 0 else 0.0
            factor[-1, :] = 0.0
            factor[-1, -1] = 1.0
    elif isinstance(init, Custom):
        mean = np.asarray(init.mean, dtype=float).copy()
        if init.factor is not None:
            factor = np.asarray(init.factor, dtype=float).copy()
        elif init.sd is not None:
            factor = np.diag(np.broadcast_to(np.asarray(init.sd, dtype=float), (p,)))
        else:
            raise DimensionMismatch("Custom init needs a factor or sds")
    else:
        raise TypeError(f"unknown init strategy: {init!r}")
    if structure is Structure.DIAGONAL:
        factor = np.diag(np.sqrt(np.sum(factor**2, axis=1)))
    if mean.shape != (p,) or factor.shape != (p, p):
        raise DimensionMismatch("init does not match the latent dimension")
    if np.any(np.diag(factor) <= 0):
        raise DimensionMismatch("init factor diagonal must be positive")
    return mean, factor


# --- batching, Adam, convergence -------------------------------------------


def strided_batches(n: int, b: int) -> list[np.ndarray]:
    """ceil(N/B) strided index sets; each spans the full time range."""
    if not (1 <= b <= n):
        raise InvalidBatchSize(f"batch size {b} not in 1..{n}")
    k = -(-n // b)  # ceil(N / B)
    return [np.arange(i, n, k) for i in range(k)]


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(step=0, m=np.zeros(shape), v=np.zeros(shape))


def adam_step(state: AdamState, gradient: np.ndarray, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
    """One bias-corrected Adam step in the ascent direction.

    Returns (new_state, delta) with delta to be *added* to the parameters.
    """
    if state.m.shape != gradient.shape:
        raise DimensionMismatch("Adam state does not match gradient shape")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * gradient
    v = beta2 * state.v + (1.0 - beta2) * gradient**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    delta = learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return AdamState(step=t, m=m, v=v), delta


def convergence_time(f_values, tolerance_fraction: float, wall_times=None):
    """First epoch with F >= best - tolerance_fraction * |best|.

    Returns (epoch, wall_time) where wall_time is None unless per-epoch wall
    times are supplied.  Non-finite trace entries never qualify.
    """
    f_values = np.asarray(f_values, dtype=float)
    if f_values.size == 0:
        raise EmptyTrace("convergence_time needs a non-empty trace")
    finite = np.isfinite(f_values)
    if not np.any(finite):
        return None, None
    best = np.max(f_values[finite])
    threshold = best - tolerance_fraction * abs(best)
    hits = np.nonzero(finite & (f_values >= threshold))[0]
    if hits.size == 0:
        return None, None
    epoch = int(hits[0])
    wall = float(wall_times[epoch]) if wall_times is not None else None
    return epoch, wall


@dataclass(frozen=True)
class FitResult:
    posterior: GaussianSpec
    free_energy_trace: np.ndarray
    best_free_energy: float | None
    convergence_epoch: int | None
    wall_time_to_convergence: float | None
    epochs_run: int
    optimizer_time_to_convergence: float | None = None
    epoch_wall_times: np.ndarray | None = None
    failed: bool = False
    failure_epoch: int | None = None


# --- parameter packing ------------------------------------------------------


class _ParamLayout:
    """Flat layout [mean (P), log-diag (P), strict-lower (T, full only)]."""

    def __init__(self, p: int, structure: Structure):
        self.p = p
        self.structure = structure
        self.rows, self.cols = np.tril_indices(p, -1)
        self.n_lower = len(self.rows) if structure is Structure.FULL else 0
        self.dim = 2 * p + self.n_lower

    def pack(self, mean: np.ndarray, factor: np.ndarray) -> np.ndarray:
        parts = [mean, np.log(np.diag(factor))]
        if self.structure is Structure.FULL:
            parts.append(factor[self.rows, self.cols])
        return np.concatenate(parts)

    def unpack_many(self, params: np.ndarray):
        """(M, D) -> means (M, P), factors (M, P, P)."""
        p = self.p
        means = params[:, :p]
        factors = np.zeros((params.shape[0], p, p))
        idx = np.arange(p)
        with np.errstate(over="ignore"):
            factors[:, idx, idx] = np.exp(params[:, p : 2 * p])
        if self.structure is Structure.FULL:
            factors[:, self.rows, self.cols] = params[:, 2 * p :]
        return means, factors

    def grad_many(self, d_mean: np.ndarray, d_factor: np.ndarray) -> np.ndarray:
        """Stacked HyperGradient arrays -> flat (M, D) gradient."""
        p = self.p
        idx = np.arange(p)
        parts = [d_mean, d_factor[:, idx, idx]]
        if self.structure is Structure.FULL:
            parts.append(d_factor[:, self.rows, self.cols])
        return np.concatenate(parts, axis=1)


# --- the fit engine ---------------------------------------------------------

# Wide initial posteriors can draw parameter samples far outside the model's
# sane range (e.g. negative decay rates), producing sampled likelihood
# gradients many orders of magnitude above steady state.  A single such spike
# inflates Adam's second moment for thousands of steps, stalling the fit on a
# plateau.  Only the Monte-Carlo likelihood part is clipped; the analytic
# prior-divergence part is exact and must stay untouched so that very stiff
# priors (tiny prior sd pinning a coordinate) keep their full restoring force.
_GRADIENT_CLIP = 1e4


def _fit_stack(problems, prior, init, config, indices, loss_scale, isolate):
    """Optimize a stack of problems sharing model/design; see fit/fit_many."""
    model = problems[0].model
    design = problems[0].design
    ys = np.stack([p.y for p in problems])
    m_count, n = ys.shape
    p = prior.dim
    layout = _ParamLayout(p, config.structure)

    params = np.stack(
        [layout.pack(*resolve_init(init, prob, prior, config.structure)) for prob in problems]
    )
    b = config.batch_size if config.batch_size is not None else n
    batches = strided_batches(n, b)
    k_iters = len(batches)
    l_count = config.sample_count
    n_eval = max(l_count, 50)

    train_rngs = [
        np.random.default_rng([config.seed, int(idx), 0]) for idx in indices
    ]
    eval_eps = np.stack(
        [
            np.random.default_rng([config.seed, int(idx), 1]).standard_normal((n_eval, p))
            for idx in indices
        ]
    )
    full_batch = np.arange(n)

    epochs = config.max_epochs
    traces = np.full((m_count, epochs), np.nan)
    wall = np.zeros(epochs)
    opt_wall = np.zeros(epochs)
    best_f = np.full(m_count, -np.inf)
    best_params = params.copy()
    active = np.ones(m_count, dtype=bool)
    failure_epoch = np.full(m_count, -1, dtype=int)

    adam = AdamState.zeros(params.shape)
    t0 = time.perf_counter()
    opt_elapsed = 0.0

    for epoch in range(epochs):
        it0 = time.perf_counter()
        epoch_eps = [
            rng.standard_normal((k_iters * l_count, p)).reshape(k_iters, l_count, p)
            for rng in train_rngs
        ]
        for k, batch in enumerate(batches):
            eps = np.stack([e[k] for e in epoch_eps])
            means, factors = layout.unpack_many(params)
            out = _batched_elbo(
                model, design, ys, means, factors, eps, batch, prior, want_grad=True
            )
            grad_lik = np.clip(
                layout.grad_many(out["d_mean_lik"], out["d_factor_lik"]),
                -_GRADIENT_CLIP, _GRADIENT_CLIP,
            )
            grad_kl = layout.grad_many(out["d_mean_kl"], out["d_factor_kl"])
            grad = (grad_lik - grad_kl) * loss_scale
            finite = np.all(np.isfinite(grad), axis=1)
            newly_failed = active & ~finite
            if np.any(newly_failed):
                failure_epoch[newly_failed] = epoch
                active &= finite
            grad = np.where((active & finite)[:, None], grad, 0.0)
            adam, delta = adam_step(
                adam,
                grad,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_epsilon,
            )
            params = params + np.where(active[:, None], delta, 0.0)
        opt_elapsed += time.perf_counter() - it0
        opt_wall[epoch] = opt_elapsed

        means, factors = layout.unpack_many(params)
        out = _batched_elbo(
            model, design, ys, means, factors, eval_eps, full_batch, prior, want_grad=False
        )
        f_epoch = out["value"]
        bad = active & ~np.isfinite(f_epoch)
        if np.any(bad):
            failure_epoch[bad] = epoch
            active &= ~bad
        traces[:, epoch] = np.where(active, f_epoch, np.nan)
        improved = active & (traces[:, epoch] > best_f)
        best_f[improved] = traces[improved, epoch]
        best_params[improved] = params[improved]
        wall[epoch] = time.perf_counter() - t0

    results = []
    for i in range(m_count):
        means_i, factors_i = layout.unpack_many(best_params[i : i + 1])
        posterior = GaussianSpec(
            mean=means_i[0], factor=factors_i[0], structure=config.structure
        )
        trace = traces[i]
        failed = failure_epoch[i] >= 0
        if epochs == 0:
            conv_epoch, conv_wall, conv_opt = None, None, None
            best = None
        else:
            conv_epoch, _ = convergence_time(trace, config.convergence_tolerance_fraction)
            conv_wall = float(wall[conv_epoch]) if conv_epoch is not None else None
            conv_opt = float(opt_wall[conv_epoch]) if conv_epoch is not None else None
            finite = np.isfinite(trace)
            best = float(np.max(trace[finite])) if np.any(finite) else None
        results.append(
            FitResult(
                posterior=posterior,
                free_energy_trace=trace,
                best_free_energy=best,
                convergence_epoch=conv_epoch,
                wall_time_to_convergence=conv_wall,
                epochs_run=epochs,
                optimizer_time_to_convergence=conv_opt,
                epoch_wall_times=wall.copy(),
                failed=failed,
                failure_epoch=int(failure_epoch[i]) if failed else None,
            )
        )
    if not isolate and any(r.failed for r in results):
        raise ModelEvaluationFailure(
            "model evaluation produced non-finite values during the fit",
            results=results,
        )
    return results


def fit(problem: Problem, prior: GaussianSpec, init, config: OptimizerConfig,
        problem_index: int = 0) -> FitResult:
    """Fit one problem; deterministic in (problem, prior, init, config)."""
    return _fit_stack(
        [problem], prior, init, config, [problem_index], loss_scale=1.0, isolate=False
    )[0]


def fit_many(problem_set: ProblemSet, prior: GaussianSpec, init, config: OptimizerConfig,
             on_error: str = "raise"):
    """Jointly fit a problem set with the loss as the mean free energy.

    Gradients are applied independently per problem with per-problem Adam
    state, so results match independent ``fit`` calls up to the Adam epsilon
    term (the 1/M loss scaling cancels in Adam's ratio except through
    epsilon).  Returns (results, joint_trace) where joint_trace is the mean
    per-epoch free energy over problems.

    on_error: "raise" propagates ModelEvaluationFailure (partial results
    attached); "isolate" freezes failed problems and keeps going.
    """
    if on_error not in ("raise", "isolate"):
        raise ValueError("on_error must be 'raise' or 'isolate'")
    problems = list(problem_set)
    results = _fit_stack(
        problems,
        prior,
        init,
        config,
        list(range(len(problems))),
        loss_scale=1.0 / len(problems),
        isolate=(on_error == "isolate"),
    )
    if config.max_epochs == 0:
        joint = np.zeros(0)
    else:
        with np.errstate(invalid="ignore"):
            joint = np.nanmean(np.stack([r.free_energy_trace for r in results]), axis=0)
    return results, joint
