"""Dense multivariate Gaussian representation via Cholesky factors.

The latent vector of a fitting problem concatenates the forward-model
parameters with a noise coordinate lam = -log(phi), where phi is the noise
precision.  Both the prior and the approximate posterior over that latent
vector are multivariate normals stored as (mean, lower-triangular factor S)
with covariance C = S @ S.T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))


class Structure(Enum):
    FULL = "full"
    DIAGONAL = "diagonal"


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular S with S @ S.T == cov.

    Raises NotPositiveDefinite if the matrix has a non-positive pivot, which
    signals an invalid covariance input.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {cov.shape}")
    scale = np.max(np.abs(cov)) if cov.size else 0.0
    if scale > 0 and np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
        raise DimensionMismatch("matrix is not symmetric to 1e-10 relative tolerance")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def _frozen_array(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GaussianSpec:
    """Mean vector plus lower-triangular Cholesky factor of the covariance.

    Under Structure.DIAGONAL only the diagonal of ``factor`` is free and all
    off-diagonal entries must be exactly zero.
    """

    mean: np.ndarray
    factor: np.ndarray
    structure: Structure = Structure.FULL

    def __post_init__(self):
        mean = _frozen_array(self.mean)
        factor = _frozen_array(self.factor)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factor", factor)
        if mean.ndim != 1:
            raise DimensionMismatch("mean must be a vector")
        p = mean.shape[0]
        if factor.shape != (p, p):
            raise DimensionMismatch(
                f"factor shape {factor.shape} does not match mean length {p}"
            )
        if np.any(np.triu(factor, 1) != 0.0):
            raise NotPositiveDefinite("factor must be lower-triangular")
        if not np.all(np.diag(factor) > 0.0):
            raise NotPositiveDefinite("factor diagonal must be strictly positive")
        if self.structure is Structure.DIAGONAL and np.any(np.tril(factor, -1) != 0.0):
            raise NotPositiveDefinite(
                "diagonal structure requires zero off-diagonal factor entries"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T

    @property
    def log_det_cov(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.factor))))

    def marginal_sds(self) -> np.ndarray:
        return np.sqrt(np.sum(self.factor**2, axis=1))

    @classmethod
    def from_mean_cov(cls, mean, cov, structure: Structure = Structure.FULL) -> "GaussianSpec":
        factor = cholesky(cov)
        if structure is Structure.DIAGONAL:
            factor = np.diag(np.diag(factor))
        return cls(mean=np.asarray(mean, dtype=float), factor=factor, structure=structure)

    @classmethod
    def from_mean_sd(cls, mean, sd, structure: Structure = Structure.DIAGONAL) -> "GaussianSpec":
        mean = np.asarray(mean, dtype=float)
        sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)
        return cls(mean=mean, factor=np.diag(sd), structure=structure)

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "factor_rows": self.factor.tolist(),
            "structure": self.structure.value,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "GaussianSpec":
        return cls(
            mean=np.asarray(data["mean"], dtype=float),
            factor=np.asarray(data["factor_rows"], dtype=float),
            structure=Structure(data["structure"]),
        )


@dataclass(frozen=True)
class LatentVector:
    """Concatenation of model parameters and the noise coordinate lam.

    The noise precision is phi = exp(-lam), positive for every finite lam by
    construction (no clamping anywhere).
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))

    @property
    def model_params(self) -> np.ndarray:
        return self.values[:-1]

    @property
    def noise_log_neg_precision(self) -> float:
        return float(self.values[-1])

    @property
    def noise_precision(self) -> float:
        return float(np.exp(-self.values[-1]))


@dataclass(frozen=True)
class StandardNormalDraw:
    """One standard-normal vector with its seed provenance."""

    values: np.ndarray
    seed: int | None = None
    index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))


def standard_normal_draws(seed: int, count: int, dim: int) -> list[StandardNormalDraw]:
    """Reproducible draw sequence: same (seed, index) gives identical values."""
    values = np.random.default_rng(seed).standard_normal((count, dim))
    return [StandardNormalDraw(values=v, seed=seed, index=i) for i, v in enumerate(values)]


def draws_to_array(draws) -> np.ndarray:
    """Normalize draw input (array, single draw, or sequence) to shape (L, P)."""
    if isinstance(draws, StandardNormalDraw):
        return draws.values[None, :]
    if isinstance(draws, np.ndarray):
        return draws if draws.ndim == 2 else draws[None, :]
    return np.stack([d.values if isinstance(d, StandardNormalDraw) else np.asarray(d) for d in draws])


def sample_posterior(q: GaussianSpec, eps) -> LatentVector:
    """theta* = m + S @ eps, deterministic in (q, eps)."""
    values = eps.values if isinstance(eps, StandardNormalDraw) else np.asarray(eps, dtype=float)
    if values.shape != (q.dim,):
        raise DimensionMismatch(
            f"draw has shape {values.shape}, expected ({q.dim},)"
        )
    return LatentVector(values=q.mean + q.factor @ values)


def kl_mvn(q: GaussianSpec, p: GaussianSpec) -> float:
    """KL(q || p) between two MVNs, computed via their Cholesky factors.

    0.5 * { Tr(C0^-1 C) - log(|C|/|C0|) - P + (m-m0)^T C0^-1 (m-m0) }
    using triangular solves against p's factor; no explicit inverses.
    """
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimension mismatch: {q.dim} vs {p.dim}")
    lp = p.factor
    a = solve_triangular(lp, q.factor, lower=True)
    z = solve_triangular(lp, q.mean - p.mean, lower=True)
    trace_term = float(np.sum(a * a))
    quad_term = float(np.sum(z * z))
    return 0.5 * (trace_term - q.log_det_cov + p.log_det_cov - q.dim + quad_term)


def mvn_logpdf(spec: GaussianSpec, x: np.ndarray) -> np.ndarray:
    """Log density of the MVN at x; x may be (P,) or (..., P)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise DimensionMismatch(f"x has last dim {x.shape[-1]}, expected {spec.dim}")
    dev = x - spec.mean
    z = solve_triangular(spec.factor, dev.reshape(-1, spec.dim).T, lower=True)
    quad = np.sum(z * z, axis=0).reshape(x.shape[:-1])
    out = -0.5 * (spec.dim * LOG_2PI + spec.log_det_cov + quad)
    return out if out.shape else float(out)
