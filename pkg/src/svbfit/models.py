"""Nonlinear forward models g(theta) over a design grid, with analytic Jacobians.

Concrete models:
  * ``biexp``      -- sum of two decaying exponentials, the toy fitting target
  * ``asl-pcasl``  -- PCASL kinetic model for perfusion (f) and transit time (dt)
  * ``linear``     -- polynomial-in-time linear model, used for oracle checks

Evaluation and Jacobian methods broadcast over a leading batch axis: theta of
shape (K,) gives (N,) predictions, theta of shape (Q, K) gives (Q, N).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, NonFiniteOutput, ParamCountMismatch


@dataclass(frozen=True)
class DesignGrid:
    """Sample times (seconds) at which the model is evaluated."""

    times: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 1:
            raise DimensionMismatch("times must be a non-empty vector")
        if not np.all(np.isfinite(times)):
            raise DimensionMismatch("times must be finite")

    @property
    def n(self) -> int:
        return self.times.shape[0]

    def subset(self, indices) -> "DesignGrid":
        return DesignGrid(times=self.times[np.asarray(indices, dtype=int)])


DEFAULT_SLICE_TIME_OFFSET = 0.0452  # s between consecutive 2D slices
DEFAULT_T1_TISSUE = 1.3  # s
DEFAULT_T1_BLOOD = 1.6  # s
DEFAULT_PARTITION_COEFFICIENT = 0.9


@dataclass(frozen=True)
class AslPcaslDesign:
    """Acquisition description for the PCASL kinetic model.

    Effective sample time: t_i = tau + pld_i + slice_index_i * slice_time_offset.
    T1/T1b/partition defaults are configuration, overridable per dataset.
    """

    plds: np.ndarray
    label_duration: float = 1.8
    slice_indices: np.ndarray | None = None
    slice_time_offset: float = DEFAULT_SLICE_TIME_OFFSET
    t1_tissue: float = DEFAULT_T1_TISSUE
    t1_blood: float = DEFAULT_T1_BLOOD
    m0a: float = 1.0
    partition_coefficient: float = DEFAULT_PARTITION_COEFFICIENT
    blood_decay_in_bolus: bool = False

    def __post_init__(self):
        plds = np.array(self.plds, dtype=float)
        plds.setflags(write=False)
        object.__setattr__(self, "plds", plds)
        if self.slice_indices is None:
            slices = np.zeros(plds.shape, dtype=int)
        else:
            slices = np.array(self.slice_indices, dtype=int)
        slices.setflags(write=False)
        object.__setattr__(self, "slice_indices", slices)
        if plds.ndim != 1 or plds.size < 1:
            raise DimensionMismatch("plds must be a non-empty vector")
        if slices.shape != plds.shape:
            raise DimensionMismatch("slice_indices must match plds in length")
        if self.label_duration <= 0:
            raise DimensionMismatch("label_duration must be positive")
        if np.any(plds < 0):
            raise DimensionMismatch("plds must be non-negative")
        if np.any(slices < 0):
            raise DimensionMismatch("slice indices must be non-negative")

    @property
    def times(self) -> np.ndarray:
        return self.label_duration + self.plds + self.slice_indices * self.slice_time_offset

    @property
    def n(self) -> int:
        return self.plds.shape[0]

    def subset(self, indices) -> "AslPcaslDesign":
        idx = np.asarray(indices, dtype=int)
        return replace(self, plds=self.plds[idx], slice_indices=self.slice_indices[idx])

    def with_slice_index(self, slice_index: int) -> "AslPcaslDesign":
        return replace(
            self, slice_indices=np.full(self.plds.shape, int(slice_index), dtype=int)
        )


@dataclass(frozen=True)
class ModelSignature:
    parameter_names: tuple
    parameter_count: int

    def __post_init__(self):
        if len(set(self.parameter_names)) != len(self.parameter_names):
            raise DimensionMismatch("parameter names must be unique")
        if self.parameter_count != len(self.parameter_names):
            raise DimensionMismatch("parameter_count must equal number of names")


class ForwardModel:
    """Base class; subclasses implement _evaluate/_jacobian without checks."""

    name: str = ""
    param_names: tuple = ()
    # indices of parameters that scale with signal amplitude (data-driven init)
    amplitude_param_indices: tuple = ()

    @property
    def param_count(self) -> int:
        return len(self.param_names)

    @property
    def signature(self) -> ModelSignature:
        return ModelSignature(tuple(self.param_names), self.param_count)

    def _evaluate(self, theta: np.ndarray, design) -> np.ndarray:
        raise NotImplementedError

    def _jacobian(self, theta: np.ndarray, design) -> np.ndarray:
        raise NotImplementedError


class BiexpModel(ForwardModel):
    """M(t) = A1 exp(-R1 t) + A2 exp(-R2 t)."""

    name = "biexp"
    param_names = ("A1", "R1", "A2", "R2")
    amplitude_param_indices = (0, 2)

    def _evaluate(self, theta, design):
        t = design.times
        a1, r1, a2, r2 = (theta[..., i : i + 1] for i in range(4))
        with np.errstate(over="ignore", under="ignore"):
            return a1 * np.exp(-r1 * t) + a2 * np.exp(-r2 * t)

    def _jacobian(self, theta, design):
        t = design.times
        a1, r1, a2, r2 = (theta[..., i : i + 1] for i in range(4))
        with np.errstate(over="ignore", under="ignore"):
            e1 = np.exp(-r1 * t)
            e2 = np.exp(-r2 * t)
            cols = [e1, -a1 * t * e1, e2, -a2 * t * e2]
        return np.stack(np.broadcast_arrays(*cols), axis=-1)


class LinearModel(ForwardModel):
    """Linear-in-parameters model; the Jacobian is the design matrix itself.

    basis="poly" uses 1, t, t^2, ...; basis="fourier" uses 1 and unit-scale
    sine/cosine pairs (well conditioned on an even grid).
    """

    name = "linear"
    param_names = ("c0", "c1", "c2")

    def __init__(self, degree: int = 2, basis: str = "poly", period: float = 5.0):
        if basis not in ("poly", "fourier"):
            raise ValueError("basis must be 'poly' or 'fourier'")
        self._degree = int(degree)
        self._basis = basis
        self._period = float(period)
        self.param_names = tuple(f"c{i}" for i in range(self._degree + 1))

    def design_matrix(self, design) -> np.ndarray:
        t = design.times
        if self._basis == "poly":
            return np.vander(t, self.param_count, increasing=True)
        cols = [np.ones_like(t)]
        harmonic = 1
        while len(cols) < self.param_count:
            w = 2.0 * np.pi * harmonic / self._period
            cols.append(np.sin(w * t))
            if len(cols) < self.param_count:
                cols.append(np.cos(w * t))
            harmonic += 1
        return np.stack(cols, axis=1)

    def _evaluate(self, theta, design):
        return theta @ self.design_matrix(design).T

    def _jacobian(self, theta, design):
        x = self.design_matrix(design)
        return np.broadcast_to(x, theta.shape[:-1] + x.shape).copy()


class AslPcaslModel(ForwardModel):
    """Three-branch PCASL kinetic model; theta = (f, dt).

    1/T1app = 1/T1 + f/partition.  The middle branch omits the blood-decay
    factor exp(-dt/T1b) unless the design sets blood_decay_in_bolus, in which
    case the factor is applied there as well (standard-model variant).
    """

    name = "asl-pcasl"
    param_names = ("f", "dt")
    amplitude_param_indices = (0,)

    @staticmethod
    def _branches(theta, design):
        t = design.times
        f = theta[..., 0:1]
        dt = theta[..., 1:2]
        lam = design.partition_coefficient
        with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
            a = 1.0 / (1.0 / design.t1_tissue + f / lam)  # T1app
            u = t - dt  # time since bolus arrival
            w = u - design.label_duration
            decay = np.exp(-dt / design.t1_blood)
        return t, f, dt, lam, a, u, w, decay

    def _evaluate(self, theta, design):
        t, f, dt, lam, a, u, w, decay = self._branches(theta, design)
        c = 2.0 * design.m0a
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            mid = c * f * a * (1.0 - np.exp(-u / a))
            if design.blood_decay_in_bolus:
                mid = mid * decay
            late = c * f * a * decay * np.exp(-w / a) * (1.0 - np.exp(-design.label_duration / a))
            # the bolus-end boundary w == 0 belongs to the middle branch, so
            # the value there equals the limit from below (the decay factor
            # makes the two branches meet discontinuously at that instant)
            out = np.where(u < 0.0, 0.0, np.where(w <= 0.0, mid, late))
        return out

    def _jacobian(self, theta, design):
        t, f, dt, lam, a, u, w, decay = self._branches(theta, design)
        tau = design.label_duration
        c = 2.0 * design.m0a
        a_f = -(a * a) / lam  # dT1app/df
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            e_mid = np.exp(-u / a)
            d_mid_f = c * ((a + f * a_f) * (1.0 - e_mid) - f * a_f * e_mid * u / a)
            d_mid_dt = -c * f * e_mid
            if design.blood_decay_in_bolus:
                mid_val = c * f * a * (1.0 - e_mid)
                d_mid_f = d_mid_f * decay
                d_mid_dt = d_mid_dt * decay + mid_val * decay * (-1.0 / design.t1_blood)

            b = np.exp(-w / a)
            g = np.exp(-tau / a)
            k = 1.0 - g
            b_a = b * w / (a * a)
            k_a = -g * tau / (a * a)
            d_late_f = c * decay * (
                (a + f * a_f) * b * k + f * a * a_f * (b_a * k + b * k_a)
            )
            d_late_dt = c * f * decay * b * k * (1.0 - a / design.t1_blood)

            zero = np.zeros_like(u)
            d_f = np.where(u < 0.0, zero, np.where(w <= 0.0, d_mid_f, d_late_f))
            d_dt = np.where(u < 0.0, zero, np.where(w <= 0.0, d_mid_dt, d_late_dt))
        return np.stack(np.broadcast_arrays(d_f, d_dt), axis=-1)


_REGISTRY: dict[str, ForwardModel] = {}


def register_model(model: ForwardModel):
    _REGISTRY[model.name] = model
    return model


register_model(BiexpModel())
register_model(LinearModel())
register_model(AslPcaslModel())


def get_model(name: str) -> ForwardModel:
    if name not in _REGISTRY:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name]


def model_evaluate(model: ForwardModel, theta, design) -> np.ndarray:
    """Validated model evaluation; raises on bad shapes or non-finite output."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != model.param_count:
        raise ParamCountMismatch(
            f"{model.name} expects {model.param_count} parameters, got {theta.shape[-1]}"
        )
    out = model._evaluate(theta, design)
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput(f"{model.name} produced non-finite predictions")
    return out


def model_jacobian(model: ForwardModel, theta, design) -> np.ndarray:
    """Validated analytic Jacobian; entry (j, k) = d g(t_j) / d theta_k."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != model.param_count:
        raise ParamCountMismatch(
            f"{model.name} expects {model.param_count} parameters, got {theta.shape[-1]}"
        )
    out = model._jacobian(theta, design)
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput(f"{model.name} produced a non-finite Jacobian")
    return out


def asl_evaluate(theta, design: AslPcaslDesign) -> np.ndarray:
    return model_evaluate(get_model("asl-pcasl"), theta, design)


def asl_jacobian(theta, design: AslPcaslDesign) -> np.ndarray:
    return model_jacobian(get_model("asl-pcasl"), theta, design)
