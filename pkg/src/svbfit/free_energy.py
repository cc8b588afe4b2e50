"""Gaussian log-likelihood, the hybrid ELBO estimator, and its pathwise gradients.

The free energy maximized here is

    F = E_q[log p(y | theta)] - KL(q || prior)

with the expectation estimated by Monte-Carlo over reparameterized samples
theta* = m + S eps and the KL term evaluated in closed form.  Mini-batch
likelihoods are rescaled by N/|batch| so the stochastic value is an unbiased
estimate of the full-data one.  The Gaussian constant -(N/2) log 2pi is
included so values are comparable with log-evidence estimates from MCMC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonFiniteOutput
from .gaussian import LOG_2PI, GaussianSpec, Structure, draws_to_array


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    likelihood_term: float
    kl_term: float
    sample_count: int
    batch_indices: np.ndarray


@dataclass(frozen=True)
class HyperGradient:
    """Gradient of the ELBO estimate with respect to (m, S).

    ``d_factor`` is lower-triangular; its diagonal entries are expressed in
    the log-diagonal coordinates actually optimized (i.e. already multiplied
    by S_ii).
    """

    d_mean: np.ndarray
    d_factor: np.ndarray


def log_likelihood(y, g_pred, lam: float) -> float:
    """Gaussian log-likelihood with precision phi = exp(-lam).

    -(N/2) log 2pi - (N/2) lam - (exp(-lam)/2) * sum((y - g)^2)
    """
    y = np.asarray(y, dtype=float)
    g_pred = np.asarray(g_pred, dtype=float)
    if y.shape != g_pred.shape:
        raise DimensionMismatch(f"y shape {y.shape} != prediction shape {g_pred.shape}")
    n = y.shape[-1]
    sse = float(np.sum((y - g_pred) ** 2))
    return -0.5 * n * LOG_2PI - 0.5 * n * lam - 0.5 * np.exp(-lam) * sse


# ---------------------------------------------------------------------------
# Batched core shared by the public single-problem API and the optimizer.
# Shapes: means (M, P); factors (M, P, P); eps (M, L, P); ys (M, N).
# ---------------------------------------------------------------------------


def _kl_terms(means, factors, prior: GaussianSpec):
    """KL(q_m || prior) for a stack of M posteriors; returns (M,) values."""
    m, p = means.shape
    lp = prior.factor
    a = solve_triangular(lp, factors.transpose(1, 0, 2).reshape(p, m * p), lower=True)
    trace = np.sum(a.reshape(p, m, p) ** 2, axis=(0, 2))
    z = solve_triangular(lp, (means - prior.mean).T, lower=True)
    quad = np.sum(z * z, axis=0)
    with np.errstate(invalid="ignore"):
        logdet_q = 2.0 * np.sum(np.log(np.diagonal(factors, axis1=1, axis2=2)), axis=1)
    logdet_p = prior.log_det_cov
    return 0.5 * (trace - logdet_q + logdet_p - p + quad)


def _kl_gradients(means, factors, prior: GaussianSpec):
    """d KL / d m and d KL / d S (lower-triangular projection), stacked."""
    m, p = means.shape
    lp = prior.factor
    dm = means - prior.mean
    z = solve_triangular(lp, dm.T, lower=True)
    d_mean = solve_triangular(lp, z, lower=True, trans="T").T  # C0^-1 (m - m0)
    y = solve_triangular(lp, factors.transpose(1, 0, 2).reshape(p, m * p), lower=True)
    c0inv_s = (
        solve_triangular(lp, y, lower=True, trans="T").reshape(p, m, p).transpose(1, 0, 2)
    )
    eye = np.broadcast_to(np.eye(p), (m, p, p))
    s_inv_t = np.linalg.solve(factors, eye).transpose(0, 2, 1)
    d_factor = np.tril(c0inv_s - s_inv_t)
    return d_mean, d_factor


def _batched_elbo(model, design, ys, means, factors, eps, batch, prior, want_grad):
    """ELBO values (and gradients) for M problems sharing a model and design.

    Returns a dict with 'lik', 'kl', 'value' (each (M,)) and, if want_grad,
    'd_mean' (M, P) and 'd_factor' (M, P, P) with log-diagonal scaling applied.
    No finiteness guarantees: callers decide how to treat non-finite entries.
    """
    m_count, l_count, p = eps.shape
    k = p - 1
    n_full = ys.shape[1]
    batch = np.asarray(batch, dtype=int)
    n_b = batch.shape[0]
    design_b = design.subset(batch)
    y_b = ys[:, batch]
    scale = n_full / n_b

    theta = means[:, None, :] + np.einsum("mpq,mlq->mlp", factors, eps)
    th_model = theta[..., :k]
    lam = theta[..., k]
    g = model._evaluate(th_model.reshape(m_count * l_count, k), design_b)
    g = g.reshape(m_count, l_count, n_b)
    r = y_b[:, None, :] - g
    sse = np.einsum("mln,mln->ml", r, r)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        phi = np.exp(-lam)
        ll = -0.5 * n_b * LOG_2PI - 0.5 * n_b * lam - 0.5 * phi * sse
        lik = scale * np.mean(ll, axis=1)
    kl = _kl_terms(means, factors, prior)
    out = {"lik": lik, "kl": kl, "value": lik - kl}
    if not want_grad:
        return out

    jac = model._jacobian(th_model.reshape(m_count * l_count, k), design_b)
    jac = jac.reshape(m_count, l_count, n_b, k)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        g_model = phi[..., None] * np.einsum("mlnk,mln->mlk", jac, r)
        g_lam = -0.5 * n_b + 0.5 * phi * sse
        g_theta = np.concatenate([g_model, g_lam[..., None]], axis=-1) * scale
        d_mean_lik = np.mean(g_theta, axis=1)
        d_s_lik = np.einsum("mlp,mlq->mpq", g_theta, eps) / l_count
        d_mean_kl, d_s_kl = _kl_gradients(means, factors, prior)
        d_factor_lik = np.tril(d_s_lik)
        d_factor_kl = np.tril(d_s_kl)
        # chain rule into the log-diagonal coordinates actually optimized
        diag = np.diagonal(factors, axis1=1, axis2=2)
        idx = np.arange(p)
        d_factor_lik[:, idx, idx] *= diag
        d_factor_kl[:, idx, idx] *= diag
    out["d_mean"] = d_mean_lik - d_mean_kl
    out["d_factor"] = d_factor_lik - d_factor_kl
    # Monte-Carlo and analytic parts exposed separately so the optimizer can
    # bound the sampled part without touching the exact one.
    out["d_mean_lik"] = d_mean_lik
    out["d_factor_lik"] = d_factor_lik
    out["d_mean_kl"] = d_mean_kl
    out["d_factor_kl"] = d_factor_kl
    return out


def _prepare_single(problem, q: GaussianSpec, prior: GaussianSpec, draws, batch):
    eps = draws_to_array(draws)
    if eps.ndim != 2 or eps.shape[1] != q.dim:
        raise DimensionMismatch(f"draws have shape {eps.shape}, expected (L, {q.dim})")
    if eps.shape[0] < 1:
        raise DimensionMismatch("at least one draw is required")
    if q.dim != prior.dim:
        raise DimensionMismatch(f"posterior dim {q.dim} != prior dim {prior.dim}")
    if q.dim != problem.model.param_count + 1:
        raise DimensionMismatch(
            f"latent dim {q.dim} != model params + noise = {problem.model.param_count + 1}"
        )
    n = problem.y.shape[0]
    if batch is None:
        batch = np.arange(n)
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0 or np.any(batch < 0) or np.any(batch >= n):
        raise DimensionMismatch("batch must be a non-empty subset of 0..N-1")
    return eps, batch


def estimate_elbo(problem, q: GaussianSpec, prior: GaussianSpec, draws, batch=None) -> ElboEstimate:
    """Hybrid Monte-Carlo/analytic ELBO estimate for one problem."""
    eps, batch = _prepare_single(problem, q, prior, draws, batch)
    out = _batched_elbo(
        problem.model,
        problem.design,
        problem.y[None, :],
        q.mean[None, :],
        q.factor[None, :, :],
        eps[None, :, :],
        batch,
        prior,
        want_grad=False,
    )
    lik = float(out["lik"][0])
    kl = float(out["kl"][0])
    if not (np.isfinite(lik) and np.isfinite(kl)):
        raise NonFiniteOutput("ELBO estimate is non-finite")
    return ElboEstimate(
        value=lik - kl,
        likelihood_term=lik,
        kl_term=kl,
        sample_count=eps.shape[0],
        batch_indices=batch,
    )


def elbo_gradient(problem, q: GaussianSpec, prior: GaussianSpec, draws, batch=None) -> HyperGradient:
    """Pathwise gradient of estimate_elbo with respect to (m, S) at fixed draws."""
    eps, batch = _prepare_single(problem, q, prior, draws, batch)
    out = _batched_elbo(
        problem.model,
        problem.design,
        problem.y[None, :],
        q.mean[None, :],
        q.factor[None, :, :],
        eps[None, :, :],
        batch,
        prior,
        want_grad=True,
    )
    d_mean = out["d_mean"][0]
    d_factor = out["d_factor"][0]
    if q.structure is Structure.DIAGONAL:
        d_factor = np.diag(np.diag(d_factor))
    if not (np.all(np.isfinite(d_mean)) and np.all(np.isfinite(d_factor))):
        raise NonFiniteOutput("ELBO gradient is non-finite")
    return HyperGradient(d_mean=d_mean, d_factor=d_factor)
