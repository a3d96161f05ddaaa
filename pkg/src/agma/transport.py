"""Entropy-regularized optimal transport between Gaussian mixtures.

Distillation treats two mixtures as discrete measures over their components,
with pairwise cost equal to the squared 2-Wasserstein distance between
diagonal Gaussians. The regularized plan comes from log-domain Sinkhorn
iterations unrolled through the autodiff tape, so the transport objective is
differentiable in the costs and in the row marginal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

_MARGINAL_FLOOR = 1e-300


def w2_cost(source, target):
    """Pairwise squared 2-Wasserstein costs between diagonal Gaussians.

    For components i of ``source`` and j of ``target``:
    C_ij = ||mu_i - mu_j||^2 + ||sigma_i - sigma_j||^2, sigma = sqrt(var).
    Returns a (K_source, K_target) tensor; zero exactly when the components
    coincide.
    """
    if source.dim != target.dim:
        raise ShapeError(f"mixtures live in different dimensions: {source.dim} vs {target.dim}")
    mu_s = ad.reshape(source.means, (source.k, 1, source.dim))
    mu_t = ad.reshape(target.means, (1, target.k, target.dim))
    sd_s = ad.reshape(ad.sqrt(source.variances), (source.k, 1, source.dim))
    sd_t = ad.reshape(ad.sqrt(target.variances), (1, target.k, target.dim))
    dmu = ad.add(mu_s, ad.mul(mu_t, -1.0))
    dsd = ad.add(sd_s, ad.mul(sd_t, -1.0))
    return ad.add(ad.sum_(ad.mul(dmu, dmu), axis=2), ad.sum_(ad.mul(dsd, dsd), axis=2))


@dataclass(frozen=True)
class TransportResult:
    """Plan plus convergence diagnostics for one Sinkhorn solve."""

    plan: Tensor  # (n, m), nonnegative
    transport_cost: Tensor  # scalar <plan, C>
    row_residual: float  # ||plan @ 1 - a||_1
    col_residual: float  # ||plan^T @ 1 - b||_1
    n_iters: int
    epsilon: float


def sinkhorn(cost, a, b, epsilon=0.1, n_iters=20):
    """Log-domain Sinkhorn for the entropic transport plan.

    Alternates the two potential updates ``n_iters`` times each, working on
    log scales throughout so small marginals and large costs stay stable.
    The returned column marginals match ``b`` up to rounding by
    construction; the row residual reports how converged the plan is. A
    zero-mass marginal entry is representable (it simply carries no mass)
    and shows up in the residuals rather than raising.
    """
    if epsilon <= 0:
        raise ConfigError(f"entropic regularization must be positive, got {epsilon}")
    if n_iters < 1:
        raise ConfigError(f"need at least one iteration, got {n_iters}")
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    n, m = cost.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ShapeError(f"marginals {a.shape} / {b.shape} do not match cost matrix {cost.shape}")
    if np.any(a.data < 0) or np.any(b.data < 0):
        raise ConfigError("marginals must be nonnegative")

    log_a = ad.log(ad.maximum(a, _MARGINAL_FLOOR))
    log_b = ad.log(ad.maximum(b, _MARGINAL_FLOOR))
    neg_c = ad.mul(cost, -1.0 / epsilon)
    f = Tensor(np.zeros(n))
    g = Tensor(np.zeros(m))
    for _ in range(n_iters):
        # f_i/eps = log a_i - logsumexp_j(g_j/eps - C_ij/eps), then g likewise
        fg = ad.add(neg_c, ad.reshape(ad.mul(g, 1.0 / epsilon), (1, m)))
        f = ad.mul(ad.add(log_a, ad.mul(ad.logsumexp(fg, axis=1), -1.0)), epsilon)
        gf = ad.add(neg_c, ad.reshape(ad.mul(f, 1.0 / epsilon), (n, 1)))
        g = ad.mul(ad.add(log_b, ad.mul(ad.logsumexp(gf, axis=0), -1.0)), epsilon)
    log_plan = ad.mul(
        ad.add(ad.add(ad.reshape(f, (n, 1)), ad.reshape(g, (1, m))), ad.mul(cost, -1.0)),
        1.0 / epsilon,
    )
    plan = ad.exp(log_plan)
    total = ad.sum_(ad.mul(plan, cost))
    row_res = float(np.sum(np.abs(plan.data.sum(axis=1) - a.data)))
    col_res = float(np.sum(np.abs(plan.data.sum(axis=0) - b.data)))
    return TransportResult(
        plan=plan, transport_cost=total, row_residual=row_res, col_residual=col_res,
        n_iters=n_iters, epsilon=epsilon,
    )


def distill_loss(result, cost, epsilon=None):
    """Entropic transport objective <P, C> + eps * sum P (log P - 1).

    ``result`` is a TransportResult (or a raw plan tensor). The entropy term
    uses the convention that makes the regularizer convex, with 0 log 0 = 0,
    so the Sinkhorn plan is the exact minimizer of this objective under its
    marginal constraints.
    """
    plan = result.plan if isinstance(result, TransportResult) else result
    if epsilon is None:
        if not isinstance(result, TransportResult):
            raise ConfigError("epsilon is required when passing a raw plan")
        epsilon = result.epsilon
    if plan.shape != cost.shape:
        raise ShapeError(f"plan {plan.shape} and cost {cost.shape} disagree")
    transport = ad.sum_(ad.mul(plan, cost))
    return ad.add(transport, ad.mul(ad.sum_(ad.neg_entropy(plan)), epsilon))


def plan_to_csv(result, path):
    """Dump the plan as (source, target, mass) rows after a diagnostics line."""
    plan = result.plan.data
    lines = [
        f"# epsilon={result.epsilon},iters={result.n_iters},"
        f"row_residual={result.row_residual!r},col_residual={result.col_residual!r}",
        "source,target,mass",
    ]
    for i in range(plan.shape[0]):
        for j in range(plan.shape[1]):
            lines.append(f"{i},{j},{repr(float(plan[i, j]))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
