"""Exact discrete oracles for the latent-forecasting error bounds.

A DiscreteModel fixes the conditioning context and makes every distribution
a finite vector: a true and a learned prior over latent modes z, and a true
and a learned sampler row per mode over outcomes Y. Everything downstream
is computed by exact enumeration, so the inequalities checked here (the
Pinsker bound, the prior-versus-sampler error decomposition bound, and its
contrapositive corollary) are certified rather than estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import DomainError, ShapeError

_DIST_TOL = 1e-12
_CHECK_TOL = 1e-12


def _check_distribution(vec, what):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 1:
        raise ShapeError(f"{what} must be a nonempty vector, got shape {vec.shape}")
    if np.any(vec < 0) or abs(vec.sum() - 1.0) > _DIST_TOL:
        raise DomainError(f"{what} is not a probability distribution (sum {vec.sum()!r})")
    return vec


def _check_rows(mat, what, c):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != c:
        raise ShapeError(f"{what} must have one row per latent state, got {mat.shape}")
    for i in range(c):
        _check_distribution(mat[i], f"{what} row {i}")
    return mat


@dataclass(frozen=True)
class DiscreteModel:
    """Finite true/learned priors and samplers for one fixed context."""

    true_prior: np.ndarray  # (C,)
    learned_prior: np.ndarray  # (C,)
    true_sampler: np.ndarray  # (C, V)
    learned_sampler: np.ndarray  # (C, V)

    def __post_init__(self):
        tp = _check_distribution(self.true_prior, "true prior")
        lp = _check_distribution(self.learned_prior, "learned prior")
        if tp.shape != lp.shape:
            raise ShapeError("priors must share a support size")
        ts = _check_rows(self.true_sampler, "true sampler", tp.size)
        ls = _check_rows(self.learned_sampler, "learned sampler", tp.size)
        if ts.shape != ls.shape:
            raise ShapeError("samplers must share an outcome size")
        for name, arr in (("true_prior", tp), ("learned_prior", lp),
                          ("true_sampler", ts), ("learned_sampler", ls)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def c(self):
        return self.true_prior.size

    @property
    def v(self):
        return self.true_sampler.shape[1]


def marginal(prior, sampler):
    """Exact outcome marginal: sum_c prior_c * sampler[c]."""
    prior = _check_distribution(prior, "prior")
    sampler = _check_rows(sampler, "sampler", prior.size)
    return prior @ sampler


def entropy(p):
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    pos = p[p > 0]
    return float(-(pos * np.log(pos)).sum())


def kl_divergence(p, q):
    """Exact KL(p || q) in nats; +inf when q misses mass p needs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def total_variation_l1(p, q):
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mutual_information(prior, sampler):
    """Exact I(Y; z) in nats from the joint prior_c * sampler[c, v]."""
    prior = np.asarray(prior, dtype=np.float64)
    sampler = np.asarray(sampler, dtype=np.float64)
    marg = prior @ sampler
    joint = prior[:, None] * sampler
    indep = prior[:, None] * marg[None, :]
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / indep[mask])).sum())


def conditional_entropy(prior, sampler):
    """Exact H(Y | z) in nats."""
    prior = np.asarray(prior, dtype=np.float64)
    sampler = np.asarray(sampler, dtype=np.float64)
    joint = prior[:, None] * sampler
    mask = joint > 0
    return float(-(joint[mask] * np.log(sampler[mask])).sum())


@dataclass(frozen=True)
class ErrorDecomposition:
    """The two L1 error channels and the resulting distribution KL."""

    eps_prior: float  # || (p_z - q_z) @ learned_sampler ||_1
    eps_sample: float  # || p_z @ (true_sampler - learned_sampler) ||_1
    l_dist: float  # KL(true marginal || learned marginal), may be inf
    kl_finite: bool


def errors_decompose(model):
    """Exact prior error, sampler error, and marginal KL for one model."""
    eps_prior = float(
        np.abs((model.true_prior - model.learned_prior) @ model.learned_sampler).sum()
    )
    eps_sample = float(
        np.abs(model.true_prior @ (model.true_sampler - model.learned_sampler)).sum()
    )
    p_marg = marginal(model.true_prior, model.true_sampler)
    q_marg = marginal(model.learned_prior, model.learned_sampler)
    l_dist = kl_divergence(p_marg, q_marg)
    return ErrorDecomposition(
        eps_prior=eps_prior, eps_sample=eps_sample, l_dist=l_dist,
        kl_finite=np.isfinite(l_dist),
    )


@dataclass(frozen=True)
class BoundCheck:
    bound: float
    holds: bool
    slack: float


def check_pinsker(p, q):
    """KL(p || q) >= 0.5 * ||p - q||_1^2, checked exactly.

    Returns (kl, half_l1_sq, holds); an infinite KL satisfies the bound
    trivially and is reported as such.
    """
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    kl = kl_divergence(p, q)
    half = 0.5 * total_variation_l1(p, q) ** 2
    return kl, half, bool(kl >= half - _CHECK_TOL)


def check_theorem_3_1(model):
    """Marginal KL >= 0.5 * (eps_prior - eps_sample)^2 on one model."""
    dec = errors_decompose(model)
    bound = 0.5 * (dec.eps_prior - dec.eps_sample) ** 2
    holds = bool(dec.l_dist >= bound - _CHECK_TOL)
    return BoundCheck(bound=bound, holds=holds, slack=dec.l_dist - bound), dec


def check_corollary(model, delta):
    """Contrapositive: l_dist < delta forces eps_prior < sqrt(2 delta) + eps_sample.

    Vacuously true when l_dist >= delta. The interesting regime has
    eps_prior > eps_sample; callers restrict to it when sweeping.
    """
    if delta <= 0:
        raise DomainError(f"delta must be positive, got {delta}")
    dec = errors_decompose(model)
    if not dec.kl_finite or dec.l_dist >= delta:
        return True
    return bool(dec.eps_prior < np.sqrt(2.0 * delta) + dec.eps_sample + _CHECK_TOL)


# -- randomized certification sweep ------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    model_id: int
    c: int
    v: int
    eps_prior: float
    eps_sample: float
    l_dist: float
    bound: float
    slack: float
    holds: bool


def random_model(rng, max_c=5, max_v=8):
    """Dirichlet(1, ..., 1) rows everywhere for full simplex coverage."""
    c = int(rng.integers(1, max_c + 1))
    v = int(rng.integers(2, max_v + 1))
    return DiscreteModel(
        true_prior=rng.dirichlet(np.ones(c)),
        learned_prior=rng.dirichlet(np.ones(c)),
        true_sampler=rng.dirichlet(np.ones(v), size=c),
        learned_sampler=rng.dirichlet(np.ones(v), size=c),
    )


def verify_suite(n_models, rng, max_c=5, max_v=8):
    """Randomized sweep over models; returns (rows, violation counts).

    Every row records the decomposition and the theorem bound. The Pinsker
    check runs on each model's pair of outcome marginals, and the corollary
    check uses a delta just above the achieved KL so it never goes vacuous.
    Violation counts must be zero; these are proved inequalities, so any hit
    is an implementation bug.
    """
    if n_models < 1:
        raise DomainError(f"need at least one model, got {n_models}")
    rows = []
    violations = {"pinsker": 0, "theorem": 0, "corollary": 0}
    for i in range(n_models):
        m = random_model(rng, max_c=max_c, max_v=max_v)
        check, dec = check_theorem_3_1(m)
        p_marg = marginal(m.true_prior, m.true_sampler)
        q_marg = marginal(m.learned_prior, m.learned_sampler)
        _, _, pinsker_ok = check_pinsker(p_marg, q_marg)
        violations["pinsker"] += not pinsker_ok
        violations["theorem"] += not check.holds
        if dec.eps_prior > dec.eps_sample and dec.kl_finite:
            delta = dec.l_dist * 1.5 + 1e-3
            violations["corollary"] += not check_corollary(m, delta)
        rows.append(SweepRow(
            model_id=i, c=m.c, v=m.v, eps_prior=dec.eps_prior, eps_sample=dec.eps_sample,
            l_dist=dec.l_dist, bound=check.bound, slack=check.slack, holds=check.holds,
        ))
    return rows, violations


def sweep_to_csv(rows, path):
    lines = ["model_id,C,V,eps_prior,eps_sample,L_dist,bound,slack,holds"]
    for r in rows:
        lines.append(
            f"{r.model_id},{r.c},{r.v},{r.eps_prior!r},{r.eps_sample!r},"
            f"{r.l_dist!r},{r.bound!r},{r.slack!r},{int(r.holds)}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- information gap under latent coarsening ---------------------------------------


def coarsen(prior, sampler, groups):
    """Merge latent states; returns the induced (prior, sampler rows).

    Each group's row is the prior-weighted average of its members' rows,
    i.e. the sampler the merged state actually induces under the true joint.
    Zero-mass groups fall back to a plain average.
    """
    prior = np.asarray(prior, dtype=np.float64)
    sampler = np.asarray(sampler, dtype=np.float64)
    seen = sorted(i for g in groups for i in g)
    if seen != list(range(prior.size)):
        raise DomainError("groups must partition the latent states exactly once")
    merged_prior = np.array([prior[list(g)].sum() for g in groups])
    rows = []
    for g in groups:
        idx = list(g)
        mass = prior[idx].sum()
        if mass > 0:
            rows.append(prior[idx] @ sampler[idx] / mass)
        else:
            rows.append(sampler[idx].mean(axis=0))
    return merged_prior, np.stack(rows)


def best_sampler_floor(prior, true_sampler, groups):
    """Smallest expected per-latent L1 sampler error with rows tied per group.

    minimize  sum_c prior_c * || true_sampler[c] - r_{group(c)} ||_1
    over one shared distribution row r per group. Solved exactly as a linear
    program per group (the groups separate). Finer partitions can only do
    better, so this floor is monotone under coarsening.
    """
    prior = np.asarray(prior, dtype=np.float64)
    sampler = np.asarray(true_sampler, dtype=np.float64)
    v = sampler.shape[1]
    total = 0.0
    for g in groups:
        idx = list(g)
        w = prior[idx]
        rows = sampler[idx]
        n = len(idx)
        if n == 1:
            continue  # its own row is free, error 0
        # variables: r (v entries) then t_{c,v} slacks; minimize sum w_c t_cv
        n_var = v + n * v
        cost = np.concatenate([np.zeros(v), np.repeat(w, v)])
        a_ub = np.zeros((2 * n * v, n_var))
        b_ub = np.zeros(2 * n * v)
        for ci in range(n):
            for vi in range(v):
                t_col = v + ci * v + vi
                row1 = 2 * (ci * v + vi)
                # rows[ci, vi] - r_vi <= t  and  r_vi - rows[ci, vi] <= t
                a_ub[row1, vi] = -1.0
                a_ub[row1, t_col] = -1.0
                b_ub[row1] = -rows[ci, vi]
                a_ub[row1 + 1, vi] = 1.0
                a_ub[row1 + 1, t_col] = -1.0
                b_ub[row1 + 1] = rows[ci, vi]
        a_eq = np.zeros((1, n_var))
        a_eq[0, :v] = 1.0
        res = optimize.linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0],
                               bounds=[(0, None)] * n_var, method="highs")
        if not res.success:
            raise DomainError(f"tied-row subproblem failed: {res.message}")
        total += res.fun
    return float(total)


def best_marginal_kl_floor(p_marginal, rows, n_iters=2000, tol=1e-14):
    """Smallest KL(p_marginal || w @ rows) over prior weights w on the simplex.

    This is maximum-likelihood mixture weighting with known components;
    the multiplicative EM update w_m <- sum_v p_v * w_m rows[m,v] / q_w(v)
    increases the likelihood monotonically to the convex optimum. Because
    coarsening replaces rows by convex combinations, the feasible marginal
    set shrinks and this floor can only grow.
    """
    p = np.asarray(p_marginal, dtype=np.float64)
    r = np.asarray(rows, dtype=np.float64)
    m = r.shape[0]
    w = np.full(m, 1.0 / m)
    last = np.inf
    for _ in range(n_iters):
        q = w @ r
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(q > 0, p / q, 0.0)
        w = w * (r @ ratio)
        s = w.sum()
        if s <= 0:
            break
        w /= s
        kl = kl_divergence(p, w @ r)
        if abs(last - kl) < tol:
            break
        last = kl
    return kl_divergence(p, w @ r), w


@dataclass(frozen=True)
class InfoGapRow:
    n_states: int
    info_nats: float  # I(Y; z) of the coarsened joint
    eps_sample_floor: float  # tied-row expected L1 floor
    l_dist_floor: float  # best marginal KL over priors on induced rows
    h_y_given_z: float  # H(Y|z) = H(Y) - I(Y;z), exact identity


def merge_chain(prior, sampler):
    """Deterministic coarsening chain: repeatedly merge the two closest rows.

    Closeness is L1 distance between induced rows, ties broken by smallest
    indices. Returns a list of partitions from fully separate to fully
    merged.
    """
    prior = np.asarray(prior, dtype=np.float64)
    c = prior.size
    parts = [tuple((i,) for i in range(c))]
    current = [(i,) for i in range(c)]
    while len(current) > 1:
        _, rows = coarsen(prior, sampler, current)
        best = None
        for i in range(len(current)):
            for j in range(i + 1, len(current)):
                d = float(np.abs(rows[i] - rows[j]).sum())
                if best is None or d < best[0] - 1e-15:
                    best = (d, i, j)
        _, i, j = best
        merged = tuple(sorted(current[i] + current[j]))
        current = [g for k, g in enumerate(current) if k not in (i, j)] + [merged]
        current.sort(key=lambda g: g[0])
        parts.append(tuple(current))
    return parts


def info_gap_sweep(prior, sampler, partitions=None):
    """Best achievable sampler error and marginal KL along a coarsening chain.

    One row per partition, ordered from fine to coarse: exact mutual
    information I(Y;z) of the induced joint, the tied-row expected-L1 floor,
    the marginal-KL floor over reweightings of the induced rows, and the
    conditional entropy H(Y|z). Coarsening drives information down and both
    floors up.
    """
    prior = _check_distribution(prior, "prior")
    sampler = _check_rows(sampler, "sampler", prior.size)
    if partitions is None:
        partitions = merge_chain(prior, sampler)
    p_marg = prior @ sampler
    rows = []
    for groups in partitions:
        merged_prior, merged_rows = coarsen(prior, sampler, groups)
        info = mutual_information(merged_prior, merged_rows)
        eps_floor = best_sampler_floor(prior, sampler, groups)
        kl_floor, _ = best_marginal_kl_floor(p_marg, merged_rows)
        rows.append(InfoGapRow(
            n_states=len(groups), info_nats=info, eps_sample_floor=eps_floor,
            l_dist_floor=kl_floor, h_y_given_z=conditional_entropy(merged_prior, merged_rows),
        ))
    return rows


def info_gap_to_csv(rows, path):
    lines = ["n_states,info_nats,eps_sample_floor,l_dist_floor,h_y_given_z"]
    for r in rows:
        lines.append(
            f"{r.n_states},{r.info_nats!r},{r.eps_sample_floor!r},{r.l_dist_floor!r},{r.h_y_given_z!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
