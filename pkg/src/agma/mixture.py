"""Diagonal Gaussian mixtures shared by the batch and global priors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ParseError, ShapeError

_WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: scalar weight, mean vector, diagonal variance."""

    weight: float
    mean: np.ndarray
    variance: np.ndarray


class MixturePrior:
    """A weighted diagonal Gaussian mixture over latent codes.

    Fields are autodiff tensors so mixtures estimated from features stay
    differentiable; plain arrays are wrapped as constants.
    """

    __slots__ = ("weights", "means", "variances")

    def __init__(self, weights, means, variances):
        weights = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
        means = means if isinstance(means, Tensor) else Tensor(np.asarray(means, dtype=np.float64))
        variances = (
            variances if isinstance(variances, Tensor) else Tensor(np.asarray(variances, dtype=np.float64))
        )
        if weights.data.ndim != 1 or means.data.ndim != 2 or variances.data.ndim != 2:
            raise ShapeError("mixture needs weights (K,), means (K, d), variances (K, d)")
        k = weights.data.shape[0]
        if k < 1:
            raise DomainError("mixture needs at least one component")
        if means.data.shape[0] != k or variances.data.shape != means.data.shape:
            raise ShapeError(
                f"inconsistent mixture shapes: weights {weights.data.shape}, "
                f"means {means.data.shape}, variances {variances.data.shape}"
            )
        if np.any(weights.data <= 0) or abs(weights.data.sum() - 1.0) > _WEIGHT_TOL:
            raise DomainError("mixture weights must be positive and sum to one")
        if np.any(variances.data < 0):
            raise DomainError("mixture variances must be nonnegative")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    def __setattr__(self, name, value):
        raise AttributeError("MixturePrior is immutable")

    @property
    def k(self):
        return self.weights.data.shape[0]

    @property
    def dim(self):
        return self.means.data.shape[1]

    @property
    def components(self):
        return [
            GaussianComponent(float(self.weights.data[i]), self.means.data[i].copy(), self.variances.data[i].copy())
            for i in range(self.k)
        ]

    def detached(self):
        return MixturePrior(self.weights.data.copy(), self.means.data.copy(), self.variances.data.copy())

    def log_density(self, x):
        """Exact mixture log density at ``x`` with shape (d,) or (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[1] != self.dim:
            raise ShapeError(f"points have dimension {x.shape[1]}, mixture has {self.dim}")
        w, mu, var = self.weights.data, self.means.data, self.variances.data
        if np.any(var == 0):
            raise DomainError("log density needs strictly positive variances")
        # (n, K): log w_k + sum_d log N(x_d | mu_kd, var_kd)
        diff = x[:, None, :] - mu[None, :, :]
        comp = -0.5 * (np.log(2.0 * np.pi * var)[None] + diff**2 / var[None]).sum(axis=2)
        logp = np.log(w)[None] + comp
        out = np.logaddexp.reduce(logp, axis=1)
        return float(out[0]) if single else out


def mixture_to_csv(mixture, path):
    """Write one row per component at full float precision."""
    dim = mixture.dim
    header = (
        ["component", "weight"]
        + [f"mean_{j}" for j in range(dim)]
        + [f"var_{j}" for j in range(dim)]
    )
    lines = [",".join(header)]
    w, mu, var = mixture.weights.data, mixture.means.data, mixture.variances.data
    for i in range(mixture.k):
        cells = [str(i), repr(float(w[i]))]
        cells += [repr(float(v)) for v in mu[i]]
        cells += [repr(float(v)) for v in var[i]]
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def mixture_from_csv(path):
    """Inverse of :func:`mixture_to_csv`; exact round-trip."""
    with open(path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if len(rows) < 2:
        raise ParseError("mixture file has no components", line_number=1)
    header = rows[0].split(",")
    if header[:2] != ["component", "weight"]:
        raise ParseError(f"unexpected mixture header {rows[0]!r}", line_number=1)
    dim = sum(1 for name in header if name.startswith("mean_"))
    if dim == 0 or len(header) != 2 + 2 * dim:
        raise ParseError(f"malformed mixture header {rows[0]!r}", line_number=1)
    weights, means, variances = [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        cells = row.split(",")
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(cells)}", line_number=ln)
        try:
            weights.append(float(cells[1]))
            means.append([float(c) for c in cells[2 : 2 + dim]])
            variances.append([float(c) for c in cells[2 + dim :]])
        except ValueError as exc:
            raise ParseError(str(exc), line_number=ln) from None
    return MixturePrior(np.array(weights), np.array(means), np.array(variances))


def merge_mixtures(mixtures, weights=None):
    """Pool several mixtures into one, rescaling component weights."""
    if not mixtures:
        raise DomainError("cannot merge zero mixtures")
    if weights is None:
        weights = np.full(len(mixtures), 1.0 / len(mixtures))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(mixtures),) or np.any(weights <= 0):
        raise DomainError("merge weights must be positive, one per mixture")
    weights = weights / weights.sum()
    w = ad.concat([ad.mul(m.weights, float(s)) for m, s in zip(mixtures, weights)], axis=0)
    mu = ad.concat([m.means for m in mixtures], axis=0)
    var = ad.concat([m.variances for m in mixtures], axis=0)
    return MixturePrior(w, mu, var)
