"""Trainable global mixture over latent modes, conditioned per agent.

The mixture parameters live in the model's parameter store: free means, a
softplus parameterization keeping variances above a floor, and logits that
softmax into base weights. Conditioning runs cross attention from an agent's
past features over the component statistics; the result is a reweighted
sub-mixture. Sampling uses the Gumbel-Softmax relaxation of the resulting
categorical so draws stay differentiable end to end, with a hard argmax
variant for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError
from .mixture import MixturePrior, mixture_from_csv, mixture_to_csv

_LOG_FLOOR = 1e-300  # zero-attention components get effectively -inf logits


def global_mixture(model):
    """Differentiable view of the store's global mixture parameters."""
    p = model.params
    weights = ad.softmax(p["global.logits"], axis=-1)
    variances = ad.add(ad.softplus(p["global.rho"]), model.config.sigma2_min)
    return MixturePrior(weights, p["global.mu"], variances)


@dataclass(frozen=True)
class ConditionedPrior:
    """Per-agent attention over the global components: a reweighted sub-GMM."""

    attention: Tensor  # (K,) or (A, K); rows sum to one, possibly sparse
    mixture: MixturePrior

    def attention_row(self, agent=None):
        a = self.attention.data
        if a.ndim == 1:
            return a
        if agent is None:
            raise DomainError("attention covers several agents; pick one")
        return a[agent]

    def mixture_for(self, agent=None):
        """Reweighted mixture for one agent; drops zero-attention components."""
        a = self.attention_row(agent)
        keep = np.flatnonzero(a > 0)
        if keep.size == 0:
            raise DomainError("attention places no mass on any component")
        return MixturePrior(
            a[keep] / a[keep].sum(), self.mixture.means.data[keep], self.mixture.variances.data[keep]
        )


def condition(model, f_past, gmm=None, normalizer=None):
    """Attend from past features to the global components."""
    mix = gmm if gmm is not None else global_mixture(model)
    attention = model.cross_attention_weights(f_past, mix, normalizer=normalizer)
    return ConditionedPrior(attention=attention, mixture=mix)


def gumbel_select(attention, temperature, rng, hard=False):
    """Relaxed categorical draws from attention rows.

    Soft: softmax((log a + G) / temperature) with Gumbel noise G, one relaxed
    one-hot per row, differentiable in ``a``. Hard: argmax(log a + G), which
    is an exact categorical sample from ``a``. Zero-weight components get
    effectively minus-infinite logits and are never selected.
    """
    if temperature <= 0:
        raise DomainError(f"relaxation temperature must be positive, got {temperature}")
    a = attention.data if isinstance(attention, Tensor) else np.asarray(attention, dtype=np.float64)
    if np.any(a < 0) or np.any(a.sum(axis=-1) <= 0):
        raise DomainError("attention rows must be nonnegative with positive mass")
    gumbel = -np.log(-np.log(rng.uniform(size=a.shape)))
    if hard:
        with np.errstate(divide="ignore"):
            return np.argmax(np.log(a) + gumbel, axis=-1)
    if not isinstance(attention, Tensor):
        attention = Tensor(a)
    logits = ad.add(ad.log(ad.maximum(attention, _LOG_FLOOR)), gumbel)
    return ad.softmax(ad.mul(logits, 1.0 / temperature), axis=-1)


def sample_global(prior, temperature, rng, n=1, hard=False):
    """Draw ``n`` latent codes per agent from a conditioned prior.

    Soft draws mix reparameterized Gaussians from every component weighted by
    the relaxed one-hot, z = sum_g ztilde_g (mu_g + sigma_g * eps_g), so
    gradients reach the attention, the means and the variances. Hard draws
    commit to one component per sample. Returns (n, d) for a single agent or
    (A, n, d) for a batch of agents.
    """
    if n < 1:
        raise DomainError(f"need at least one sample, got {n}")
    att = prior.attention
    single = att.data.ndim == 1
    rows = 1 if single else att.data.shape[0]
    k, d = prior.mixture.k, prior.mixture.dim
    flat = ad.reshape(att, (rows, k))
    # one relaxed/hard selection per (agent, sample)
    rep = ad.reshape(ad.mul(ad.reshape(flat, (rows, 1, k)), np.ones((rows, n, k))), (rows * n, k))
    mu, var = prior.mixture.means, prior.mixture.variances
    sd = ad.sqrt(var)
    if hard:
        idx = gumbel_select(rep, temperature, rng, hard=True)
        eps = rng.standard_normal((rows * n, d))
        z = ad.add(ad.take(mu, idx), ad.mul(ad.take(sd, idx), eps))
    else:
        sel = gumbel_select(rep, temperature, rng)  # (rows*n, K)
        eps = rng.standard_normal((rows * n, k, d))
        cand = ad.add(mu, ad.mul(sd, eps))  # broadcast to (rows*n, K, d)
        z = ad.reshape(ad.matmul(ad.reshape(sel, (rows * n, 1, k)), cand), (rows * n, d))
    return ad.reshape(z, (n, d) if single else (rows, n, d))


def sample_from_past(model, f_past, n, rng, temperature=1.0, hard=False, normalizer=None):
    """Condition on past features and sample latent codes in one call."""
    return sample_global(condition(model, f_past, normalizer=normalizer), temperature, rng, n=n, hard=hard)


def log_density(prior, z, agent=None):
    """Log density of the attention-reweighted sub-mixture at ``z``."""
    return prior.mixture_for(agent).log_density(z)


def export_global_csv(model, path):
    """Persist the current global mixture at full precision."""
    mixture_to_csv(global_mixture(model).detached(), path)


def import_global_csv(model, path):
    """Load mixture values back into the parameter store.

    Means and logits are exact; variances invert the softplus, so they are
    reproduced up to floating point (and must exceed the configured floor).
    """
    mix = mixture_from_csv(path)
    p = model.params
    if mix.k != model.config.k_global or mix.dim != model.config.latent_dim:
        raise DomainError(
            f"mixture is {mix.k} x {mix.dim}, model expects "
            f"{model.config.k_global} x {model.config.latent_dim}"
        )
    var = mix.variances.data - model.config.sigma2_min
    if np.any(var <= 0):
        raise DomainError("imported variances fall below the configured floor")
    p["global.mu"].data = mix.means.data.copy()
    # inverse softplus: log(expm1(v)), stable form for large v
    p["global.rho"].data = np.where(var > 30, var, np.log(np.expm1(np.maximum(var, 1e-12))))
    p["global.logits"].data = np.log(mix.weights.data)
