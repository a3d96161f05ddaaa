"""Shared helpers: central finite differences and small data factories."""

import numpy as np
import pytest

from agma import autodiff as ad
from agma.nets import Forecaster, ModelConfig
from agma.trajectory import SynthConfig, generate_synthetic


def fd_grad(fn, arrays, wrt, eps=1e-4):
    """Central-difference gradient of a scalar function of numpy arrays.

    ``fn(*arrays) -> float``; returns d fn / d arrays[wrt] elementwise.
    """
    work = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target, dtype=np.float64)
    flat_x = target.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = fn(*work)
        flat_x[i] = orig - eps
        lo = fn(*work)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * eps)
    return grad


def grad_errors(analytic, numeric, rtol=1e-3, atol=1e-6):
    """Elementwise |a - n| - (rtol * |n| + atol); nonpositive means pass."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) - (rtol * np.abs(numeric) + atol)


def assert_grads_close(build, arrays, rtol=1e-3, atol=1e-6, eps=1e-4, wrt=None):
    """Backward pass of ``build`` against central differences.

    ``build`` maps Tensors to a scalar Tensor. Checks every input by default.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    assert out.data.shape == (), f"build must return a scalar, got shape {out.data.shape}"
    out.backward()

    def scalar(*raw):
        with ad.no_grad():
            return float(build(*[ad.Tensor(r) for r in raw]).data)

    indices = range(len(arrays)) if wrt is None else wrt
    for idx in indices:
        numeric = fd_grad(scalar, arrays, idx, eps=eps)
        analytic = tensors[idx].grad
        assert analytic is not None, f"input {idx} received no gradient"
        worst = grad_errors(analytic, numeric, rtol, atol).max()
        assert worst <= 0.0, (
            f"gradient mismatch on input {idx}: worst excess {worst:.3e}\n"
            f"analytic:\n{analytic}\nnumeric:\n{numeric}"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def tiny_config(**overrides):
    """Small dims so finite differences and end-to-end loops stay fast."""
    base = dict(latent_dim=6, t_obs=4, t_pred=5, decoder_hidden=8, k_global=4)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides):
    return Forecaster(tiny_config(**overrides), seed=seed)


def small_scenes(n_scenes=6, seed=3, t_obs=4, t_pred=5, agents=2):
    cfg = SynthConfig(
        n_scenes=n_scenes, t_obs=t_obs, t_pred=t_pred,
        agents_per_scene=agents, seed=seed,
    )
    return generate_synthetic(cfg)
