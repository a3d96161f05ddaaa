"""Parameterized differentiable building blocks of the forecaster.

The :class:`Forecaster` bundles a configuration with a :class:`ParamStore`
holding every trainable tensor: the past/full trajectory encoders (point
embedding, temporal convolution, gated recurrence, social self-attention),
the similarity/repulsion projection heads, the cross-attention scorer over
global mixture components, the shared trajectory decoder, the optional
sample-refinement attention, the learnable clustering thresholds, and the
global mixture parameters.

Forward passes are read-only on the store and safe to run concurrently;
gradient accumulation mutates it and needs a single writer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DomainError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of the forecaster."""

    latent_dim: int = 32
    t_obs: int = 8
    t_pred: int = 12
    decoder_hidden: int = 64
    k_global: int = 100
    sigma2_min: float = 1e-4
    theta_sim_init: float = 0.7
    theta_rep_init: float = 0.3
    attention_normalizer: str = "entmax15"  # or "softmax"
    refine: bool = False
    refine_heads: int = 4
    refine_width_mult: int = 20  # attention width = mult * latent_dim

    def __post_init__(self):
        for name in ("latent_dim", "t_obs", "t_pred", "decoder_hidden", "k_global"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.sigma2_min < 0:
            raise ConfigError(f"sigma2_min must be nonnegative, got {self.sigma2_min}")
        if self.attention_normalizer not in ("entmax15", "softmax"):
            raise ConfigError(f"unknown attention normalizer {self.attention_normalizer!r}")
        if self.refine_width_mult * self.latent_dim % self.refine_heads != 0:
            raise ConfigError("refine attention width must divide evenly into heads")


class ParamStore:
    """Flat registry of named trainable tensors with gradient slots."""

    def __init__(self, seed=0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._params = {}

    def add(self, name, shape, init="kaiming", fan_in=None, value=None):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if value is not None:
            data = np.asarray(value, dtype=np.float64).reshape(shape)
        elif init == "kaiming":
            fan = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = np.sqrt(6.0 / max(fan, 1))
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = self._rng.normal(0.0, 1.0, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self._params.values())

    def n_parameters(self):
        return sum(t.data.size for t in self._params.values())


def _linear(x, w, b=None):
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


class Forecaster:
    """All networks plus the trainable global mixture, in one parameter store."""

    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        self.params = ParamStore(seed=seed)
        self._build()

    # -- construction -------------------------------------------------------

    def _add_encoder(self, prefix):
        d = self.config.latent_dim
        p = self.params
        p.add(f"{prefix}.embed.w1", (2, d), fan_in=2)
        p.add(f"{prefix}.embed.b1", (d,), init="zeros")
        p.add(f"{prefix}.embed.w2", (d, d), fan_in=d)
        p.add(f"{prefix}.embed.b2", (d,), init="zeros")
        for tap in ("wl", "wc", "wr"):  # temporal conv, kernel 3
            p.add(f"{prefix}.conv.{tap}", (d, d), fan_in=3 * d)
        p.add(f"{prefix}.conv.b", (d,), init="zeros")
        p.add(f"{prefix}.gru.wx", (d, 3 * d), fan_in=d)
        p.add(f"{prefix}.gru.uh", (d, 3 * d), fan_in=d)
        p.add(f"{prefix}.gru.bx", (3 * d,), init="zeros")
        p.add(f"{prefix}.gru.bh", (3 * d,), init="zeros")
        for tap in ("wq", "wk", "wv", "wo"):
            p.add(f"{prefix}.attn.{tap}", (d, d), fan_in=d)

    def _build(self):
        cfg = self.config
        d = cfg.latent_dim
        p = self.params
        self._add_encoder("enc_past")
        self._add_encoder("enc_full")
        for head in ("sim", "rep"):
            p.add(f"{head}.w1", (d, d), fan_in=d)
            p.add(f"{head}.b1", (d,), init="zeros")
            p.add(f"{head}.w2", (d, d), fan_in=d)
            p.add(f"{head}.b2", (d,), init="zeros")
        p.add("cross.query.w", (d, d), fan_in=d)
        p.add("cross.key.w", (2 * d + 1, d), fan_in=2 * d + 1)
        p.add("cross.key.b", (d,), init="zeros")
        p.add("dec.w1", (2 * d, cfg.decoder_hidden), fan_in=2 * d)
        p.add("dec.b1", (cfg.decoder_hidden,), init="zeros")
        p.add("dec.w2", (cfg.decoder_hidden, cfg.t_pred * 2), fan_in=cfg.decoder_hidden)
        p.add("dec.b2", (cfg.t_pred * 2,), init="zeros")
        p.add("theta_sim", (), value=cfg.theta_sim_init)
        p.add("theta_rep", (), value=cfg.theta_rep_init)
        p.add("global.mu", (cfg.k_global, d), init="normal")
        # softplus(rho) + sigma2_min == 1 at init
        rho0 = np.log(np.expm1(1.0 - cfg.sigma2_min))
        p.add("global.rho", (cfg.k_global, d), value=np.full((cfg.k_global, d), rho0))
        p.add("global.logits", (cfg.k_global,), init="zeros")
        if cfg.refine:
            width = cfg.refine_width_mult * d
            for tap in ("wq", "wk", "wv"):
                p.add(f"refine.{tap}", (d, width), fan_in=d)
            p.add("refine.wo", (width, d), fan_in=width)

    # -- encoders -------------------------------------------------------------

    def _encode_group(self, prefix, coords):
        """Encode scenes with a common agent count; coords is (B, M, T, 2)."""
        p = self.params
        d = self.config.latent_dim
        b, m, t, _ = coords.shape
        x = Tensor(coords.reshape(b * m, t, 2))

        h = ad.relu(_linear(x, p[f"{prefix}.embed.w1"], p[f"{prefix}.embed.b1"]))
        h = _linear(h, p[f"{prefix}.embed.w2"], p[f"{prefix}.embed.b2"])

        # temporal convolution, kernel 3, zero padding
        zero = Tensor(np.zeros((b * m, 1, d)))
        prev = ad.concat([zero, h[:, :-1, :]], axis=1)
        nxt = ad.concat([h[:, 1:, :], zero], axis=1)
        h = ad.relu(
            ad.add(
                ad.add(ad.matmul(prev, p[f"{prefix}.conv.wl"]), ad.matmul(h, p[f"{prefix}.conv.wc"])),
                ad.add(ad.matmul(nxt, p[f"{prefix}.conv.wr"]), p[f"{prefix}.conv.b"]),
            )
        )

        # gated recurrence over time
        xw = ad.add(ad.matmul(h, p[f"{prefix}.gru.wx"]), p[f"{prefix}.gru.bx"])
        state = Tensor(np.zeros((b * m, d)))
        for step in range(t):
            xt = xw[:, step, :]
            hu = ad.add(ad.matmul(state, p[f"{prefix}.gru.uh"]), p[f"{prefix}.gru.bh"])
            r = ad.sigmoid(ad.add(xt[:, :d], hu[:, :d]))
            u = ad.sigmoid(ad.add(xt[:, d : 2 * d], hu[:, d : 2 * d]))
            n = ad.tanh(ad.add(xt[:, 2 * d :], ad.mul(r, hu[:, 2 * d :])))
            state = ad.add(ad.mul(ad.add(1.0, ad.mul(u, -1.0)), n), ad.mul(u, state))

        # social self-attention across the M agents of each scene
        q = ad.reshape(ad.matmul(state, p[f"{prefix}.attn.wq"]), (b, m, d))
        k = ad.reshape(ad.matmul(state, p[f"{prefix}.attn.wk"]), (b, m, d))
        v = ad.reshape(ad.matmul(state, p[f"{prefix}.attn.wv"]), (b, m, d))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.reshape(ad.matmul(attn, v), (b * m, d))
        return ad.matmul(mixed, p[f"{prefix}.attn.wo"])

    def _encode_scenes(self, prefix, scene_coords, expected_len):
        """Encode a list of (M_i, T, 2) arrays; returns (sum M_i, d)."""
        checked = []
        for c in scene_coords:
            c = np.asarray(c, dtype=np.float64)
            if c.ndim != 3 or c.shape[2] != 2:
                raise ShapeError(f"scene coordinates must be (M, T, 2), got {c.shape}")
            if c.shape[1] != expected_len:
                raise ShapeError(f"expected trajectories of length {expected_len}, got {c.shape[1]}")
            if not np.all(np.isfinite(c)):
                raise ValueError("trajectories contain non-finite coordinates")
            checked.append(c)

        groups = {}
        for idx, c in enumerate(checked):
            groups.setdefault(c.shape[0], []).append(idx)

        per_scene = [None] * len(checked)
        for m, idxs in groups.items():
            stacked = np.stack([checked[i] for i in idxs])
            out = self._encode_group(prefix, stacked)  # (len(idxs) * m, d)
            for j, i in enumerate(idxs):
                per_scene[i] = out[j * m : (j + 1) * m, :]
        if len(per_scene) == 1:
            return per_scene[0]
        return ad.concat(per_scene, axis=0)

    def encode_past(self, observed):
        """Embed observed trajectories; (T_obs, 2) -> (d,) or (M, T_obs, 2) -> (M, d)."""
        observed = np.asarray(observed, dtype=np.float64)
        single = observed.ndim == 2
        if single:
            observed = observed[None]
        out = self._encode_scenes("enc_past", [observed], self.config.t_obs)
        return out[0, :] if single else out

    def encode_full(self, observed, future):
        """Embed complete trajectories (observation followed by future)."""
        observed = np.asarray(observed, dtype=np.float64)
        future = np.asarray(future, dtype=np.float64)
        single = observed.ndim == 2
        if single:
            observed, future = observed[None], future[None]
        if future.shape[1] != self.config.t_pred:
            raise ShapeError(f"expected futures of length {self.config.t_pred}, got {future.shape[1]}")
        full = np.concatenate([observed, future], axis=1)
        out = self._encode_scenes("enc_full", [full], self.config.t_obs + self.config.t_pred)
        return out[0, :] if single else out

    def encode_past_scenes(self, scene_coords):
        """Batched encode_past over several scenes, preserving agent order."""
        return self._encode_scenes("enc_past", scene_coords, self.config.t_obs)

    def encode_full_scenes(self, scene_coords):
        return self._encode_scenes("enc_full", scene_coords, self.config.t_obs + self.config.t_pred)

    # -- heads, attention, decoder ---------------------------------------------

    def project_heads(self, f_full):
        """Similarity and repulsion projections, each in (0, 1) elementwise."""
        p = self.params
        s = ad.sigmoid(_linear(ad.relu(_linear(f_full, p["sim.w1"], p["sim.b1"])), p["sim.w2"], p["sim.b2"]))
        r = ad.sigmoid(_linear(ad.relu(_linear(f_full, p["rep.w1"], p["rep.b1"])), p["rep.w2"], p["rep.b2"]))
        return s, r

    def cross_attention_weights(self, f_past, mixture, normalizer=None):
        """Attention of past features over mixture components.

        Keys concatenate each component's (mean, variance, weight) and pass
        through a learned linear map; scores are normalized with 1.5-entmax
        (sparse, may zero out components) or softmax. Output rows are valid
        categorical distributions.
        """
        if mixture.k < 1:
            raise DomainError("cross attention requires at least one mixture component")
        p = self.params
        d = self.config.latent_dim
        key_in = ad.concat(
            [mixture.means, mixture.variances, ad.reshape(mixture.weights, (mixture.k, 1))], axis=1
        )
        keys = _linear(key_in, p["cross.key.w"], p["cross.key.b"])  # (K, d)
        q = ad.matmul(f_past, p["cross.query.w"])  # (..., d)
        scores = ad.mul(ad.matmul(q, ad.transpose(keys)), 1.0 / np.sqrt(d))
        norm = normalizer or self.config.attention_normalizer
        if norm == "softmax":
            return ad.softmax(scores, axis=-1)
        return ad.entmax15(scores, axis=-1)

    def decode(self, f_past, z):
        """Decode latent mode codes into futures; (..., d) x (..., d) -> (..., T_pred, 2)."""
        p = self.params
        joint = ad.concat([f_past, z], axis=-1)
        h = ad.relu(_linear(joint, p["dec.w1"], p["dec.b1"]))
        flat = _linear(h, p["dec.w2"], p["dec.b2"])
        return ad.reshape(flat, flat.shape[:-1] + (self.config.t_pred, 2))

    def refine_samples(self, codes):
        """Multi-head self-attention across the N sampled codes of one agent.

        Identity when the config flag is off. ``codes`` is (N, d) or (A, N, d).
        """
        if not self.config.refine:
            return codes
        p = self.params
        cfg = self.config
        width = cfg.refine_width_mult * cfg.latent_dim
        heads = cfg.refine_heads
        hd = width // heads
        x = codes
        lead = x.shape[:-2]
        n = x.shape[-2]

        def split_heads(t):
            t = ad.reshape(t, lead + (n, heads, hd))
            return ad.swapaxes(t, -2, -3)  # (..., heads, N, hd)

        q = split_heads(ad.matmul(x, p["refine.wq"]))
        k = split_heads(ad.matmul(x, p["refine.wk"]))
        v = split_heads(ad.matmul(x, p["refine.wv"]))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.swapaxes(ad.matmul(attn, v), -2, -3)  # (..., N, heads, hd)
        mixed = ad.reshape(mixed, lead + (n, width))
        return ad.add(codes, ad.matmul(mixed, p["refine.wo"]))


# -- checkpointing ----------------------------------------------------------------


def save_checkpoint(model, path):
    """Write all parameters plus the producing config; round-trips bitwise."""
    payload = {name: t.data for name, t in model.params.items()}
    payload["__config__"] = np.array(json.dumps(asdict(model.config)))
    payload["__seed__"] = np.array(model.params.seed)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Rebuild a Forecaster from a checkpoint file."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if "__config__" not in arrays:
        raise CheckpointError(f"{path} is not a forecaster checkpoint")
    cfg = ModelConfig(**json.loads(str(arrays.pop("__config__"))))
    seed = int(arrays.pop("__seed__", 0))
    model = Forecaster(cfg, seed=seed)
    expected = set(model.params.names())
    found = set(arrays)
    if expected != found:
        raise CheckpointError(
            f"checkpoint parameters do not match config: missing {sorted(expected - found)}, "
            f"unexpected {sorted(found - expected)}"
        )
    for name, arr in arrays.items():
        slot = model.params[name]
        if slot.data.shape != arr.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {slot.data.shape}")
        slot.data = arr.astype(np.float64)
    return model
