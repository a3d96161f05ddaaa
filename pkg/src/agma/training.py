"""Joint training of the forecaster: batch path, global path, distillation.

Each step encodes a batch of scenes once, builds the clustered batch prior
and the conditioned global prior from the shared features, and composes

    total = batch_loss + global_loss + lambda * distill_loss

where both prediction losses are best-of-N average displacement errors and
the distillation term is the entropic transport objective aligning the
attention-averaged global mixture with the batch mixture. A single backward
pass feeds a decoupled-weight-decay Adam update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import batch_prior, sample_mixture, soft_row_affinity
from .errors import ConfigError, DomainError, NumericalError
from .global_prior import condition, sample_global
from .nets import Forecaster, ModelConfig
from .trajectory import PredictionSet, classify_branch, min_of_n
from .transport import distill_loss, sinkhorn, w2_cost

VARIANTS = ("full", "no_lb", "no_lg", "no_distill")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the joint objective and its optimizer."""

    n_samples: int = 20  # N: candidate futures per agent, train and eval
    lambda_distill: float = 0.1
    epsilon: float = 0.1  # entropic regularization of the transport plan
    sinkhorn_iters: int = 20
    tau_threshold: float = 0.1  # sigmoid relaxation of the clustering rule
    tau_gumbel: float = 1.0  # relaxed component selection
    k_global: int = 100
    latent_dim: int = 32
    t_obs: int = 8
    t_pred: int = 12
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 4  # scenes per step
    seed: int = 0
    variance_floor: float = 1e-4
    decoder_hidden: int = 64
    attention_normalizer: str = "entmax15"
    refine: bool = False
    hard_inference: bool = True
    distill_stop_batch: bool = False  # detach the batch mixture inside the OT cost

    def __post_init__(self):
        positive = {
            "n_samples": self.n_samples, "epsilon": self.epsilon,
            "sinkhorn_iters": self.sinkhorn_iters, "tau_threshold": self.tau_threshold,
            "tau_gumbel": self.tau_gumbel, "k_global": self.k_global,
            "latent_dim": self.latent_dim, "t_obs": self.t_obs, "t_pred": self.t_pred,
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "batch_size": self.batch_size, "decoder_hidden": self.decoder_hidden,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name, value in (("lambda_distill", self.lambda_distill),
                            ("weight_decay", self.weight_decay),
                            ("variance_floor", self.variance_floor)):
            if value < 0:
                raise ConfigError(f"{name} must be nonnegative, got {value}")

    def to_model_config(self):
        return ModelConfig(
            latent_dim=self.latent_dim, t_obs=self.t_obs, t_pred=self.t_pred,
            decoder_hidden=self.decoder_hidden, k_global=self.k_global,
            attention_normalizer=self.attention_normalizer, refine=self.refine,
        )


@dataclass(frozen=True)
class LossReport:
    """Scalars of one training step; total = l_b + l_g + lambda * l_distill."""

    l_b: float
    l_g: float
    l_distill: float
    l_total: float

    def composition_gap(self, lambda_distill):
        return abs(self.l_total - (self.l_b + self.l_g + lambda_distill * self.l_distill))


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    l_b: float
    l_g: float
    l_distill: float
    l_total: float
    val_made: float
    val_mfde: float


@dataclass(frozen=True)
class BatchFeatures:
    """Shared per-batch encodings: one row per agent, scenes concatenated."""

    f_past: Tensor  # (A, d)
    f_full: Tensor  # (A, d)
    observed: np.ndarray  # (A, t_obs, 2)
    futures: np.ndarray  # (A, t_pred, 2)
    scene_sizes: tuple
    scene_ids: tuple


def batch_features(model, scenes):
    """Encode every agent of every scene once, for reuse across all losses."""
    if not scenes:
        raise DomainError("cannot build features from an empty batch")
    observed = [s.observed_stack() for s in scenes]
    futures = [s.future_stack() for s in scenes]
    f_past = model.encode_past_scenes(observed)
    f_full = model.encode_full_scenes([np.concatenate([o, f], axis=1) for o, f in zip(observed, futures)])
    return BatchFeatures(
        f_past=f_past, f_full=f_full,
        observed=np.concatenate(observed, axis=0), futures=np.concatenate(futures, axis=0),
        scene_sizes=tuple(len(s) for s in scenes), scene_ids=tuple(s.scene_id for s in scenes),
    )


def _min_ade(preds, gt, n):
    """Differentiable best-of-n average displacement error per agent.

    ``preds`` is a (A*n, T, 2) tensor, ``gt`` a (A, T, 2) array. Returns a
    (A,) tensor of the minimum ADE over each agent's n candidates.
    """
    a = gt.shape[0]
    diff = ad.add(preds, -np.repeat(gt, n, axis=0))
    sq = ad.sum_(ad.mul(diff, diff), axis=2)
    dist = ad.sqrt(ad.maximum(sq, 1e-30))  # guard the unreachable exact-hit kink
    per_sample = ad.reshape(ad.mean(dist, axis=1), (a, n))
    idx = np.argmin(per_sample.data, axis=1)[:, None]
    return ad.reshape(ad.take_along_axis(per_sample, idx, axis=1), (a,))


def _repeat_rows(t, n):
    return ad.take(t, np.repeat(np.arange(t.shape[0]), n))


def loss_batch_path(model, features, prior, labels, adjacency, config, rng):
    """Best-of-N ADE with latents drawn from each agent's own cluster Gaussian.

    Each agent's term is multiplied by a straight-through factor that equals
    one exactly in the forward pass but whose gradient is the agent's soft
    batch affinity, routing error-weighted signal into the projection heads
    and clustering thresholds that the hard partition otherwise blocks.
    """
    a = features.futures.shape[0]
    n = config.n_samples
    z, _ = sample_mixture(prior, a * n, rng, component_indices=np.repeat(labels, n))
    preds = model.decode(_repeat_rows(features.f_past, n), z)
    best = _min_ade(preds, features.futures, n)
    soft = soft_row_affinity(adjacency.soft)
    straight = ad.add(ad.add(soft, Tensor(-soft.data)), 1.0)  # forward exactly one
    return ad.mean(ad.mul(best, straight))


def loss_global_path(model, features, config, rng, cond=None):
    """Best-of-N ADE with latents sampled from the conditioned global prior."""
    if cond is None:
        cond = condition(model, features.f_past)
    a = features.futures.shape[0]
    n = config.n_samples
    z = sample_global(cond, config.tau_gumbel, rng, n=n)  # (A, n, d)
    z = model.refine_samples(z)
    preds = model.decode(_repeat_rows(features.f_past, n), ad.reshape(z, (a * n, config.latent_dim)))
    return ad.mean(_min_ade(preds, features.futures, n)), cond


def distill_term(cond, batch_mixture, config):
    """Entropic transport objective between global and batch mixtures.

    The row marginal is the batch-averaged attention over global components,
    the column marginal is the batch mixture's cluster weights.
    """
    att = cond.attention
    if att.data.ndim == 1:
        att = ad.reshape(att, (1,) + att.shape)
    a_bar = ad.mean(att, axis=0)
    bmix = batch_mixture.detached() if config.distill_stop_batch else batch_mixture
    cost = w2_cost(cond.mixture, bmix)
    result = sinkhorn(cost, a_bar, bmix.weights, config.epsilon, config.sinkhorn_iters)
    return distill_loss(result, cost), result


class AdamW:
    """Adam with decoupled weight decay over a parameter store."""

    def __init__(self, store, learning_rate=1e-3, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - self.learning_rate * (update + self.weight_decay * p.data)


def train_step(model, scenes, config, optimizer, rng, variant="full"):
    """One optimization step over a list of scenes; returns the loss report."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    features = batch_features(model, scenes)
    mixture, _, adjacency, labels = batch_prior(
        model, features.f_full, tau=config.tau_threshold, variance_floor=config.variance_floor
    )
    cond = condition(model, features.f_past)

    zero = Tensor(0.0)
    l_b = zero if variant == "no_lb" else loss_batch_path(
        model, features, mixture, labels, adjacency, config, rng
    )
    l_g = zero if variant == "no_lg" else loss_global_path(model, features, config, rng, cond=cond)[0]
    lam = 0.0 if variant == "no_distill" else config.lambda_distill
    l_d = zero if lam == 0.0 else distill_term(cond, mixture, config)[0]
    l_total = ad.add(ad.add(l_b, l_g), ad.mul(l_d, lam))

    report = LossReport(
        l_b=float(l_b.data), l_g=float(l_g.data),
        l_distill=float(l_d.data), l_total=float(l_total.data),
    )
    if not np.isfinite(report.l_total):
        raise NumericalError(
            "non-finite training loss",
            diagnostics={"scene_ids": features.scene_ids, "report": report},
        )
    model.params.zero_grad()
    l_total.backward()
    optimizer.step()
    if not model.params.all_finite():
        raise NumericalError(
            "parameters left finite range after update",
            diagnostics={"scene_ids": features.scene_ids, "report": report},
        )
    return report


@dataclass(frozen=True)
class FitResult:
    model: Forecaster
    epochs: tuple  # of EpochRow
    config: TrainConfig
    variant: str


def fit(config, train_scenes, val_scenes=None, variant="full"):
    """Train a fresh model; deterministic in (config, data, variant).

    Without an explicit validation set the last fifth of the training scenes
    is held out. Per-epoch rows carry mean step losses plus best-of-N
    validation displacement errors.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    train_scenes = list(train_scenes)
    if val_scenes is None:
        n_val = max(1, len(train_scenes) // 5)
        if len(train_scenes) <= n_val:
            raise DomainError("not enough scenes to carve out a validation split")
        train_scenes, val_scenes = train_scenes[:-n_val], train_scenes[-n_val:]
    val_scenes = list(val_scenes)

    model = Forecaster(config.to_model_config(), seed=config.seed)
    optimizer = AdamW(model.params, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng([config.seed, 101])
    rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_scenes))
        sums = np.zeros(4)
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_scenes[i] for i in order[start : start + config.batch_size]]
            report = train_step(model, chunk, config, optimizer, rng, variant)
            sums += (report.l_b, report.l_g, report.l_distill, report.l_total)
            n_steps += 1
        means = sums / max(n_steps, 1)
        val = evaluate(model, val_scenes, config.n_samples, np.random.default_rng([config.seed, 202, epoch]),
                       temperature=config.tau_gumbel, hard=config.hard_inference)
        rows.append(EpochRow(epoch, float(means[0]), float(means[1]), float(means[2]),
                             float(means[3]), val.made, val.mfde))
    return FitResult(model=model, epochs=tuple(rows), config=config, variant=variant)


def infer(model, observed_scenes, n, rng, temperature=1.0, hard=True):
    """Sample N futures per agent from observations alone.

    ``observed_scenes`` is a list of (M, t_obs, 2) arrays; futures never
    enter. Returns one list of PredictionSet per scene, agents in order.
    """
    observed_scenes = [np.asarray(o, dtype=np.float64) for o in observed_scenes]
    with ad.no_grad():
        f_past = model.encode_past_scenes(observed_scenes)
        cond = condition(model, f_past)
        z = sample_global(cond, temperature, rng, n=n, hard=hard)  # (A, n, d)
        z = model.refine_samples(z)
        a = f_past.shape[0]
        preds = model.decode(_repeat_rows(f_past, n), ad.reshape(z, (a * n, model.config.latent_dim)))
    samples = preds.data.reshape(a, n, model.config.t_pred, 2)
    out, row = [], 0
    for obs in observed_scenes:
        out.append([PredictionSet(samples[row + i]) for i in range(obs.shape[0])])
        row += obs.shape[0]
    return out


@dataclass(frozen=True)
class EvalReport:
    made: float  # mean over agents of best-of-N ADE
    mfde: float
    n: int
    per_agent_ade: tuple
    per_agent_fde: tuple


def evaluate(model, scenes, n, rng, temperature=1.0, hard=True):
    """Dataset-level best-of-N displacement errors under global-prior sampling."""
    scenes = list(scenes)
    if not scenes:
        raise DomainError("cannot evaluate on zero scenes")
    predictions = infer(model, [s.observed_stack() for s in scenes], n, rng, temperature, hard)
    ades, fdes = [], []
    for scene, preds in zip(scenes, predictions):
        for agent, pset in zip(scene.agents, preds):
            best_ade, best_fde, _ = min_of_n(pset, agent.future)
            ades.append(best_ade)
            fdes.append(best_fde)
    return EvalReport(
        made=float(np.mean(ades)), mfde=float(np.mean(fdes)), n=n,
        per_agent_ade=tuple(ades), per_agent_fde=tuple(fdes),
    )


def k_sweep(model, scenes, ks, rng, temperature=1.0, hard=True):
    """Best-of-K errors for nested prefixes of one shared sample set.

    Because the candidate set for a smaller K is a prefix of the larger one,
    the resulting curves are nonincreasing in K by construction.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError(f"sample counts must be positive, got {ks}")
    predictions = infer(model, [s.observed_stack() for s in scenes], ks[-1], rng, temperature, hard)
    rows = []
    for k in ks:
        ades, fdes = [], []
        for scene, preds in zip(scenes, predictions):
            for agent, pset in zip(scene.agents, preds):
                best_ade, best_fde, _ = min_of_n(pset.samples[:k], agent.future)
                ades.append(best_ade)
                fdes.append(best_fde)
        rows.append((k, float(np.mean(ades)), float(np.mean(fdes))))
    return rows


def branch_coverage(model, scenes, n, rng, branches=3, spread_deg=90.0, temperature=1.0, hard=True):
    """Fraction of scenes (and agents) whose samples hit >= 2 distinct branches."""
    scenes = list(scenes)
    predictions = infer(model, [s.observed_stack() for s in scenes], n, rng, temperature, hard)
    covered_scenes = 0
    covered_agents = 0
    n_agents = 0
    for scene, preds in zip(scenes, predictions):
        scene_branches = set()
        for agent, pset in zip(scene.agents, preds):
            agent_branches = {
                classify_branch(agent.observed, s, branches, spread_deg) for s in pset.samples
            }
            scene_branches |= agent_branches
            covered_agents += len(agent_branches) >= 2
            n_agents += 1
        covered_scenes += len(scene_branches) >= 2
    return covered_scenes / max(len(scenes), 1), covered_agents / max(n_agents, 1)


def ablate(config, train_scenes, test_scenes, variant, n_eval=None, val_scenes=None):
    """Train one objective variant and report test best-of-N errors."""
    result = fit(config, train_scenes, val_scenes=val_scenes, variant=variant)
    n = n_eval if n_eval is not None else config.n_samples
    report = evaluate(
        result.model, test_scenes, n, np.random.default_rng([config.seed, 303]),
        temperature=config.tau_gumbel, hard=config.hard_inference,
    )
    return {"variant": variant, "made": report.made, "mfde": report.mfde, "n": n,
            "final_train_loss": result.epochs[-1].l_total, "result": result}


def ablation_table(config, train_scenes, test_scenes, variants=VARIANTS, n_eval=None):
    """Run several variants under identical seeds; one row per variant."""
    return [ablate(config, train_scenes, test_scenes, v, n_eval=n_eval) for v in variants]


METRICS_HEADER = "epoch,L_B,L_G,L_distill,L_total,val_mADE_N,val_mFDE_N"


def write_metrics_csv(rows, path):
    """Per-epoch metrics; full float precision so reruns are byte-identical."""
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r.epoch},{r.l_b!r},{r.l_g!r},{r.l_distill!r},{r.l_total!r},{r.val_made!r},{r.val_mfde!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
