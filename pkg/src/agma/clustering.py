"""Batch-level prior: relational graph clustering plus per-cluster Gaussians.

Agents in a batch are compared through similarity and repulsion projections
of their full-trajectory features. Pairs that score similar enough and are
not repulsive are linked; connected components of that graph become clusters,
and each cluster contributes one diagonal Gaussian to a mixture weighted by
cluster size. The hard thresholding is relaxed with sigmoids so the two
threshold parameters receive gradients.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError
from .mixture import MixturePrior


@dataclass(frozen=True)
class PairScores:
    """Symmetric pairwise similarity and repulsion scores in [0, 1]."""

    sim: Tensor  # (M, M), unit diagonal
    rep: Tensor  # (M, M), zero diagonal


@dataclass(frozen=True)
class AdjacencyRelaxed:
    """Soft differentiable adjacency plus its hard 0.5-threshold graph."""

    soft: Tensor  # (M, M) in [0, 1], symmetric
    hard: np.ndarray  # boolean, true diagonal


def pair_scores(sim_feats, rep_feats):
    """Scaled Gram matrices of the two projections.

    Entries are mean elementwise products, so features in (0, 1) give scores
    in (0, 1). Diagonals are pinned to 1 (self-similarity) and 0
    (self-repulsion); gradients flow through the off-diagonal entries.
    """
    if sim_feats.shape != rep_feats.shape or len(sim_feats.shape) != 2:
        raise ShapeError(
            f"projection features must share a (M, d) shape, got {sim_feats.shape} and {rep_feats.shape}"
        )
    m, d = sim_feats.shape
    off = 1.0 - np.eye(m)
    s = ad.mul(ad.matmul(sim_feats, ad.transpose(sim_feats)), off / d)
    r = ad.mul(ad.matmul(rep_feats, ad.transpose(rep_feats)), off / d)
    return PairScores(sim=ad.add(s, np.eye(m)), rep=r)


def build_adjacency(scores, theta_sim, theta_rep, tau_sim=0.1, tau_rep=0.1):
    """Relax the edge rule "similar and not repulsive" with two sigmoids.

    soft_ij = sigmoid((S_ij - theta_sim)/tau_sim) * sigmoid((theta_rep - R_ij)/tau_rep)

    The hard graph thresholds the relaxation at 1/2 and always keeps
    self-loops. Raising theta_sim or lowering theta_rep only removes edges.
    """
    if tau_sim <= 0 or tau_rep <= 0:
        raise ConfigError(f"sigmoid temperatures must be positive, got {tau_sim} and {tau_rep}")
    link = ad.sigmoid(ad.mul(ad.add(scores.sim, ad.mul(theta_sim, -1.0)), 1.0 / tau_sim))
    avoid = ad.sigmoid(ad.mul(ad.add(ad.mul(scores.rep, -1.0), theta_rep), 1.0 / tau_rep))
    soft = ad.mul(link, avoid)
    hard = soft.data > 0.5
    np.fill_diagonal(hard, True)
    return AdjacencyRelaxed(soft=soft, hard=hard)


def connected_components(adj):
    """Label connected components of a symmetric boolean adjacency matrix.

    Labels are consecutive integers from 0 in order of each component's
    smallest agent index, so the output is deterministic.
    """
    adj = np.asarray(adj, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise DomainError("adjacency must be symmetric")
    m = adj.shape[0]
    labels = np.full(m, -1, dtype=np.int64)
    nxt = 0
    for start in range(m):
        if labels[start] >= 0:
            continue
        queue = deque([start])
        labels[start] = nxt
        while queue:
            i = queue.popleft()
            for j in np.flatnonzero(adj[i]):
                if labels[j] < 0:
                    labels[j] = nxt
                    queue.append(j)
        nxt += 1
    return labels


def estimate_batch_gmm(z_full, labels, variance_floor=1e-4):
    """Fit one diagonal Gaussian per cluster of latent codes.

    Weights are cluster fractions n_k / M, means are cluster averages, and
    variances use the unbiased divisor max(n_k - 1, 1) followed by an
    elementwise floor so no component degenerates. Singletons therefore get
    exactly the floor.
    """
    if variance_floor < 0:
        raise ConfigError(f"variance floor must be nonnegative, got {variance_floor}")
    labels = np.asarray(labels)
    m = z_full.shape[0]
    if m == 0 or labels.size == 0:
        raise DomainError("cannot estimate a mixture from an empty batch")
    if labels.shape != (m,):
        raise ShapeError(f"need one label per row, got {labels.shape} for {m} rows")
    k = int(labels.max()) + 1
    if sorted(set(labels.tolist())) != list(range(k)):
        raise DomainError("labels must be consecutive integers starting at 0")

    # segment reductions via a one-hot membership matrix keep the tape flat
    onehot = np.zeros((k, m))
    onehot[labels, np.arange(m)] = 1.0
    counts = onehot.sum(axis=1)
    means = ad.matmul(Tensor(onehot / counts[:, None]), z_full)  # (K, d)
    centered = ad.add(z_full, ad.mul(ad.take(means, labels), -1.0))
    ss = ad.matmul(Tensor(onehot), ad.mul(centered, centered))
    var = ad.mul(ss, 1.0 / np.maximum(counts - 1.0, 1.0)[:, None])
    return MixturePrior(
        Tensor(counts / m), means, ad.maximum(var, variance_floor)
    )


def soft_row_affinity(soft_adj):
    """Mean relaxed affinity of each agent to the whole batch.

    The straight-through factor in the batch loss uses this: unlike the
    in-cluster mean it touches every pair, so its gradient reaches the
    projection heads and thresholds even when the hard partition is all
    singletons (the generic cold-start state).
    """
    soft_adj = soft_adj.soft if isinstance(soft_adj, AdjacencyRelaxed) else soft_adj
    return ad.mean(soft_adj, axis=1)


def soft_cluster_weights(soft_adj, labels):
    """Mean relaxed adjacency from each agent to its own cluster.

    Used as a straight-through factor: the value is near 1 for a committed
    clustering, and its gradient reaches the thresholds and projections that
    produced the relaxation.
    """
    soft_adj = soft_adj.soft if isinstance(soft_adj, AdjacencyRelaxed) else soft_adj
    labels = np.asarray(labels)
    m = labels.shape[0]
    if soft_adj.shape != (m, m):
        raise ShapeError(f"soft adjacency {soft_adj.shape} does not match {m} labels")
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    counts = same.sum(axis=1)
    picked = ad.sum_(ad.mul(soft_adj, same), axis=1)
    return ad.mul(picked, 1.0 / counts)


def batch_prior(model, f_full, tau=0.1, variance_floor=1e-4):
    """Full batch-prior pipeline from full-trajectory features.

    Returns (mixture, scores, adjacency, labels). The mixture and the soft
    adjacency stay differentiable; the partition itself comes from the hard
    graph.
    """
    sim, rep = model.project_heads(f_full)
    scores = pair_scores(sim, rep)
    adjacency = build_adjacency(scores, model.params["theta_sim"], model.params["theta_rep"], tau, tau)
    labels = connected_components(adjacency.hard)
    mixture = estimate_batch_gmm(f_full, labels, variance_floor)
    return mixture, scores, adjacency, labels


def sample_mixture(mixture, n, rng, component_indices=None):
    """Draw ``n`` reparameterized samples: z = mu_k + sqrt(var_k) * eps.

    Component choices follow the mixture weights unless given explicitly;
    the draw stays differentiable with respect to means and variances.
    Returns (samples (n, d) tensor, component index array).
    """
    if n < 1:
        raise DomainError(f"need at least one sample, got {n}")
    if component_indices is None:
        component_indices = rng.choice(mixture.k, size=n, p=mixture.weights.data)
    component_indices = np.asarray(component_indices, dtype=np.int64)
    eps = rng.standard_normal((len(component_indices), mixture.dim))
    mu = ad.take(mixture.means, component_indices)
    sd = ad.sqrt(ad.take(mixture.variances, component_indices))
    return ad.add(mu, ad.mul(sd, eps)), component_indices


def sample_batch_prior(prior, assignment, agent, rng):
    """One latent draw from the Gaussian of ``agent``'s own cluster."""
    assignment = np.asarray(assignment)
    if agent < 0 or agent >= assignment.shape[0]:
        raise DomainError(f"agent {agent} has no cluster assignment")
    cluster = int(assignment[agent])
    if cluster < 0 or cluster >= prior.k:
        raise DomainError(f"agent {agent} is assigned to unknown cluster {cluster}")
    samples, _ = sample_mixture(prior, 1, rng, component_indices=[cluster])
    return samples[0, :]


def clustering_debug_dump(scores, adjacency, labels, out_dir):
    """Write scores, both adjacencies, and the partition as CSV files."""
    os.makedirs(out_dir, exist_ok=True)

    def write_matrix(name, mat):
        with open(os.path.join(out_dir, name), "w") as fh:
            for row in np.asarray(mat, dtype=np.float64):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    write_matrix("sim_scores.csv", scores.sim.data)
    write_matrix("rep_scores.csv", scores.rep.data)
    write_matrix("soft_adjacency.csv", adjacency.soft.data)
    write_matrix("hard_adjacency.csv", adjacency.hard)
    weights = soft_cluster_weights(adjacency.soft, labels).data
    with open(os.path.join(out_dir, "partition.csv"), "w") as fh:
        fh.write("agent,cluster,soft_weight\n")
        for i, (lab, w) in enumerate(zip(labels, weights)):
            fh.write(f"{i},{int(lab)},{repr(float(w))}\n")
