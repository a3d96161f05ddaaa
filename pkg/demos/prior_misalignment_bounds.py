"""Certify the prior-misalignment bounds on exact discrete models.

A forecaster that samples latent branches from a learned prior and then
decodes can hide a bad prior behind a good decoder only up to a point: the
distillation loss (KL between outcome marginals) is bounded below by half
the squared gap between prior error and sampler error. On small discrete
models every quantity here is an exact finite sum, so the inequalities can
be checked to machine precision rather than estimated.

This script walks one hand-built model through the decomposition, the
marginal-KL lower bound, the Pinsker inequality it rests on, and the
contrapositive certificate (small distillation loss caps the prior error).
It then coarsens the latent space to show the information/achievability
trade-off, and finishes with a randomized sweep that must come back with
zero violations.

Run from the repository root:

    python demos/prior_misalignment_bounds.py
"""

import time

import numpy as np

from agma.theory import (
    DiscreteModel,
    best_marginal_kl_floor,
    check_corollary,
    check_pinsker,
    check_theorem_3_1,
    errors_decompose,
    info_gap_sweep,
    marginal,
    verify_suite,
)

LINE = "-" * 72


def main():
    model = DiscreteModel(
        true_prior=np.array([0.7, 0.3]),
        learned_prior=np.array([0.5, 0.5]),
        true_sampler=np.array([[0.80, 0.15, 0.05],
                               [0.05, 0.15, 0.80]]),
        learned_sampler=np.array([[0.78, 0.16, 0.06],
                                  [0.06, 0.16, 0.78]]),
    )
    dec = errors_decompose(model)
    print("hand-built model: 2 latent branches, 3 outcomes")
    print("  eps_prior  = ||(p_true - p_learned) @ learned_sampler||_1 = "
          f"{dec.eps_prior:.6f}")
    print("  eps_sample = ||p_true @ (true_sampler - learned_sampler)||_1 = "
          f"{dec.eps_sample:.6f}")
    print(f"  distillation loss L_dist = KL(true || learned marginal) = {dec.l_dist:.6f}")

    print(LINE)
    check, _ = check_theorem_3_1(model)
    print("marginal-KL lower bound: L_dist >= 0.5 * (eps_prior - eps_sample)^2")
    print(f"  bound = {check.bound:.6f}, achieved = {dec.l_dist:.6f}, "
          f"slack = {check.slack:.6f}, holds = {check.holds}")
    print("  (a mismatched prior cannot be fully laundered by the sampler)")

    print(LINE)
    p, q = marginal(model.true_prior, model.true_sampler), marginal(
        model.learned_prior, model.learned_sampler)
    kl, half_l1_sq, holds = check_pinsker(p, q)
    print("the bound rests on Pinsker: KL(p || q) >= 0.5 * ||p - q||_1^2")
    print(f"  KL = {kl:.6f} >= {half_l1_sq:.6f}, holds = {holds}")

    print(LINE)
    delta = dec.l_dist * 1.01
    holds = check_corollary(model, delta)
    cap = np.sqrt(2 * delta) + dec.eps_sample
    print("contrapositive certificate: observing L_dist < delta caps the prior error")
    print(f"  delta = {delta:.6f} -> eps_prior < sqrt(2 delta) + eps_sample = {cap:.6f}")
    print(f"  actual eps_prior = {dec.eps_prior:.6f}, certificate holds = {holds}")

    print(LINE)
    print("coarsening the latent space trades information for achievability:")
    rng = np.random.default_rng(5)
    prior = rng.dirichlet(np.ones(5))
    sampler = rng.dirichlet(np.ones(6), size=5)
    print(f"{'states':>8} {'I(Y;z)':>10} {'sampler floor':>14} {'KL floor':>10} {'H(Y|z)':>10}")
    for row in info_gap_sweep(prior, sampler):
        print(f"{row.n_states:>8d} {row.info_nats:>10.4f} {row.eps_sample_floor:>14.4f} "
              f"{row.l_dist_floor:>10.4f} {row.h_y_given_z:>10.4f}")
    print("  fewer latent states: information falls and the per-branch sampler floor")
    print("  rises, yet the marginal-KL floor stays zero, because each merged row is")
    print("  the prior-weighted blend of its members and reweighting recovers the")
    print("  original outcome marginal. The marginal alone cannot see this damage;")
    print("  only the per-branch channel can, which is why both are tracked.")
    wrong_rows = np.array([[0.9, 0.05, 0.05, 0.0, 0.0, 0.0],
                           [0.0, 0.0, 0.0, 0.05, 0.05, 0.9]])
    kl_floor, _ = best_marginal_kl_floor(marginal(prior, sampler), wrong_rows)
    print(f"  (rows that genuinely cannot mix to the marginal do floor it: "
          f"{kl_floor:.4f} > 0)")

    print(LINE)
    n_models = 20_000
    start = time.perf_counter()
    rows, violations = verify_suite(n_models, np.random.default_rng(99))
    elapsed = time.perf_counter() - start
    print(f"randomized sweep: {n_models} models with up to 5 branches and 8 outcomes")
    print(f"  violations: pinsker={violations['pinsker']} "
          f"theorem={violations['theorem']} corollary={violations['corollary']} "
          f"({elapsed:.1f}s)")
    worst = min(row.slack for row in rows)
    print(f"  tightest slack seen: {worst:.3e} (never below zero)")
    print("  these are proved inequalities; any violation would be an implementation bug")


if __name__ == "__main__":
    main()
