#!/usr/bin/env python3
"""Mixture-of-experts teachers and the cost of compressing their compositions.

With mixture data each denoising step is a K-expert affine MoE.  Composing
k steps yields K^k effective experts, and squeezing those back into K
experts incurs an irreducible within-cluster variance.  This script builds
the 8-mode circle mixture, expands compositions of growing horizon, fits a
clustered student for each, and compares the certified bound with the
Monte-Carlo distillation loss of the fitted student.
"""

import numpy as np

from merge_planner import (
    NoisySampler,
    apply_chain,
    choose_partition,
    compose_expand,
    fit_cluster_student,
    make_circle_mixture,
    make_cosine_schedule,
    mc_distillation_loss,
    single_step_moe,
)

T = 32
gmm = make_circle_mixture(K=8, radius=5.0, iso_std=0.3)
sched = make_cosine_schedule(T)
sampler = NoisySampler(gmm=gmm, sched=sched, t=T)

print("8 isotropic modes on a circle of radius 5; teacher chain starts at t=T")
print("\n  k   components  bound        (bias, variance)          mc loss ± se")
for k in (1, 2, 3):
    ops = [single_step_moe(gmm, sched, t) for t in range(T, T - k, -1)]
    expansion = compose_expand(ops)
    samples = sampler.sample(8192, np.random.default_rng(100 + k))
    partition = choose_partition(expansion, samples, n_clusters=8, seed=k)
    fit = fit_cluster_student(expansion, partition, samples)
    mc = mc_distillation_loss(
        fit.student, lambda z, _ops=ops: apply_chain(_ops, z), sampler, 50_000, seed=k
    )
    print(
        f"  {k}   {expansion.n_experts:<11} {fit.bound:<12.4e} "
        f"({fit.bias:.2e}, {fit.variance:.2e})   {mc.mean:.4e} ± {mc.stderr:.1e}"
    )

print("\nk=1 is exactly representable (bound at numerical zero); every longer")
print("horizon forces K^k -> K compression and the bound grows with k")

print("\nwhere does the within-cluster variance come from? gating at low noise:")
z = sampler.sample(5, np.random.default_rng(0))
w2 = compose_expand(
    [single_step_moe(gmm, sched, 2), single_step_moe(gmm, sched, 1)]
).gating.weights(z)
print(f"  two-step expansion at t=2: effective weights are near one-hot")
print(f"  max weight per sample: {np.round(np.max(w2, axis=1), 4)}")
print("  distinct samples activate different expert paths, and one affine map")
print("  per cluster cannot match several distinct paths at once")
