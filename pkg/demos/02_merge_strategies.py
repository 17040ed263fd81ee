#!/usr/bin/env python3
"""Evaluate the four canonical merge strategies under finite training time.

Every merge ending at step t only moves the student a fraction
(1 - gamma_t) of the way from its initialization to the composition it is
distilling, with gamma_t = exp(-2 * s * (alpha_t^2 lam + sigma_t^2)).  The
order in which blocks are merged therefore matters; this script scores the
four canonical plans against the variance-corrected target at a few
variances and prints their plan trees.
"""

from merge_planner import (
    DiagGaussian,
    evaluate_plan,
    format_plan,
    make_cosine_schedule,
    plan_progressive,
    plan_sequential_boot,
    plan_sequential_consistency,
    plan_vanilla,
    shrinkage,
    surrogate_target,
    w2_objective,
)

T, S_TRAIN = 32, 6.4
sched = make_cosine_schedule(T)

print("plan trees at T=8 (leaves are single steps, 'oneshot' merges raw steps):")
for name, plan in (
    ("vanilla", plan_vanilla(8)),
    ("progressive", plan_progressive(8)),
    ("boot", plan_sequential_boot(8)),
    ("consistency", plan_sequential_consistency(8)),
):
    print(f"  {name:<12} {format_plan(plan)}")

plans = {
    "vanilla": plan_vanilla(T),
    "progressive": plan_progressive(T),
    "boot": plan_sequential_boot(T),
    "consistency": plan_sequential_consistency(T),
}

print(f"\nsquared Wasserstein error to the surrogate target (T={T}, s={S_TRAIN}):")
header = "  lam    " + "".join(f"{name:>14}" for name in plans)
print(header)
for lam in (0.2, 0.5, 1.0, 1.08, 2.0, 5.0):
    data = DiagGaussian([lam])
    shrink = shrinkage(sched, data, S_TRAIN)
    surr = surrogate_target(sched, data)
    row = f"  {lam:<6}"
    for plan in plans.values():
        obj = w2_objective(evaluate_plan(plan, sched, data, shrink), surr)
        row += f"{obj:>14.3e}"
    print(row)

print("\nboot wins for lam <= 1, vanilla for large lam; between the two phases")
print("no canonical strategy is optimal (see demo 03 for the DP that is)")
