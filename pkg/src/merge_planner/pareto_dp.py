"""Interval dynamic programming over Pareto frontiers of merged operators.

For every contiguous interval the DP keeps the set of merged operators that
are mutually non-dominated under the per-coordinate preference directions
(+1 where the variance exceeds 1, -1 otherwise).  Two candidate kinds per
interval: the one-shot direct merge of the raw single-step operators, and
every split merge of frontier items from the two sub-intervals.  Dominance
comparisons are exact double comparisons — tolerance-based pruning could
discard true optima.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linear_op import (
    DiagGaussian,
    DiagOperator,
    ShrinkageProfile,
    single_step_matrix,
    w2_objective,
)
from .schedule import NoiseSchedule
from .strategy import (
    Leaf,
    MergeNode,
    MergePlan,
    OneShot,
    enumerate_plans,
    evaluate_plan,
    format_plan,
)

__all__ = [
    "PreferenceVector",
    "ParetoFrontier",
    "FrontierCapExceeded",
    "dominates",
    "insert_and_prune",
    "DpResult",
    "pareto_dp",
    "BruteForceResult",
    "brute_force_optimum",
    "MAX_BRUTE_FORCE_T",
]

MAX_BRUTE_FORCE_T = 8


@dataclass(frozen=True)
class PreferenceVector:
    """Per-coordinate preference direction: +1 iff lam > 1, else -1."""

    rho: np.ndarray

    def __post_init__(self) -> None:
        rho = np.asarray(self.rho, dtype=np.float64).reshape(-1).copy()
        if not np.all(np.abs(rho) == 1.0):
            raise ValueError("preference entries must be +1 or -1")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_variances(cls, data: DiagGaussian) -> "PreferenceVector":
        return cls(rho=np.where(data.lam > 1.0, 1.0, -1.0))

    @property
    def d(self) -> int:
        return self.rho.shape[0]


class FrontierCapExceeded(RuntimeError):
    """Raised when a frontier outgrows the configured hard cap.

    Truncating instead would silently void the optimality guarantee.
    """


def dominates(B: DiagOperator, C: DiagOperator, rho: PreferenceVector) -> bool:
    """True iff ``rho_i * B_i >= rho_i * C_i`` for all i, strictly somewhere.

    Exact comparisons, no tolerance; equal operators do not dominate each
    other.
    """
    if B.d != C.d or B.d != rho.d:
        raise ValueError("dimension mismatch between operators and preference vector")
    sb = rho.rho * B.entries
    sc = rho.rho * C.entries
    return bool(np.all(sb >= sc) and np.any(sb > sc))


@dataclass
class ParetoFrontier:
    """Mutually non-dominated operators covering one interval.

    ``plans[k]`` is the provenance plan of ``items[k]`` (None when plans are
    dropped to bound sweep memory).
    """

    interval: tuple[int, int]
    items: list[DiagOperator] = field(default_factory=list)
    plans: list[MergePlan | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def _three_case_keep(signed_matrix: np.ndarray, cand_signed: np.ndarray) -> np.ndarray | None:
    """Shared pruning rule on signed entries.

    Returns None when the candidate must be discarded (dominated by an
    incumbent, or an exact duplicate of one), otherwise the boolean mask of
    incumbents that survive the insertion.
    """
    ge = signed_matrix >= cand_signed[None, :]
    gt = signed_matrix > cand_signed[None, :]
    ge_all = ge.all(axis=1)
    gt_any = gt.any(axis=1)
    if np.any(ge_all & ~gt_any):  # exact duplicate row
        return None
    if np.any(ge_all & gt_any):  # candidate dominated
        return None
    dominated = (~gt).all(axis=1) & (~ge).any(axis=1)  # incumbent dominated by candidate
    return ~dominated


def insert_and_prune(
    frontier: ParetoFrontier,
    candidate: DiagOperator,
    rho: PreferenceVector,
    plan: MergePlan | None = None,
) -> ParetoFrontier:
    """Update the frontier with a candidate, keeping only non-dominated items.

    Discards the candidate if it is dominated by (or exactly equal to) an
    incumbent, removes incumbents the candidate dominates, and inserts it
    otherwise.  Returns the same frontier object, updated in place.
    """
    if candidate.interval != frontier.interval:
        raise ValueError(
            f"candidate covers {candidate.interval}, frontier covers {frontier.interval}"
        )
    cand_signed = rho.rho * candidate.entries
    if frontier.items:
        signed = rho.rho[None, :] * np.stack([op.entries for op in frontier.items])
        keep = _three_case_keep(signed, cand_signed)
        if keep is None:
            return frontier
        if not keep.all():
            frontier.items = [op for op, k in zip(frontier.items, keep) if k]
            frontier.plans = [p for p, k in zip(frontier.plans, keep) if k]
    frontier.items.append(candidate)
    frontier.plans.append(plan)
    return frontier


class _Cell:
    """One DP cell: raw signed-entry frontier plus provenance, no DiagOperator wrappers."""

    __slots__ = ("entries", "plans", "signed")

    def __init__(self, d: int) -> None:
        self.entries: list[np.ndarray] = []
        self.plans: list[MergePlan | None] = []
        self.signed = np.empty((0, d))

    def insert(self, entries: np.ndarray, plan: MergePlan | None, rho: np.ndarray) -> None:
        cand_signed = rho * entries
        if self.signed.shape[0]:
            keep = _three_case_keep(self.signed, cand_signed)
            if keep is None:
                return
            if not keep.all():
                self.entries = [e for e, k in zip(self.entries, keep) if k]
                self.plans = [p for p, k in zip(self.plans, keep) if k]
                self.signed = self.signed[keep]
        self.entries.append(np.ascontiguousarray(entries))
        self.plans.append(plan)
        self.signed = np.concatenate([self.signed, cand_signed[None, :]], axis=0)

    def prefilter(self, candidates: np.ndarray, rho: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Indices of candidates NOT weakly dominated by the current frontier.

        Safe to apply before sequential insertion: by transitivity, anything
        weakly dominated by the frontier now would also be discarded later,
        whatever gets inserted in between.  Never removes a survivor, so the
        resulting frontier is identical to the unfiltered one.
        """
        if not self.signed.shape[0]:
            return np.arange(candidates.shape[0])
        signed_cands = rho[None, :] * candidates
        alive = np.empty(candidates.shape[0], dtype=bool)
        for lo in range(0, candidates.shape[0], chunk):
            block = signed_cands[lo : lo + chunk]
            weakly_dominated = (
                (self.signed[None, :, :] >= block[:, None, :]).all(axis=2).any(axis=1)
            )
            alive[lo : lo + block.shape[0]] = ~weakly_dominated
        return np.nonzero(alive)[0]


@dataclass(frozen=True)
class DpResult:
    best: DiagOperator
    plan: MergePlan | None
    objective: float
    frontier_sizes: dict[tuple[int, int], int]


def pareto_dp(
    sched: NoiseSchedule,
    data: DiagGaussian,
    shrink: ShrinkageProfile,
    surrogate: DiagOperator,
    keep_plans: bool = True,
    max_frontier_size: int | None = None,
) -> DpResult:
    """Optimal operator merging by Pareto dynamic programming.

    Fills ``S[t,t] = {A_t}``, then for lengths 2..T and every start time
    inserts the direct one-shot merge plus every split merge of frontier
    items, pruning dominated candidates.  The returned operator minimizes
    the squared Wasserstein objective against ``surrogate`` over ``S[1,T]``;
    exact-objective ties are broken by the lexicographically smallest
    serialized plan.
    """
    T, d = sched.T, data.d
    if surrogate.d != d:
        raise ValueError("surrogate dimension does not match data")
    if shrink.T != T or shrink.d != d:
        raise ValueError("shrinkage profile does not match schedule/data")
    rho = PreferenceVector.from_variances(data).rho
    single = single_step_matrix(sched, data)

    cells: dict[tuple[int, int], _Cell] = {}
    for t in range(1, T + 1):
        cell = _Cell(d)
        cell.insert(single[t - 1], Leaf(t) if keep_plans else None, rho)
        cells[(t, t)] = cell

    for length in range(2, T + 1):
        for t1 in range(1, T - length + 2):
            t2 = t1 + length - 1
            g = shrink.gamma_at(t2)
            one_minus_g = 1.0 - g
            cell = _Cell(d)

            prod = single[t1 - 1].copy()
            for t in range(t1 + 1, t2 + 1):
                prod = prod * single[t - 1]
            direct = one_minus_g * prod + g * single[t2 - 1]
            cell.insert(direct, OneShot(t1, t2) if keep_plans else None, rho)

            for m in range(t1, t2):
                left_cell = cells[(t1, m)]
                right_cell = cells[(m + 1, t2)]
                n_left, n_right = len(left_cell.entries), len(right_cell.entries)
                left = np.stack(left_cell.entries)
                right = np.stack(right_cell.entries)
                # all split merges of this m at once, in left-major order
                combos = (
                    one_minus_g * (left[:, None, :] * right[None, :, :])
                    + g * right[None, :, :]
                ).reshape(n_left * n_right, d)
                for flat in cell.prefilter(combos, rho):
                    i, j = divmod(int(flat), n_right)
                    plan = (
                        MergeNode(left_cell.plans[i], right_cell.plans[j])
                        if keep_plans
                        else None
                    )
                    cell.insert(combos[flat], plan, rho)

            if max_frontier_size is not None and len(cell.entries) > max_frontier_size:
                raise FrontierCapExceeded(
                    f"frontier for interval ({t1},{t2}) has {len(cell.entries)} items "
                    f"(cap {max_frontier_size}); raise the cap or reduce d"
                )
            cells[(t1, t2)] = cell

    root = cells[(1, T)]
    objectives = np.array(
        [float(np.dot(surrogate.entries - e, surrogate.entries - e)) for e in root.entries]
    )
    best_obj = float(np.min(objectives))
    tied = np.nonzero(objectives == best_obj)[0]
    if keep_plans and len(tied) > 1:
        idx = min(tied, key=lambda k: format_plan(root.plans[k]))
    else:
        idx = int(tied[0])

    best = DiagOperator(entries=root.entries[idx], interval=(1, T))
    sizes = {iv: len(cell.entries) for iv, cell in cells.items()}
    return DpResult(
        best=best, plan=root.plans[idx], objective=best_obj, frontier_sizes=sizes
    )


@dataclass(frozen=True)
class BruteForceResult:
    best: DiagOperator
    plan: MergePlan
    objective: float


def brute_force_optimum(
    sched: NoiseSchedule,
    data: DiagGaussian,
    shrink: ShrinkageProfile,
    surrogate: DiagOperator,
) -> BruteForceResult:
    """Exhaustive minimum over every enumerated plan shape.

    Independent oracle for the DP: evaluates all plans directly and never
    prunes.  Ties are broken by the lexicographically smallest serialized
    plan.  Guarded to small T.
    """
    T = sched.T
    if T > MAX_BRUTE_FORCE_T:
        raise ValueError(f"brute force is limited to T <= {MAX_BRUTE_FORCE_T}, got {T}")
    best_plan: MergePlan | None = None
    best_op: DiagOperator | None = None
    best_obj = np.inf
    best_key = ""
    for plan in enumerate_plans(T):
        op = evaluate_plan(plan, sched, data, shrink)
        obj = w2_objective(op, surrogate)
        key = format_plan(plan)
        if obj < best_obj or (obj == best_obj and key < best_key):
            best_plan, best_op, best_obj, best_key = plan, op, obj, key
    assert best_plan is not None and best_op is not None
    return BruteForceResult(best=best_op, plan=best_plan, objective=float(best_obj))
