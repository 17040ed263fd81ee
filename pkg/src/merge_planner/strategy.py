"""Merge plans as explicit trees over contiguous step intervals.

A plan's leaves are the single steps ``1..T``; a binary node merges two
adjacent blocks (applying the shrinkage weight of its end time); a one-shot
node merges the raw single-step operators of its whole interval in one go.
One-shot nodes are a distinct kind because their interpolation anchor is
the raw single-step operator at the end time, which nested binary merges
cannot express.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Union

from .linear_op import (
    DiagGaussian,
    DiagOperator,
    ShrinkageProfile,
    direct_merge,
    merge,
    single_step_operator,
)
from .schedule import NoiseSchedule

__all__ = [
    "Leaf",
    "OneShot",
    "MergeNode",
    "MergePlan",
    "PlanLabel",
    "plan_vanilla",
    "plan_progressive",
    "plan_sequential_boot",
    "plan_sequential_consistency",
    "plan_label",
    "evaluate_plan",
    "enumerate_plans",
    "count_plans",
    "internal_nodes",
    "format_plan",
    "parse_plan",
    "MAX_ENUMERATION_T",
]

MAX_ENUMERATION_T = 12


@dataclass(frozen=True)
class Leaf:
    """A single teacher step."""

    t: int

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ValueError(f"leaf step must be >= 1, got {self.t}")

    @property
    def interval(self) -> tuple[int, int]:
        return (self.t, self.t)


@dataclass(frozen=True)
class OneShot:
    """One-shot merge of all raw single-step operators over ``(t1, t2)``, t1 < t2."""

    t1: int
    t2: int

    def __post_init__(self) -> None:
        if not 1 <= self.t1 < self.t2:
            raise ValueError(
                f"one-shot node requires 1 <= t1 < t2, got ({self.t1}, {self.t2})"
            )

    @property
    def interval(self) -> tuple[int, int]:
        return (self.t1, self.t2)


@dataclass(frozen=True)
class MergeNode:
    """Binary merge of two adjacent child blocks."""

    left: "MergePlan"
    right: "MergePlan"

    def __post_init__(self) -> None:
        _, m = self.left.interval
        m2, _ = self.right.interval
        if m2 != m + 1:
            raise ValueError(
                f"children are not adjacent: {self.left.interval} then {self.right.interval}"
            )

    @property
    def interval(self) -> tuple[int, int]:
        return (self.left.interval[0], self.right.interval[1])


MergePlan = Union[Leaf, OneShot, MergeNode]


class PlanLabel(Enum):
    VANILLA = "vanilla"
    PROGRESSIVE = "progressive"
    SEQUENTIAL_BOOT = "boot"
    SEQUENTIAL_CONSISTENCY = "consistency"
    CUSTOM = "custom"


def plan_vanilla(T: int) -> MergePlan:
    """Merge the entire trajectory in a single one-shot update."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return Leaf(1) if T == 1 else OneShot(1, T)


def plan_progressive(T: int) -> MergePlan:
    """Perfectly balanced pairwise-merge tree; requires T to be a power of two."""
    if T < 1 or (T & (T - 1)) != 0:
        raise ValueError(f"progressive plans require a power-of-two T, got {T}")

    def build(t1: int, t2: int) -> MergePlan:
        if t1 == t2:
            return Leaf(t1)
        mid = (t1 + t2) // 2
        return MergeNode(build(t1, mid), build(mid + 1, t2))

    return build(1, T)


def plan_sequential_boot(T: int) -> MergePlan:
    """Left-deep growth from the noisy end: leaf t merges with the block (t+1, T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    node: MergePlan = Leaf(T)
    for t in range(T - 1, 0, -1):
        node = MergeNode(Leaf(t), node)
    return node


def plan_sequential_consistency(T: int) -> MergePlan:
    """Left-deep growth from the clean end: block (1, t-1) merges with leaf t."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    node: MergePlan = Leaf(1)
    for t in range(2, T + 1):
        node = MergeNode(node, Leaf(t))
    return node


def plan_label(plan: MergePlan) -> PlanLabel:
    """Structurally classify a plan against the four canonical constructions."""
    T = plan.interval[1]
    if plan.interval[0] != 1:
        return PlanLabel.CUSTOM
    if plan == plan_vanilla(T):
        return PlanLabel.VANILLA
    if plan == plan_sequential_boot(T):
        return PlanLabel.SEQUENTIAL_BOOT
    if plan == plan_sequential_consistency(T):
        return PlanLabel.SEQUENTIAL_CONSISTENCY
    if (T & (T - 1)) == 0 and plan == plan_progressive(T):
        return PlanLabel.PROGRESSIVE
    return PlanLabel.CUSTOM


def evaluate_plan(
    plan: MergePlan,
    sched: NoiseSchedule,
    data: DiagGaussian,
    shrink: ShrinkageProfile,
) -> DiagOperator:
    """Post-order evaluation of a plan to its final merged operator.

    Leaves map to single-step operators, one-shot nodes to direct merges,
    binary nodes to the recursive merge of their children's results.
    """
    if plan.interval != (1, sched.T):
        raise ValueError(
            f"plan covers {plan.interval} but the schedule requires (1, {sched.T})"
        )
    return _evaluate(plan, sched, data, shrink)


def _evaluate(plan, sched, data, shrink) -> DiagOperator:
    if isinstance(plan, Leaf):
        return single_step_operator(sched, data, plan.t)
    if isinstance(plan, OneShot):
        return direct_merge(sched, data, shrink, plan.t1, plan.t2)
    if isinstance(plan, MergeNode):
        return merge(
            _evaluate(plan.left, sched, data, shrink),
            _evaluate(plan.right, sched, data, shrink),
            shrink,
        )
    raise TypeError(f"malformed plan node: {plan!r}")


def enumerate_plans(T: int) -> Iterator[MergePlan]:
    """Yield every distinct plan shape over ``(1, T)``.

    For each interval either a one-shot node or, for every split point, each
    pair of recursively enumerated children.  The count obeys
    ``C(1) = 1``, ``C(L) = 1 + sum_m C(m) * C(L - m)``; guarded to T <= 12
    against combinatorial blowup.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if T > MAX_ENUMERATION_T:
        raise ValueError(
            f"plan enumeration is limited to T <= {MAX_ENUMERATION_T}, got {T}"
        )
    yield from _enumerate_interval(1, T)


@functools.lru_cache(maxsize=None)
def _enumerated_interval(t1: int, t2: int) -> tuple[MergePlan, ...]:
    return tuple(_generate_interval(t1, t2))


def _enumerate_interval(t1: int, t2: int) -> Iterator[MergePlan]:
    # memoized: sub-interval plan lists are shared between enclosing plans
    yield from _enumerated_interval(t1, t2)


def _generate_interval(t1: int, t2: int) -> Iterator[MergePlan]:
    if t1 == t2:
        yield Leaf(t1)
        return
    yield OneShot(t1, t2)
    for m in range(t1, t2):
        for left in _enumerated_interval(t1, m):
            for right in _enumerated_interval(m + 1, t2):
                yield MergeNode(left, right)


def count_plans(T: int) -> int:
    """Number of distinct plan shapes via the recurrence (no enumeration)."""
    counts = [0, 1]
    for length in range(2, T + 1):
        counts.append(
            1 + sum(counts[m] * counts[length - m] for m in range(1, length))
        )
    return counts[T]


def internal_nodes(plan: MergePlan) -> Iterator[tuple[MergePlan, int]]:
    """Yield ``(node, depth)`` for every merge-performing node, root depth 0."""

    def walk(node: MergePlan, depth: int) -> Iterator[tuple[MergePlan, int]]:
        if isinstance(node, Leaf):
            return
        yield node, depth
        if isinstance(node, MergeNode):
            yield from walk(node.left, depth + 1)
            yield from walk(node.right, depth + 1)

    yield from walk(plan, 0)


def format_plan(plan: MergePlan) -> str:
    """Serialize to nested parenthesized text, e.g. ``((1:1)((2:2)(3:3)))``."""
    if isinstance(plan, Leaf):
        return f"({plan.t}:{plan.t})"
    if isinstance(plan, OneShot):
        return f"({plan.t1}:{plan.t2} oneshot)"
    if isinstance(plan, MergeNode):
        return f"({format_plan(plan.left)}{format_plan(plan.right)})"
    raise TypeError(f"malformed plan node: {plan!r}")


def parse_plan(text: str) -> MergePlan:
    """Parse the serialization produced by :func:`format_plan` (lossless round trip)."""
    plan, pos = _parse_node(text, 0)
    if pos != len(text):
        raise ValueError(f"trailing characters after plan at position {pos}: {text!r}")
    return plan


def _parse_node(text: str, pos: int) -> tuple[MergePlan, int]:
    if pos >= len(text) or text[pos] != "(":
        raise ValueError(f"expected '(' at position {pos} in {text!r}")
    pos += 1
    if pos < len(text) and text[pos] == "(":
        left, pos = _parse_node(text, pos)
        right, pos = _parse_node(text, pos)
        if pos >= len(text) or text[pos] != ")":
            raise ValueError(f"expected ')' at position {pos} in {text!r}")
        return MergeNode(left, right), pos + 1
    end = text.find(")", pos)
    if end < 0:
        raise ValueError(f"unterminated node at position {pos} in {text!r}")
    body = text[pos:end]
    if body.endswith(" oneshot"):
        span, oneshot = body[: -len(" oneshot")], True
    else:
        span, oneshot = body, False
    t1_str, _, t2_str = span.partition(":")
    t1, t2 = int(t1_str), int(t2_str)
    if oneshot:
        return OneShot(t1, t2), end + 1
    if t1 != t2:
        raise ValueError(f"leaf must cover a single step, got {body!r}")
    return Leaf(t1), end + 1
