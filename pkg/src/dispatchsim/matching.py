"""Exact solver for the per-epoch matching problem.

Selects one candidate per courier (possibly null) with each order covered
at most once, maximizing immediate reward plus downstream score. Instances
are small (tens of couriers and orders), so a depth-first branch and bound
with an additive upper bound is solved to proven optimality.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .feasibility import MatchCandidate


@dataclass
class Assignment:
    """One chosen candidate per courier, in courier order."""

    chosen: list[MatchCandidate]
    objective: float


def _validate(candidates: list[list[MatchCandidate]]) -> None:
    for idx, cands in enumerate(candidates):
        if not any(len(c.orders) == 0 for c in cands):
            raise RuntimeError(f"courier {idx} is missing its null candidate")
        for c in cands:
            if math.isnan(c.value):
                raise ValueError(f"courier {idx} has a NaN-valued candidate")
            if not math.isfinite(c.value):
                raise ValueError(f"courier {idx} has a non-finite candidate value")


def solve_matching(candidates: list[list[MatchCandidate]], n_orders: int) -> Assignment:
    """Provably optimal assignment via depth-first branch and bound.

    Couriers are explored best-candidate-first and candidates by descending
    value; the bound adds each remaining courier's best value ignoring
    conflicts. The incumbent is replaced only on strict improvement, so the
    result is deterministic for tied optima.
    """
    _validate(candidates)
    n = len(candidates)
    if n == 0:
        return Assignment([], 0.0)

    sorted_cands = [
        sorted(cands, key=lambda c: (-c.value, c.batch_ids)) for cands in candidates
    ]
    courier_order = sorted(
        range(n), key=lambda i: (-sorted_cands[i][0].value, i)
    )
    per_courier = [sorted_cands[i] for i in courier_order]

    suffix_best = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_best[i] = suffix_best[i + 1] + per_courier[i][0].value

    best_val = -math.inf
    best_pick: list[MatchCandidate] | None = None
    pick: list[MatchCandidate] = []

    def dfs(i: int, used: frozenset[int], value: float) -> None:
        nonlocal best_val, best_pick
        if value + suffix_best[i] <= best_val + 1e-12:
            return
        if i == n:
            if value > best_val:
                best_val = value
                best_pick = list(pick)
            return
        for cand in per_courier[i]:
            ids = cand.batch_ids
            if any(o in used for o in ids):
                continue
            pick.append(cand)
            dfs(i + 1, used | frozenset(ids) if ids else used, value + cand.value)
            pick.pop()

    dfs(0, frozenset(), 0.0)
    assert best_pick is not None  # the all-null assignment is always feasible

    chosen: list[MatchCandidate] = [None] * n  # type: ignore[list-item]
    for slot, i in enumerate(courier_order):
        chosen[i] = best_pick[slot]
    return Assignment(chosen, best_val)


def greedy_matching(candidates: list[list[MatchCandidate]], n_orders: int) -> Assignment:
    """Couriers in input order each take their best non-conflicting candidate."""
    _validate(candidates)
    used: set[int] = set()
    chosen: list[MatchCandidate] = []
    total = 0.0
    for cands in candidates:
        ranked = sorted(cands, key=lambda c: (-c.value, c.batch_ids))
        for cand in ranked:
            if not any(o in used for o in cand.batch_ids):
                chosen.append(cand)
                used.update(cand.batch_ids)
                total += cand.value
                break
    return Assignment(chosen, total)


def dump_instance(path, candidates: list[list[MatchCandidate]], assignment: Assignment | None = None) -> None:
    """Debug dump of an instance (and optionally its solution) to JSON."""
    payload = {
        "couriers": [
            [
                {
                    "batch": list(c.batch_ids),
                    "immediate_reward": c.immediate_reward,
                    "score": c.score,
                }
                for c in cands
            ]
            for cands in candidates
        ],
    }
    if assignment is not None:
        payload["chosen"] = [list(c.batch_ids) for c in assignment.chosen]
        payload["objective"] = assignment.objective
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
