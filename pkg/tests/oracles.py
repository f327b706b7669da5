"""Independent reference implementations used as test oracles.

Nothing here imports the scheduler; the brute-force search enumerates every
way to distribute ranks over nodes.
"""

from __future__ import annotations

import itertools
from collections import defaultdict


def rank_distributions(ranks: int, nodes: int):
    """Every vector of per-node rank counts summing to ``ranks``."""
    for cuts in itertools.combinations_with_replacement(range(nodes), ranks):
        counts = [0] * nodes
        for c in cuts:
            counts[c] += 1
        yield tuple(counts)


def feasible(counts, free, cpr, gpr) -> bool:
    return all(n * cpr <= c and n * gpr <= g for n, (c, g) in zip(counts, free))


def brute_force(free, ranks, cpr, gpr):
    """All feasible per-node rank counts for the task given (cores, gpus) free per node."""
    return [d for d in rank_distributions(ranks, len(free)) if feasible(d, free, cpr, gpr)]


def classify(free, totals, ranks, cpr, gpr):
    """("placed", counts) with the lexicographically greatest feasible counts, or "busy"/"unsatisfiable".

    The greatest count vector loads the lowest-indexed nodes first, which is
    what compact first-fit must produce.
    """
    if not brute_force(totals, ranks, cpr, gpr):
        return "unsatisfiable", None
    options = brute_force(free, ranks, cpr, gpr)
    if not options:
        return "busy", None
    return "placed", max(options)


TERMINAL = {"DONE", "FAILED", "CANCELED", "FINISHED", "EXCEPTION"}


def oversubscriptions(events, capacity):
    """Replay placements in log order; return every (timestamp, node) where a bound is exceeded.

    ``capacity`` maps node_id -> (cores, gpus). Placement detail is the
    ``node:cores:gpus;...`` string on EXECUTING (task) or RUN (instance) events.
    """
    held = {}
    used = defaultdict(lambda: [0, 0])
    bad = []
    for ev in events:
        state = getattr(ev.new_state, "value", ev.new_state)
        if state in ("EXECUTING", "RUN"):
            parts = []
            for chunk in ev.detail["placement"].split(";"):
                node, c, g = chunk.split(":")
                parts.append((node, int(c), int(g)))
            held[ev.subject_id] = parts
            for node, c, g in parts:
                used[node][0] += c
                used[node][1] += g
                if used[node][0] > capacity[node][0] or used[node][1] > capacity[node][1]:
                    bad.append((ev.timestamp, node))
        elif ev.subject_id in held and state in TERMINAL:
            for node, c, g in held.pop(ev.subject_id):
                used[node][0] -= c
                used[node][1] -= g
                if used[node][0] < 0 or used[node][1] < 0:
                    bad.append((ev.timestamp, node))
    return bad


def integrate(intervals, t0, t1):
    """Resource-time of (start, end, amount) intervals clipped to [t0, t1]."""
    return sum(a * max(0, min(e, t1) - max(s, t0)) for s, e, a in intervals)


def expected_partition_sizes(n: int, k: int) -> list[int]:
    q, r = divmod(n, k)
    return [q + 1] * r + [q] * (k - r)
