"""Independent-Cascade simulation and spread evaluation.

Each newly activated user gets exactly one chance to activate each of their
still-inactive followers, succeeding independently with the edge probability.
Within a frontier, attempts are processed in ascending (target, source) order;
every attempt consumes one uniform draw, which pins the RNG stream without
changing the cascade distribution.

Per-simulation randomness comes from a counter-based stream: simulation i of a
run with ``base_seed`` draws from ``Philox(key=base_seed)`` with its 256-bit
counter advanced to ``i * 2**64``.  Streams are disjoint, so simulations can
run in any order (or concurrently) with sequential-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import SocialGraph, reachable_set

__all__ = [
    "EdgeProbabilityMap",
    "InfluenceResult",
    "assign_probabilities",
    "simulate_once",
    "simulation_rng",
    "influence_spread",
    "exact_influence",
    "spread_metrics",
    "write_influence_records",
]

EXACT_EDGE_LIMIT = 20


@dataclass(frozen=True)
class EdgeProbabilityMap:
    """Activation probability for every spread edge a simulation may traverse."""

    mode: str
    probabilities: dict[tuple[int, int], float]
    _by_source: dict[int, tuple[np.ndarray, np.ndarray]] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        for edge, p in self.probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} for edge {edge} outside [0, 1]")
        by_source: dict[int, tuple[list[int], list[float]]] = {}
        for (source, target), p in self.probabilities.items():
            by_source.setdefault(source, ([], []))
            by_source[source][0].append(target)
            by_source[source][1].append(p)
        packed = {}
        for source, (targets, probs) in by_source.items():
            order = np.argsort(targets)
            packed[source] = (
                np.asarray(targets, dtype=np.int64)[order],
                np.asarray(probs, dtype=np.float64)[order],
            )
        object.__setattr__(self, "_by_source", packed)

    def outgoing(self, source: int) -> tuple[np.ndarray, np.ndarray]:
        empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
        return self._by_source.get(source, empty)


@dataclass(frozen=True)
class InfluenceResult:
    """Monte-Carlo spread estimate for one seed user and one piece of content.

    ``spread`` is the mean activated-set size over R simulations; the seed
    counts as activated in every simulation.
    """

    seed_user: int
    R: int
    per_sim_activated: tuple[frozenset[int], ...]
    spread: float


def assign_probabilities(
    graph: SocialGraph,
    mode: str,
    p: float | None = None,
    model=None,
    content_embedding: np.ndarray | None = None,
    creator: int | None = None,
) -> EdgeProbabilityMap:
    """Build an edge-probability map for one of the three assignment modes.

    fixed: every spread edge gets ``p``.
    inverse_degree: edge (v -> w) gets 1 / (number of accounts w follows);
        w follows v by construction, so the denominator is at least 1.
    learned: probabilities from the trained estimator for the creator's
        reachable subgraph; requires ``model``, ``content_embedding`` and
        ``creator``.
    """
    if mode == "fixed":
        if p is None or not 0.0 <= p <= 1.0:
            raise ValueError("fixed mode requires p in [0, 1]")
        probs = {edge: float(p) for edge in graph.spread_edges()}
        return EdgeProbabilityMap(mode=f"fixed({p})", probabilities=probs)
    if mode == "inverse_degree":
        followee_counts = graph.followee_counts()
        probs = {
            (source, target): 1.0 / float(followee_counts[target])
            for source, target in graph.spread_edges()
        }
        return EdgeProbabilityMap(mode="inverse_degree", probabilities=probs)
    if mode == "learned":
        if model is None or content_embedding is None or creator is None:
            raise ValueError("learned mode requires model, content_embedding and creator")
        from .estimator import edge_probabilities_for_content

        return edge_probabilities_for_content(model, graph, creator, content_embedding)
    raise ValueError(f"unknown probability mode {mode!r}")


def simulate_once(
    graph: SocialGraph,
    probs: EdgeProbabilityMap,
    seed_user: int,
    rng: np.random.Generator,
) -> set[int]:
    """Run one independent cascade from the seed; returns the activated set."""
    graph._check_user(seed_user)
    active = {seed_user}
    frontier = [seed_user]
    while frontier:
        attempts: list[tuple[int, int, float]] = []
        for u in frontier:
            targets, edge_probs = probs.outgoing(u)
            for w, pw in zip(targets.tolist(), edge_probs.tolist()):
                if w not in active:
                    attempts.append((w, u, pw))
        if not attempts:
            break
        attempts.sort()
        draws = rng.random(len(attempts))
        frontier = []
        for (w, _v, pw), d in zip(attempts, draws):
            if w not in active and d < pw:
                active.add(w)
                frontier.append(w)
    return active


def simulation_rng(base_seed: int, sim_index: int) -> np.random.Generator:
    """Independent per-simulation stream: Philox(base_seed) at counter sim_index * 2^64."""
    bitgen = np.random.Philox(key=base_seed, counter=sim_index * (2**64))
    return np.random.Generator(bitgen)


def influence_spread(
    graph: SocialGraph,
    probs: EdgeProbabilityMap,
    seed_user: int,
    R: int,
    base_seed: int,
    keep_activations: bool = True,
) -> InfluenceResult:
    """Estimate spread as the mean activated count over R seeded simulations."""
    if R < 1:
        raise ValueError("R must be >= 1")
    graph._check_user(seed_user)
    bitgen = np.random.Philox(key=base_seed)
    rng = np.random.Generator(bitgen)
    state = bitgen.state
    activations: list[frozenset[int]] = []
    total = 0
    for i in range(R):
        # Cheap equivalent of simulation_rng(base_seed, i): reset the counter in place.
        state["state"]["counter"][:] = 0
        state["state"]["counter"][1] = i
        state["buffer_pos"] = 4
        bitgen.state = state
        activated = simulate_once(graph, probs, seed_user, rng)
        total += len(activated)
        if keep_activations:
            activations.append(frozenset(activated))
    return InfluenceResult(
        seed_user=seed_user,
        R=R,
        per_sim_activated=tuple(activations),
        spread=total / R,
    )


def exact_influence(
    graph: SocialGraph, probs: EdgeProbabilityMap, seed_user: int
) -> float:
    """Brute-force expected spread by enumerating live/blocked edge configurations.

    Only edges reachable from the seed (were every edge live) can matter; those
    are enumerated exhaustively, so the cost is 2^|E|.  Rejected above
    EXACT_EDGE_LIMIT edges.
    """
    graph._check_user(seed_user)
    relevant_nodes = set()
    stack = [seed_user]
    relevant_nodes.add(seed_user)
    adjacency: dict[int, list[tuple[int, float]]] = {}
    for (source, target), pw in sorted(probs.probabilities.items()):
        adjacency.setdefault(source, []).append((target, pw))
    while stack:
        u = stack.pop()
        for w, _pw in adjacency.get(u, ()):
            if w not in relevant_nodes:
                relevant_nodes.add(w)
                stack.append(w)
    edges = [
        (source, target, pw)
        for (source, target), pw in sorted(probs.probabilities.items())
        if source in relevant_nodes
    ]
    if len(edges) > EXACT_EDGE_LIMIT:
        raise ValueError(
            f"exact_influence limited to {EXACT_EDGE_LIMIT} edges, got {len(edges)}"
        )
    n_edges = len(edges)
    expected = 0.0
    for config in range(1 << n_edges):
        weight = 1.0
        live: dict[int, list[int]] = {}
        for idx, (source, target, pw) in enumerate(edges):
            if config >> idx & 1:
                weight *= pw
                live.setdefault(source, []).append(target)
            else:
                weight *= 1.0 - pw
        if weight == 0.0:
            continue
        seen = {seed_user}
        stack = [seed_user]
        while stack:
            u = stack.pop()
            for w in live.get(u, ()):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        expected += weight * len(seen)
    return expected


def spread_metrics(
    activated: set[int],
    positives: set[int],
    negatives: set[int],
    seed_user: int,
) -> tuple[float, float, float]:
    """Precision/recall/F1 of a simulated activation set against repost ground truth.

    The seed is excluded (a creator cannot repost their own post) and only
    users with ground truth count: predicted positives are the activated users
    that appear in either set.  Zero denominators yield 0.
    """
    overlap = positives & negatives
    if overlap:
        raise ValueError(f"ground-truth sets overlap: {sorted(overlap)[:5]}")
    if seed_user in positives or seed_user in negatives:
        raise ValueError("seed user must be excluded from ground truth")
    predicted = (activated - {seed_user}) & (positives | negatives)
    tp = len(predicted & positives)
    fp = len(predicted & negatives)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / len(positives) if positives else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    return precision, recall, f1


def write_influence_records(path, records: list[tuple[int, InfluenceResult]], sizes: bool = False) -> None:
    """Write a line-oriented spread report.

    Columns: post_id, seed_user, R, spread, then (optionally) the R
    per-simulation activated-set sizes, all space-separated.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# post_id seed_user R spread" + (" sizes..." if sizes else "") + "\n")
        for post_id, result in records:
            row = f"{post_id} {result.seed_user} {result.R} {result.spread:.17g}"
            if sizes:
                row += " " + " ".join(str(len(s)) for s in result.per_sim_activated)
            fh.write(row + "\n")
