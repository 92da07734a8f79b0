"""Directed social graph with spread-oriented adjacency and audience scoring.

Edge orientation: "u follows v" is stored as the follow edge (u, v), but
content travels the other way, from v to its followers.  ``spread_adjacency``
therefore maps each user to the list of their followers, which is the
direction a cascade traverses.  "Degree" throughout this package means
follower count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SocialGraph",
    "ImportanceVector",
    "build_graph",
    "load_edge_list",
    "save_edge_list",
    "neighborhood",
    "importance_scores",
    "softmax_sample",
]


@dataclass(frozen=True)
class SocialGraph:
    """Immutable follow network.

    Attributes:
        user_count: number of users; ids are dense integers in [0, user_count).
        follow_edges: deduplicated (follower, followee) pairs, sorted.
        spread_adjacency: per-user sorted list of followers (spread direction).
        follower_count: per-user follower totals.
    """

    user_count: int
    follow_edges: tuple[tuple[int, int], ...]
    spread_adjacency: tuple[tuple[int, ...], ...]
    follower_count: np.ndarray = field(repr=False)

    def followers(self, user: int) -> tuple[int, ...]:
        self._check_user(user)
        return self.spread_adjacency[user]

    def followee_counts(self) -> np.ndarray:
        """Number of accounts each user follows (in-degree in spread orientation)."""
        counts = np.zeros(self.user_count, dtype=np.int64)
        for follower, _followee in self.follow_edges:
            counts[follower] += 1
        return counts

    def spread_edges(self) -> list[tuple[int, int]]:
        """All directed edges (source, target) in spread orientation, sorted."""
        return sorted((followee, follower) for follower, followee in self.follow_edges)

    def _check_user(self, user: int) -> None:
        if not 0 <= user < self.user_count:
            raise ValueError(f"unknown user id {user} (user_count={self.user_count})")


@dataclass(frozen=True)
class ImportanceVector:
    """Audience weights for one creator, from hop-limited degree propagation.

    ``scores`` maps each member of the creator's h-hop audience to a finite
    nonnegative weight; users outside the audience are implicitly 0.
    """

    creator: int
    hop: int
    scores: dict[int, float]

    def members(self) -> list[int]:
        return sorted(self.scores)


def build_graph(edges: list[tuple[int, int]], user_count: int) -> SocialGraph:
    """Build a SocialGraph from raw (follower, followee) pairs.

    Duplicate edges and self-loops are dropped.  Ids outside
    [0, user_count) are rejected with the offending edge in the message.
    """
    if user_count < 0:
        raise ValueError("user_count must be nonnegative")
    clean: set[tuple[int, int]] = set()
    for follower, followee in edges:
        if not (0 <= follower < user_count and 0 <= followee < user_count):
            raise ValueError(
                f"edge ({follower}, {followee}) out of range for user_count={user_count}"
            )
        if follower == followee:
            continue
        clean.add((int(follower), int(followee)))
    adjacency: list[list[int]] = [[] for _ in range(user_count)]
    for follower, followee in clean:
        adjacency[followee].append(follower)
    spread = tuple(tuple(sorted(folk)) for folk in adjacency)
    counts = np.array([len(folk) for folk in spread], dtype=np.int64)
    return SocialGraph(
        user_count=user_count,
        follow_edges=tuple(sorted(clean)),
        spread_adjacency=spread,
        follower_count=counts,
    )


def load_edge_list(path) -> list[tuple[int, int]]:
    """Read a follower<TAB>followee edge-list file."""
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'follower<TAB>followee'")
            edges.append((int(parts[0]), int(parts[1])))
    return edges


def save_edge_list(path, graph: SocialGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for follower, followee in graph.follow_edges:
            fh.write(f"{follower}\t{followee}\n")


def neighborhood(graph: SocialGraph, user: int, h: int) -> set[int]:
    """Users reachable from ``user`` within 1..h spread steps, excluding the user.

    This is the audience a post can reach in at most h forwarding rounds.
    """
    graph._check_user(user)
    if h < 1:
        raise ValueError("h must be >= 1")
    seen = {user}
    result: set[int] = set()
    frontier = deque([user])
    for _ in range(h):
        next_frontier: deque[int] = deque()
        while frontier:
            u = frontier.popleft()
            for w in graph.spread_adjacency[u]:
                if w not in seen:
                    seen.add(w)
                    result.add(w)
                    next_frontier.append(w)
        if not next_frontier:
            break
        frontier = next_frontier
    return result


def importance_scores(graph: SocialGraph, creator: int, h: int) -> ImportanceVector:
    """Degree-boosting propagation scores over the creator's h-hop audience.

    The propagation operator S has entries
    ``S[u][i] = sqrt(d_u) * sqrt(d_i)`` for each spread edge u -> i, where d
    is the follower count.  The score of audience member i is the (creator, i)
    entry of ``S + S^2 + ... + S^h``, computed by h sparse vector products
    seeded with the creator's one-hot vector.  High-degree members are boosted
    rather than normalized away, since they can forward content further.
    """
    graph._check_user(creator)
    if h < 1:
        raise ValueError("h must be >= 1")
    audience = neighborhood(graph, creator, h)
    sqrt_deg = np.sqrt(graph.follower_count.astype(np.float64))
    current: dict[int, float] = {creator: 1.0}
    totals: dict[int, float] = {}
    for _ in range(h):
        propagated: dict[int, float] = {}
        for u, value in current.items():
            weight = value * sqrt_deg[u]
            if weight == 0.0:
                continue
            for i in graph.spread_adjacency[u]:
                propagated[i] = propagated.get(i, 0.0) + weight * sqrt_deg[i]
        for i, value in propagated.items():
            totals[i] = totals.get(i, 0.0) + value
        current = propagated
        if not current:
            break
    scores = {i: totals.get(i, 0.0) for i in audience}
    return ImportanceVector(creator=creator, hop=h, scores=scores)


def softmax_sample(
    importance: ImportanceVector, k: int, rng: np.random.Generator
) -> list[int]:
    """Draw up to k distinct audience members with probability softmax(score).

    Draws are without replacement; after each pick the softmax is renormalized
    over the remaining members.  If the audience has at most k members, all of
    them are returned (order still rng-determined).  An empty audience yields
    an empty list, which callers treat as the signal to fall back.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    remaining = sorted(importance.scores)
    picked: list[int] = []
    while remaining and len(picked) < k:
        raw = np.array([importance.scores[i] for i in remaining], dtype=np.float64)
        stable = np.exp(raw - raw.max())
        probs = stable / stable.sum()
        idx = int(rng.choice(len(remaining), p=probs))
        picked.append(remaining.pop(idx))
    return picked


def softmax_probabilities(scores: dict[int, float]) -> dict[int, float]:
    """Softmax over a score dict; helper shared with interest sampling."""
    if not scores:
        return {}
    members = sorted(scores)
    raw = np.array([scores[m] for m in members], dtype=np.float64)
    stable = np.exp(raw - raw.max())
    probs = stable / stable.sum()
    return {m: float(p) for m, p in zip(members, probs)}


def reachable_set(graph: SocialGraph, seed_user: int) -> set[int]:
    """All users reachable from the seed along spread edges, including the seed."""
    graph._check_user(seed_user)
    seen = {seed_user}
    stack = [seed_user]
    while stack:
        u = stack.pop()
        for w in graph.spread_adjacency[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen
