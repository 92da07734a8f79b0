"""Revision-prompt construction: strategies, pools, samplers and rendering.

Eight strategies are supported.  Content-centric ones condition only on the
input post and global popularity exemplars; structure-aware ones additionally
condition on the creator's audience, either through sampled reposts or through
an LLM-summarized interest string.

Rendering is byte-deterministic: templates live as fixture files under
``templates/`` and inserted posts are wrapped in ``{...}`` with backslash
escapes for ``\\``, ``{`` and ``}``, joined by ``, ``, so a rendered post
block can be parsed back losslessly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

import numpy as np

from .graph import (
    SocialGraph,
    importance_scores,
    neighborhood,
    softmax_probabilities,
)

__all__ = [
    "StrategyKind",
    "PromptStrategy",
    "PopularityPools",
    "PromptText",
    "PromptContext",
    "NeighborSample",
    "STRATEGY_BY_ID",
    "classify_popularity",
    "FewShotSelector",
    "sample_neighbor_posts",
    "sample_interest_posts",
    "render_prompt",
    "render_interest_summarization_prompt",
    "quote_post",
    "render_post_block",
    "parse_post_block",
    "extract_input_text",
    "extract_summarization_posts",
    "SUMMARIZE_PREFIX",
]


class StrategyKind(str, Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT_FIXED = "few_shot_fixed"
    FEW_SHOT_SIMILAR = "few_shot_similar"
    NEIGHBOR_POSTS_GLOBAL = "neighbor_posts_global"
    NEIGHBOR_POSTS_RANDOM = "neighbor_posts_random"
    NEIGHBOR_POSTS_INFLUENTIAL = "neighbor_posts_influential"
    INTEREST_UNIFORM = "interest_uniform"
    INTEREST_SCORED = "interest_scored"


STRATEGY_BY_ID: dict[str, StrategyKind] = {
    "1": StrategyKind.ZERO_SHOT,
    "2.1": StrategyKind.FEW_SHOT_FIXED,
    "2.2": StrategyKind.FEW_SHOT_SIMILAR,
    "3.0": StrategyKind.NEIGHBOR_POSTS_GLOBAL,
    "3.1": StrategyKind.NEIGHBOR_POSTS_RANDOM,
    "3.2": StrategyKind.NEIGHBOR_POSTS_INFLUENTIAL,
    "4.1": StrategyKind.INTEREST_UNIFORM,
    "4.2": StrategyKind.INTEREST_SCORED,
}

ID_BY_STRATEGY = {kind: sid for sid, kind in STRATEGY_BY_ID.items()}

STRUCTURE_AWARE = {
    StrategyKind.NEIGHBOR_POSTS_RANDOM,
    StrategyKind.NEIGHBOR_POSTS_INFLUENTIAL,
    StrategyKind.INTEREST_UNIFORM,
    StrategyKind.INTEREST_SCORED,
}

HOP_DEPENDENT = STRUCTURE_AWARE


@dataclass(frozen=True)
class PromptStrategy:
    """One of the eight strategies plus its sampling counts and hop depth."""

    kind: StrategyKind
    k_fewshot_each: int = 2
    k_neighbor_posts: int = 3
    k_interest_posts: int = 10
    hop: int = 1

    def __post_init__(self):
        for name in ("k_fewshot_each", "k_neighbor_posts", "k_interest_posts", "hop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def strategy_id(self) -> str:
        return ID_BY_STRATEGY[self.kind]

    @classmethod
    def from_id(cls, strategy_id: str, hop: int = 1) -> "PromptStrategy":
        if strategy_id not in STRATEGY_BY_ID:
            raise ValueError(
                f"unknown strategy {strategy_id!r}; expected one of {sorted(STRATEGY_BY_ID)}"
            )
        return cls(kind=STRATEGY_BY_ID[strategy_id], hop=hop)


@dataclass(frozen=True)
class PopularityPools:
    """Top/bottom posts of the training split by repost count."""

    popular: tuple[int, ...]
    unpopular: tuple[int, ...]


@dataclass(frozen=True)
class PromptText:
    text: str
    strategy_id: str
    provenance: tuple[int, ...]
    fallback: bool = False


@dataclass(frozen=True)
class PromptContext:
    """Inputs a strategy needs beyond the post text itself.

    ``popular``/``unpopular``/``neighbor_posts`` are (post_id, text) pairs;
    ``interests`` is the summarized interest string with ``source_post_ids``
    recording the posts it came from.
    """

    popular: tuple[tuple[int, str], ...] = ()
    unpopular: tuple[tuple[int, str], ...] = ()
    neighbor_posts: tuple[tuple[int, str], ...] = ()
    interests: str = ""
    source_post_ids: tuple[int, ...] = ()
    fallback: bool = False


@dataclass(frozen=True)
class NeighborSample:
    post_ids: tuple[int, ...]
    fallback: bool = False


# -- templates -----------------------------------------------------------------

_TEMPLATE_FILES = {
    StrategyKind.ZERO_SHOT: "revise_zero_shot.txt",
    StrategyKind.FEW_SHOT_FIXED: "revise_few_shot.txt",
    StrategyKind.FEW_SHOT_SIMILAR: "revise_few_shot.txt",
    StrategyKind.NEIGHBOR_POSTS_GLOBAL: "revise_neighbor_posts.txt",
    StrategyKind.NEIGHBOR_POSTS_RANDOM: "revise_neighbor_posts.txt",
    StrategyKind.NEIGHBOR_POSTS_INFLUENTIAL: "revise_neighbor_posts.txt",
    StrategyKind.INTEREST_UNIFORM: "revise_interest.txt",
    StrategyKind.INTEREST_SCORED: "revise_interest.txt",
}

_PLACEHOLDER_RE = re.compile(
    r"\{(input_text|popular_posts|unpopular_posts|neighbor_posts|interests)\}"
)

SUMMARIZE_PREFIX = (
    "Instruction: Your goal is to summarize the interest of your audience"
)


@lru_cache(maxsize=None)
def _load_template(name: str) -> str:
    text = (resources.files("postboost") / "templates" / name).read_text("utf-8")
    return text[:-1] if text.endswith("\n") else text


def _render(template: str, mapping: dict[str, str]) -> str:
    # single-pass substitution; inserted content is never rescanned
    return _PLACEHOLDER_RE.sub(lambda m: mapping[m.group(1)], template)


def quote_post(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace("{", "\\{").replace("}", "\\}")
    return "{" + escaped + "}"


def render_post_block(texts: list[str]) -> str:
    return ", ".join(quote_post(t) for t in texts)


def parse_post_block(block: str) -> list[str]:
    """Inverse of render_post_block; raises ValueError on malformed input."""
    posts: list[str] = []
    i = 0
    n = len(block)
    while i < n:
        if block[i] != "{":
            raise ValueError(f"expected '{{' at offset {i}")
        i += 1
        chunk: list[str] = []
        while i < n:
            ch = block[i]
            if ch == "\\" and i + 1 < n:
                chunk.append(block[i + 1])
                i += 2
                continue
            if ch == "}":
                break
            chunk.append(ch)
            i += 1
        else:
            raise ValueError("unterminated post")
        posts.append("".join(chunk))
        i += 1
        if i < n:
            if not block.startswith(", ", i):
                raise ValueError(f"expected ', ' separator at offset {i}")
            i += 2
    return posts


_INPUT_RE = re.compile(r"Input Data: Input text=\{(.*)\}\.$", re.DOTALL)
_SUMMARY_POSTS_RE = re.compile(
    r"interacted with the following posts: (.*)\. The response should be",
    re.DOTALL,
)


def extract_input_text(prompt: str) -> str:
    match = _INPUT_RE.search(prompt)
    if not match:
        raise ValueError("prompt has no 'Input text={...}.' block")
    return match.group(1)


def extract_summarization_posts(prompt: str) -> list[str]:
    match = _SUMMARY_POSTS_RE.search(prompt)
    if not match:
        raise ValueError("not an interest-summarization prompt")
    return parse_post_block(match.group(1))


# -- pools and samplers ---------------------------------------------------------

def classify_popularity(train_posts) -> PopularityPools:
    """Top/bottom 20% of the training posts by repost count; ties by post id."""
    posts = list(train_posts)
    if len(posts) < 5:
        raise ValueError("need at least 5 posts to build popularity pools")
    ranked = sorted(posts, key=lambda post: (-post.repost_count, post.post_id))
    k = math.ceil(0.2 * len(ranked))
    popular = [post.post_id for post in ranked[:k]]
    unpopular = [post.post_id for post in ranked[-k:]]
    if set(popular) & set(unpopular):
        half = len(ranked) // 2
        popular = [p for p in popular if p in {x.post_id for x in ranked[:half]}]
        unpopular = [p for p in unpopular if p in {x.post_id for x in ranked[half:]}]
    return PopularityPools(popular=tuple(popular), unpopular=tuple(unpopular))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


class FewShotSelector:
    """Exemplar picker for the few-shot strategies.

    The "fixed" variant draws once per pool and caches the draw, so every
    input of a run sees the same exemplars.  The "similar" variant ranks each
    pool by cosine similarity to the input embedding, ties broken by post id.
    """

    def __init__(
        self,
        pools: PopularityPools,
        embeddings: np.ndarray | None,
        rng: np.random.Generator,
    ):
        self.pools = pools
        self.embeddings = embeddings
        self.rng = rng
        self._fixed_cache: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {}

    def _draw_fixed(self, pool: tuple[int, ...], k: int) -> tuple[int, ...]:
        ordered = sorted(pool)
        if len(ordered) <= k:
            return tuple(ordered)
        chosen = self.rng.choice(len(ordered), size=k, replace=False)
        return tuple(ordered[int(i)] for i in sorted(chosen))

    def select(
        self,
        variant: StrategyKind,
        input_embedding: np.ndarray | None = None,
        k_each: int = 2,
    ) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if variant is StrategyKind.FEW_SHOT_FIXED:
            if k_each not in self._fixed_cache:
                self._fixed_cache[k_each] = (
                    self._draw_fixed(self.pools.popular, k_each),
                    self._draw_fixed(self.pools.unpopular, k_each),
                )
            return self._fixed_cache[k_each]
        if variant is StrategyKind.FEW_SHOT_SIMILAR:
            if input_embedding is None or self.embeddings is None:
                raise ValueError("similar variant needs input and pool embeddings")

            def top(pool: tuple[int, ...]) -> tuple[int, ...]:
                ranked = sorted(
                    pool,
                    key=lambda pid: (-_cosine(self.embeddings[pid], input_embedding), pid),
                )
                return tuple(ranked[:k_each])

            return top(self.pools.popular), top(self.pools.unpopular)
        raise ValueError(f"not a few-shot variant: {variant}")


def sample_neighbor_posts(
    variant: StrategyKind,
    graph: SocialGraph,
    creator: int,
    h: int,
    train_post_ids,
    histories: dict[int, list[int]],
    k: int,
    rng: np.random.Generator,
) -> NeighborSample:
    """Pick the posts inserted by the 3.x strategies.

    global: uniform over the whole training split.
    random: uniform over the pooled repost histories of the h-hop audience.
    influential: walk audience members by descending follower count (ties by
    id), draining each member's history until k posts are collected.
    An empty structural pool falls back to the global variant with the
    fallback flag set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    train_ids = sorted(train_post_ids)

    def uniform_from(pool: list[int], fallback: bool) -> NeighborSample:
        if len(pool) <= k:
            return NeighborSample(tuple(pool), fallback)
        chosen = rng.choice(len(pool), size=k, replace=False)
        return NeighborSample(tuple(pool[int(i)] for i in sorted(chosen)), fallback)

    if variant is StrategyKind.NEIGHBOR_POSTS_GLOBAL:
        return uniform_from(train_ids, fallback=False)

    audience = neighborhood(graph, creator, h)
    if variant is StrategyKind.NEIGHBOR_POSTS_RANDOM:
        pool = sorted({pid for member in audience for pid in histories.get(member, ())})
        if not pool:
            return uniform_from(train_ids, fallback=True)
        return uniform_from(pool, fallback=False)

    if variant is StrategyKind.NEIGHBOR_POSTS_INFLUENTIAL:
        ranked = sorted(audience, key=lambda m: (-int(graph.follower_count[m]), m))
        collected: list[int] = []
        seen: set[int] = set()
        for member in ranked:
            history = [pid for pid in histories.get(member, ()) if pid not in seen]
            if not history:
                continue
            need = k - len(collected)
            if len(history) <= need:
                taken = history
            else:
                chosen = rng.choice(len(history), size=need, replace=False)
                taken = [history[int(i)] for i in sorted(chosen)]
            collected.extend(taken)
            seen.update(taken)
            if len(collected) >= k:
                break
        if not collected:
            return uniform_from(train_ids, fallback=True)
        return NeighborSample(tuple(collected), fallback=False)

    raise ValueError(f"not a neighbor-posts variant: {variant}")


def sample_interest_posts(
    variant: StrategyKind,
    graph: SocialGraph,
    creator: int,
    h: int,
    histories: dict[int, list[int]],
    k: int,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Posts feeding interest summarization (4.x strategies).

    Repeats {draw an audience member, draw one post from their history} until
    k distinct posts are collected or the pooled histories are exhausted.
    The uniform variant draws members uniformly; the scored variant draws them
    by softmax over their propagation importance.  Returns an empty tuple when
    no audience member has any history (callers degrade to the zero-shot
    strategy).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    audience = sorted(neighborhood(graph, creator, h))
    members = [m for m in audience if histories.get(m)]
    if not members:
        return ()

    if variant is StrategyKind.INTEREST_SCORED:
        importance = importance_scores(graph, creator, h)
        probs_by_member = softmax_probabilities(
            {m: importance.scores.get(m, 0.0) for m in members}
        )
        member_probs = np.array([probs_by_member[m] for m in members])
    elif variant is StrategyKind.INTEREST_UNIFORM:
        member_probs = None
    else:
        raise ValueError(f"not an interest variant: {variant}")

    pool_size = len({pid for m in members for pid in histories[m]})
    target = min(k, pool_size)
    collected: list[int] = []
    seen: set[int] = set()
    while len(collected) < target:
        idx = int(rng.choice(len(members), p=member_probs))
        history = histories[members[idx]]
        pid = history[int(rng.integers(0, len(history)))]
        if pid not in seen:
            seen.add(pid)
            collected.append(pid)
    return tuple(collected)


# -- rendering -------------------------------------------------------------------

def render_prompt(
    strategy: PromptStrategy, input_post_text: str, context: PromptContext
) -> PromptText:
    """Render the canonical template for the strategy, byte-exactly.

    The input post text is embedded unmodified.  Context requirements are
    strict: few-shot needs both exemplar pools, 3.x needs neighbor posts and
    4.x needs a non-empty interest string.
    """
    kind = strategy.kind
    mapping = {"input_text": input_post_text}
    provenance: tuple[int, ...] = ()

    if kind in (StrategyKind.FEW_SHOT_FIXED, StrategyKind.FEW_SHOT_SIMILAR):
        if not context.popular or not context.unpopular:
            raise ValueError("few-shot strategies need popular and unpopular exemplars")
        mapping["popular_posts"] = render_post_block([t for _, t in context.popular])
        mapping["unpopular_posts"] = render_post_block([t for _, t in context.unpopular])
        provenance = tuple(pid for pid, _ in context.popular + context.unpopular)
    elif kind in (
        StrategyKind.NEIGHBOR_POSTS_GLOBAL,
        StrategyKind.NEIGHBOR_POSTS_RANDOM,
        StrategyKind.NEIGHBOR_POSTS_INFLUENTIAL,
    ):
        if not context.neighbor_posts:
            raise ValueError("neighbor-posts strategies need sampled posts")
        mapping["neighbor_posts"] = render_post_block(
            [t for _, t in context.neighbor_posts]
        )
        provenance = tuple(pid for pid, _ in context.neighbor_posts)
    elif kind in (StrategyKind.INTEREST_UNIFORM, StrategyKind.INTEREST_SCORED):
        if not context.interests:
            raise ValueError("interest strategies need a summarized interest string")
        mapping["interests"] = context.interests
        provenance = context.source_post_ids

    text = _render(_load_template(_TEMPLATE_FILES[kind]), mapping)
    return PromptText(
        text=text,
        strategy_id=strategy.strategy_id,
        provenance=provenance,
        fallback=context.fallback,
    )


def render_interest_summarization_prompt(posts: list[tuple[int, str]]) -> PromptText:
    """The auxiliary prompt that asks the LLM for a ';'-separated interest list."""
    if not posts:
        raise ValueError("interest summarization needs at least one post")
    text = _render(
        _load_template("summarize_interests.txt"),
        {"neighbor_posts": render_post_block([t for _, t in posts])},
    )
    return PromptText(
        text=text,
        strategy_id="interest_summarization",
        provenance=tuple(pid for pid, _ in posts),
    )
