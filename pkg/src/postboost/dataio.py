"""Corpus construction: raw-file parsing, preprocessing, splits, synthetic data.

Raw input is three UTF-8 tab-separated files:

* content file:      ``post_id<TAB>text``                (one post per line)
* network file:      ``follower_id<TAB>followee_id``
* interaction file:  ``user_id<TAB>post_id<TAB>action``  with action in
  {post, repost}

Raw ids are opaque strings; preprocessing densifies surviving users and posts
to integer ids in lexicographic raw-id order.

A normalized corpus directory holds ``meta.json``, ``edges.tsv``,
``posts.tsv``, ``splits.json`` and ``embeddings.txt``.  Post texts in
posts.tsv escape backslash, tab, newline and carriage return as ``\\\\``,
``\\t``, ``\\n``, ``\\r``.  The embedding file is a text header ``N D``
followed by N lines of D space-separated decimal floats, written with 17
significant digits so values round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .graph import SocialGraph, build_graph, save_edge_list, load_edge_list

__all__ = [
    "ParseError",
    "DataError",
    "Post",
    "Splits",
    "Corpus",
    "RawCorpus",
    "PreprocessParams",
    "SyntheticParams",
    "parse_raw",
    "preprocess",
    "split",
    "generate_synthetic",
    "read_embeddings",
    "write_embeddings",
    "save_corpus",
    "load_corpus",
    "repost_histories",
    "SyntheticTopicEmbedder",
    "HashingTextEmbedder",
    "embedder_for_corpus",
]

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 512

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class ParseError(ValueError):
    """Raw file rejected: unreadable or too many malformed lines."""


class DataError(ValueError):
    """Corpus-level contract violation (empty pipeline stage, bad format)."""


@dataclass(frozen=True)
class Post:
    post_id: int
    creator: int
    text: str
    reposters: tuple[int, ...]

    @property
    def repost_count(self) -> int:
        return len(self.reposters)


@dataclass(frozen=True)
class Splits:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


@dataclass
class Corpus:
    graph: SocialGraph
    posts: list[Post]
    splits: Splits | None = None
    embeddings: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Check the cross-table invariants; raises DataError on violation."""
        n = self.graph.user_count
        for index, post in enumerate(self.posts):
            if post.post_id != index:
                raise DataError(f"post ids must be dense list indices ({post.post_id})")
            if not 0 <= post.creator < n:
                raise DataError(f"post {post.post_id} creator {post.creator} unknown")
            for reposter in post.reposters:
                if not 0 <= reposter < n:
                    raise DataError(f"post {post.post_id} reposter {reposter} unknown")
                if reposter == post.creator:
                    raise DataError(f"post {post.post_id} reposted by its creator")
        if self.splits is not None:
            all_ids = sorted(self.splits.train + self.splits.val + self.splits.test)
            if all_ids != list(range(len(self.posts))):
                raise DataError("splits do not partition the post set")
        if self.embeddings is not None:
            if self.embeddings.shape != (len(self.posts), EMBEDDING_DIM):
                raise DataError(
                    f"embeddings shape {self.embeddings.shape} != "
                    f"({len(self.posts)}, {EMBEDDING_DIM})"
                )


@dataclass
class RawCorpus:
    texts: dict[str, str]
    creators: dict[str, str]
    reposts: set[tuple[str, str]]
    edges: list[tuple[str, str]]
    malformed: dict[str, list[int]]


@dataclass(frozen=True)
class PreprocessParams:
    seed_top_k: int = 20
    expansion_rounds: int = 2
    min_reposts_in_network: int = 5
    min_posts: int = 1
    min_reposts_by_user: int = 1
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        for name in ("seed_top_k", "expansion_rounds", "min_reposts_in_network",
                     "min_posts", "min_reposts_by_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _parse_lines(path, n_columns: int, splitter=None):
    """Yield (lineno, columns) for well-formed lines; collect malformed linenos."""
    rows = []
    bad: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", splitter) if splitter else line.split("\t")
            if len(parts) != n_columns or any(not p for p in parts[: n_columns - 1]):
                bad.append(lineno)
                continue
            rows.append((lineno, parts))
    return rows, bad


def parse_raw(
    content_path,
    network_path,
    interaction_path,
    max_malformed_fraction: float = 0.01,
) -> RawCorpus:
    """Parse the three raw files into in-memory tables, preserving raw ids.

    Malformed lines (wrong column count, unknown action, duplicate creator,
    interactions referencing posts absent from the content file) are counted
    per file and reported; a file whose malformed fraction exceeds
    ``max_malformed_fraction`` is rejected with the offending line numbers.
    """
    malformed: dict[str, list[int]] = {}
    totals: dict[str, int] = {}

    content_rows, bad = _parse_lines(content_path, 2, splitter=1)
    totals[str(content_path)] = len(content_rows) + len(bad)
    texts: dict[str, str] = {}
    for lineno, (post_id, text) in content_rows:
        if post_id in texts:
            bad.append(lineno)
            continue
        texts[post_id] = text
    malformed[str(content_path)] = sorted(bad)

    network_rows, bad = _parse_lines(network_path, 2)
    totals[str(network_path)] = len(network_rows) + len(bad)
    edges: list[tuple[str, str]] = []
    for lineno, (follower, followee) in network_rows:
        if not followee:
            bad.append(lineno)
            continue
        edges.append((follower, followee))
    malformed[str(network_path)] = sorted(bad)

    interaction_rows, bad = _parse_lines(interaction_path, 3)
    totals[str(interaction_path)] = len(interaction_rows) + len(bad)
    creators: dict[str, str] = {}
    reposts: set[tuple[str, str]] = set()
    for lineno, (user, post_id, action) in interaction_rows:
        if post_id not in texts:
            bad.append(lineno)
            continue
        if action == "post":
            if post_id in creators:
                bad.append(lineno)
                continue
            creators[post_id] = user
        elif action == "repost":
            reposts.add((user, post_id))
        else:
            bad.append(lineno)
    malformed[str(interaction_path)] = sorted(bad)

    for path in (content_path, network_path, interaction_path):
        bad_lines = malformed[str(path)]
        fraction = len(bad_lines) / max(totals[str(path)], 1)
        if fraction > max_malformed_fraction:
            raise ParseError(
                f"{path}: {len(bad_lines)} malformed lines "
                f"(lines {bad_lines[:20]}{'...' if len(bad_lines) > 20 else ''})"
            )
        if bad_lines:
            logger.warning("%s: skipped %d malformed lines", path, len(bad_lines))

    return RawCorpus(texts=texts, creators=creators, reposts=reposts,
                     edges=edges, malformed=malformed)


def preprocess(raw: RawCorpus, params: PreprocessParams = PreprocessParams()) -> Corpus:
    """Seed-and-expand densification pipeline over the raw tables.

    Stages, in order; each must leave something behind or a DataError names it:

    1. keep users with at least ``min_posts`` post actions and
       ``min_reposts_by_user`` repost actions;
    2. seed with the authors of the ``seed_top_k`` most-reposted posts;
    3. ``expansion_rounds`` times, add users who reposted a member's posts and
       users whose posts a member reposted;
    4. keep follow edges with both endpoints retained;
    5. keep posts whose creator is retained and which have at least
       ``min_reposts_in_network`` reposters inside the retained set
       (reposter sets and counts are recomputed within that set).

    The result is deterministic and insensitive to input row order; surviving
    raw ids are densified in lexicographic order.
    """
    posts_by_user: dict[str, set[str]] = {}
    for post_id, user in raw.creators.items():
        posts_by_user.setdefault(user, set()).add(post_id)
    reposts_by_user: dict[str, set[str]] = {}
    reposters_by_post: dict[str, set[str]] = {}
    for user, post_id in raw.reposts:
        reposts_by_user.setdefault(user, set()).add(post_id)
        reposters_by_post.setdefault(post_id, set()).add(user)

    eligible = {
        user
        for user in set(posts_by_user) | set(reposts_by_user)
        if len(posts_by_user.get(user, ())) >= params.min_posts
        and len(reposts_by_user.get(user, ())) >= params.min_reposts_by_user
    }
    if not eligible:
        raise DataError("stage 'eligible users' emptied the data "
                        "(no user has both a post and a repost)")

    ranked = sorted(
        raw.creators,
        key=lambda post_id: (-len(reposters_by_post.get(post_id, ())), post_id),
    )
    members = {
        raw.creators[post_id]
        for post_id in ranked[: params.seed_top_k]
        if raw.creators[post_id] in eligible
    }
    if not members:
        raise DataError("stage 'seed selection' emptied the data "
                        "(no eligible author among the top posts)")

    for _ in range(params.expansion_rounds):
        additions: set[str] = set()
        for user in members:
            for post_id in posts_by_user.get(user, ()):
                additions |= reposters_by_post.get(post_id, set())
            for post_id in reposts_by_user.get(user, ()):
                author = raw.creators.get(post_id)
                if author is not None:
                    additions.add(author)
        members |= additions & eligible

    kept_edges = [
        (follower, followee)
        for follower, followee in raw.edges
        if follower in members and followee in members
    ]

    user_index = {user: i for i, user in enumerate(sorted(members))}
    kept_posts = []
    for post_id in sorted(raw.creators):
        creator = raw.creators[post_id]
        if creator not in members:
            continue
        inside = {
            user for user in reposters_by_post.get(post_id, ())
            if user in members and user != creator
        }
        if len(inside) >= params.min_reposts_in_network:
            kept_posts.append((post_id, creator, inside))
    if not kept_posts:
        raise DataError(
            "stage 'post filter' emptied the data "
            f"(no post has >= {params.min_reposts_in_network} reposters in the network)"
        )

    graph = build_graph(
        [(user_index[a], user_index[b]) for a, b in kept_edges],
        user_count=len(user_index),
    )
    posts = [
        Post(
            post_id=i,
            creator=user_index[creator],
            text=raw.texts[post_id],
            reposters=tuple(sorted(user_index[u] for u in inside)),
        )
        for i, (post_id, creator, inside) in enumerate(kept_posts)
    ]
    corpus = Corpus(graph=graph, posts=posts,
                    meta={"raw_user_ids": sorted(members),
                          "raw_post_ids": [p for p, _, _ in kept_posts]})
    corpus.validate()
    return corpus


def split(
    post_ids: list[int],
    ratios: tuple[float, float, float],
    rng: np.random.Generator,
) -> Splits:
    """Shuffle and partition post ids by rounded cumulative ratios."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    ids = sorted(post_ids)
    if len(ids) < 3:
        raise ValueError("need at least 3 posts to split")
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    c1 = int(round(ratios[0] * n))
    c2 = int(round((ratios[0] + ratios[1]) * n))
    return Splits(
        train=tuple(shuffled[:c1]),
        val=tuple(shuffled[c1:c2]),
        test=tuple(shuffled[c2:]),
    )


# -- synthetic corpora --------------------------------------------------------

_TOPIC_THEMES = (
    "music", "sports", "tech", "food", "travel",
    "art", "science", "fashion", "gaming", "nature",
)


@dataclass(frozen=True)
class SyntheticParams:
    """Knobs for the synthetic corpus generator.

    Reposts are drawn per follower with probability
    ``base_repost_prob + affinity_weight * (interest . post_topic)``, so a
    learnable content signal exists whenever ``affinity_weight > 0``.
    """

    user_count: int = 1000
    post_count: int = 300
    topic_count: int = 6
    min_follows: int = 2
    max_follows: int = 8
    words_per_topic: int = 12
    words_per_post: int = 8
    interest_mix: float = 0.1
    post_topic_fidelity: float = 0.85
    own_topic_bias: float = 0.5
    base_repost_prob: float = 0.03
    affinity_weight: float = 0.5
    creator_min_followers: int = 2
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.user_count < 3 or self.post_count < 3:
            raise ValueError("user_count and post_count must be >= 3")
        if not 1 <= self.topic_count <= len(_TOPIC_THEMES):
            raise ValueError(f"topic_count must be in [1, {len(_TOPIC_THEMES)}]")


def _topic_vocabulary(params: SyntheticParams) -> list[list[str]]:
    return [
        [f"{_TOPIC_THEMES[t]}{i}" for i in range(params.words_per_topic)]
        for t in range(params.topic_count)
    ]


def generate_synthetic(
    params: SyntheticParams, rng: np.random.Generator
) -> Corpus:
    """Desk-scale corpus with a preferential-attachment follow graph.

    Post texts are rendered from per-topic word lists; embeddings are the
    texts run through the corpus's own SyntheticTopicEmbedder, so revised
    texts can be embedded consistently later.
    """
    n, m, T = params.user_count, params.post_count, params.topic_count

    follower_counts = np.zeros(n, dtype=np.int64)
    edges: list[tuple[int, int]] = []
    for u in range(1, n):
        k = int(rng.integers(params.min_follows, params.max_follows + 1))
        k = min(k, u)
        weights = follower_counts[:u] + 1.0
        targets = rng.choice(u, size=k, replace=False, p=weights / weights.sum())
        for v in sorted(int(t) for t in targets):
            edges.append((u, v))
            follower_counts[v] += 1
    graph = build_graph(edges, user_count=n)

    dominant = rng.integers(0, T, size=n)
    interests = np.full((n, T), params.interest_mix / T)
    interests[np.arange(n), dominant] += 1.0 - params.interest_mix

    vocabulary = _topic_vocabulary(params)
    projection_seed = int(rng.integers(0, 2**31 - 1))
    embedder = SyntheticTopicEmbedder(vocabulary, projection_seed)

    eligible_creators = np.flatnonzero(
        graph.follower_count >= params.creator_min_followers
    )
    if eligible_creators.size == 0:
        raise DataError("no user has enough followers to create posts")
    creator_weights = graph.follower_count[eligible_creators].astype(np.float64)
    creator_weights /= creator_weights.sum()

    posts: list[Post] = []
    embeddings = np.zeros((m, EMBEDDING_DIM))
    for post_id in range(m):
        creator = int(rng.choice(eligible_creators, p=creator_weights))
        if rng.random() < params.own_topic_bias:
            topic = int(dominant[creator])
        else:
            topic = int(rng.integers(0, T))
        mixture = np.full(T, (1.0 - params.post_topic_fidelity) / T)
        mixture[topic] += params.post_topic_fidelity

        words = []
        for _ in range(params.words_per_post):
            t = int(rng.choice(T, p=mixture))
            words.append(vocabulary[t][int(rng.integers(0, params.words_per_topic))])
        text = " ".join(words)

        reposters = []
        for follower in graph.followers(creator):
            affinity = float(interests[follower] @ mixture)
            p = min(0.95, params.base_repost_prob + params.affinity_weight * affinity)
            if rng.random() < p:
                reposters.append(follower)
        posts.append(Post(post_id=post_id, creator=creator, text=text,
                          reposters=tuple(sorted(reposters))))
        embeddings[post_id] = embedder.embed(text)

    splits = split(list(range(m)), params.split_ratios, rng)
    corpus = Corpus(
        graph=graph,
        posts=posts,
        splits=splits,
        embeddings=embeddings,
        meta={
            "synthetic": {
                "topic_words": vocabulary,
                "projection_seed": projection_seed,
                "params": asdict(params),
            }
        },
    )
    corpus.validate()
    return corpus


# -- embedding file format ----------------------------------------------------

def write_embeddings(path, table: np.ndarray) -> None:
    """Write the ``N D`` header + row-per-post text format (17 digits)."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise DataError("embedding table must be 2-dimensional")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.shape[0]} {table.shape[1]}\n")
        for row in table:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_embeddings(path, expected_dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Read an embedding file, enforcing the declared dimension."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: header must be 'N D'")
        count, dim = int(header[0]), int(header[1])
        if dim != expected_dim:
            raise DataError(f"{path}: dimension {dim} != required {expected_dim}")
        table = np.empty((count, dim))
        row = 0
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if row >= count:
                raise DataError(f"{path}: more rows than the declared {count}")
            values = line.split()
            if len(values) != dim:
                raise DataError(
                    f"{path}: row {row} has {len(values)} values, expected {dim}"
                )
            table[row] = [float(v) for v in values]
            row += 1
    if row != count:
        raise DataError(f"{path}: {row} rows found, header declared {count}")
    if not np.all(np.isfinite(table)):
        raise DataError(f"{path}: non-finite embedding values")
    return table


# -- corpus directory ----------------------------------------------------------

def _escape_text(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape_text(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
            if mapped is not None:
                out.append(mapped)
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def save_corpus(corpus: Corpus, directory) -> None:
    """Write the normalized corpus directory (documented formats)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(corpus.meta)
    meta["format"] = 1
    meta["user_count"] = corpus.graph.user_count
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    save_edge_list(directory / "edges.tsv", corpus.graph)
    with open(directory / "posts.tsv", "w", encoding="utf-8") as fh:
        for post in corpus.posts:
            reposters = ",".join(str(r) for r in post.reposters)
            fh.write(
                f"{post.post_id}\t{post.creator}\t{reposters}\t{_escape_text(post.text)}\n"
            )
    if corpus.splits is not None:
        with open(directory / "splits.json", "w", encoding="utf-8") as fh:
            json.dump(
                {"train": list(corpus.splits.train),
                 "val": list(corpus.splits.val),
                 "test": list(corpus.splits.test)},
                fh, sort_keys=True,
            )
    if corpus.embeddings is not None:
        write_embeddings(directory / "embeddings.txt", corpus.embeddings)


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    with open(directory / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    edges = load_edge_list(directory / "edges.tsv")
    graph = build_graph(edges, user_count=meta["user_count"])
    posts: list[Post] = []
    with open(directory / "posts.tsv", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            post_id, creator, reposters, text = line.split("\t", 3)
            posts.append(
                Post(
                    post_id=int(post_id),
                    creator=int(creator),
                    text=_unescape_text(text),
                    reposters=tuple(
                        sorted(int(r) for r in reposters.split(",") if r)
                    ),
                )
            )
    splits = None
    splits_path = directory / "splits.json"
    if splits_path.exists():
        with open(splits_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        splits = Splits(
            train=tuple(raw["train"]), val=tuple(raw["val"]), test=tuple(raw["test"])
        )
    embeddings = None
    embeddings_path = directory / "embeddings.txt"
    if embeddings_path.exists():
        embeddings = read_embeddings(embeddings_path)
    corpus = Corpus(graph=graph, posts=posts, splits=splits,
                    embeddings=embeddings, meta=meta)
    corpus.validate()
    return corpus


def repost_histories(corpus: Corpus, split_ids=None) -> dict[int, list[int]]:
    """Per-user sorted list of reposted post ids, optionally split-restricted."""
    allowed = set(split_ids) if split_ids is not None else None
    histories: dict[int, list[int]] = {}
    for post in corpus.posts:
        if allowed is not None and post.post_id not in allowed:
            continue
        for reposter in post.reposters:
            histories.setdefault(reposter, []).append(post.post_id)
    return {user: sorted(pids) for user, pids in sorted(histories.items())}


# -- text embedders ------------------------------------------------------------

class SyntheticTopicEmbedder:
    """Maps text to the synthetic corpus's topic space, then projects to 512-d.

    Token counts over the per-topic vocabularies are normalized to a topic
    mixture and multiplied by a fixed random projection, the same one used to
    create the corpus embeddings, so re-embedding a stored post text
    reproduces its stored row exactly.
    """

    def __init__(self, topic_words: list[list[str]], projection_seed: int,
                 dim: int = EMBEDDING_DIM):
        self.topic_count = len(topic_words)
        self.word_topic = {
            word: t for t, words in enumerate(topic_words) for word in words
        }
        self.dim = dim
        proj_rng = np.random.default_rng(projection_seed)
        self.projection = proj_rng.normal(
            0.0, 1.0, size=(self.topic_count, dim)
        ) / np.sqrt(self.topic_count)

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.topic_count)
        for token in _TOKEN_RE.findall(text.lower()):
            topic = self.word_topic.get(token)
            if topic is not None:
                counts[topic] += 1.0
        total = counts.sum()
        if total == 0.0:
            return np.zeros(self.dim)
        return (counts / total) @ self.projection


class HashingTextEmbedder:
    """Deterministic signed-hash bag-of-words embedding; stub for real models."""

    def __init__(self, dim: int = EMBEDDING_DIM):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            sign = 1.0 if value & 1 else -1.0
            vec[(value >> 1) % self.dim] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


def embedder_for_corpus(corpus: Corpus):
    """Synthetic corpora re-embed through their own topic projection; anything
    else falls back to the hashing stub (real runs should supply embeddings
    from an external sentence model)."""
    synthetic = corpus.meta.get("synthetic")
    if synthetic:
        return SyntheticTopicEmbedder(
            synthetic["topic_words"], synthetic["projection_seed"]
        )
    return HashingTextEmbedder()
