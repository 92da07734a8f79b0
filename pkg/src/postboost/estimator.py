"""Pairwise repost-probability estimator.

Scores the probability that a recipient reposts a creator's content as
``sigmoid(sum_j x_r[j] * x_c[j] * x_u[j])`` where x_r and x_u are MLP
projections of learnable user embeddings and x_c is an MLP projection of a
fixed 512-dim content embedding.  Trained as a regression against {0, 1}
repost labels with MSE loss; the backward pass is written out by hand and
checked against finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array

from .cascade import EdgeProbabilityMap
from .graph import SocialGraph, reachable_set

__all__ = [
    "InteractionInstance",
    "RepostProbabilityEstimator",
    "build_training_dataset",
    "instances_to_arrays",
    "gradient_check",
    "edge_probabilities_for_content",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

PARAM_NAMES = ("EU", "UW1", "Ub1", "UW2", "Ub2", "CW1", "Cb1", "CW2", "Cb2")


@dataclass(frozen=True)
class InteractionInstance:
    """One training example: did ``recipient`` repost ``post_id`` by ``creator``?"""

    recipient: int
    creator: int
    post_id: int
    label: float

    def __post_init__(self):
        if self.recipient == self.creator:
            raise ValueError("recipient and creator must differ")
        if self.label not in (0.0, 1.0):
            raise ValueError("label must be 0 or 1")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class RepostProbabilityEstimator(BaseEstimator):
    """Content-gated bilinear repost model with an sklearn-style interface.

    ``fit(X, y)`` expects X of shape (n, 2 + content_dim): the first two
    columns are recipient and creator ids, the rest is the content embedding.
    ``predict(X)`` returns repost probabilities in (0, 1).

    Parameters mirror the reference configuration: user embeddings of size 32,
    user MLP [32, 64, 32], content MLP [512, 128, 32], dropout 0.5 on hidden
    activations during training only, Adam at learning rate 1e-4 with batch
    size 1024.  ``hidden_activation`` may be set to "identity" to make both
    MLPs linear (used for optimization sanity checks).
    """

    def __init__(
        self,
        user_count: int | None = None,
        embedding_dim: int = 32,
        user_hidden: int = 64,
        content_dim: int = 512,
        content_hidden: int = 128,
        dropout: float = 0.5,
        learning_rate: float = 1e-4,
        batch_size: int = 1024,
        epochs: int = 100,
        seed: int = 0,
        hidden_activation: str = "relu",
    ):
        self.user_count = user_count
        self.embedding_dim = embedding_dim
        self.user_hidden = user_hidden
        self.content_dim = content_dim
        self.content_hidden = content_hidden
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.hidden_activation = hidden_activation

    # -- parameter management -------------------------------------------------

    def _initialized(self) -> bool:
        return hasattr(self, "params_")

    def _ensure_initialized(self, user_count: int | None = None) -> None:
        if self._initialized():
            return
        count = self.user_count if self.user_count is not None else user_count
        if count is None or count < 1:
            raise ValueError("user_count is unknown; set it or call fit first")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rng = np.random.default_rng(self.seed)

        def uniform_init(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.fitted_user_count_ = int(count)
        self.params_ = {
            "EU": rng.normal(0.0, 0.1, size=(count, self.embedding_dim)),
            "UW1": uniform_init(self.embedding_dim, (self.embedding_dim, self.user_hidden)),
            "Ub1": np.zeros(self.user_hidden),
            "UW2": uniform_init(self.user_hidden, (self.user_hidden, self.embedding_dim)),
            "Ub2": np.zeros(self.embedding_dim),
            "CW1": uniform_init(self.content_dim, (self.content_dim, self.content_hidden)),
            "Cb1": np.zeros(self.content_hidden),
            "CW2": uniform_init(self.content_hidden, (self.content_hidden, self.embedding_dim)),
            "Cb2": np.zeros(self.embedding_dim),
        }
        self.loss_history_: list[float] = []

    def _activate(self, pre: np.ndarray) -> np.ndarray:
        if self.hidden_activation == "relu":
            return np.maximum(pre, 0.0)
        if self.hidden_activation == "identity":
            return pre
        raise ValueError(f"unknown hidden_activation {self.hidden_activation!r}")

    def _activate_grad(self, pre: np.ndarray) -> np.ndarray:
        if self.hidden_activation == "relu":
            return (pre > 0.0).astype(np.float64)
        return np.ones_like(pre)

    # -- forward / backward ----------------------------------------------------

    def _forward_batch(
        self,
        recipients: np.ndarray,
        creators: np.ndarray,
        contents: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ):
        """Batched forward pass; returns probabilities plus a cache for backward."""
        p = self.params_
        keep = 1.0 - self.dropout

        def user_proj(ids: np.ndarray):
            a0 = p["EU"][ids]
            pre = a0 @ p["UW1"] + p["Ub1"]
            hid = self._activate(pre)
            if training and self.dropout > 0.0:
                mask = (rng.random(hid.shape) < keep) / keep
            else:
                mask = None
            dropped = hid if mask is None else hid * mask
            out = dropped @ p["UW2"] + p["Ub2"]
            return a0, pre, dropped, mask, out

        r_cache = user_proj(recipients)
        c_cache = user_proj(creators)
        pre_c = contents @ p["CW1"] + p["Cb1"]
        hid_c = self._activate(pre_c)
        if training and self.dropout > 0.0:
            mask_c = (rng.random(hid_c.shape) < keep) / keep
        else:
            mask_c = None
        dropped_c = hid_c if mask_c is None else hid_c * mask_c
        x_content = dropped_c @ p["CW2"] + p["Cb2"]
        score = np.sum(r_cache[4] * x_content * c_cache[4], axis=1)
        prob = _sigmoid(score)
        cache = (recipients, creators, contents, r_cache, c_cache,
                 (pre_c, dropped_c, mask_c, x_content), prob)
        return prob, cache

    def _backward_batch(self, cache, labels: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of mean squared error over the batch, by hand.

        Loss: L = mean_i (p_i - y_i)^2 with p = sigmoid(s) and
        s = sum_j x_r[j] * x_c[j] * x_u[j].  The two user branches share the
        user MLP and embedding table, so their gradients accumulate.
        """
        p = self.params_
        recipients, creators, contents, r_cache, c_cache, content_cache, prob = cache
        pre_c, dropped_c, mask_c, x_content = content_cache
        n = labels.shape[0]
        g_score = 2.0 * (prob - labels) * prob * (1.0 - prob) / n
        x_r, x_u = r_cache[4], c_cache[4]
        g_xr = g_score[:, None] * (x_content * x_u)
        g_xu = g_score[:, None] * (x_content * x_r)
        g_xc = g_score[:, None] * (x_r * x_u)

        grads = {name: np.zeros_like(arr) for name, arr in p.items()}

        def user_backward(ids, user_cache, g_out):
            a0, pre, dropped, mask, _out = user_cache
            grads["UW2"] += dropped.T @ g_out
            grads["Ub2"] += g_out.sum(axis=0)
            g_dropped = g_out @ p["UW2"].T
            g_hid = g_dropped if mask is None else g_dropped * mask
            g_pre = g_hid * self._activate_grad(pre)
            grads["UW1"] += a0.T @ g_pre
            grads["Ub1"] += g_pre.sum(axis=0)
            g_a0 = g_pre @ p["UW1"].T
            np.add.at(grads["EU"], ids, g_a0)

        user_backward(recipients, r_cache, g_xr)
        user_backward(creators, c_cache, g_xu)

        grads["CW2"] += dropped_c.T @ g_xc
        grads["Cb2"] += g_xc.sum(axis=0)
        g_dropped_c = g_xc @ p["CW2"].T
        g_hid_c = g_dropped_c if mask_c is None else g_dropped_c * mask_c
        g_pre_c = g_hid_c * self._activate_grad(pre_c)
        grads["CW1"] += contents.T @ g_pre_c
        grads["Cb1"] += g_pre_c.sum(axis=0)
        return grads

    # -- public API -------------------------------------------------------------

    def forward(
        self,
        recipient: int,
        creator: int,
        content_embedding: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> float:
        """Repost probability for a single (recipient, creator, content) triple."""
        content = np.asarray(content_embedding, dtype=np.float64)
        if content.shape != (self.content_dim,):
            raise ValueError(f"content embedding must have shape ({self.content_dim},)")
        if not np.all(np.isfinite(content)):
            raise ValueError("content embedding contains non-finite values")
        self._ensure_initialized()
        if training and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout masks")
        prob, _ = self._forward_batch(
            np.array([recipient]), np.array([creator]), content[None, :],
            training=training, rng=rng,
        )
        return float(prob[0])

    def _split_X(self, X: np.ndarray):
        X = check_array(X, dtype=np.float64, ensure_min_features=2 + 1)
        if X.shape[1] != 2 + self.content_dim:
            raise ValueError(
                f"X must have 2 + content_dim = {2 + self.content_dim} columns, got {X.shape[1]}"
            )
        recipients = X[:, 0].astype(np.int64)
        creators = X[:, 1].astype(np.int64)
        contents = X[:, 2:]
        if not np.all(np.isfinite(contents)):
            raise ValueError("content embeddings contain non-finite values")
        return recipients, creators, contents

    def fit(self, X, y):
        """Train with mini-batch Adam on MSE; deterministic for a fixed seed.

        Records full-dataset MSE (dropout off) before training and after each
        epoch in ``loss_history_``.  Aborts with the epoch/batch index if the
        loss ever turns non-finite.
        """
        recipients, creators, contents = self._split_X(np.asarray(X))
        labels = np.asarray(y, dtype=np.float64).ravel()
        if labels.shape[0] != recipients.shape[0]:
            raise ValueError("X and y disagree on sample count")
        if labels.shape[0] == 0:
            raise ValueError("empty training set")
        inferred = int(max(recipients.max(), creators.max())) + 1
        self._ensure_initialized(user_count=inferred)
        if max(recipients.max(), creators.max()) >= self.fitted_user_count_:
            raise ValueError("user id outside the embedding table")

        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 1)))
        adam_m = {name: np.zeros_like(arr) for name, arr in self.params_.items()}
        adam_v = {name: np.zeros_like(arr) for name, arr in self.params_.items()}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0
        n = labels.shape[0]

        self.loss_history_ = [self._dataset_loss(recipients, creators, contents, labels)]
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start : start + self.batch_size]
                prob, cache = self._forward_batch(
                    recipients[batch], creators[batch], contents[batch],
                    training=True, rng=rng,
                )
                batch_loss = float(np.mean((prob - labels[batch]) ** 2))
                if not np.isfinite(batch_loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, batch {start // self.batch_size}"
                    )
                grads = self._backward_batch(cache, labels[batch])
                step += 1
                scale = (
                    self.learning_rate
                    * np.sqrt(1.0 - beta2**step)
                    / (1.0 - beta1**step)
                )
                for name, grad in grads.items():
                    adam_m[name] = beta1 * adam_m[name] + (1.0 - beta1) * grad
                    adam_v[name] = beta2 * adam_v[name] + (1.0 - beta2) * grad**2
                    self.params_[name] -= scale * adam_m[name] / (
                        np.sqrt(adam_v[name]) + eps
                    )
            self.loss_history_.append(
                self._dataset_loss(recipients, creators, contents, labels)
            )
        return self

    def _dataset_loss(self, recipients, creators, contents, labels) -> float:
        prob, _ = self._forward_batch(recipients, creators, contents, training=False)
        return float(np.mean((prob - labels) ** 2))

    def predict(self, X) -> np.ndarray:
        """Repost probabilities for (recipient, creator, embedding) rows."""
        if not self._initialized():
            raise ValueError("estimator is not fitted")
        recipients, creators, contents = self._split_X(np.asarray(X))
        prob, _ = self._forward_batch(recipients, creators, contents, training=False)
        return prob

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        """Write a versioned .npz checkpoint: hyperparams as JSON + named tensors."""
        if not self._initialized():
            raise ValueError("nothing to save; estimator is not initialized")
        header = {
            "format_version": CHECKPOINT_VERSION,
            "user_count": self.fitted_user_count_,
            "hyperparams": self.get_params(),
        }
        np.savez(
            path,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            **self.params_,
        )

    @classmethod
    def load(cls, path) -> "RepostProbabilityEstimator":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header["format_version"] != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint version {header['format_version']}"
                )
            est = cls(**header["hyperparams"])
            est.fitted_user_count_ = int(header["user_count"])
            est.params_ = {name: data[name].copy() for name in PARAM_NAMES}
            est.loss_history_ = []
        return est


def build_training_dataset(
    graph: SocialGraph,
    posts,
    negatives_per_positive: int,
    rng: np.random.Generator,
) -> list[InteractionInstance]:
    """Interaction instances from posts with reposter ground truth.

    One label-1 instance per (reposter, creator, post).  Per post,
    ``negatives_per_positive`` label-0 instances are sampled without
    replacement from the creator's non-reposting followers (all of them when
    fewer exist).  Posts with no positives contribute nothing, which keeps the
    label balance close to the sampled negative ratio.
    """
    instances: list[InteractionInstance] = []
    for post in posts:
        creator = post.creator
        positives = sorted(set(post.reposters) - {creator})
        if not positives:
            logger.debug("post %s has no reposters; skipped", post.post_id)
            continue
        for reposter in positives:
            instances.append(
                InteractionInstance(reposter, creator, post.post_id, 1.0)
            )
        pool = sorted(set(graph.followers(creator)) - set(positives) - {creator})
        n_neg = min(negatives_per_positive, len(pool))
        if n_neg:
            chosen = rng.choice(len(pool), size=n_neg, replace=False)
            for idx in sorted(int(i) for i in chosen):
                instances.append(
                    InteractionInstance(pool[idx], creator, post.post_id, 0.0)
                )
    return instances


def instances_to_arrays(
    instances: list[InteractionInstance], embeddings: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pack instances into the (n, 2 + dim) design matrix used by ``fit``."""
    if not instances:
        raise ValueError("no instances")
    dim = embeddings.shape[1]
    X = np.empty((len(instances), 2 + dim))
    y = np.empty(len(instances))
    for row, inst in enumerate(instances):
        X[row, 0] = inst.recipient
        X[row, 1] = inst.creator
        X[row, 2:] = embeddings[inst.post_id]
        y[row] = inst.label
    return X, y


def gradient_check(
    model: RepostProbabilityEstimator,
    instance: InteractionInstance,
    content_embeddings: np.ndarray,
    epsilon: float = 1e-5,
    max_params: int | None = 400,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks the single-instance squared error with dropout off, in double
    precision.  When the model has more than ``max_params`` parameters, a
    random subsample (at least 200, spread over every tensor) is checked.
    """
    model._ensure_initialized()
    content = content_embeddings[instance.post_id].astype(np.float64)
    recipients = np.array([instance.recipient])
    creators = np.array([instance.creator])
    contents = content[None, :]
    label = np.array([instance.label])

    def loss() -> float:
        prob, _ = model._forward_batch(recipients, creators, contents, training=False)
        return float((prob[0] - label[0]) ** 2)

    prob, cache = model._forward_batch(recipients, creators, contents, training=False)
    analytic = model._backward_batch(cache, label)

    coords: list[tuple[str, tuple[int, ...]]] = []
    for name, arr in model.params_.items():
        for flat in range(arr.size):
            coords.append((name, np.unravel_index(flat, arr.shape)))
    if max_params is not None and len(coords) > max_params:
        take = max(200, max_params)
        picker = rng if rng is not None else np.random.default_rng(0)
        chosen = picker.choice(len(coords), size=take, replace=False)
        # keep at least one coordinate per tensor so no branch goes unchecked
        per_tensor = {name: (name, np.unravel_index(0, model.params_[name].shape))
                      for name in model.params_}
        coords = [coords[int(i)] for i in chosen] + list(per_tensor.values())

    worst = 0.0
    for name, index in coords:
        arr = model.params_[name]
        original = arr[index]
        arr[index] = original + epsilon
        up = loss()
        arr[index] = original - epsilon
        down = loss()
        arr[index] = original
        numeric = (up - down) / (2.0 * epsilon)
        exact = analytic[name][index]
        denom = max(abs(exact), abs(numeric))
        if denom == 0.0:
            continue
        worst = max(worst, abs(exact - numeric) / max(denom, 1e-8))
    return worst


def edge_probabilities_for_content(
    model: RepostProbabilityEstimator,
    graph: SocialGraph,
    creator: int,
    content_embedding: np.ndarray,
) -> EdgeProbabilityMap:
    """Learned activation probability for every spread edge the creator can reach.

    For an edge (v -> w) inside a cascade, v is the immediate sharer, so the
    pairwise score treats v as the creator argument and w as the recipient.
    """
    model._ensure_initialized()
    content = np.asarray(content_embedding, dtype=np.float64)
    if not np.all(np.isfinite(content)):
        raise ValueError("content embedding contains non-finite values")
    reachable = sorted(reachable_set(graph, creator))
    edges = [
        (v, w)
        for v in reachable
        for w in graph.spread_adjacency[v]
    ]
    if not edges:
        return EdgeProbabilityMap(mode="learned", probabilities={})

    p = model.params_
    involved = sorted({u for edge in edges for u in edge})
    lookup = {u: i for i, u in enumerate(involved)}
    a0 = p["EU"][involved]
    hid = model._activate(a0 @ p["UW1"] + p["Ub1"])
    user_proj = hid @ p["UW2"] + p["Ub2"]
    hid_c = model._activate(content @ p["CW1"] + p["Cb1"])
    x_content = hid_c @ p["CW2"] + p["Cb2"]

    sources = np.array([lookup[v] for v, _w in edges])
    targets = np.array([lookup[w] for _v, w in edges])
    scores = np.sum(user_proj[targets] * x_content[None, :] * user_proj[sources], axis=1)
    probs = _sigmoid(scores)
    return EdgeProbabilityMap(
        mode="learned",
        probabilities={edge: float(pw) for edge, pw in zip(edges, probs)},
    )
