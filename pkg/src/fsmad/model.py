"""A small MLP embedding head with hand-derived gradients and an Adam trainer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ClassLabel, Dataset, InfeasibleError, ValidationError, derive_seed, make_rng
from .loss import LossConfig, Triplet, pairwise_distances, select_triplets, triplet_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fsmad-mlp"
CHECKPOINT_VERSION = 1


class LeakageError(RuntimeError):
    """A sample that must stay out of training showed up in a batch."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights of the embedding head.

    ``layers[i] = (W, b)`` with ``W`` of shape ``(in, out)``. Hidden layers use
    ReLU, the last layer is affine, and the output is optionally L2-normalised.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    l2_normalize_output: bool = True
    activation: str = "relu"

    def __post_init__(self):
        layers = tuple((np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in self.layers)
        if not layers:
            raise ValidationError("model needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValidationError(f"layer {i}: input size {w.shape[0]} != previous output {layers[i - 1][0].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i}: non-finite parameters")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def flat(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_flat(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return replace(self, layers=tuple((next(it), next(it)) for _ in self.layers))


def init_params(sizes: Sequence[int], seed: int, l2_normalize_output: bool = True) -> ModelParams:
    """He-initialised weights, zero biases."""
    if len(sizes) < 2:
        raise ValidationError("need at least input and output sizes")
    rng = make_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(tuple(layers), l2_normalize_output)


def _forward_cache(params: ModelParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    norms = None
    if params.l2_normalize_output:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        h = h / np.where(norms > 0, norms, 1.0)
    return h, acts, pre, norms


def forward(params: ModelParams, x) -> np.ndarray:
    """Embed one vector ``(D,)`` or a batch ``(B, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {xb.shape[-1]} does not match model input {params.input_dim}")
    out = _forward_cache(params, xb)[0]
    return out[0] if single else out


def _triplet_grad_wrt_embeddings(emb: np.ndarray, triplets: Sequence[Triplet], margin: float) -> tuple[float, np.ndarray]:
    dist = pairwise_distances(emb)
    losses = triplet_losses(dist, triplets, margin)
    grad = np.zeros_like(emb)
    t = np.asarray(triplets, dtype=np.int64)
    active = losses > 0
    if active.any():
        a, p, n = t[active].T
        scale = 2.0 / len(triplets)
        # d(d_ap - d_an)/de_a = 2(e_n - e_p); /de_p = -2(e_a - e_p); /de_n = 2(e_a - e_n)
        np.add.at(grad, a, scale * (emb[n] - emb[p]))
        np.add.at(grad, p, -scale * (emb[a] - emb[p]))
        np.add.at(grad, n, scale * (emb[a] - emb[n]))
    return float(losses.mean()), grad


def backward(params: ModelParams, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    """Back-propagate ``dL/d(output)`` to parameter gradients in ``params.flat()`` order."""
    out, acts, pre, norms = cache
    g = grad_out
    if params.l2_normalize_output:
        # d(y/|y|)/dy applied to g: (g - u (u.g)) / |y|
        safe = np.where(norms > 0, norms, 1.0)
        g = (g - out * np.sum(out * g, axis=1, keepdims=True)) / safe
    grads: list[np.ndarray] = []
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if i < len(params.layers) - 1:
            g = g * (pre[i] > 0)
        grads.append(g.sum(axis=0))
        grads.append(acts[i].T @ g)
        g = g @ w.T
    grads.reverse()
    return grads


def batch_loss_and_grads(params: ModelParams, x: np.ndarray, labels: Sequence, cfg: LossConfig, triplets=None):
    """Mean mined-triplet loss of a batch and its exact parameter gradients.

    The mined triplets are held fixed while differentiating. Pass
    ``triplets`` to reuse a selection instead of mining afresh.

    Returns:
        ``(loss, grads, triplets)`` where ``grads`` matches ``params.flat()``.
    """
    x = np.asarray(x, dtype=np.float64)
    cache = _forward_cache(params, x)
    emb = cache[0]
    if triplets is None:
        triplets = select_triplets(pairwise_distances(emb), labels, cfg.mining_mode)
    loss, g_emb = _triplet_grad_wrt_embeddings(emb, triplets, cfg.margin)
    return loss, backward(params, cache, g_emb), triplets


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def update(self, params: ModelParams, grads: Sequence[np.ndarray]) -> ModelParams:
        flat = params.flat()
        if not self.m:
            self.m = [np.zeros_like(a) for a in flat]
            self.v = [np.zeros_like(a) for a in flat]
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        new = []
        for i, (p, g) in enumerate(zip(flat, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            new.append(p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return params.with_flat(new)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class VectorAugment:
    noise_sigma: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValidationError("dropout_prob must lie in [0, 1)")

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.noise_sigma > 0:
            x = x + rng.standard_normal(x.shape) * self.noise_sigma
        if self.dropout_prob > 0:
            x = x * (rng.random(x.shape) >= self.dropout_prob)
        return x


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    identities_per_batch: int = 8
    samples_per_identity: int = 4
    loss: LossConfig = LossConfig()
    learning_rate: float = 1e-5
    seed: int = 0
    hidden: tuple[int, ...] = (128,)
    embedding_dim: int = 64
    l2_normalize_output: bool = True
    vector_augment: VectorAugment | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.identities_per_batch < 2:
            raise ValidationError("identities_per_batch must be >= 2")
        if self.samples_per_identity < 2:
            raise ValidationError("samples_per_identity must be >= 2")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.samples_per_identity


def epoch_batches(labels: Sequence[ClassLabel], cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Compose one epoch of class-balanced batches.

    Every class is shuffled into a queue; each batch draws
    ``identities_per_batch`` classes among those with enough samples left and
    pops ``samples_per_identity`` from each. No sample repeats within an epoch.
    """
    classes = sorted(set(labels), key=lambda c: (c.tool is not None, c.tool or ""))
    queues = []
    for c in classes:
        idx = np.array([i for i, lab in enumerate(labels) if lab == c], dtype=np.int64)
        queues.append(list(rng.permutation(idx)))
    k, s = cfg.identities_per_batch, cfg.samples_per_identity
    batches = []
    while True:
        ready = [j for j, q in enumerate(queues) if len(q) >= s]
        if len(ready) < k:
            break
        picked = sorted(rng.choice(len(ready), size=k, replace=False))
        batch = []
        for j in picked:
            q = queues[ready[j]]
            batch.extend(q[:s])
            del q[:s]
        batches.append(np.array(batch, dtype=np.int64))
    return batches


def train(
    train_set: Dataset,
    cfg: TrainConfig,
    exclude_ids=frozenset(),
    init: ModelParams | None = None,
) -> tuple[ModelParams, list[float]]:
    """Train the embedding head with mined triplets and Adam.

    Args:
        train_set: labelled training vectors.
        cfg: training configuration; all randomness derives from ``cfg.seed``.
        exclude_ids: ids that must never reach a batch (held-out test samples).
            Checked on every step; a hit raises :class:`LeakageError`.
        init: starting weights; freshly initialised when omitted.

    Returns:
        Final parameters and the mean batch loss of every epoch.
    """
    classes = train_set.classes()
    if len(classes) < cfg.identities_per_batch:
        raise InfeasibleError(
            f"identities_per_batch={cfg.identities_per_batch} exceeds the {len(classes)} classes in the training set"
        )
    for c in classes:
        n = len(train_set.indices_of(c))
        if n < cfg.samples_per_identity:
            raise InfeasibleError(f"class {c} has {n} samples, fewer than samples_per_identity={cfg.samples_per_identity}")

    params = init or init_params(
        (train_set.dim, *cfg.hidden, cfg.embedding_dim), derive_seed(cfg.seed, "init"), cfg.l2_normalize_output
    )
    if params.input_dim != train_set.dim:
        raise ValidationError(f"model input {params.input_dim} != data dimension {train_set.dim}")
    forbidden = np.array([i in exclude_ids for i in train_set.ids], dtype=bool)
    opt = AdamState(learning_rate=cfg.learning_rate)
    batch_rng = make_rng(derive_seed(cfg.seed, "batches"))
    aug_rng = make_rng(derive_seed(cfg.seed, "augment"))
    X = train_set.vectors
    labels = train_set.labels
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in epoch_batches(labels, cfg, batch_rng):
            if forbidden[idx].any():
                leaked = [train_set.ids[i] for i in idx[forbidden[idx]]]
                raise LeakageError(f"held-out samples in training batch: {leaked[:5]}")
            xb = X[idx]
            if cfg.vector_augment is not None:
                xb = cfg.vector_augment.apply(xb, aug_rng)
            loss, grads, _ = batch_loss_and_grads(params, xb, [labels[i] for i in idx], cfg.loss)
            params = opt.update(params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return params, history


# ---------------------------------------------------------------------------
# Checkpoints


def params_to_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "activation": params.activation,
        "l2_normalize_output": params.l2_normalize_output,
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()} for w, b in params.layers
        ],
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {d.get('version')!r}")
    layers = []
    for layer in d["layers"]:
        w = np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"])
        layers.append((w, np.array(layer["bias"], dtype=np.float64)))
    return ModelParams(tuple(layers), bool(d["l2_normalize_output"]), d.get("activation", "relu"))


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    # json writes floats with repr(), which round-trips float64 exactly
    path = Path(path)
    path.write_text(json.dumps(params_to_dict(params)) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
