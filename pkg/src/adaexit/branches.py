"""Per-layer linear exit branches, their training loss, and entropy profiles.

Each encoder layer gets one linear classifier trained to predict the
teacher's pseudo-labels from that layer's hidden states. The sequence-level
entropy of branch k is the mean per-frame Shannon entropy of its softmax
posterior; dataset-level per-layer means feed threshold calibration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FrameDataset
from .encoder import Encoder, HiddenStates, forward_all
from .numeric import DTYPE, entropy, matmul64, new_rng, running_mean, sgd_step, softmax
from .teacher import TeacherHead, pseudo_labels

__all__ = [
    "BranchSet",
    "BranchTrainResult",
    "EntropyProfile",
    "init_branches",
    "train_branches",
    "branch_logits",
    "branch_entropy",
    "sample_entropies",
    "entropy_profile",
]


@dataclass(frozen=True)
class BranchSet:
    weights: np.ndarray  # (num_layers, num_classes, model_dim) float32
    biases: np.ndarray  # (num_layers, num_classes) float32

    def __post_init__(self):
        if self.weights.ndim != 3 or self.biases.shape != self.weights.shape[:2]:
            raise ValueError(
                f"inconsistent branch shapes: weights {self.weights.shape}, "
                f"biases {self.biases.shape}"
            )

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def model_dim(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class BranchTrainResult:
    branches: BranchSet
    loss_rows: list[tuple[int, int, float]]  # (step, layer, mean batch loss)


@dataclass(frozen=True)
class EntropyProfile:
    """Per-layer mean branch entropy over a dataset, with its extremes."""

    layer_means: tuple[float, ...]
    max_mean: float
    min_mean: float
    num_samples: int

    def __post_init__(self):
        if not self.layer_means:
            raise ValueError("profile needs at least one layer")
        if self.max_mean != max(self.layer_means) or self.min_mean != min(self.layer_means):
            raise ValueError("max_mean/min_mean inconsistent with layer_means")

    @classmethod
    def from_layer_means(cls, means, num_samples: int) -> "EntropyProfile":
        means = tuple(float(m) for m in means)
        return cls(
            layer_means=means,
            max_mean=max(means),
            min_mean=min(means),
            num_samples=num_samples,
        )

    @property
    def num_layers(self) -> int:
        return len(self.layer_means)


def init_branches(num_layers: int, num_classes: int, model_dim: int) -> BranchSet:
    """Zero-initialized branches: posteriors start exactly uniform (entropy ln C)."""
    return BranchSet(
        weights=np.zeros((num_layers, num_classes, model_dim), dtype=DTYPE),
        biases=np.zeros((num_layers, num_classes), dtype=DTYPE),
    )


def cache_hidden_states(enc: Encoder, data: FrameDataset) -> np.ndarray:
    """All layers for all sequences, shape (N, L, T, model_dim) float32.

    The encoder is frozen, so caching one full pass per sample is exactly
    equivalent to re-running the forward inside every minibatch.
    """
    cfg = enc.config
    out = np.empty(
        (data.num_sequences, cfg.num_layers, data.frames, cfg.model_dim), dtype=DTYPE
    )
    for i in range(data.num_sequences):
        hs = forward_all(enc, data.inputs[i])
        for k in range(cfg.num_layers):
            out[i, k] = hs.layers[k]
    return out


def train_branches(
    enc: Encoder,
    head: TeacherHead,
    data: FrameDataset,
    lr: float,
    batch_size: int,
    steps: int,
    seed: int,
) -> BranchTrainResult:
    """Train all branches jointly against pseudo-labels, one shared forward per minibatch.

    Per layer the loss is the frame-averaged cross-entropy between the
    branch posterior and the teacher's argmax at the deepest layer,
    averaged over the batch.
    """
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    cfg = enc.config
    branches = init_branches(cfg.num_layers, head.num_classes, cfg.model_dim)
    if steps == 0:
        return BranchTrainResult(branches=branches, loss_rows=[])
    cache = cache_hidden_states(enc, data)
    targets = np.empty((data.num_sequences, data.frames), dtype=np.int32)
    for i in range(data.num_sequences):
        hs = HiddenStates(layers=tuple(cache[i]), total_layers=cfg.num_layers)
        targets[i] = pseudo_labels(head, hs)

    rng = new_rng(seed)
    weights = branches.weights
    biases = branches.biases
    num_layers = cfg.num_layers
    loss_rows: list[tuple[int, int, float]] = []
    for step in range(steps):
        batch = rng.integers(0, data.num_sequences, size=batch_size)
        # (L, rows, d) with rows = batch * frames; all layers share the batch.
        feats = cache[batch].transpose(1, 0, 2, 3).reshape(num_layers, -1, cfg.model_dim)
        y = targets[batch].reshape(-1)
        rows = y.shape[0]
        logits = matmul64(feats, weights.transpose(0, 2, 1)) + biases[:, None, :].astype(
            np.float64
        )
        logits -= logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        picked = probs[:, np.arange(rows), y]
        layer_losses = -np.log(np.maximum(picked, 1e-300)).mean(axis=1)
        dlogits = probs
        dlogits[:, np.arange(rows), y] -= 1.0
        dlogits /= rows
        grad_w = matmul64(dlogits.transpose(0, 2, 1), feats)
        grad_b = dlogits.sum(axis=1)
        weights = sgd_step(weights, grad_w, lr)
        biases = sgd_step(biases, grad_b, lr)
        for k in range(num_layers):
            loss_rows.append((step, k + 1, float(layer_losses[k])))
    return BranchTrainResult(
        branches=BranchSet(weights=weights, biases=biases), loss_rows=loss_rows
    )


def branch_logits(branches: BranchSet, hidden: np.ndarray, layer: int) -> np.ndarray:
    """Logits of branch `layer` (1-based) over a (frames, model_dim) hidden matrix."""
    if not 1 <= layer <= branches.num_layers:
        raise ValueError(f"layer {layer} out of range 1..{branches.num_layers}")
    w = branches.weights[layer - 1]
    b = branches.biases[layer - 1]
    return matmul64(hidden, w.T) + b.astype(np.float64)


def entropy_from_hidden(branches: BranchSet, hidden: np.ndarray, layer: int) -> float:
    """Mean per-frame posterior entropy of one branch over one sample, in nats."""
    probs = softmax(branch_logits(branches, hidden, layer))
    return running_mean(entropy(probs))


def branch_entropy(branches: BranchSet, hs: HiddenStates, layer: int) -> float:
    """Sequence-level entropy of branch `layer`; the layer must have been computed."""
    return entropy_from_hidden(branches, hs.layer(layer), layer)


def sample_entropies(branches: BranchSet, hs: HiddenStates) -> np.ndarray:
    """Entropies of every computed layer for one sample, shape (layers_computed,)."""
    return np.array(
        [branch_entropy(branches, hs, k) for k in range(1, hs.layers_computed + 1)],
        dtype=np.float64,
    )


def entropy_profile(enc: Encoder, branches: BranchSet, data: FrameDataset) -> EntropyProfile:
    """Per-layer mean of branch entropies over all samples in a dataset."""
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    means = np.zeros(enc.config.num_layers, dtype=np.float64)
    for i in range(data.num_sequences):
        hs = forward_all(enc, data.inputs[i])
        means += (sample_entropies(branches, hs) - means) / (i + 1)
    return EntropyProfile.from_layer_means(means, data.num_sequences)
