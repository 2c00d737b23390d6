"""Final-layer teacher classifier and argmax pseudo-labels.

The teacher is a linear head trained on ground-truth frame labels over the
deepest hidden layer of the frozen encoder. Its argmax predictions become
the pseudo-labels that the per-layer exit branches are trained against, so
the branches never see ground truth directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FrameDataset
from .encoder import Encoder, HiddenStates, forward_all
from .numeric import DTYPE, new_rng, matmul64, sgd_step, softmax

__all__ = [
    "TeacherHead",
    "TeacherTrainResult",
    "init_teacher_head",
    "train_teacher",
    "pseudo_labels",
]


@dataclass(frozen=True)
class TeacherHead:
    weight: np.ndarray  # (num_classes, model_dim) float32
    bias: np.ndarray  # (num_classes,) float32

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def model_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class TeacherTrainResult:
    head: TeacherHead
    losses: list[float]  # mean batch cross-entropy per step


def init_teacher_head(num_classes: int, model_dim: int, seed: int) -> TeacherHead:
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    rng = new_rng(seed)
    std = np.sqrt(2.0 / (num_classes + model_dim))
    weight = (rng.standard_normal((num_classes, model_dim)) * std).astype(DTYPE)
    return TeacherHead(weight=weight, bias=np.zeros(num_classes, dtype=DTYPE))


def final_layer_features(enc: Encoder, data: FrameDataset) -> np.ndarray:
    """Deepest-layer hidden states for every sequence, shape (N, T, model_dim)."""
    depth = enc.config.num_layers
    feats = np.empty((data.num_sequences, data.frames, enc.config.model_dim), dtype=DTYPE)
    for i in range(data.num_sequences):
        feats[i] = forward_all(enc, data.inputs[i]).layer(depth)
    return feats


def _linear_ce_step(weight, bias, feats, labels, lr):
    """One SGD step of softmax cross-entropy for a linear head.

    feats: (rows, dim) float32, labels: (rows,) int. Returns the updated
    (weight, bias) and the mean loss before the step.
    """
    rows = feats.shape[0]
    logits = matmul64(feats, weight.T) + bias.astype(np.float64)
    probs = softmax(logits)
    idx = np.arange(rows)
    loss = float(-np.log(np.maximum(probs[idx, labels], 1e-300)).mean())
    dlogits = probs
    dlogits[idx, labels] -= 1.0
    dlogits /= rows
    grad_w = matmul64(dlogits.T, feats)
    grad_b = dlogits.sum(axis=0)
    return sgd_step(weight, grad_w, lr), sgd_step(bias, grad_b, lr), loss


def train_teacher(
    enc: Encoder,
    data: FrameDataset,
    lr: float,
    steps: int,
    seed: int,
    batch_size: int = 32,
) -> TeacherTrainResult:
    """Minibatch gradient descent on frame-level cross-entropy at the deepest layer."""
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    if int(data.labels.max()) >= data.num_classes:
        raise ValueError("labels exceed num_classes")
    head = init_teacher_head(data.num_classes, enc.config.model_dim, seed)
    if steps == 0:
        return TeacherTrainResult(head=head, losses=[])
    feats = final_layer_features(enc, data)
    rng = new_rng(seed)
    weight, bias = head.weight, head.bias
    losses: list[float] = []
    for _ in range(steps):
        batch = rng.integers(0, data.num_sequences, size=batch_size)
        x = feats[batch].reshape(-1, enc.config.model_dim)
        y = data.labels[batch].reshape(-1)
        weight, bias, loss = _linear_ce_step(weight, bias, x, y, lr)
        losses.append(loss)
    return TeacherTrainResult(head=TeacherHead(weight=weight, bias=bias), losses=losses)


def teacher_logits(head: TeacherHead, hidden: np.ndarray) -> np.ndarray:
    """Logits for one layer's hidden matrix, shape (frames, num_classes), float64."""
    return matmul64(hidden, head.weight.T) + head.bias.astype(np.float64)


def pseudo_labels(head: TeacherHead, hs: HiddenStates) -> np.ndarray:
    """Per-frame argmax of the teacher at the deepest layer; ties take the lowest class."""
    if hs.layers_computed < hs.total_layers:
        raise ValueError(
            f"pseudo labels need the final layer: computed {hs.layers_computed} "
            f"of {hs.total_layers}"
        )
    logits = teacher_logits(head, hs.layer(hs.total_layers))
    return logits.argmax(axis=1).astype(np.int32)
