"""Downstream classifier over early-exited features.

Features are a learned softmax-weighted sum of the layer-normalized hidden
layers up to the exit. Exits stay active while the head
trains; the encoder, branches, and threshold are all frozen by then, so
each sample's exit layer is a fixed property of the data and is computed
once. Evaluation reports accuracy alongside exit depth and compute-saved
accounting, with a statically truncated twin for baseline comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .branches import BranchSet
from .data import FrameDataset
from .encoder import Encoder, HiddenStates, IncrementalForward, forward_all
from .numeric import DTYPE, layer_norm, matmul64, new_rng, sgd_step, softmax
from .policy import ExitPolicy, ExitTrace, SpanStats, collect_span_stats, run_exit

__all__ = [
    "DownstreamHead",
    "NormalizedPrefix",
    "DownstreamTrainResult",
    "init_downstream_head",
    "normalize_prefix",
    "prefix_weights",
    "weighted_features",
    "train_downstream",
    "evaluate",
    "evaluate_static",
]

TASKS = ("frame", "sequence")


@dataclass(frozen=True)
class DownstreamHead:
    layer_weights: np.ndarray  # (num_layers,) float32, raw (softmaxed at use)
    probe_weight: np.ndarray  # (num_labels, model_dim) float32
    probe_bias: np.ndarray  # (num_labels,) float32

    @property
    def num_layers(self) -> int:
        return self.layer_weights.shape[0]

    @property
    def num_labels(self) -> int:
        return self.probe_weight.shape[0]

    @property
    def model_dim(self) -> int:
        return self.probe_weight.shape[1]


@dataclass(frozen=True)
class NormalizedPrefix:
    """Layer-normalized hidden matrices for layers 1..exit, stacked (exit, T, dim)."""

    layers: np.ndarray

    @property
    def length(self) -> int:
        return self.layers.shape[0]


@dataclass(frozen=True)
class DownstreamTrainResult:
    head: DownstreamHead
    span_stats: SpanStats
    losses: list[float]
    traces: list[ExitTrace]  # one per training sample, in dataset order


def init_downstream_head(
    num_layers: int, num_labels: int, model_dim: int, seed: int
) -> DownstreamHead:
    rng = new_rng(seed)
    std = np.sqrt(2.0 / (num_labels + model_dim))
    return DownstreamHead(
        layer_weights=np.zeros(num_layers, dtype=DTYPE),
        probe_weight=(rng.standard_normal((num_labels, model_dim)) * std).astype(DTYPE),
        probe_bias=np.zeros(num_labels, dtype=DTYPE),
    )


def normalize_prefix(hs: HiddenStates, exit_layer: int) -> NormalizedPrefix:
    """Layer-normalize every frame vector of layers 1..exit_layer independently."""
    if not 1 <= exit_layer <= hs.layers_computed:
        raise ValueError(
            f"exit layer {exit_layer} exceeds computed layers ({hs.layers_computed})"
        )
    normed = np.stack([layer_norm(hs.layer(k)) for k in range(1, exit_layer + 1)])
    return NormalizedPrefix(layers=normed)


def prefix_weights(head: DownstreamHead, length: int, renormalize: bool = True) -> np.ndarray:
    """Combination weights over a prefix of `length` layers; they sum to 1 when renormalized.

    renormalize=True softmaxes the first `length` raw weights; False softmaxes
    all raw weights and truncates, so the prefix mass can be below 1.
    """
    if not 1 <= length <= head.num_layers:
        raise ValueError(f"prefix length {length} out of range 1..{head.num_layers}")
    if renormalize:
        return softmax(head.layer_weights[:length])
    return softmax(head.layer_weights)[:length]


def weighted_features(
    head: DownstreamHead, prefix: NormalizedPrefix, renormalize: bool = True
) -> np.ndarray:
    """Weighted sum of the normalized prefix, shape (frames, model_dim).

    Returned in float64: this is a reduction over layers, and the training
    loss differentiates through it.
    """
    if prefix.length == 0:
        raise ValueError("empty prefix")
    weights = prefix_weights(head, prefix.length, renormalize)
    return np.einsum("k,ktd->td", weights, prefix.layers.astype(np.float64))


def _sequence_label(labels: np.ndarray, num_classes: int) -> int:
    return int(np.bincount(labels, minlength=num_classes).argmax())


def _precompute_prefixes(
    enc: Encoder,
    branches: BranchSet,
    policy: ExitPolicy,
    data: FrameDataset,
) -> tuple[list[NormalizedPrefix], list[ExitTrace]]:
    prefixes: list[NormalizedPrefix] = []
    traces: list[ExitTrace] = []
    for i in range(data.num_sequences):
        hs, trace = run_exit(enc, branches, policy, data.inputs[i], sample_id=i)
        prefixes.append(normalize_prefix(hs, trace.exit_layer))
        traces.append(trace)
    return prefixes, traces


def _loss_and_grads(head, feats64, labels, task):
    """Loss, feature gradient, and probe gradients for one sample.

    feats64: (frames, dim) float64 features. Returns
    (loss, d_features, d_probe_weight, d_probe_bias).
    """
    frames = feats64.shape[0]
    w64 = head.probe_weight.astype(np.float64)
    if task == "frame":
        logits = feats64 @ w64.T + head.probe_bias.astype(np.float64)
        probs = softmax(logits)
        idx = np.arange(frames)
        loss = float(-np.log(np.maximum(probs[idx, labels], 1e-300)).mean())
        dlogits = probs
        dlogits[idx, labels] -= 1.0
        dlogits /= frames
        d_pw = dlogits.T @ feats64
        d_pb = dlogits.sum(axis=0)
        d_feats = dlogits @ w64
        return loss, d_feats, d_pw, d_pb
    pooled = feats64.mean(axis=0)
    logits = w64 @ pooled + head.probe_bias.astype(np.float64)
    probs = softmax(logits)
    label = int(labels)
    loss = float(-np.log(max(probs[label], 1e-300)))
    dlogits = probs
    dlogits[label] -= 1.0
    d_pw = np.outer(dlogits, pooled)
    d_pb = dlogits
    d_feats = np.tile((dlogits @ w64) / frames, (frames, 1))
    return loss, d_feats, d_pw, d_pb


def _layer_weight_grad(head, prefix, d_feats, renormalize):
    """Gradient of the loss w.r.t. the raw layer weights for one sample."""
    length = prefix.length
    per_layer = np.einsum("ktd,td->k", prefix.layers.astype(np.float64), d_feats)
    grad = np.zeros(head.num_layers, dtype=np.float64)
    if renormalize:
        weights = softmax(head.layer_weights[:length])
        grad[:length] = weights * (per_layer - float(weights @ per_layer))
    else:
        weights = softmax(head.layer_weights)
        contrib = np.zeros(head.num_layers, dtype=np.float64)
        contrib[:length] = per_layer
        grad = weights * (contrib - float(weights @ contrib))
    return grad


def train_downstream(
    enc: Encoder,
    branches: BranchSet,
    policy: ExitPolicy,
    head: DownstreamHead,
    data: FrameDataset,
    lr: float,
    steps: int,
    seed: int,
    batch_size: int = 32,
    task: str = "frame",
    renormalize: bool = True,
) -> DownstreamTrainResult:
    """Train the probe and layer weights with early exit active on every sample.

    Exit decisions depend only on frozen components, so each sample's exit
    layer and normalized prefix are computed once up front; the recorded
    traces (one per sample) are the span statistics used by inference-time
    constraints.
    """
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    prefixes, traces = _precompute_prefixes(enc, branches, policy, data)
    span_stats = collect_span_stats(traces, policy.num_layers)
    if task == "sequence":
        sample_labels = [
            _sequence_label(data.labels[i], data.num_classes)
            for i in range(data.num_sequences)
        ]
    rng = new_rng(seed)
    layer_weights = head.layer_weights
    probe_weight = head.probe_weight
    probe_bias = head.probe_bias
    losses: list[float] = []
    for _ in range(steps):
        batch = rng.integers(0, data.num_sequences, size=batch_size)
        current = DownstreamHead(layer_weights, probe_weight, probe_bias)
        g_lw = np.zeros(head.num_layers, dtype=np.float64)
        g_pw = np.zeros_like(probe_weight, dtype=np.float64)
        g_pb = np.zeros_like(probe_bias, dtype=np.float64)
        batch_loss = 0.0
        for i in batch:
            prefix = prefixes[i]
            feats = weighted_features(current, prefix, renormalize)
            labels = sample_labels[i] if task == "sequence" else data.labels[i]
            loss, d_feats, d_pw, d_pb = _loss_and_grads(current, feats, labels, task)
            batch_loss += loss
            g_pw += d_pw
            g_pb += d_pb
            g_lw += _layer_weight_grad(current, prefix, d_feats, renormalize)
        layer_weights = sgd_step(layer_weights, g_lw / batch_size, lr)
        probe_weight = sgd_step(probe_weight, g_pw / batch_size, lr)
        probe_bias = sgd_step(probe_bias, g_pb / batch_size, lr)
        losses.append(batch_loss / batch_size)
    return DownstreamTrainResult(
        head=DownstreamHead(layer_weights, probe_weight, probe_bias),
        span_stats=span_stats,
        losses=losses,
        traces=traces,
    )


def _predictions(head, feats, labels, task, num_classes):
    """(number correct, number scored) for one sample's features."""
    logits = matmul64(feats, head.probe_weight.T) + head.probe_bias.astype(np.float64)
    if task == "frame":
        pred = logits.argmax(axis=1)
        return int((pred == labels).sum()), labels.shape[0]
    pooled = logits.mean(axis=0)
    return int(pooled.argmax() == _sequence_label(labels, num_classes)), 1


def evaluate(
    enc: Encoder,
    branches: BranchSet,
    policy: ExitPolicy,
    head: DownstreamHead,
    data: FrameDataset,
    task: str = "frame",
    renormalize: bool = True,
) -> dict:
    """Accuracy, exit-depth statistics, and compute accounting under a policy.

    The "timing" entry holds wall-clock measurements (early-exit forwards
    vs. full-depth forwards in this same process) and is the only
    non-deterministic part of the record.
    """
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    num_layers = policy.num_layers
    correct = 0
    scored = 0
    exits = []
    forced_count = 0
    early_seconds = 0.0
    for i in range(data.num_sequences):
        t0 = time.perf_counter()
        hs, trace = run_exit(enc, branches, policy, data.inputs[i], sample_id=i)
        early_seconds += time.perf_counter() - t0
        feats = weighted_features(head, normalize_prefix(hs, trace.exit_layer), renormalize)
        c, s = _predictions(head, feats, data.labels[i], task, data.num_classes)
        correct += c
        scored += s
        exits.append(trace.exit_layer)
        forced_count += int(trace.forced)
    full_seconds = 0.0
    for i in range(data.num_sequences):
        t0 = time.perf_counter()
        forward_all(enc, data.inputs[i])
        full_seconds += time.perf_counter() - t0
    exits = np.array(exits, dtype=np.int64)
    hist = np.bincount(exits, minlength=num_layers + 1)[1:]
    n = data.num_sequences
    return {
        "task": task,
        "num_samples": n,
        "accuracy": correct / scored,
        "mean_exit_layer": float(exits.mean()),
        "min_exit_layer": int(exits.min()),
        "max_exit_layer": int(exits.max()),
        "forced_fraction": forced_count / n,
        "layer_compute_saved": 1.0 - float(exits.sum()) / (n * num_layers),
        "exit_histogram": [
            [k + 1, int(hist[k]), hist[k] / n] for k in range(num_layers)
        ],
        "policy": {
            "threshold": policy.threshold,
            "ratio": policy.ratio,
            "span_kind": policy.span_kind,
        },
        "timing": {
            "early_exit_seconds": early_seconds,
            "full_pass_seconds": full_seconds,
            "forward_time_saved": 1.0 - early_seconds / full_seconds,
        },
    }


def evaluate_static(
    enc: Encoder,
    head: DownstreamHead,
    data: FrameDataset,
    layer: int,
    task: str = "frame",
    renormalize: bool = True,
) -> dict:
    """The fixed-depth baseline: truncate every forward at `layer`, no exit machinery."""
    if data.num_sequences == 0:
        raise ValueError("empty dataset")
    num_layers = enc.config.num_layers
    if not 1 <= layer <= num_layers:
        raise ValueError(f"layer {layer} out of range 1..{num_layers}")
    correct = 0
    scored = 0
    for i in range(data.num_sequences):
        inc = IncrementalForward(enc, data.inputs[i])
        inc.hidden(layer)
        feats = weighted_features(head, normalize_prefix(inc.states(), layer), renormalize)
        c, s = _predictions(head, feats, data.labels[i], task, data.num_classes)
        correct += c
        scored += s
    return {
        "task": task,
        "num_samples": data.num_sequences,
        "accuracy": correct / scored,
        "mean_exit_layer": float(layer),
        "layer_compute_saved": 1.0 - layer / num_layers,
    }
