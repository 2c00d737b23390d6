from __future__ import annotations

import math

import numpy as np
import pytest

from adaexit.branches import train_branches
from adaexit.encoder import forward_all, parameter_digest
from adaexit.policy import ExitPolicy, fixed_exit_policy
from adaexit.probe import (
    DownstreamHead,
    evaluate,
    evaluate_static,
    init_downstream_head,
    normalize_prefix,
    prefix_weights,
    train_downstream,
    weighted_features,
)
from adaexit.teacher import train_teacher

from conftest import SMALL_ENCODER


@pytest.fixture(scope="module")
def stack(small_encoder, small_dataset):
    teacher = train_teacher(small_encoder, small_dataset, lr=0.3, steps=60, seed=5).head
    branches = train_branches(
        small_encoder, teacher, small_dataset, lr=0.05, batch_size=8, steps=150, seed=6
    ).branches
    return small_encoder, branches


@pytest.fixture(scope="module")
def policy(small_encoder):
    return ExitPolicy(threshold=0.5, ratio=0.7, num_layers=small_encoder.config.num_layers)


def _random_head(rng, num_layers=SMALL_ENCODER.num_layers, num_labels=5,
                 dim=SMALL_ENCODER.model_dim):
    return DownstreamHead(
        layer_weights=rng.standard_normal(num_layers).astype(np.float32),
        probe_weight=rng.standard_normal((num_labels, dim)).astype(np.float32) * np.float32(0.2),
        probe_bias=rng.standard_normal(num_labels).astype(np.float32) * np.float32(0.1),
    )


class TestNormalizePrefix:
    def test_constant_rows_become_zero(self, small_encoder):
        from adaexit.encoder import HiddenStates

        layer = np.full((4, SMALL_ENCODER.model_dim), 2.5, dtype=np.float32)
        hs = HiddenStates(layers=(layer,), total_layers=SMALL_ENCODER.num_layers)
        prefix = normalize_prefix(hs, 1)
        assert np.allclose(prefix.layers[0], 0.0, atol=1e-2)

    def test_single_layer_prefix(self, small_encoder, small_dataset):
        hs = forward_all(small_encoder, small_dataset.inputs[0])
        prefix = normalize_prefix(hs, 1)
        assert prefix.length == 1

    def test_per_vector_statistics_oracle(self, small_encoder, small_dataset):
        hs = forward_all(small_encoder, small_dataset.inputs[0])
        prefix = normalize_prefix(hs, 2)
        for k in range(2):
            rows = prefix.layers[k].astype(np.float64)
            assert np.allclose(rows.mean(axis=1), 0.0, atol=1e-5)
            assert np.allclose(rows.var(axis=1), 1.0, atol=1e-3)

    def test_exceeding_computed_layers_rejected(self, small_encoder, small_dataset):
        from adaexit.encoder import forward_until

        hs = forward_until(small_encoder, small_dataset.inputs[0], lambda k, h: k == 2)
        with pytest.raises(ValueError):
            normalize_prefix(hs, 3)


class TestWeightedFeatures:
    def test_single_layer_is_identity(self, small_encoder, small_dataset, rng):
        head = _random_head(rng)
        hs = forward_all(small_encoder, small_dataset.inputs[0])
        prefix = normalize_prefix(hs, 1)
        feats = weighted_features(head, prefix)
        assert np.allclose(feats, prefix.layers[0], atol=1e-6)

    def test_equal_weights_average(self, small_encoder, small_dataset, rng):
        head = _random_head(rng)
        head = DownstreamHead(
            layer_weights=np.zeros(SMALL_ENCODER.num_layers, dtype=np.float32),
            probe_weight=head.probe_weight,
            probe_bias=head.probe_bias,
        )
        hs = forward_all(small_encoder, small_dataset.inputs[0])
        prefix = normalize_prefix(hs, 2)
        feats = weighted_features(head, prefix)
        mean = (prefix.layers[0].astype(np.float64) + prefix.layers[1].astype(np.float64)) / 2
        assert np.allclose(feats, mean, atol=1e-6)

    def test_softmax_oracle(self, small_encoder, small_dataset, rng):
        head = _random_head(rng)
        raw = np.zeros(SMALL_ENCODER.num_layers, dtype=np.float32)
        raw[0] = math.log(1)
        raw[1] = math.log(3)
        head = DownstreamHead(raw, head.probe_weight, head.probe_bias)
        hs = forward_all(small_encoder, small_dataset.inputs[0])
        prefix = normalize_prefix(hs, 2)
        feats = weighted_features(head, prefix)
        expect = 0.25 * prefix.layers[0].astype(np.float64) + 0.75 * prefix.layers[1].astype(
            np.float64
        )
        assert np.allclose(feats, expect, atol=1e-6)

    def test_renormalized_weights_sum_to_one(self, rng):
        head = _random_head(rng)
        for length in range(1, SMALL_ENCODER.num_layers + 1):
            assert prefix_weights(head, length).sum() == pytest.approx(1.0, abs=1e-6)

    def test_global_mode_truncates_mass(self, rng):
        head = _random_head(rng)
        partial = prefix_weights(head, 2, renormalize=False)
        assert partial.sum() < 1.0
        full = prefix_weights(head, SMALL_ENCODER.num_layers, renormalize=False)
        assert full.sum() == pytest.approx(1.0, abs=1e-6)


class TestTrainDownstream:
    def test_loss_decreases(self, stack, policy, small_dataset):
        enc, branches = stack
        head = init_downstream_head(
            SMALL_ENCODER.num_layers, small_dataset.num_classes, SMALL_ENCODER.model_dim, 7
        )
        result = train_downstream(
            enc, branches, policy, head, small_dataset, lr=0.5, steps=120, seed=8
        )
        tenth = len(result.losses) // 10
        assert np.mean(result.losses[-tenth:]) < np.mean(result.losses[:tenth])

    def test_frozen_contract(self, stack, policy, small_dataset):
        enc, branches = stack
        digest = parameter_digest(enc)
        weights_before = branches.weights.copy()
        head = init_downstream_head(
            SMALL_ENCODER.num_layers, small_dataset.num_classes, SMALL_ENCODER.model_dim, 7
        )
        train_downstream(enc, branches, policy, head, small_dataset, lr=0.5, steps=15, seed=8)
        assert parameter_digest(enc) == digest
        assert np.array_equal(branches.weights, weights_before)

    def test_high_threshold_reduces_to_single_layer_probe(self, stack, small_dataset):
        enc, branches = stack
        always_first = ExitPolicy(
            threshold=math.log(32) + 1, ratio=1.0, num_layers=SMALL_ENCODER.num_layers
        )
        head = init_downstream_head(
            SMALL_ENCODER.num_layers, small_dataset.num_classes, SMALL_ENCODER.model_dim, 7
        )
        result = train_downstream(
            enc, branches, always_first, head, small_dataset, lr=0.5, steps=10, seed=8
        )
        assert all(t.exit_layer == 1 for t in result.traces)
        assert result.span_stats.mean_exit == 1.0

    def test_span_stats_one_trace_per_sample(self, stack, policy, small_dataset):
        enc, branches = stack
        head = init_downstream_head(
            SMALL_ENCODER.num_layers, small_dataset.num_classes, SMALL_ENCODER.model_dim, 7
        )
        result = train_downstream(
            enc, branches, policy, head, small_dataset, lr=0.5, steps=5, seed=8
        )
        assert len(result.traces) == small_dataset.num_sequences
        assert [t.sample_id for t in result.traces] == list(range(small_dataset.num_sequences))
        assert result.span_stats.num_traces == small_dataset.num_sequences

    def test_gradients_match_finite_differences(self, stack, small_dataset):
        # Two-sample toy batch; checks probe weight and raw layer weight grads.
        from adaexit.probe import _layer_weight_grad, _loss_and_grads

        enc, branches = stack
        rng = np.random.default_rng(3)
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        samples = [0, 1]
        prefixes = [
            normalize_prefix(forward_all(enc, small_dataset.inputs[i]), 3) for i in samples
        ]
        labels = [small_dataset.labels[i] for i in samples]

        def total_loss(h):
            total = 0.0
            for prefix, lab in zip(prefixes, labels):
                feats = weighted_features(h, prefix).astype(np.float64)
                loss, *_ = _loss_and_grads(h, feats, lab, "frame")
                total += loss
            return total / len(samples)

        g_pw = np.zeros_like(head.probe_weight, dtype=np.float64)
        g_lw = np.zeros(head.num_layers, dtype=np.float64)
        for prefix, lab in zip(prefixes, labels):
            feats = weighted_features(head, prefix).astype(np.float64)
            _, d_feats, d_pw, _ = _loss_and_grads(head, feats, lab, "frame")
            g_pw += d_pw / len(samples)
            g_lw += _layer_weight_grad(head, prefix, d_feats, True) / len(samples)

        h = 1e-3
        for c, j in [(0, 0), (1, 3), (2, 7)]:
            w = head.probe_weight.copy()
            w[c, j] += h
            up = total_loss(DownstreamHead(head.layer_weights, w, head.probe_bias))
            w[c, j] -= 2 * h
            down = total_loss(DownstreamHead(head.layer_weights, w, head.probe_bias))
            fd = (up - down) / (2 * h)
            assert abs(g_pw[c, j] - fd) / max(abs(fd), 1e-8) < 1e-4
        for k in (0, 1, 2):
            lw = head.layer_weights.copy()
            lw[k] += h
            up = total_loss(DownstreamHead(lw, head.probe_weight, head.probe_bias))
            lw[k] -= 2 * h
            down = total_loss(DownstreamHead(lw, head.probe_weight, head.probe_bias))
            fd = (up - down) / (2 * h)
            assert abs(g_lw[k] - fd) / max(abs(fd), 1e-8) < 1e-4

    def test_sequence_task_trains(self, stack, policy, small_dataset):
        enc, branches = stack
        head = init_downstream_head(
            SMALL_ENCODER.num_layers, small_dataset.num_classes, SMALL_ENCODER.model_dim, 7
        )
        result = train_downstream(
            enc, branches, policy, head, small_dataset, lr=0.5, steps=80, seed=8,
            task="sequence",
        )
        tenth = len(result.losses) // 10
        assert np.mean(result.losses[-tenth:]) < np.mean(result.losses[:tenth])


class TestEvaluate:
    def test_forced_full_depth_saves_nothing(self, stack, small_dataset, rng):
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        policy = ExitPolicy(threshold=0.0, ratio=0.0, num_layers=SMALL_ENCODER.num_layers)
        record = evaluate(enc, branches, policy, head, small_dataset)
        assert record["layer_compute_saved"] == 0.0
        assert record["mean_exit_layer"] == SMALL_ENCODER.num_layers

    def test_half_depth_saves_half(self, stack, small_dataset, rng):
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        policy = fixed_exit_policy(SMALL_ENCODER.num_layers // 2, SMALL_ENCODER.num_layers)
        record = evaluate(enc, branches, policy, head, small_dataset)
        assert record["layer_compute_saved"] == 0.5

    def test_mixed_exit_arithmetic(self):
        # 4 samples exiting at 2, 4, 6, 8 of L=8: saved = 1 - 20/32
        exits = np.array([2, 4, 6, 8])
        assert 1 - exits.sum() / (4 * 8) == pytest.approx(0.375)

    def test_histogram_fractions_sum_to_one(self, stack, small_dataset, rng):
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        policy = ExitPolicy(threshold=0.4, ratio=0.7, num_layers=SMALL_ENCODER.num_layers)
        record = evaluate(enc, branches, policy, head, small_dataset)
        assert sum(frac for _, _, frac in record["exit_histogram"]) == pytest.approx(1.0)
        assert sum(count for _, count, _ in record["exit_histogram"]) == (
            small_dataset.num_sequences
        )

    def test_timing_present(self, stack, small_dataset, rng):
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        policy = fixed_exit_policy(2, SMALL_ENCODER.num_layers)
        record = evaluate(enc, branches, policy, head, small_dataset)
        assert record["timing"]["early_exit_seconds"] > 0
        assert record["timing"]["full_pass_seconds"] > 0

    def test_static_equivalence(self, stack, small_dataset, rng):
        # The exit machinery pinned to layer k must reproduce the statically
        # truncated model exactly.
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        for k in (1, 2, 4):
            pinned = evaluate(
                enc, branches, fixed_exit_policy(k, SMALL_ENCODER.num_layers),
                head, small_dataset,
            )
            static = evaluate_static(enc, head, small_dataset, k)
            assert pinned["accuracy"] == static["accuracy"]
            assert pinned["mean_exit_layer"] == static["mean_exit_layer"]

    def test_sequence_task_scores_per_sample(self, stack, small_dataset, rng):
        enc, branches = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        policy = fixed_exit_policy(2, SMALL_ENCODER.num_layers)
        record = evaluate(enc, branches, policy, head, small_dataset, task="sequence")
        assert 0.0 <= record["accuracy"] <= 1.0

    def test_static_layer_out_of_range(self, stack, small_dataset, rng):
        enc, _ = stack
        head = _random_head(rng, num_labels=small_dataset.num_classes)
        with pytest.raises(ValueError):
            evaluate_static(enc, head, small_dataset, SMALL_ENCODER.num_layers + 1)
