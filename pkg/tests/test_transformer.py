"""Encoder forward/backward, attention masking, training, checkpoints."""

from __future__ import annotations

import time

import numpy as np
import pytest

import dagquery.kernels as kernels
from dagquery.checkpoint import CheckpointError, save_arrays
from dagquery.encoding import collate, encode_query
from dagquery.kg import MASK_TOKEN, Vocabulary
from dagquery.seeding import substream
from dagquery.transformer import (
    LN_EPS,
    MODES,
    AdamState,
    ModelConfig,
    adam_step,
    attention_mask,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    loss_masked_ce,
    param_shapes,
    predict_query,
    rank_entities,
    save_checkpoint,
    train,
    zero_grads,
)

from conftest import (
    chain_dag,
    distributions_under_order,
    gradcheck_errors,
    mixed_batch,
    random_dag,
    star_dag,
)


def small_config(vocab: Vocabulary, **overrides) -> ModelConfig:
    defaults = dict(
        vocab_size=vocab.size,
        num_entities=vocab.num_entities,
        num_layers=2,
        num_heads=2,
        hidden=16,
        ffn_hidden=32,
        max_positions=16,
        dropout=0.0,
        dtype="float64",
        init_seed=0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


class TestConfigAndInit:
    def test_config_validation(self, tiny_vocab):
        with pytest.raises(ValueError, match="divisible"):
            small_config(tiny_vocab, hidden=10, num_heads=4)
        with pytest.raises(ValueError, match="dropout"):
            small_config(tiny_vocab, dropout=1.0)
        with pytest.raises(ValueError, match="dtype"):
            small_config(tiny_vocab, dtype="float16")
        with pytest.raises(ValueError, match="vocab_size too small"):
            ModelConfig(vocab_size=5, num_entities=6)

    def test_init_layout(self, tiny_vocab):
        config = small_config(tiny_vocab)
        params = init_params(config)
        shapes = param_shapes(config)
        assert set(params.arrays) == set(shapes)
        for name, shape in shapes.items():
            arr = params[name]
            assert arr.shape == shape
            assert arr.dtype == np.float64
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                assert (arr == 1.0).all()
            elif leaf in ("b", "b1", "b2"):
                assert (arr == 0.0).all()
            else:  # truncated normal, clipped at two sigma
                assert np.abs(arr).max() <= 2 * 0.02 + 1e-12
                assert arr.std() > 0

    def test_init_is_seeded(self, tiny_vocab):
        a = init_params(small_config(tiny_vocab))
        b = init_params(small_config(tiny_vocab))
        c = init_params(small_config(tiny_vocab, init_seed=1))
        for name in a.arrays:
            np.testing.assert_array_equal(a[name], b[name])
        assert any(not np.array_equal(a[name], c[name]) for name in a.arrays)


class TestAttentionMask:
    def test_mode_names(self):
        assert MODES == ("bidirectional", "no_future")

    def test_unknown_mode_rejected(self, tiny_vocab):
        batch, _ = mixed_batch(tiny_vocab)
        with pytest.raises(ValueError, match="mode"):
            attention_mask(batch, "causal")

    def test_bidirectional_allows_everything_real(self, tiny_vocab):
        batch, _ = mixed_batch(tiny_vocab)
        allowed = attention_mask(batch, "bidirectional")
        real = batch.pad_mask
        for b in range(batch.tokens.shape[0]):
            expected = real[b][None, :] & real[b][:, None]
            expected |= np.eye(real.shape[1], dtype=bool)
            np.testing.assert_array_equal(allowed[b], expected)

    def test_no_future_truth_table(self, tiny_vocab):
        # two-path query: positions i may not see same-path positions < i
        seq = encode_query(star_dag(), tiny_vocab, max_len=16)
        batch = collate([seq])
        allowed = attention_mask(batch, "no_future")[0]
        ids = batch.path_ids[0]
        pos = batch.positions[0]
        real = batch.pad_mask[0]
        t = len(ids)
        for i in range(t):
            for j in range(t):
                if i == j:
                    expected = True
                elif not (real[i] and real[j]):
                    expected = False
                elif ids[i] == ids[j] and ids[i] >= 0:
                    expected = pos[j] >= pos[i]  # never look tailward
                else:
                    expected = True  # other paths are fully visible
                assert allowed[i, j] == expected, (i, j)

    def test_no_future_blocks_mask_from_seeing_nothing(self, tiny_vocab):
        # the tail MASK sits at offset 0 and may attend to its whole path
        seq = encode_query(chain_dag(0, [0, 1]), tiny_vocab, max_len=8)
        batch = collate([seq])
        allowed = attention_mask(batch, "no_future")[0]
        assert allowed[0, : seq.length].all()
        # the anchor (deepest offset) sees only itself within its path
        anchor_row = allowed[seq.length - 1, : seq.length]
        assert anchor_row.tolist() == [False] * (seq.length - 1) + [True]


class TestForward:
    def test_logit_shape_and_slot_order(self, tiny_vocab):
        batch, _ = mixed_batch(tiny_vocab)
        config = small_config(tiny_vocab)
        fr = forward(init_params(config), batch)
        assert fr.logits.shape == (batch.num_slots, tiny_vocab.num_entities)
        assert fr.attention is None and fr.cache is None

    def test_rejects_bad_inputs(self, tiny_vocab):
        batch, _ = mixed_batch(tiny_vocab)
        params = init_params(small_config(tiny_vocab, max_positions=2))
        with pytest.raises(ValueError, match="positional id"):
            forward(params, batch)
        bad = collate([encode_query(chain_dag(0, [0]), tiny_vocab, max_len=4)])
        bad.tokens[0, 0] = 99
        with pytest.raises(ValueError, match="outside vocabulary"):
            forward(init_params(small_config(tiny_vocab)), bad)

    def test_padding_length_does_not_change_logits(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        seq_short = encode_query(star_dag(), tiny_vocab, max_len=10)
        seq_long = encode_query(star_dag(), tiny_vocab, max_len=16)
        short = forward(params, collate([seq_short])).logits
        long = forward(params, collate([seq_long])).logits
        np.testing.assert_array_equal(short, long)

    def test_recorded_attention_is_normalized_and_pad_free(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        seqs = [
            encode_query(chain_dag(0, [0]), tiny_vocab, max_len=16),
            encode_query(star_dag(), tiny_vocab, max_len=16),
        ]
        batch = collate(seqs)
        fr = forward(params, batch, record_attention=True)
        assert len(fr.attention) == params.config.num_layers
        for att in fr.attention:
            assert att.shape[:2] == (2, params.config.num_heads)
            for b, seq in enumerate(seqs):
                real = batch.pad_mask[b]
                rows = att[b][:, real][..., real]
                np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-5)
                assert (att[b][:, real][..., ~real] == 0.0).all()  # no mass on PAD
                assert (att[b][:, ~real] == 0.0).all()  # PAD rows zeroed

    def test_dropout_needs_rng_and_changes_activations(self, tiny_vocab):
        config = small_config(tiny_vocab, dropout=0.5, dtype="float32")
        params = init_params(config)
        batch, _ = mixed_batch(tiny_vocab)
        with pytest.raises(ValueError, match="dropout_rng"):
            forward(params, batch, train=True)
        a = forward(params, batch, train=True, dropout_rng=substream(0, "d")).logits
        b = forward(params, batch, train=True, dropout_rng=substream(1, "d")).logits
        assert not np.array_equal(a, b)
        # evaluation ignores dropout entirely
        c = forward(params, batch, train=False).logits
        d = forward(params, batch, train=False).logits
        np.testing.assert_array_equal(c, d)


class TestGradients:
    def test_matches_finite_differences(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        batch, labels = mixed_batch(tiny_vocab)
        errors = gradcheck_errors(params, batch, labels, step=1e-3)
        worst = max(errors.values())
        assert worst <= 1e-4, sorted(errors.items(), key=lambda kv: -kv[1])[:3]

    def test_zero_mask_batch_flags_not_ok(self, tiny_vocab):
        seq = encode_query(chain_dag(0, [0]), tiny_vocab, max_len=4)
        batch = collate([seq])
        batch.slots = batch.slots[:0]
        batch.slot_variables = batch.slot_variables[:0]
        params = init_params(small_config(tiny_vocab))
        result = loss_and_grads(params, batch, np.empty(0, dtype=np.int64))
        assert not result.ok
        assert result.loss == 0.0
        for name, grad in result.grads.items():
            assert (grad == 0).all(), name
        assert set(result.grads) == set(zero_grads(params))

    def test_duplicated_batch_keeps_gradients(self, tiny_vocab):
        # slot-mean reduction: feeding every example twice changes nothing
        params = init_params(small_config(tiny_vocab))
        seqs = [
            encode_query(chain_dag(4, [1, 0]), tiny_vocab, max_len=12),
            encode_query(star_dag(), tiny_vocab, max_len=12),
        ]
        labels = np.array([0, 1, 2, 3, 4, 5], dtype=np.int64)
        once = loss_and_grads(params, collate(seqs), labels, train=False)
        twice = loss_and_grads(
            params, collate(seqs + seqs), np.concatenate([labels, labels]), train=False
        )
        assert twice.loss == pytest.approx(once.loss, rel=1e-12)
        for name in once.grads:
            np.testing.assert_allclose(
                twice.grads[name], once.grads[name], atol=1e-12
            )

    def test_label_validation(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        batch, labels = mixed_batch(tiny_vocab)
        with pytest.raises(ValueError, match="one label per mask slot"):
            loss_and_grads(params, batch, labels[:-1])
        bad = labels.copy()
        bad[0] = tiny_vocab.num_entities
        with pytest.raises(ValueError, match="entity range"):
            loss_and_grads(params, batch, bad)

    def test_loss_masked_ce_uniform_baseline(self, tiny_vocab):
        logits = np.zeros((5, tiny_vocab.num_entities))
        labels = np.arange(5) % tiny_vocab.num_entities
        assert loss_masked_ce(logits, labels, tiny_vocab.num_entities) == pytest.approx(
            np.log(tiny_vocab.num_entities)
        )


class TestAdam:
    def test_zero_gradient_keeps_params(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        state = AdamState.init(params)
        before = {k: v.copy() for k, v in params.arrays.items()}
        adam_step(params.arrays, zero_grads(params), state, lr=0.1)
        assert state.step == 1
        for name in before:
            np.testing.assert_array_equal(params[name], before[name])

    def test_first_step_matches_scalar_hand_computation(self):
        # one scalar parameter, constant gradient g: bias correction makes
        # the first update exactly -lr * g / (|g| + eps)
        param = np.array([0.5])
        g = np.array([0.25])
        state = AdamState.init({"w": param})
        adam_step({"w": param}, {"w": g}, state, lr=0.01)
        expected = 0.5 - 0.01 * 0.25 / (0.25 + 1e-8)
        assert param[0] == pytest.approx(expected, rel=1e-10)

    def test_step_counter_increments(self):
        param = np.zeros(3)
        state = AdamState.init({"w": param})
        for expected in (1, 2, 3):
            adam_step({"w": param}, {"w": np.ones(3)}, state, lr=1e-3)
            assert state.step == expected


class TestEquivariance:
    def test_path_permutation_leaves_distributions_unchanged(self, tiny_vocab):
        from itertools import permutations

        params = init_params(small_config(tiny_vocab, max_positions=32))
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 15:
            dag = random_dag(rng, max_nodes=7, num_entities=6, num_relations=2)
            from dagquery.querydag import decompose

            num_paths = len(decompose(dag))
            seq_len = encode_query(dag, tiny_vocab, max_len=96).length
            if num_paths < 2 or num_paths > 4 or seq_len > 30:
                continue
            base = distributions_under_order(
                params, dag, tiny_vocab, list(range(num_paths)), max_len=32
            )
            for order in permutations(range(num_paths)):
                other = distributions_under_order(
                    params, dag, tiny_vocab, list(order), max_len=32
                )
                for var in base:
                    np.testing.assert_allclose(other[var], base[var], atol=1e-5)
            checked += 1


class TestPrediction:
    def test_rank_entities_breaks_ties_by_ascending_id(self):
        ranks = rank_entities(np.array([0.5, 0.7, 0.5, 0.1]))
        assert ranks.tolist() == [1, 0, 2, 3]

    def test_predict_query_aggregates_shared_variables(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab, max_positions=32))
        pred = predict_query(params, star_dag(), tiny_vocab, max_len=32)
        assert set(pred.distributions) == {2, 3}
        for var, dist in pred.distributions.items():
            assert dist.shape == (tiny_vocab.num_entities,)
            assert dist.sum() == pytest.approx(1.0, abs=1e-5)
            assert pred.rankings[var].tolist() == rank_entities(dist).tolist()
        assert pred.attention is None
        with_att = predict_query(
            params, star_dag(), tiny_vocab, max_len=32, record_attention=True
        )
        assert len(with_att.attention) == params.config.num_layers


class TestTraining:
    def make_examples(self, n=6):
        examples = []
        for i in range(n):
            dag = chain_dag(i % 6, [i % 2, (i + 1) % 2])
            examples.append((dag, {1: (i + 1) % 6, 2: (i + 2) % 6}))
        return examples

    def test_loss_decreases_and_artifacts_written(self, tiny_vocab, tmp_path):
        config = small_config(tiny_vocab, dtype="float32", dropout=0.1)
        params = init_params(config)
        examples = self.make_examples()
        result = train(
            params,
            examples,
            tiny_vocab,
            epochs=30,
            batch_size=4,
            lr=1e-2,
            seed=0,
            max_len=8,
            dev_examples=examples[:2],
            out_dir=tmp_path,
        )
        assert result.epochs_run == 30
        first = next(v for _, split, v in result.loss_rows if split == "train")
        assert result.final_train_loss < first
        assert (tmp_path / "loss.csv").exists()
        header = (tmp_path / "loss.csv").read_text().splitlines()[0]
        assert header == "epoch,split,loss"
        restored = load_checkpoint(tmp_path / "checkpoint.bin")
        for name in params.arrays:
            np.testing.assert_array_equal(restored[name], params[name])

    def test_training_is_deterministic(self, tiny_vocab):
        def run():
            config = small_config(tiny_vocab, dtype="float32", dropout=0.1)
            params = init_params(config)
            train(
                params, self.make_examples(), tiny_vocab,
                epochs=5, batch_size=4, lr=1e-2, seed=3, max_len=8,
            )
            return params

        a, b = run(), run()
        for name in a.arrays:
            np.testing.assert_array_equal(a[name], b[name])

    def test_stop_fn_halts_early(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab, dtype="float32"))
        result = train(
            params, self.make_examples(), tiny_vocab,
            epochs=50, batch_size=4, lr=1e-2, seed=0, max_len=8,
            stop_fn=lambda epoch, _: epoch >= 7,
        )
        assert result.epochs_run == 7

    def test_empty_examples_rejected(self, tiny_vocab):
        params = init_params(small_config(tiny_vocab))
        with pytest.raises(ValueError, match="no training examples"):
            train(params, [], tiny_vocab, epochs=1, batch_size=1, lr=1e-3, seed=0)


class TestCheckpointRoundTrip:
    def test_bit_exact_round_trip(self, tiny_vocab, tmp_path):
        params = init_params(small_config(tiny_vocab, dtype="float32"))
        path = tmp_path / "model.bin"
        save_checkpoint(params, path)
        restored = load_checkpoint(path)
        assert restored.config == params.config
        for name in params.arrays:
            assert restored[name].dtype == params[name].dtype
            np.testing.assert_array_equal(restored[name], params[name])

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "other.bin"
        save_arrays(path, {"kind": "something-else"}, {"w": np.zeros(3)})
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tiny_vocab, tmp_path):
        params = init_params(small_config(tiny_vocab, dtype="float32"))
        path = tmp_path / "model.bin"
        save_checkpoint(params, path)
        from dagquery.checkpoint import load_arrays

        meta, arrays = load_arrays(path)
        arrays["out.b"] = arrays["out.b"][:-1]
        save_arrays(path, meta, arrays)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)
