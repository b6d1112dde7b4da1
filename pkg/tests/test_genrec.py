"""Vocabulary, sequence model, trie decoding, and recommender training."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semid import autodiff as ad
from semid import rng as rng_mod
from semid.exceptions import DataError, DimensionError, ParameterError
from semid.interactions import InteractionDataset
from semid.optim import check_gradients
from semid.seqmodel import (
    CausalTransformer,
    hard_negative_weight,
    pack_batch,
    ranking_generation_loss,
)
from semid.trie import IdentifierTrie, constrained_beam_search
from semid.vocab import (
    BEGIN,
    END,
    PAD,
    Identifier,
    IdentifierSet,
    SequenceExample,
    TokenVocabulary,
    build_examples,
    examples_from_stream,
)


def toy_identifiers(n_items=8, levels=2, codebook=3, seed=0):
    """Distinct random identifiers; collisions resolved by suffixes."""
    rng = np.random.default_rng(seed)
    groups: dict[tuple, list[int]] = {}
    for item in range(n_items):
        codes = tuple(int(c) for c in rng.integers(0, codebook, size=levels))
        groups.setdefault(codes, []).append(item)
    items = {}
    for codes, members in groups.items():
        if len(members) == 1:
            items[members[0]] = Identifier(codes)
        else:
            for suffix, item in enumerate(sorted(members)):
                items[item] = Identifier(codes, suffix)
    return IdentifierSet(levels, codebook, items)


class TestVocabulary:
    def test_reserved_tokens(self):
        assert (PAD, BEGIN, END) == (0, 1, 2)

    def test_level_tagged_codes_distinct(self):
        vocab = TokenVocabulary(levels=3, codebook_size=5)
        seen = set()
        for level in range(3):
            for code in range(5):
                token = vocab.code_token(level, code)
                assert token not in seen
                assert token >= 3
                seen.add(token)
        assert len(seen) == 15

    def test_size_formula(self):
        vocab = TokenVocabulary(levels=4, codebook_size=16, n_suffix=7)
        assert vocab.size == 3 + 4 * 16 + 7

    def test_encode_appends_end(self):
        vocab = TokenVocabulary(levels=2, codebook_size=4, n_suffix=2)
        plain = vocab.encode(Identifier((1, 2)))
        assert plain[-1] == END
        assert len(plain) == 3
        suffixed = vocab.encode(Identifier((1, 2), suffix=1))
        assert len(suffixed) == 4
        assert suffixed[:2] == plain[:2]

    def test_describe_round_trip(self):
        vocab = TokenVocabulary(levels=2, codebook_size=4, n_suffix=1)
        names = [vocab.describe(t) for t in range(vocab.size)]
        assert len(set(names)) == vocab.size
        assert names[0] == "pad"
        assert names[-1] == "suffix[0]"

    def test_wrong_code_count_rejected(self):
        vocab = TokenVocabulary(levels=3, codebook_size=4)
        with pytest.raises(DataError):
            vocab.encode(Identifier((1, 2)))

    def test_identifier_set_validation(self):
        with pytest.raises(DataError):
            IdentifierSet(2, 4, {0: Identifier((1, 5))})
        with pytest.raises(DataError):
            IdentifierSet(2, 4, {0: Identifier((1, 2)), 1: Identifier((1, 2))})
        ok = IdentifierSet(2, 4, {0: Identifier((1, 2), 0), 1: Identifier((1, 2), 1)})
        assert ok.n_suffix == 2
        assert ok.collision_rate() == 1.0

    def test_identifier_set_round_trip(self, tmp_path):
        original = toy_identifiers(n_items=12, seed=3)
        path = tmp_path / "identifiers.tsv"
        original.save(path)
        loaded = IdentifierSet.load(path)
        assert loaded.levels == original.levels
        assert loaded.codebook_size == original.codebook_size
        assert loaded.items == original.items


class TestExamples:
    def sequences(self, idset):
        return idset.token_sequences()

    def test_last_target_uses_final_item(self):
        idset = toy_identifiers()
        seqs = self.sequences(idset)
        out = examples_from_stream([0, 1, 2, 3, 4], user=7, sequences=seqs, mode="last-target")
        assert len(out) == 1
        ex = out[0]
        assert ex.history == (0, 1, 2, 3)
        assert ex.target == 4
        np.testing.assert_array_equal(ex.y_tokens, np.asarray(seqs[4]))

    def test_sliding_window_one_example_per_prefix(self):
        idset = toy_identifiers()
        out = examples_from_stream(
            [0, 1, 2, 3, 4], user=0, sequences=self.sequences(idset), mode="sliding-window"
        )
        assert [ex.target for ex in out] == [1, 2, 3, 4]
        assert [len(ex.history) for ex in out] == [1, 2, 3, 4]

    def test_history_capped_to_most_recent(self):
        idset = toy_identifiers()
        stream = [i % 8 for i in range(25)] + [3]
        out = examples_from_stream(
            stream, user=0, sequences=self.sequences(idset), mode="last-target", history_cap=20
        )
        assert out[0].history == tuple(stream[-21:-1])
        assert len(out[0].history) == 20

    def test_x_tokens_layout(self):
        idset = toy_identifiers()
        seqs = self.sequences(idset)
        ex = examples_from_stream([2, 5, 1], user=0, sequences=seqs, mode="last-target")[0]
        expected = [BEGIN, *seqs[2], *seqs[5]]
        np.testing.assert_array_equal(ex.x_tokens, np.asarray(expected))

    def test_build_examples_matches_recount(self):
        rng = np.random.default_rng(11)
        idset = toy_identifiers(n_items=10)
        sequences = {u: [int(i) for i in rng.integers(0, 10, size=rng.integers(4, 9))] for u in range(6)}
        ds = InteractionDataset(sequences)
        train = build_examples(ds, idset, mode="sliding-window", stage="train")
        # recount: per user, train stream is all but the two held-out items,
        # one example per prefix of length >= 2
        expected = sum(max(len(seq) - 2 - 1, 0) for seq in sequences.values())
        assert len(train) == expected
        val = build_examples(ds, idset, stage="validation")
        test = build_examples(ds, idset, stage="test")
        assert len(val) == len(test) == len(sequences)
        for ex in val:
            assert ex.target == sequences[ex.user][-2]
        for ex in test:
            assert ex.target == sequences[ex.user][-1]

    def test_missing_identifier_rejected(self):
        idset = toy_identifiers(n_items=3)
        with pytest.raises(DataError):
            examples_from_stream([0, 1, 99], user=0, sequences=idset.token_sequences())

    def test_bad_mode_and_stage(self):
        idset = toy_identifiers()
        ds = InteractionDataset({0: [0, 1, 2, 3]})
        with pytest.raises(ParameterError):
            build_examples(ds, idset, mode="everything")
        with pytest.raises(ParameterError):
            build_examples(ds, idset, stage="holdout")


def tiny_model(vocab_size=12, seed=0, **kwargs):
    defaults = dict(d_model=16, n_layers=2, n_heads=2, max_len=32)
    defaults.update(kwargs)
    return CausalTransformer(rng_mod.stream(seed, "test-model"), vocab_size, **defaults)


def make_example(x, y, user=0, target=0):
    return SequenceExample(
        user=user,
        history=(),
        target=target,
        x_tokens=np.asarray(x, dtype=np.int64),
        y_tokens=np.asarray(y, dtype=np.int64),
    )


class TestModel:
    def test_logit_shape(self):
        model = tiny_model()
        tokens = np.array([[1, 3, 4, 5], [1, 6, 7, 2]])
        out = model(tokens)
        assert out.shape == (2, 4, 12)

    def test_position_gather_matches_full_forward(self):
        model = tiny_model()
        tokens = np.array([[1, 3, 4, 5, 6]])
        full = model(tokens).data
        positions = np.array([[1, 3]])
        picked = model(tokens, positions=positions).data
        np.testing.assert_array_equal(picked[0, 0], full[0, 1])
        np.testing.assert_array_equal(picked[0, 1], full[0, 3])

    def test_causality_exact(self):
        model = tiny_model(seed=4)
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 12, size=(3, 10))
        base = model(tokens).data
        for t in [0, 4, 8]:
            perturbed = tokens.copy()
            perturbed[:, t + 1 :] = rng.integers(0, 12, size=perturbed[:, t + 1 :].shape)
            out = model(perturbed).data
            np.testing.assert_array_equal(out[:, : t + 1], base[:, : t + 1])

    def test_rejects_out_of_vocab_token(self):
        model = tiny_model()
        with pytest.raises(DataError):
            model(np.array([[1, 99]]))

    def test_rejects_overlong_sequence(self):
        model = tiny_model(max_len=4)
        with pytest.raises(DimensionError):
            model(np.ones((1, 5), dtype=np.int64))


class TestRankingLoss:
    def cross_entropy_oracle(self, logits_rows, targets, tau):
        """Plain per-token cross-entropy from raw numpy."""
        total = 0.0
        for row, t in zip(logits_rows, targets):
            z = row / tau
            z = z - z.max()
            total -= z[t] - np.log(np.exp(z).sum())
        return total

    def test_uniform_logits_loss(self):
        model = tiny_model()
        for p in model.parameters():
            p.data = np.zeros_like(p.data)
        ex = make_example([1, 3, 4], [5, 6, 2])
        for tau in (0.6, 1.0, 1.2):
            loss = ranking_generation_loss(model, ex, tau=tau)
            assert loss.item() == pytest.approx(3 * np.log(12), abs=1e-12)

    def test_tau_one_equals_cross_entropy(self):
        model = tiny_model(seed=9)
        ex = make_example([1, 3, 4, 7], [5, 8, 2])
        loss = ranking_generation_loss(model, ex, tau=1.0)
        inputs, positions, targets, _ = pack_batch([ex])
        with ad.no_grad():
            logits = model(inputs, positions=positions).data[0]
        oracle = self.cross_entropy_oracle(logits, targets[0], tau=1.0)
        assert loss.item() == pytest.approx(oracle, abs=1e-12)

    def test_tempered_loss_matches_oracle(self):
        model = tiny_model(seed=2)
        ex = make_example([1, 4], [3, 9, 2])
        for tau in (0.6, 0.8, 1.2):
            loss = ranking_generation_loss(model, ex, tau=tau)
            inputs, positions, targets, _ = pack_batch([ex])
            with ad.no_grad():
                logits = model(inputs, positions=positions).data[0]
            oracle = self.cross_entropy_oracle(logits, targets[0], tau=tau)
            assert loss.item() == pytest.approx(oracle, rel=1e-12)

    def test_batch_is_mean_of_singles(self):
        model = tiny_model(seed=5)
        a = make_example([1, 3], [4, 2])
        b = make_example([1, 6, 7, 8], [9, 10, 11, 2])
        batched = ranking_generation_loss(model, [a, b]).item()
        singles = [ranking_generation_loss(model, ex).item() for ex in (a, b)]
        assert batched == pytest.approx(np.mean(singles), rel=1e-12)

    def test_padding_does_not_leak(self):
        # same example alone vs padded next to a longer one
        model = tiny_model(seed=6)
        short = make_example([1, 3], [4, 2])
        long = make_example([1, 5, 6, 7, 8, 9], [10, 11, 3, 2])
        alone = ranking_generation_loss(model, short).item()
        together = ranking_generation_loss(model, [short, long]).item()
        other = ranking_generation_loss(model, long).item()
        assert together == pytest.approx((alone + other) / 2, rel=1e-12)

    def test_bad_tau(self):
        model = tiny_model()
        ex = make_example([1], [3, 2])
        for tau in (0.0, -1.0, float("nan")):
            with pytest.raises(ParameterError):
                ranking_generation_loss(model, ex, tau=tau)

    def test_gradients_finite_difference(self):
        # small model keeps the FD sweep fast; all parameter families get
        # perturbed coordinates
        model = tiny_model(vocab_size=8, d_model=8, n_layers=1, n_heads=2, max_len=8, seed=3)
        ex = [make_example([1, 3], [4, 2]), make_example([1, 5, 6], [7, 2])]
        rng = np.random.default_rng(0)
        for tau in (0.6, 1.0, 1.2):
            worst = check_gradients(
                lambda: ranking_generation_loss(model, ex, tau=tau),
                model.parameters(),
                max_coords_per_param=2,
                rng=rng,
            )
            assert worst < 1.0


class TestHardNegativeWeight:
    def test_two_equal_negatives(self):
        w = hard_negative_weight(np.array([5.0, 1.0, 1.0]), target_index=0, tau=1.0)
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            logits = rng.normal(size=17)
            w = hard_negative_weight(logits, target_index=4, tau=0.7)
            assert w.sum() == pytest.approx(1.0)

    def test_monotone_in_logit(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            logits = rng.normal(size=50)
            target = int(rng.integers(50))
            w = hard_negative_weight(logits, target, tau=0.8)
            rest = np.delete(logits, target)
            order = np.argsort(rest)
            assert (np.diff(w[order]) >= 0).all()

    def test_small_tau_upweights_hard_negatives(self):
        # negatives above the softmax-weighted mean gain weight as tau drops
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(100):
            logits = rng.normal(size=50)
            target = int(rng.integers(50))
            lo = hard_negative_weight(logits, target, tau=0.6)
            hi = hard_negative_weight(logits, target, tau=1.2)
            rest = np.delete(logits, target)
            for tau in (0.6, 1.2):
                probs = np.exp(rest / tau - (rest / tau).max())
                probs /= probs.sum()
                mean = probs @ rest
                above = rest > mean
                if (lo[above] > hi[above]).all():
                    hits += 1
                    break
        assert hits == 100

    def test_validation(self):
        with pytest.raises(ParameterError):
            hard_negative_weight(np.ones(3), 0, tau=0.0)
        with pytest.raises(ParameterError):
            hard_negative_weight(np.ones(3), 5, tau=1.0)
        with pytest.raises(DataError):
            hard_negative_weight(np.array([1.0, np.inf]), 0, tau=1.0)


class TestTrie:
    def test_single_item_single_path(self):
        idset = IdentifierSet(3, 4, {7: Identifier((1, 2, 3))})
        trie = IdentifierTrie.from_identifiers(idset)
        vocab = idset.vocabulary()
        prefix = ()
        expected = vocab.encode(idset.get(7))
        for token in expected:
            successors = trie.valid_successors(prefix)
            assert successors == (token,)
            prefix = (*prefix, token)
        assert trie.item_at(expected) == 7

    def test_shared_prefix_branches(self):
        idset = IdentifierSet(
            3, 4, {0: Identifier((1, 2, 0)), 1: Identifier((1, 2, 3))}
        )
        vocab = idset.vocabulary()
        trie = IdentifierTrie.from_identifiers(idset)
        shared = (vocab.code_token(0, 1), vocab.code_token(1, 2))
        successors = trie.valid_successors(shared)
        assert set(successors) == {vocab.code_token(2, 0), vocab.code_token(2, 3)}

    def test_duplicate_rejected(self):
        trie = IdentifierTrie()
        trie.insert((3, 4, END), 0)
        with pytest.raises(DataError):
            trie.insert((3, 4, END), 1)

    def test_requires_end_terminated(self):
        trie = IdentifierTrie()
        with pytest.raises(DataError):
            trie.insert((3, 4), 0)
        with pytest.raises(DataError):
            trie.insert((3, END, 4, END), 0)

    def test_leaf_count_and_items(self):
        idset = toy_identifiers(n_items=20, levels=3, codebook=3, seed=5)
        trie = IdentifierTrie.from_identifiers(idset)
        assert trie.n_items == 20
        assert trie.items() == idset.token_sequences()

    def test_successors_match_brute_force_filter(self):
        idset = toy_identifiers(n_items=40, levels=3, codebook=4, seed=6)
        sequences = idset.token_sequences()
        trie = IdentifierTrie.from_identifiers(idset)
        rng = np.random.default_rng(7)
        paths = list(sequences.values())
        for _ in range(1000):
            path = paths[rng.integers(len(paths))]
            depth = int(rng.integers(0, len(path)))
            prefix = path[:depth]
            if rng.random() < 0.3:  # corrupt to likely-invalid prefixes too
                prefix = (*prefix[:-1], int(rng.integers(0, 50))) if prefix else prefix
            expected = sorted(
                {seq[len(prefix)] for seq in sequences.values() if seq[: len(prefix)] == tuple(prefix)}
            )
            assert list(trie.valid_successors(prefix)) == expected


class TestBeamSearch:
    def exhaustive_oracle(self, model, x_tokens, idset):
        """Teacher-forced score of every catalog identifier."""
        scored = []
        for item, tokens in idset.token_sequences().items():
            row = np.concatenate([x_tokens, np.asarray(tokens, dtype=np.int64)])
            with ad.no_grad():
                logits = model(row[None, :]).data[0]
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            start = len(x_tokens) - 1
            score = sum(
                float(log_probs[start + t, tokens[t]]) for t in range(len(tokens))
            )
            scored.append((item, score))
        scored.sort(key=lambda c: (-c[1], c[0]))
        return scored

    def test_single_item_catalog(self):
        idset = IdentifierSet(2, 3, {42: Identifier((1, 2))})
        trie = IdentifierTrie.from_identifiers(idset)
        model = tiny_model(vocab_size=idset.vocabulary().size, seed=8)
        out = constrained_beam_search(model, np.array([BEGIN]), trie, beam_width=5)
        assert [item for item, _ in out] == [42]

    def test_full_width_matches_exhaustive_oracle(self):
        idset = toy_identifiers(n_items=30, levels=3, codebook=3, seed=9)
        trie = IdentifierTrie.from_identifiers(idset)
        vocab = idset.vocabulary()
        model = tiny_model(vocab_size=vocab.size, seed=10)
        x = np.array([BEGIN, *idset.token_sequences()[0]], dtype=np.int64)
        got = constrained_beam_search(model, x, trie, beam_width=30)
        expected = self.exhaustive_oracle(model, x, idset)
        assert [item for item, _ in got] == [item for item, _ in expected]
        for (_, a), (_, b) in zip(got, expected):
            assert a == pytest.approx(b, abs=1e-9)

    def test_never_emits_out_of_catalog(self):
        idset = toy_identifiers(n_items=25, levels=3, codebook=3, seed=11)
        trie = IdentifierTrie.from_identifiers(idset)
        model = tiny_model(vocab_size=idset.vocabulary().size, seed=12)
        catalog = set(idset.items)
        rng = np.random.default_rng(13)
        sequences = list(idset.token_sequences().values())
        for width in (1, 2, 5):
            for _ in range(20):
                hist = sequences[rng.integers(len(sequences))]
                x = np.array([BEGIN, *hist], dtype=np.int64)
                out = constrained_beam_search(model, x, trie, beam_width=width)
                assert out, "search must complete at least one identifier"
                assert len(out) <= width
                assert {item for item, _ in out} <= catalog

    def test_greedy_equals_argmax_walk(self):
        idset = toy_identifiers(n_items=30, levels=3, codebook=3, seed=14)
        trie = IdentifierTrie.from_identifiers(idset)
        model = tiny_model(vocab_size=idset.vocabulary().size, seed=15)
        x = np.array([BEGIN], dtype=np.int64)
        out = constrained_beam_search(model, x, trie, beam_width=1)
        prefix: tuple[int, ...] = ()
        while True:
            successors = trie.valid_successors(prefix)
            row = np.concatenate([x, np.asarray(prefix, dtype=np.int64)])[None, :]
            with ad.no_grad():
                logits = model(row).data[0, -1]
            allowed = [(float(-logits[t]), t) for t in successors]
            token = min(allowed)[1]
            prefix = (*prefix, token)
            if token == END:
                break
        assert out[0][0] == trie.item_at(prefix)

    def test_ties_resolved_by_item_id(self):
        idset = IdentifierSet(2, 3, {5: Identifier((0, 1)), 9: Identifier((1, 0))})
        trie = IdentifierTrie.from_identifiers(idset)
        model = tiny_model(vocab_size=idset.vocabulary().size, seed=16)
        for p in model.parameters():
            p.data = np.zeros_like(p.data)  # all identifiers equally likely
        out = constrained_beam_search(model, np.array([BEGIN]), trie, beam_width=2)
        assert [item for item, _ in out] == [5, 9]
        assert out[0][1] == pytest.approx(out[1][1])

    def test_bad_beam_width(self):
        idset = toy_identifiers(n_items=4)
        trie = IdentifierTrie.from_identifiers(idset)
        model = tiny_model(vocab_size=idset.vocabulary().size)
        with pytest.raises(ParameterError):
            constrained_beam_search(model, np.array([BEGIN]), trie, beam_width=0)
