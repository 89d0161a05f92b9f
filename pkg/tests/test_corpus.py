import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import loss_values, tiny_model

from hscjn.corpus import (
    EOU,
    PAD,
    SOS,
    UNK,
    Dialogue,
    EmptyCorpusError,
    TrainingExample,
    Vocabulary,
    batch_examples,
    build_vocabulary,
    decode_example,
    encode_example,
    filter_dialogues,
    make_batch,
    make_examples,
    parse_corpus,
    parse_line,
    read_lines,
    single_turn,
    tokenize_utterance,
    toy_corpus,
    write_corpus,
    write_lines,
)


def write(tmp_path, text, name="c.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestParsing:
    def test_two_utterances(self):
        assert parse_line("hi __eou__ hello there __eou__").utterances == [["hi"], ["hello", "there"]]

    def test_single_utterance_dropped(self):
        assert parse_line("hi __eou__") is None

    def test_malformed_line_counted(self, tmp_path):
        p = write(tmp_path, "a __eou__ b __eou__\nlonely __eou__\nc d __eou__ e __eou__ f __eou__\n")
        ds, dropped = parse_corpus(p)
        assert len(ds) == 2 and dropped == 1
        assert ds[1].utterances == [["c", "d"], ["e"], ["f"]]

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyCorpusError):
            parse_corpus(write(tmp_path, "\n\n"))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            parse_corpus(write(tmp_path, "a __eou__ b"), format="jsonl")

    def test_tokenize(self):
        assert tokenize_utterance("How are you ?") == ["how", "are", "you", "?"]
        assert tokenize_utterance("") == []
        assert tokenize_utterance(" a  b ") == ["a", "b"]

    def test_write_read_round_trip(self, tmp_path):
        ds = toy_corpus(5, seed=0)
        p = tmp_path / "corpus.txt"
        write_corpus(p, ds)
        back, dropped = parse_corpus(p)
        assert dropped == 0
        assert [d.utterances for d in back] == [d.utterances for d in ds]

    def test_lines_keep_empty_turns(self, tmp_path):
        p = tmp_path / "r.txt"
        write_lines(p, [[["a", "b"]], [[]], [["x"], ["y", "z"]]])
        assert read_lines(p) == [[["a", "b"]], [[]], [["x"], ["y", "z"]]]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.lists(st.sampled_from(["a", "b", "?"]), max_size=3), min_size=1, max_size=3), max_size=4))
    def test_lines_round_trip(self, tmp_path_factory, items):
        p = tmp_path_factory.mktemp("rt") / "r.txt"
        write_lines(p, items)
        assert read_lines(p) == items


class TestFilter:
    def make(self, n):
        return Dialogue([["w"] * (n // 2), ["w"] * (n - n // 2)])

    def test_boundary_kept(self):
        kept, removed = filter_dialogues([self.make(300)], 300)
        assert len(kept) == 1 and removed == 0

    def test_over_limit_removed(self):
        kept, removed = filter_dialogues([self.make(301)], 300)
        assert kept == [] and removed == 1

    def test_empty(self):
        assert filter_dialogues([], 300) == ([], 0)


class TestVocabulary:
    def test_cap_keeps_most_frequent(self):
        ds = [Dialogue([["a", "a", "b"], ["a", "b", "c"]])]
        v = build_vocabulary(ds, 2)
        assert v.words() == ["a", "b"]
        assert len(v) == 6

    def test_tie_is_lexicographic(self):
        v = build_vocabulary([Dialogue([["b", "a"], ["a", "b"]])], 1)
        assert v.words() == ["a"]

    def test_reserved_ids(self):
        v = Vocabulary(["x"])
        assert (v.id("<pad>"), v.id("<unk>"), v.id("<sos>"), v.id("<eou>")) == (PAD, UNK, SOS, EOU)
        assert v.id("never") == UNK

    def test_cap_bounds_size(self):
        ds = toy_corpus(60, seed=2)
        for cap in (1, 10, 25000):
            assert len(build_vocabulary(ds, cap)) <= cap + 4

    def test_deterministic(self):
        ds = toy_corpus(30, seed=5)
        assert build_vocabulary(ds, 50).words() == build_vocabulary(list(ds), 50).words()

    def test_dump_load(self, tmp_path):
        v = build_vocabulary(toy_corpus(10, seed=1), 30)
        v.dump(tmp_path / "v.tsv")
        w = Vocabulary.load(tmp_path / "v.tsv")
        assert w.itos == v.itos and w.counts == v.counts

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            build_vocabulary([], 10)


class TestExamples:
    A, B, C, D = ["a"], ["b"], ["c"], ["d"]

    def test_next_turn(self):
        exs = make_examples([Dialogue([self.A, self.B, self.C])], "next_turn")
        assert [(e.context, e.targets) for e in exs] == [([self.A], [self.B]), ([self.A, self.B], [self.C])]

    def test_two_prev_source(self):
        exs = make_examples([Dialogue([self.A, self.B, self.C])], "two_prev_source")
        assert [(e.context, e.targets) for e in exs] == [([self.A, self.B], [self.C])]

    def test_two_turn_target(self):
        exs = make_examples([Dialogue([self.A, self.B, self.C, self.D])], "two_turn_target")
        assert ([self.A, self.B], [self.C, self.D]) in [(e.context, e.targets) for e in exs]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            make_examples([], "three_turn")

    def test_single_turn_split(self):
        ex = TrainingExample([[4, 5]], [[6, EOU], [7, 8, EOU]])
        a, b = single_turn([ex])
        assert (a.context, a.targets) == ([[4, 5]], [[6, EOU]])
        assert (b.context, b.targets) == ([[4, 5], [6]], [[7, 8, EOU]])


class TestEncoding:
    vocab = Vocabulary(["hi", "there"])

    def test_target_gets_eou(self):
        ex = encode_example(TrainingExample([["hi"]], [["hi"]]), self.vocab)
        assert ex.targets == [[self.vocab.id("hi"), EOU]]

    def test_unseen_is_unk(self):
        ex = encode_example(TrainingExample([["hi"]], [["zzzz"]]), self.vocab)
        assert ex.targets == [[UNK, EOU]]

    def test_round_trip(self):
        ex = TrainingExample([["hi", "there"], ["there"]], [["there", "hi"]])
        assert decode_example(encode_example(ex, self.vocab), self.vocab) == ex


class TestBatching:
    def test_batch_sizes(self):
        exs = [TrainingExample([[4]], [[5, EOU]]) for _ in range(10)]
        assert [b.size for b in batch_examples(exs, 8)] == [8, 2]

    def test_padding_and_masks(self):
        b = make_batch([TrainingExample([[4]], [[4, 5, EOU]]), TrainingExample([[4]], [[4, 5, 6, 4, EOU]])])
        assert b.tgt_out.shape == (2, 5)
        np.testing.assert_array_equal(b.tgt_mask.sum(axis=1), [3, 5])
        np.testing.assert_array_equal(b.tgt_in[:, 0], [SOS, SOS])
        assert b.tgt_out[0, 3] == PAD

    def test_memory_counts_all_context_tokens(self):
        b = make_batch([TrainingExample([[4, 5], [6, 4, 5]], [[EOU]])])
        assert b.mem_mask.sum() == 5
        assert b.context_lengths.tolist() == [5]

    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            make_batch([TrainingExample([], [[EOU]])])

    def test_batch_loss_is_sum_of_example_losses(self):
        exs = [
            TrainingExample([[4, 5], [6]], [[5, 6, EOU]]),
            TrainingExample([[6, 6, 4, 5]], [[4, EOU]]),
            TrainingExample([[5], [4, 6], [5, 5, 5]], [[6, 4, 5, 4, EOU]]),
        ]
        model = tiny_model(std=0.5)
        joint = loss_values(model, make_batch(exs), 1.0, 0.13, reduction="sum")
        parts = [loss_values(model, make_batch([e]), 1.0, 0.13, reduction="sum") for e in exs]
        for key in joint:
            assert abs(joint[key] - sum(p[key] for p in parts)) < 1e-6


class TestMasking:
    def test_padding_ids_do_not_matter(self):
        exs = [TrainingExample([[4], [5, 6, 4]], [[5, EOU]]), TrainingExample([[4, 4, 4, 6], [5]], [[4, 6, 6, EOU]])]
        model = tiny_model(std=0.5)
        b = make_batch(exs)
        base = loss_values(model, b, 1.0, 0.13)
        rng = np.random.default_rng(0)
        pad_u = b.utt_mask == 0
        b.utt_ids[pad_u] = rng.integers(0, 7, size=int(pad_u.sum()))
        pad_t = b.tgt_mask == 0
        b.tgt_out[pad_t] = rng.integers(0, 7, size=int(pad_t.sum()))
        b.tgt_in[:, 1:][pad_t[:, 1:]] = rng.integers(0, 7, size=int(pad_t[:, 1:].sum()))
        after = loss_values(model, b, 1.0, 0.13)
        for key in base:
            assert after[key] == base[key]
