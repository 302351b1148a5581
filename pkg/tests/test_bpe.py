import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridseq import bpe
from hybridseq.bpe import EOS, EOW, PAD, SOS, UNK, BpeModel, train_bpe
from hybridseq.errors import ContractError, FormatError


def oracle_first_merge(corpus):
    """Count every adjacent symbol pair of every word occurrence by brute force."""
    counts = {}
    for line in corpus:
        for word in line.split():
            symbols = list(word) + [EOW]
            for i in range(len(symbols) - 1):
                key = (symbols[i], symbols[i + 1])
                counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    return min(k for k, v in counts.items() if v == best), best


def replay(model, word):
    """Segmentation obtained by applying the merge history step by step."""
    units = list(word) + [EOW]
    for left, right in model.merges:
        i, out = 0, []
        while i < len(units):
            if i + 1 < len(units) and units[i] == left and units[i + 1] == right:
                out.append(left + right)
                i += 2
            else:
                out.append(units[i])
                i += 1
        units = out
    return tuple(units)


CORPUS = ["abab", "ab"]


class TestTrain:
    def test_first_merge_count_three(self):
        pair, count = oracle_first_merge(CORPUS)
        assert (pair, count) == (("a", "b"), 3)
        model = train_bpe(CORPUS, 50)
        assert model.merges[0] == ("a", "b")

    def test_reserved_ids(self):
        model = train_bpe(CORPUS, 50)
        assert model.units[:4] == ["<pad>", "<sos>", "<eos>", "<unk>"]
        assert (PAD, SOS, EOS, UNK) == (0, 1, 2, 3)

    def test_single_character_corpus(self):
        model = train_bpe(["a a a"], 50)
        assert model.units[4:6] == ["a", EOW]
        # the only pair merges into the marked form of the character
        assert model.merges == [("a", EOW)]
        assert model.units[6] == "a" + EOW
        assert not model.reached_target

    def test_tie_break_lexicographic(self):
        model = train_bpe(["xy", "ab"], 50)
        # every pair occurs once, so nothing merges
        assert model.merges == []
        tied = train_bpe(["xy xy", "ab ab"], 50)
        assert tied.merges[0] == ("a", "b")

    def test_unreachable_target_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            model = train_bpe(["ab"], 40)
        assert model.vocab_size < 40 and not model.reached_target
        assert any("bpe stopped" in r.message for r in caplog.records)

    def test_target_reached(self):
        corpus = ["the cat sat on the mat", "the dog sat on the log"] * 3
        model = train_bpe(corpus, 24)
        assert model.vocab_size == 24 and model.reached_target

    def test_target_below_base(self):
        with pytest.raises(ContractError):
            train_bpe(["abc"], 7)

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            train_bpe(["", "  "], 50)

    def test_vocab_replays_from_merges(self):
        corpus = ["abc abd abc", "bcd bcd xbc"]
        model = train_bpe(corpus, 30)
        base = sorted(set("".join(corpus).replace(" ", ""))) + [EOW]
        units = list(bpe.RESERVED) + base
        for a, b in model.merges:
            if a + b not in units:
                units.append(a + b)
        assert units == model.units

    def test_deterministic(self):
        corpus = ["hello world", "held word", "low lower lowest"]
        a, b = train_bpe(corpus, 30), train_bpe(list(corpus), 30)
        assert a.dumps() == b.dumps()

    def test_training_words_match_replay(self):
        corpus = ["abab abba", "baab ab", "aabb bbaa"]
        model = train_bpe(corpus, 20)
        for word in {w for line in corpus for w in line.split()}:
            assert model.segment(word) == replay(model, word)


class TestEncodeDecode:
    def test_empty(self):
        assert train_bpe(CORPUS, 50).encode("") == []

    def test_unknown_characters(self):
        model = train_bpe(CORPUS, 50)
        ids = model.encode("azb qq")
        assert ids.count(UNK) == 3

    def test_sos_eos(self):
        assert train_bpe(CORPUS, 50).decode([SOS, EOS]) == ""

    def test_round_trip_example(self):
        model = train_bpe(CORPUS, 50)
        assert model.decode(model.encode("ab ab")) == "ab ab"

    def test_out_of_range(self):
        model = train_bpe(CORPUS, 50)
        with pytest.raises(IndexError):
            model.decode([model.vocab_size])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(alphabet="abcde", min_size=1, max_size=8), min_size=1, max_size=6))
    def test_round_trip_property(self, words):
        model = _PROPERTY_MODEL
        text = " ".join(words)
        assert model.decode(model.encode(text)) == text

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet="abcde \t", max_size=30))
    def test_round_trip_normalizes_whitespace(self, text):
        model = _PROPERTY_MODEL
        assert model.decode(model.encode(text)) == " ".join(text.split())


_PROPERTY_MODEL = train_bpe(["abc bcd cde dea eab", "aab bbc ccd dde eea", "abcde edcba"], 30)


class TestFile:
    def test_bit_exact_round_trip(self, tmp_path):
        model = train_bpe(["the cat sat on the mat", "a dog"], 30)
        path = tmp_path / "m.bpe"
        model.save(path)
        again = BpeModel.load(path)
        assert again.merges == model.merges and again.units == model.units
        again.save(tmp_path / "n.bpe")
        assert path.read_bytes() == (tmp_path / "n.bpe").read_bytes()

    def test_layout(self):
        model = train_bpe(CORPUS, 50)
        lines = model.dumps().splitlines()
        assert lines[0] == f"bpe-v1 {model.vocab_size}"
        sep = lines.index("---")
        assert lines[1:sep] == [f"{a} {b}" for a, b in model.merges]
        assert lines[sep + 1] == "0 <pad>"

    @pytest.mark.parametrize("text", ["", "bpe-v2 3\n---\n", "bpe-v1 5\n---\n0 <pad>\n1 <sos>\n2 <eos>\n3 <unk>\n"])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            BpeModel.loads(text)
