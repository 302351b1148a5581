import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridseq import data
from hybridseq.data import SyntheticTaskSpec, Utterance
from hybridseq.errors import ConfigError, FormatError
from hybridseq.metrics import edit_distance, wer


def backtrace_wer(ref, hyp):
    """Quadratic DP that also recovers the edit path, then counts its operations."""
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        cost[i][0] = i
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i][j] = min(cost[i - 1][j] + 1, cost[i][j - 1] + 1,
                             cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    i, j, ops = n, m, []
    while i or j:
        if i and j and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                ops.append("S")
            i, j = i - 1, j - 1
        elif i and cost[i][j] == cost[i - 1][j] + 1:
            ops.append("D")
            i -= 1
        else:
            ops.append("I")
            j -= 1
    return len(ops)


class TestWer:
    def test_identical(self):
        refs = {"a": "x y z", "b": "q"}
        assert wer(dict(refs), refs) == 0.0

    def test_one_substitution(self):
        assert wer({"u": "a x c"}, {"u": "a b c"}) == pytest.approx(33.33, abs=0.01)

    def test_insertions_exceed_hundred(self):
        assert wer({"u": "a b c d"}, {"u": "z"}) == 400.0

    def test_mismatched_ids(self):
        with pytest.raises(ValueError, match="missing|differ"):
            wer({"a": "x"}, {"b": "x"})

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from("abcd"), max_size=8), st.lists(st.sampled_from("abcd"), max_size=8))
    def test_matches_backtrace_oracle(self, ref, hyp):
        assert edit_distance(ref, hyp) == backtrace_wer(ref, hyp)
        assert edit_distance(ref, ref) == 0
        if ref:
            got = wer({"u": " ".join(hyp)}, {"u": " ".join(ref)})
            assert got == pytest.approx(100 * backtrace_wer(ref, hyp) / len(ref))
            assert got >= 0


class TestSynthetic:
    def test_noiseless_is_exact_prototypes(self):
        spec = SyntheticTaskSpec(count=30, noise=0.0, frames_per_token=4)
        corpora = data.gen_synthetic(spec)
        utts = corpora["train"] + corpora["dev"] + corpora["test"]
        protos = data.prototypes(spec)
        index = {c: i for i, c in enumerate(spec.symbols)}
        for u in utts:
            expected = np.repeat(protos[[index[c] for c in u.text]], 4, axis=0)
            np.testing.assert_array_equal(u.feats, expected.astype(np.float32))
            assert u.feats.shape[0] == 4 * len(u.text)
        assert data.nearest_prototype_accuracy(utts, spec) == 1.0

    def test_low_noise_oracle_accuracy(self):
        spec = SyntheticTaskSpec(count=250, noise=0.1, feat_dim=16)
        corpora = data.gen_synthetic(spec)
        utts = corpora["train"] + corpora["dev"] + corpora["test"]
        assert sum(len(u.feats) for u in utts) >= 10000
        assert data.nearest_prototype_accuracy(utts, spec) >= 0.99

    def test_deterministic(self):
        spec = SyntheticTaskSpec(count=20, seed=3, order=2)
        a, b = data.gen_synthetic(spec), data.gen_synthetic(spec)
        for split in a:
            assert [(u.id, u.text, u.feats.tobytes()) for u in a[split]] == \
                   [(u.id, u.text, u.feats.tobytes()) for u in b[split]]

    def test_split_by_hash(self):
        spec = SyntheticTaskSpec(count=400)
        corpora = data.gen_synthetic(spec)
        for split, utts in corpora.items():
            assert all(data.split_of(u.id) == split for u in utts)
        assert 0.7 < len(corpora["train"]) / 400 < 0.9

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_sentence_shape(self, order):
        spec = SyntheticTaskSpec(count=50, min_len=5, max_len=9, order=order)
        for text in data.gen_text(spec, 200):
            assert 5 <= len(text) <= 9
            assert text == text.strip() and "  " not in text
            assert set(text) <= set(spec.symbols)

    @pytest.mark.parametrize("bad", [dict(alphabet=""), dict(alphabet="aa"), dict(alphabet="a b"),
                                     dict(frames_per_token=1), dict(noise=-0.1), dict(min_len=0),
                                     dict(order=0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            data.gen_synthetic(SyntheticTaskSpec(**bad))

    def test_text_count_zero(self):
        with pytest.raises(ConfigError):
            data.gen_text(SyntheticTaskSpec(), 0)

    def test_text_deterministic(self):
        spec = SyntheticTaskSpec(seed=9)
        assert data.gen_text(spec, 30) == data.gen_text(spec, 30)

    def test_text_unigram_matches_transcripts(self):
        spec = SyntheticTaskSpec(count=10000, seed=1, noise=0.0, feat_dim=2, frames_per_token=2)
        corpora = data.gen_synthetic(spec)
        paired = [u.text for split in corpora.values() for u in split]
        text = data.gen_text(spec, 10000)
        source = data.MarkovSource(spec.alphabet, spec.seed)
        tv = 0.5 * np.abs(source.unigram(paired) - source.unigram(text)).sum()
        assert tv < 0.05

    def test_shared_prototypes(self):
        a = SyntheticTaskSpec(alphabet="abc", prototype_seed=5, seed=1)
        b = SyntheticTaskSpec(alphabet="XYZ", prototype_seed=5, seed=2)
        np.testing.assert_array_equal(data.prototypes(a), data.prototypes(b))
        np.testing.assert_allclose(np.linalg.norm(data.prototypes(a), axis=1), 1.0)


class TestFiles:
    def test_corpus_round_trip(self, tmp_path):
        utts = data.gen_synthetic(SyntheticTaskSpec(count=20, noise=0.3))["train"]
        data.write_corpus(tmp_path / "c", utts)
        again = data.read_corpus(tmp_path / "c")
        assert [(u.id, u.text) for u in again] == [(u.id, u.text) for u in utts]
        assert all(a.feats.tobytes() == b.feats.tobytes() for a, b in zip(again, utts))
        assert (tmp_path / "c.feats").read_bytes()[:4] == b"HSQF"

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.text(alphabet="abc_-0123456789", min_size=1, max_size=8),
                              st.integers(1, 6), st.integers(1, 4)), min_size=1, max_size=5, unique_by=lambda t: t[0]))
    def test_features_bit_exact(self, tmp_path_factory, items):
        rng = np.random.default_rng(0)
        utts = [Utterance(i, rng.standard_normal((t, f)).astype(np.float32), "x") for i, t, f in items]
        path = tmp_path_factory.mktemp("f") / "x.feats"
        data.write_features(path, utts)
        back = data.read_features(path)
        assert [i for i, _ in back] == [u.id for u in utts]
        assert all(x.tobytes() == u.feats.tobytes() and x.shape == u.feats.shape
                   for (_, x), u in zip(back, utts))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.feats").write_bytes(b"NOPE\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            data.read_features(tmp_path / "x.feats")

    def test_truncated(self, tmp_path):
        utts = [Utterance("a", np.ones((3, 2), np.float32), "t")]
        data.write_features(tmp_path / "x.feats", utts)
        blob = (tmp_path / "x.feats").read_bytes()
        (tmp_path / "x.feats").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            data.read_features(tmp_path / "x.feats")

    def test_missing_transcript(self, tmp_path):
        utts = [Utterance("a", np.ones((3, 2), np.float32), "t")]
        data.write_features(tmp_path / "c.feats", utts)
        data.write_transcripts(tmp_path / "c.txt", [("b", "t")])
        with pytest.raises(FormatError):
            data.read_corpus(tmp_path / "c")

    def test_text_round_trip(self, tmp_path):
        lines = ["ab cd", "ef"]
        data.write_text(tmp_path / "t.txt", lines)
        assert data.read_text(tmp_path / "t.txt") == lines
