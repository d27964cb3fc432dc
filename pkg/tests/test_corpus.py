import gzip

import numpy as np
import pytest

from lst.corpus import (
    AlignmentSpanList,
    SynthConfig,
    Utterance,
    Vocabulary,
    corpus_stats,
    detokenize,
    read_corpus,
    synth_corpus,
    synth_language,
    synth_subword_map,
    synth_utterance,
    tokenize_text,
    write_corpus,
)
from lst.errors import AlignmentError, ConfigError, CorpusFormatError, VocabularyError
from lst.utils import config_hash, substream
from lst.utils.enums import Modality
from tests.utils.enums import Vocab


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(300, seed=3)


def test_text_vocabulary_layout():
    vocab = Vocabulary.text()
    assert vocab.size == Vocab.TEXT.value
    assert vocab.pad_id == Vocab.PAD.value
    assert vocab.marker_for(Modality.TEXT) == Vocab.TEXT_MARKER.value
    assert vocab.marker_for(Modality.SPEECH) == Vocab.SPEECH_MARKER.value
    assert vocab.sep_id == Vocab.SEP.value
    assert vocab.content_size == 508
    assert vocab.is_special(511) and not vocab.is_special(507)


def test_small_text_vocabulary_rejected():
    with pytest.raises(ConfigError):
        Vocabulary.text(4)


def test_speech_vocabulary_has_no_markers():
    vocab = Vocabulary.speech()
    assert vocab.size == Vocab.SPEECH.value
    assert vocab.specials == ()
    with pytest.raises(VocabularyError):
        vocab.marker_for(Modality.SPEECH)


def test_tokenize_roundtrip_and_unknown_word():
    assert detokenize(tokenize_text([0, 7, 507])) == [0, 7, 507]
    with pytest.raises(VocabularyError):
        tokenize_text([508])


def test_synth_utterance_is_deterministic():
    a = synth_utterance(11, 8, index=4)
    b = synth_utterance(11, 8, index=4)
    c = synth_utterance(11, 8, index=5)
    assert a == b
    assert a.speech_tokens != c.speech_tokens or a.text_tokens != c.text_tokens


def test_synth_utterance_alignment_is_valid():
    for i in range(20):
        utt = synth_utterance(0, 10, index=i)
        utt.validate()
        assert utt.n_words == 10
        assert [s.unit for s in utt.alignment] == list(range(10))
        assert all(0 <= t < Vocab.SPEECH.value for t in utt.speech_tokens)


def test_synth_utterance_rejects_zero_words():
    with pytest.raises(ConfigError):
        synth_utterance(0, 0)


def test_corpus_statistics_match_config(corpus):
    stats = corpus_stats(corpus)
    assert stats.utterances == 300
    assert stats.mean_word_frames == pytest.approx(5.8, abs=0.3)
    assert stats.mean_silence_frames == pytest.approx(3.7, abs=0.3)
    assert min(stats.word_lengths) >= 1


def test_silence_uses_silence_tokens_only(corpus):
    cfg = SynthConfig()
    for utt in corpus[:50]:
        for b, e in utt.alignment.silence_gaps(len(utt.speech_tokens)):
            assert all(t < cfg.silence_tokens for t in utt.speech_tokens[b : e + 1])
        for span in utt.alignment:
            assert all(t >= cfg.silence_tokens for t in utt.word_frames(span.unit))


def test_word_frames_mostly_preferred(corpus):
    language = synth_language(SynthConfig())
    hits = total = 0
    for utt in corpus:
        for k, word in enumerate(utt.text_tokens):
            frames = utt.word_frames(k)
            hits += sum(1 for t in frames if t in set(language.preferred[word].tolist()))
            total += len(frames)
    assert hits / total == pytest.approx(0.8, abs=0.03)


def test_heldout_stream_differs(corpus):
    heldout = synth_corpus(300, seed=3, stream="heldout")
    assert heldout[0] != corpus[0]


def test_corpus_lengths_respect_bounds():
    cfg = SynthConfig(min_words=3, max_words=6, n_word_types=24)
    utts = synth_corpus(40, seed=1, cfg=cfg)
    assert all(3 <= u.n_words <= 6 for u in utts)
    assert all(0 <= w < 24 for u in utts for w in u.text_tokens)


@pytest.mark.parametrize("name", ["corpus.ndjson", "corpus.ndjson.gz"])
def test_write_read_corpus(tmp_path, corpus, name):
    path = tmp_path / name
    assert write_corpus(path, corpus[:10]) == 10
    assert read_corpus(path) == corpus[:10]
    if name.endswith(".gz"):
        with gzip.open(path, "rt") as f:
            assert f.readline().startswith("{")


def test_read_corpus_rejects_bad_spans(tmp_path):
    path = tmp_path / "bad.ndjson"
    path.write_text('{"text_tokens": [1], "speech_tokens": [0, 1], "spans": [[0, 1, 2]]}\n')
    with pytest.raises(AlignmentError):
        read_corpus(path)


def test_read_corpus_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.ndjson"
    path.write_text("{not json\n")
    with pytest.raises(CorpusFormatError):
        read_corpus(path)


def test_read_corpus_missing_file(tmp_path):
    with pytest.raises(CorpusFormatError):
        read_corpus(tmp_path / "missing.ndjson")


def test_alignment_validation():
    AlignmentSpanList([(0, 0, 1), (1, 2, 2)]).validate(3)
    with pytest.raises(AlignmentError):
        AlignmentSpanList([(0, 0, 2), (1, 2, 3)]).validate(5)
    with pytest.raises(AlignmentError):
        AlignmentSpanList([(0, 3, 2)]).validate(5)
    with pytest.raises(AlignmentError):
        AlignmentSpanList([(0, 3, 5)]).validate(5)


def test_utterance_needs_one_span_per_word():
    utt = Utterance([1, 2], [5, 5, 6], AlignmentSpanList([(0, 0, 1)]))
    with pytest.raises(AlignmentError):
        utt.validate()


def test_silence_gaps_and_restrict():
    spans = AlignmentSpanList([(0, 2, 4), (1, 6, 7)])
    assert spans.silence_gaps(10) == [(0, 1), (5, 5), (8, 9)]
    assert [tuple(s) for s in spans.restrict(5, 9)] == [(1, 1, 2)]


def test_subword_map_fraction():
    mapping = synth_subword_map(SynthConfig())
    assert set(mapping.values()) <= {1, 2}
    assert np.mean([v == 2 for v in mapping.values()]) == pytest.approx(0.16, abs=0.07)


def test_degenerate_config_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(mean_word_frames=0.5).validate()
    with pytest.raises(ConfigError):
        SynthConfig(fidelity=1.5).validate()


def test_substream_is_independent_of_call_order():
    first = substream(5, "a", 1).integers(0, 1000, size=4)
    substream(5, "b", 1).integers(0, 1000, size=100)
    again = substream(5, "a", 1).integers(0, 1000, size=4)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, substream(5, "a", 2).integers(0, 1000, size=4))


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
