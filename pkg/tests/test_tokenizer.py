import numpy as np
import pytest

from tbps.tokenizer import CLS, PAD, UNK, TokenSequence, Vocabulary, split_words, tokenize


def test_split_words_lowercases_and_drops_punctuation():
    assert split_words("A wide-PERSON, wearing 3 hats!") == [
        "a", "wide", "person", "wearing", "hats"]


def test_vocabulary_reserved_slots():
    vocab = Vocabulary(["red", "blue"])
    assert vocab.id_of("<pad>") == PAD == 0
    assert vocab.id_of("<cls>") == CLS == 1
    assert vocab.id_of("<unk>") == UNK == 2
    assert vocab.id_of("red") == 3
    assert vocab.token_of(4) == "blue"
    assert len(vocab) == 5
    assert "red" in vocab and "zebra" not in vocab


def test_vocabulary_rejects_duplicates_and_reserved():
    with pytest.raises(ValueError):
        Vocabulary(["red", "red"])
    with pytest.raises(ValueError):
        Vocabulary(["<unk>"])


def test_tokenize_structure():
    vocab = Vocabulary(["a", "red", "shirt", "blue", "pants"])
    seq = tokenize("a red shirt, blue pants", vocab, max_tokens=16)
    # global marker, then a marker before each comma segment
    assert seq.ids[0] == CLS
    assert seq.segment_positions == [1, 5]
    assert all(seq.ids[p] == CLS for p in seq.segment_positions)
    assert seq.word_positions == [2, 3, 4, 6, 7]
    words = [vocab.token_of(int(seq.ids[p])) for p in seq.word_positions]
    assert words == ["a", "red", "shirt", "blue", "pants"]
    assert seq.length == 8
    assert seq.num_parts == 1 + 2 + 5
    assert (seq.ids[8:] == PAD).all()
    assert seq.mask[:8].sum() == 8 and seq.mask[8:].sum() == 0


def test_unknown_words_keep_their_position():
    vocab = Vocabulary(["red"])
    seq = tokenize("zebra red", vocab, max_tokens=8)
    assert seq.word_positions == [2, 3]
    assert seq.ids[2] == UNK
    assert seq.ids[3] == vocab.id_of("red")
    assert seq.num_parts == 1 + 1 + 2


def test_tokenize_truncates_to_max_tokens():
    vocab = Vocabulary(["w"])
    seq = tokenize(", ".join(["w w w"] * 5), vocab, max_tokens=6)
    assert seq.length == 6
    assert len(seq.ids) == 6
    assert max(seq.word_positions) < 6
    assert max(seq.segment_positions) < 6


def test_tokenize_empty_caption_rejected():
    vocab = Vocabulary(["red"])
    with pytest.raises(ValueError):
        tokenize(" ,, 42 !", vocab, max_tokens=8)


def test_single_segment_caption():
    vocab = Vocabulary(["a", "person"])
    seq = tokenize("a person", vocab, max_tokens=8)
    assert seq.segment_positions == [1]
    assert seq.sentence_position == 0
    assert seq.num_parts == 1 + 1 + 2
