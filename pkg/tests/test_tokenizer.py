import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synmodal.syntax import INTERNAL_KINDS
from synmodal.tokenizer import SPECIAL_TOKENS, Vocab, decode, encode, pretokenize, train_bpe

CORPUS = [
    "def add(a, b):\n    return a + b\n",
    "return the sum of a and b",
    "def scale(value, factor):\n    return value * factor\n",
    "multiply value by factor",
    'x = len("x")',
]


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(CORPUS, 200)


def hand_pair_counts(corpus):
    counts = {}
    for text in corpus:
        for word in pretokenize(text):
            for a, b in zip(word, word[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
    return counts


def test_first_merge_is_most_frequent_pair():
    counts = hand_pair_counts(["aaab", "aaab"])
    assert counts == {("a", "a"): 4, ("a", "b"): 2}
    reserved = len(SPECIAL_TOKENS) + len(INTERNAL_KINDS)
    v = train_bpe(["aaab", "aaab"], reserved + 2 + 1)
    assert v.merges == (("a", "a"),)
    assert len(v) == reserved + 3


def test_lexicographic_tie_break():
    v = train_bpe(["ab", "cd"], len(SPECIAL_TOKENS) + len(INTERNAL_KINDS) + 5)
    assert v.merges[0] == ("a", "b")


def test_target_below_reserved_is_an_error():
    with pytest.raises(ValueError, match="reserved"):
        train_bpe(CORPUS, 5)


def test_empty_corpus_is_an_error():
    with pytest.raises(ValueError, match="empty"):
        train_bpe([], 100)
    with pytest.raises(ValueError, match="empty"):
        train_bpe(["", ""], 100)


def test_retraining_is_byte_identical(tmp_path, vocab):
    again = train_bpe(CORPUS, 200)
    a, b = tmp_path / "a.vocab", tmp_path / "b.vocab"
    vocab.save(a)
    again.save(b)
    assert a.read_bytes() == b.read_bytes()


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "v.vocab"
    vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded == vocab
    assert loaded.to_text() == vocab.to_text()
    assert path.read_text().splitlines()[0].startswith("#synmodal-bpe v1 tokens=")


def test_maps_are_inverse_and_dense(vocab):
    assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))
    for i, tok in enumerate(vocab.tokens):
        assert vocab.token_to_id[tok] == i


def test_merges_never_produce_reserved_tokens(vocab):
    reserved = {vocab.tokens[i] for i in vocab.reserved_ids}
    assert not any(a + b in reserved for a, b in vocab.merges)


def test_empty_text(vocab):
    assert encode("", vocab) == []


def test_kind_token_is_atomic(vocab):
    ids = encode("binary_operator", vocab)
    assert len(ids) == 1
    assert ids[0] in vocab.reserved_ids
    assert ids[0] == vocab.kind_id("binary_operator")
    assert len(encode("binary_operator", vocab, kinds=False)) > 1


def test_unknown_characters_become_unk(vocab):
    assert encode("¤", vocab) == [vocab.unk_id]


def test_special_strings_are_not_specials(vocab):
    ids = encode("[MASK] [CLS] [SEP] [PAD]", vocab)
    assert not set(ids) & {vocab.mask_id, vocab.cls_id, vocab.sep_id, vocab.pad_id}


def test_stops_early_when_pairs_run_out():
    v = train_bpe(["ab"], 10_000)
    assert v.merges == (("a", "b"),)


ALPHABET = sorted({ch for text in CORPUS for ch in text})


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=ALPHABET, max_size=40))
def test_round_trip_and_length_bound(vocab, text):
    ids = encode(text, vocab)
    assert decode(ids, vocab) == text
    assert len(ids) <= len(text.encode("utf-8"))
    assert not set(ids) & {vocab.mask_id, vocab.cls_id, vocab.sep_id, vocab.pad_id}
