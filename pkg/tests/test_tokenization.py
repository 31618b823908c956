from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bytemt.tokenization import (
    BpeModel,
    Tokenizer,
    Vocab,
    bpe_apply,
    bpe_decode,
    bpe_segment,
    bpe_train,
    build_char_vocab,
    byte_decode,
    byte_encode,
    char_decode,
    char_encode,
    pretokenize,
)

RUSSIAN = "Будь здоров."
RUSSIAN_BYTES = [0xD0, 0x91, 0xD1, 0x83, 0xD0, 0xB4, 0xD1, 0x8C, 0x20, 0xD0, 0xB7,
                 0xD0, 0xB4, 0xD0, 0xBE, 0xD1, 0x80, 0xD0, 0xBE, 0xD0, 0xB2, 0x2E]


def test_byte_encode_cyrillic():
    assert list(byte_encode(RUSSIAN).ids) == RUSSIAN_BYTES


def test_byte_encode_trivial():
    assert byte_encode("").ids == ()
    assert byte_encode("R").ids == (82,)


def test_byte_encode_rejects_invalid_utf8():
    with pytest.raises(UnicodeError):
        byte_encode(b"\xd0")
    with pytest.raises(UnicodeError):
        byte_encode("\ud800")


def test_byte_decode():
    assert byte_decode([82]) == "R"
    assert byte_decode([0xD0, 0x91]) == "Б"
    assert not byte_decode([0xD0, 0x91]).malformed


def test_byte_decode_incomplete_sequence_is_flagged():
    # 0xD0 opens a 2-byte sequence; without a continuation byte it is one replacement char
    out = byte_decode([0xD0])
    assert out == "�"
    assert out.malformed


def test_byte_decode_drops_specials():
    vocab = Vocab.byte()
    assert byte_decode([vocab.bos_id, 82, vocab.eos_id, vocab.pad_id]) == "R"


def test_byte_vocab_layout():
    vocab = Vocab.byte()
    assert len(vocab) == 260
    assert all(vocab.id_of[bytes([b])] == b for b in range(256))
    assert (vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id) == (256, 257, 258, 259)
    assert all(vocab.id_of[vocab.token_of[i]] == i for i in range(len(vocab)))


def test_char_vocab_specials_first_and_inverse():
    vocab = build_char_vocab(["abca", "Будь"])
    assert [vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id] == [0, 1, 2, 3]
    assert all(vocab.id_of[vocab.token_of[i]] == i for i in range(len(vocab)))
    assert len(set(vocab.token_of.values())) == len(vocab)


def test_char_encode():
    vocab = build_char_vocab([RUSSIAN])
    assert len(char_encode("Будь", vocab)) == 4
    assert char_encode("", vocab).ids == ()
    assert char_encode("ж", vocab).ids == (vocab.unk_id,)
    assert char_decode(char_encode(RUSSIAN, vocab), vocab) == RUSSIAN


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocab("char", ["a", "a"])


@settings(max_examples=300)
@given(st.text())
def test_byte_round_trip(s):
    assert byte_decode(byte_encode(s)) == s


@settings(max_examples=300)
@given(st.text())
def test_char_round_trip_in_vocab(s):
    vocab = build_char_vocab([s])
    assert char_decode(char_encode(s, vocab), vocab) == s


@settings(max_examples=300)
@given(st.text())
def test_byte_length_at_least_char_length(s):
    n = len(byte_encode(s))
    assert n >= len(s)
    assert (n == len(s)) == s.isascii()


# --- BPE ------------------------------------------------------------------------

def naive_bpe(words, merges):
    """Recount every pair from scratch at every step (the textbook loop)."""
    segs = [list(w) for w in words]
    learned = []
    for _ in range(merges):
        counts = Counter()
        for s in segs:
            for pair in zip(s, s[1:]):
                counts[pair] += 1
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        best = min(p for p, c in counts.items() if c == top)
        learned.append(best)
        new = []
        for s in segs:
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                    out.append(s[i] + s[i + 1])
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            new.append(out)
        segs = new
    return learned


def test_bpe_low_lower():
    model = bpe_train(["low", "low", "lower"], 2)
    assert list(model.merges) == [("l", "o"), ("lo", "w")]
    assert naive_bpe(["low", "low", "lower"], 2) == list(model.merges)


def test_bpe_zero_merges_and_no_pairs():
    assert bpe_train(["low lower"], 0).merges == ()
    assert bpe_train(["a"], 5).merges == ()


def test_bpe_empty_corpus():
    with pytest.raises(ValueError):
        bpe_train([], 3)


def test_bpe_apply():
    model = bpe_train(["low", "low", "lower"], 2)
    assert bpe_segment(model, "low") == ["low"]
    assert bpe_apply(model, "low").ids == (model.vocab.id_of["low"],)
    assert bpe_apply(model, "").ids == ()
    assert bpe_segment(model, "xyz") == ["x@@", "y@@", "z"]
    assert bpe_segment(model, "lower") == ["low@@", "e@@", "r"]


def test_bpe_decode_restores_words():
    model = bpe_train(["the lower lowest", "low low"], 6)
    text = "the lowest low"
    assert bpe_decode(bpe_apply(model, text), model) == text


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abcd", min_size=1, max_size=6), min_size=1, max_size=12),
       st.integers(0, 10))
def test_bpe_matches_naive_oracle(words, merges):
    model = bpe_train([" ".join(words)], merges)
    assert list(model.merges) == naive_bpe(words, merges)


def test_bpe_deterministic():
    corpus = ["the quick brown fox", "jumps over the lazy dog", "the dog barks"] * 3
    assert bpe_train(corpus, 20).merges == bpe_train(corpus, 20).merges


def test_pretokenize_detaches_punctuation():
    assert pretokenize('Hello, "world"!') == ["Hello", ",", '"', "world", '"', "!"]
    assert pretokenize("  a   b ") == ["a", "b"]


def test_bpe_model_file_round_trip(tmp_path):
    model = bpe_train(["the lower lowest", "low low"], 6)
    model.save(tmp_path / "bpe.model")
    header = (tmp_path / "bpe.model").read_text(encoding="utf-8").splitlines()[0]
    assert header.split()[2] == str(len(model.merges))
    loaded = BpeModel.load(tmp_path / "bpe.model", model.vocab)
    assert loaded.merges == model.merges


@pytest.mark.parametrize("scheme", ["byte", "char", "bpe"])
def test_tokenizer_save_load(tmp_path, scheme):
    sentences = ["Будь здоров.", "low lower lowest"]
    from bytemt.tokenization import build_tokenizer

    tk = build_tokenizer(scheme, sentences, bpe_merges=5)
    tk.save(tmp_path / scheme)
    back = Tokenizer.load(tmp_path / scheme)
    for s in sentences:
        assert back.encode(s) == tk.encode(s)
        assert back.decode(back.encode(s).ids) == s


def test_vocab_file_one_token_per_line(tmp_path):
    vocab = build_char_vocab(["a b\\c"])
    vocab.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text(encoding="utf-8").split("\n")[:-1]
    assert len(lines) == len(vocab)
    assert Vocab.load(tmp_path / "v.txt", "char").id_of == vocab.id_of
