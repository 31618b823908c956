"""Byte, character and BPE subword tokenizers sharing one vocabulary layout.

The byte scheme keeps raw byte values as ids (0..255) and appends the four
specials after them, so a byte id is also the one-hot column it lights up.
Character and BPE vocabularies put the specials first.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SCHEMES = ("byte", "char", "bpe")
SPECIAL_NAMES = ("<pad>", "<s>", "</s>", "<unk>")
BPE_FILE_VERSION = "bytemt-bpe v1"


class DecodedText(str):
    """A decoded string that remembers whether replacement characters were needed."""

    malformed: bool

    def __new__(cls, text: str, malformed: bool = False):
        obj = super().__new__(cls, text)
        obj.malformed = malformed
        return obj


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    scheme: str

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]


class Vocab:
    """Bidirectional token <-> id map with PAD/BOS/EOS/UNK reserved."""

    def __init__(self, scheme: str, tokens: Sequence = ()):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.scheme = scheme
        if scheme == "byte":
            if tokens:
                raise ValueError("the byte vocabulary is fixed")
            content = [bytes([b]) for b in range(256)]
            ordered = content + list(SPECIAL_NAMES)
        else:
            seen = set(SPECIAL_NAMES)
            content = []
            for tok in tokens:
                if tok in seen:
                    raise ValueError(f"duplicate or reserved token {tok!r}")
                seen.add(tok)
                content.append(tok)
            ordered = list(SPECIAL_NAMES) + content
        self.token_of = dict(enumerate(ordered))
        self.id_of = {tok: i for i, tok in self.token_of.items()}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = (
            self.id_of[name] for name in SPECIAL_NAMES
        )

    @classmethod
    def byte(cls) -> "Vocab":
        return cls("byte")

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": self.pad_id, "BOS": self.bos_id, "EOS": self.eos_id, "UNK": self.unk_id}

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.bos_id, self.eos_id, self.unk_id))

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token) -> bool:
        return token in self.id_of

    def lookup(self, token) -> int:
        return self.id_of.get(token, self.unk_id)

    def save(self, path) -> None:
        if self.scheme == "byte":
            lines = [f"<0x{i:02X}>" for i in range(256)] + list(SPECIAL_NAMES)
        else:
            lines = [_escape(self.token_of[i]) for i in range(len(self))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, scheme: str) -> "Vocab":
        if scheme == "byte":
            return cls.byte()
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        tokens = [_unescape(line) for line in lines]
        if tuple(tokens[:4]) != SPECIAL_NAMES:
            raise ValueError(f"{path}: vocabulary does not start with the reserved specials")
        return cls(scheme, tokens[4:])


def _escape(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(line: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "r": "\r"}.get(m.group(1), m.group(1)), line)


# --- bytes --------------------------------------------------------------------

def byte_encode(text: str | bytes) -> TokenSeq:
    """UTF-8 bytes of ``text`` as ids, no specials added.

    Raw ``bytes`` input is validated first; lone surrogates in ``str`` input
    fail the encode. Both raise ``UnicodeError``.
    """
    if isinstance(text, (bytes, bytearray)):
        data = bytes(text)
        data.decode("utf-8")
    else:
        data = text.encode("utf-8")
    return TokenSeq(tuple(data), "byte")


def byte_decode(seq: TokenSeq | Iterable[int]) -> DecodedText:
    """Inverse of :func:`byte_encode`. Specials are dropped.

    Invalid UTF-8 (which a byte-level decoder can emit) is decoded with
    U+FFFD replacement characters and the result is flagged ``malformed``.
    """
    ids = seq.ids if isinstance(seq, TokenSeq) else tuple(seq)
    data = bytes(i for i in ids if 0 <= i < 256)
    try:
        return DecodedText(data.decode("utf-8"))
    except UnicodeDecodeError:
        return DecodedText(data.decode("utf-8", errors="replace"), malformed=True)


# --- characters ---------------------------------------------------------------

def build_char_vocab(sentences: Iterable[str], min_count: int = 1) -> Vocab:
    counts = Counter()
    for s in sentences:
        counts.update(s)
    # frequency order, ties by code point
    tokens = sorted((c for c, n in counts.items() if n >= min_count), key=lambda c: (-counts[c], c))
    return Vocab("char", tokens)


def char_encode(text: str, vocab: Vocab) -> TokenSeq:
    return TokenSeq(tuple(vocab.lookup(c) for c in text), "char")


def char_decode(seq: TokenSeq | Iterable[int], vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else tuple(seq)
    out = []
    for i in ids:
        if i == vocab.unk_id:
            out.append("\ufffd")
        elif i not in vocab.special_ids:
            out.append(vocab.token_of[i])
    return "".join(out)


# --- BPE ----------------------------------------------------------------------

_PUNCT = r"""!"#$%&'()*+,\-./:;<=>?@\[\\\]^_`{|}~«»„“”‘’¿¡…،؟。、！？：；"""
_LEADING = re.compile(rf"^([{_PUNCT}])")
_TRAILING = re.compile(rf"([{_PUNCT}])$")
_OPENERS = set("([{«„“‘¿¡")
_CLOSERS = set(".,!?;:)]}»”’…،؟。、！？：；%")


def pretokenize(text: str) -> list[str]:
    """Whitespace split, then peel punctuation off both ends of each chunk."""
    out = []
    for chunk in text.split():
        lead, trail = [], []
        while len(chunk) > 1 and _LEADING.match(chunk):
            lead.append(chunk[0])
            chunk = chunk[1:]
        while len(chunk) > 1 and _TRAILING.search(chunk):
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        out.append(chunk)
        out.extend(reversed(trail))
    return out


def detokenize(words: Sequence[str]) -> str:
    """Rough inverse of :func:`pretokenize` for display and scoring."""
    out = ""
    attach = True
    for w in words:
        if not out or attach or w in _CLOSERS:
            out += w
        else:
            out += " " + w
        attach = w in _OPENERS
    return out


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]
    vocab: Vocab = field(compare=False)
    marker: str = "@@"

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        ranks = self.__dict__.get("_ranks")
        if ranks is None:
            ranks = {pair: i for i, pair in enumerate(self.merges)}
            object.__setattr__(self, "_ranks", ranks)
        return ranks

    def save(self, path) -> None:
        lines = [f"{BPE_FILE_VERSION} {len(self.merges)} {self.marker}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, vocab: Vocab | None = None) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0].split(" ")
        if " ".join(header[:2]) != BPE_FILE_VERSION:
            raise ValueError(f"{path}: not a BPE model file")
        count, marker = int(header[2]), header[3]
        merges = tuple(tuple(line.split(" ")) for line in lines[1:1 + count])
        if len(merges) != count or any(len(m) != 2 for m in merges):
            raise ValueError(f"{path}: expected {count} merge pairs")
        if vocab is None:
            vocab = Vocab("bpe", _merge_vocab_tokens(merges, marker))
        return cls(merges, vocab, marker)


def _merge_word(symbols: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    while len(symbols) > 1:
        best = min(
            ((ranks.get(pair, len(ranks)), i) for i, pair in enumerate(zip(symbols, symbols[1:]))),
        )
        if best[0] == len(ranks):
            break
        a, b = symbols[best[1]], symbols[best[1] + 1]
        merged, i = [], 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                merged.append(a + b)
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return symbols


def _mark(pieces: list[str], marker: str) -> list[str]:
    return [p + marker for p in pieces[:-1]] + pieces[-1:]


def _merge_vocab_tokens(merges, marker: str, words: Iterable[str] = ()) -> list[str]:
    symbols: set[str] = set()
    for w in words:
        symbols.update(w)
    for a, b in merges:
        symbols.update((a, b, a + b))
    # every symbol may appear word-internally (marked) or word-finally (bare)
    return sorted(symbols) + sorted(s + marker for s in symbols)


def bpe_train(corpus: Sequence[str], merges: int, marker: str = "@@") -> BpeModel:
    """Learn ``merges`` greedy most-frequent-pair merges over pre-tokenized words.

    Ties go to the lexicographically smallest (left, right) pair. Stops early
    when no adjacent pair occurs at least twice.
    """
    if merges < 0:
        raise ValueError("merges must be >= 0")
    if not corpus:
        raise ValueError("cannot train BPE on an empty corpus")
    word_freq = Counter()
    for sentence in corpus:
        word_freq.update(pretokenize(sentence))
    words = {w: list(w) for w in word_freq}

    pair_freq: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = {}
    for w, syms in words.items():
        for pair in zip(syms, syms[1:]):
            pair_freq[pair] += word_freq[w]
            where.setdefault(pair, set()).add(w)

    learned: list[tuple[str, str]] = []
    while len(learned) < merges:
        best = None
        for pair, n in pair_freq.items():
            if n <= 0:
                continue
            if best is None or n > best[1] or (n == best[1] and pair < best[0]):
                best = (pair, n)
        if best is None or best[1] < 2:
            break
        pair = best[0]
        learned.append(pair)
        a, b = pair
        for w in list(where.get(pair, ())):
            syms = words[w]
            f = word_freq[w]
            for p in zip(syms, syms[1:]):
                pair_freq[p] -= f
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            words[w] = merged
            for p in zip(merged, merged[1:]):
                pair_freq[p] += f
                where.setdefault(p, set()).add(w)
        del pair_freq[pair]
        where.pop(pair, None)

    pieces = set()
    for syms in words.values():
        pieces.update(_mark(syms, marker))
    chars = {c for w in words for c in w}
    pieces.update(chars)
    pieces.update(c + marker for c in chars)
    return BpeModel(tuple(learned), Vocab("bpe", sorted(pieces)), marker)


def bpe_segment(model: BpeModel, text: str) -> list[str]:
    """Subword strings for ``text``; non-final pieces of a word carry the marker."""
    out = []
    ranks = model.ranks
    for word in pretokenize(text):
        out.extend(_mark(_merge_word(list(word), ranks), model.marker))
    return out


def bpe_apply(model: BpeModel, text: str) -> TokenSeq:
    return TokenSeq(tuple(model.vocab.lookup(p) for p in bpe_segment(model, text)), "bpe")


def bpe_decode(seq: TokenSeq | Iterable[int], model: BpeModel) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else tuple(seq)
    vocab, marker = model.vocab, model.marker
    words, current = [], ""
    for i in ids:
        if i in vocab.special_ids and i != vocab.unk_id:
            continue
        piece = "\ufffd" if i == vocab.unk_id else vocab.token_of[i]
        if piece.endswith(marker):
            current += piece[: -len(marker)]
        else:
            words.append(current + piece)
            current = ""
    if current:
        words.append(current)
    return detokenize(words)


# --- uniform front end ----------------------------------------------------------

class Tokenizer:
    """Scheme-agnostic encode/decode used by the pipeline."""

    def __init__(self, scheme: str, vocab: Vocab, bpe: BpeModel | None = None):
        if scheme == "bpe" and bpe is None:
            raise ValueError("bpe scheme needs a BpeModel")
        self.scheme = scheme
        self.vocab = vocab
        self.bpe = bpe

    @classmethod
    def byte(cls) -> "Tokenizer":
        return cls("byte", Vocab.byte())

    @classmethod
    def from_bpe(cls, model: BpeModel) -> "Tokenizer":
        return cls("bpe", model.vocab, model)

    def encode(self, text: str) -> TokenSeq:
        if self.scheme == "byte":
            return byte_encode(text)
        if self.scheme == "char":
            return char_encode(text, self.vocab)
        return bpe_apply(self.bpe, text)

    def decode(self, ids: Iterable[int]) -> DecodedText:
        if self.scheme == "byte":
            return byte_decode(ids)
        if self.scheme == "char":
            return DecodedText(char_decode(ids, self.vocab))
        return DecodedText(bpe_decode(ids, self.bpe))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "scheme.txt").write_text(self.scheme + "\n", encoding="utf-8")
        self.vocab.save(directory / f"vocab.{self.scheme}.txt")
        if self.bpe is not None:
            self.bpe.save(directory / "bpe.model")

    @classmethod
    def load(cls, directory, scheme: str | None = None) -> "Tokenizer":
        directory = Path(directory)
        if scheme is None:
            scheme = (directory / "scheme.txt").read_text(encoding="utf-8").strip()
        if scheme == "byte":
            return cls.byte()
        vocab = Vocab.load(directory / f"vocab.{scheme}.txt", scheme)
        bpe = BpeModel.load(directory / "bpe.model", vocab) if scheme == "bpe" else None
        return cls(scheme, vocab, bpe)


def build_tokenizer(scheme: str, sentences: Sequence[str], bpe_merges: int = 10_000) -> Tokenizer:
    """Fit a tokenizer on training sentences (both languages: vocabularies are shared)."""
    if scheme == "byte":
        return Tokenizer.byte()
    if scheme == "char":
        return Tokenizer("char", build_char_vocab(sentences))
    if scheme == "bpe":
        return Tokenizer.from_bpe(bpe_train(sentences, bpe_merges))
    raise ValueError(f"unknown scheme {scheme!r}")
