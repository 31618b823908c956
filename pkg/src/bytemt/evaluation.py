"""Corpus BLEU (case-sensitive, no smoothing) and per-scheme length statistics."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .tokenization import Tokenizer

NGRAM_ORDER = 4

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),   # period/comma unless preceded by a digit
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),   # ... unless followed by a digit
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),        # dash after a digit
]


def tokenize_13a(text: str) -> list[str]:
    """mteval-v13a tokenization, case preserved."""
    line = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def tokenize_char(text: str) -> list[str]:
    """Character-level BLEU tokens (whitespace dropped) for scripts without a word tokenizer."""
    return [c for c in text if not c.isspace()]


BLEU_TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "13a": tokenize_13a,
    "char": tokenize_char,
    "none": str.split,
}


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    tokenizer: str
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def line(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return (f"bleu={self.bleu:.2f} precisions={p} bp={self.brevity_penalty:.4f} "
                f"hyp_len={self.hyp_len} ref_len={self.ref_len} tokenizer={self.tokenizer}")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str], tokenizer: str = "13a") -> BleuReport:
    """Corpus-level 4-gram BLEU: clipped counts summed over lines, then combined.

    A zero precision at any order gives BLEU 0 (no smoothing).
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    tok = BLEU_TOKENIZERS[tokenizer]
    matches = [0] * NGRAM_ORDER
    totals = [0] * NGRAM_ORDER
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = tok(h), tok(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, NGRAM_ORDER + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / NGRAM_ORDER)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len, tokenizer, tuple(matches), tuple(totals))


def corpus_stats(sentences: Mapping[str, Sequence[str]], tokenizers: Mapping[str, Tokenizer]) -> dict[str, dict[str, float]]:
    """Mean tokens per sentence, ``{side: {scheme: mean}}``."""
    table: dict[str, dict[str, float]] = {}
    for side, lines in sentences.items():
        row = {}
        for scheme, tk in tokenizers.items():
            row[scheme] = sum(len(tk.encode(s)) for s in lines) / len(lines) if lines else 0.0
        table[side] = row
    return table


def format_stats(table: Mapping[str, Mapping[str, float]]) -> str:
    schemes = list(next(iter(table.values())).keys()) if table else []
    lines = ["side\t" + "\t".join(schemes)]
    for side, row in table.items():
        lines.append(side + "\t" + "\t".join(f"{row[s]:.1f}" for s in schemes))
    return "\n".join(lines)
