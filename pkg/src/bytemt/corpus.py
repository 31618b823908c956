"""Parallel corpus loading, cleaning, splitting and byte-budget batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tokenization import TokenSeq, Vocab


class CorpusError(ValueError):
    """Bad input data (unreadable lines, misaligned files, impossible budgets)."""


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[tuple[str, str], ...]
    src_lang: str = "src"
    tgt_lang: str = "tgt"

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((s, t) for s, t in self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]

    def subset(self, indices) -> "ParallelCorpus":
        return ParallelCorpus(tuple(self.pairs[i] for i in indices), self.src_lang, self.tgt_lang)


def read_lines(path) -> list[str]:
    """UTF-8 lines of ``path`` without line terminators; bad bytes name the line."""
    lines = []
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, 1):
            try:
                lines.append(raw.decode("utf-8").rstrip("\r\n"))
            except UnicodeDecodeError as err:
                raise CorpusError(f"{path}:{lineno}: invalid UTF-8 ({err.reason})") from None
    return lines


def write_lines(path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def load_parallel(src_path, tgt_path, src_lang: str | None = None, tgt_lang: str | None = None,
                  drop_empty: bool = True) -> ParallelCorpus:
    src_path, tgt_path = Path(src_path), Path(tgt_path)
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise CorpusError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    pairs = [(s, t) for s, t in zip(src, tgt) if not drop_empty or (s.strip() and t.strip())]
    return ParallelCorpus(
        tuple(pairs),
        src_lang or src_path.suffix.lstrip(".") or "src",
        tgt_lang or tgt_path.suffix.lstrip(".") or "tgt",
    )


@dataclass
class CleaningReport:
    original_size: int
    removed: list[tuple[int, str]] = field(default_factory=list)  # (0-based line, reason)

    @property
    def kept(self) -> int:
        return self.original_size - len(self.removed)

    def write(self, path) -> None:
        lines = [f"# original={self.original_size} removed={len(self.removed)} kept={self.kept}"]
        lines += [f"{i + 1}\t{reason}" for i, reason in sorted(self.removed)]
        write_lines(path, lines)


def _nbytes(s: str) -> int:
    return len(s.encode("utf-8"))


def byte_ratio(src: str, tgt: str) -> float:
    a, b = _nbytes(src), _nbytes(tgt)
    lo, hi = min(a, b), max(a, b)
    if lo == 0:
        return math.inf
    return hi / lo


def clean_corpus(corpus: ParallelCorpus, max_bytes: int = 800, drop_fraction: float = 0.05,
                 report: CleaningReport | None = None) -> ParallelCorpus:
    """Drop over-long pairs, then the worst byte-length-ratio pairs.

    The total removed by both stages is ``ceil(drop_fraction * len(corpus))``
    unless the length filter alone already removes more. Ratio ties go to
    the earlier line.
    """
    if not 0 <= drop_fraction < 1:
        raise ValueError("drop_fraction must be in [0, 1)")
    n = len(corpus)
    if n < 2:
        raise CorpusError("cleaning needs at least 2 sentence pairs")
    if report is None:
        report = CleaningReport(n)
    target = math.ceil(drop_fraction * n)

    survivors = []
    for i, (s, t) in enumerate(corpus.pairs):
        if _nbytes(s) > max_bytes or _nbytes(t) > max_bytes:
            report.removed.append((i, f"length>{max_bytes}"))
        else:
            survivors.append(i)

    extra = max(0, target - len(report.removed))
    if extra:
        ranked = sorted(survivors, key=lambda i: (-byte_ratio(*corpus.pairs[i]), i))
        dropped = set(ranked[:extra])
        for i in ranked[:extra]:
            report.removed.append((i, f"ratio={byte_ratio(*corpus.pairs[i]):.4g}"))
        survivors = [i for i in survivors if i not in dropped]
    return corpus.subset(survivors)


def split_corpus(corpus: ParallelCorpus, seed: int, valid_fraction: float = 0.01,
                 test_fraction: float = 0.01) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Seeded train/valid/test split (98/1/1 by default), each part in original order."""
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, round(valid_fraction * n)) if n >= 3 else 0
    n_test = max(1, round(test_fraction * n)) if n >= 3 else 0
    valid = sorted(order[:n_valid].tolist())
    test = sorted(order[n_valid:n_valid + n_test].tolist())
    train = sorted(order[n_valid + n_test:].tolist())
    return corpus.subset(train), corpus.subset(valid), corpus.subset(test)


# --- batches ----------------------------------------------------------------------

@dataclass
class Batch:
    src_ids: np.ndarray   # [B, n_src], source + EOS
    src_mask: np.ndarray  # True on real tokens
    tgt_in: np.ndarray    # [B, n_tgt], BOS + target
    tgt_out: np.ndarray   # [B, n_tgt], target + EOS
    tgt_mask: np.ndarray
    byte_cost: int = 0
    indices: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise ValueError("nothing to pad")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, :len(s)] = list(s)
    mask = np.arange(width)[None, :] < np.array([len(s) for s in seqs])[:, None]
    return ids, mask


def pad_batch(src_seqs, tgt_seqs, vocab: Vocab, byte_cost: int = 0, indices=()) -> Batch:
    """Right-pad a batch; targets become (BOS + y) inputs and (y + EOS) outputs."""
    src = [tuple(s) + (vocab.eos_id,) for s in src_seqs]
    tgt_in = [(vocab.bos_id,) + tuple(t) for t in tgt_seqs]
    tgt_out = [tuple(t) + (vocab.eos_id,) for t in tgt_seqs]
    src_ids, src_mask = pad_sequences(src, vocab.pad_id)
    tin, tgt_mask = pad_sequences(tgt_in, vocab.pad_id)
    tout, _ = pad_sequences(tgt_out, vocab.pad_id)
    return Batch(src_ids, src_mask, tin, tout, tgt_mask, byte_cost, tuple(indices))


def pair_byte_cost(src: str, tgt: str) -> int:
    return max(_nbytes(src), _nbytes(tgt))


def batch_by_bytes(corpus: ParallelCorpus, encode: Callable[[str], TokenSeq], vocab: Vocab,
                   budget_bytes: int = 64_000, rng: np.random.Generator | None = None) -> list[Batch]:
    """Greedily pack pairs into batches whose summed byte cost fits the budget.

    A pair costs max(source bytes, target bytes) of raw UTF-8, whatever the
    tokenization, and pairs are ordered by that cost (ties by line), so every
    scheme sees the same batch partition. Pass ``rng`` to shuffle batch order.
    """
    costs = [pair_byte_cost(s, t) for s, t in corpus.pairs]
    for i, c in enumerate(costs):
        if c > budget_bytes:
            raise CorpusError(f"pair {i + 1} costs {c} bytes, over the {budget_bytes}-byte budget")
    order = sorted(range(len(corpus)), key=lambda i: (costs[i], i))
    groups: list[list[int]] = []
    used = 0
    for i in order:
        if not groups or used + costs[i] > budget_bytes:
            groups.append([])
            used = 0
        groups[-1].append(i)
        used += costs[i]
    batches = []
    for g in groups:
        src = [encode(corpus.pairs[i][0]).ids for i in g]
        tgt = [encode(corpus.pairs[i][1]).ids for i in g]
        batches.append(pad_batch(src, tgt, vocab, sum(costs[i] for i in g), g))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches
