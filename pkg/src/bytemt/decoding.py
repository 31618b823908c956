"""Greedy and beam-search generation.

Both searches are written against a ``step_fn(prefixes) -> log-probs`` so
they can be checked on hand-built distributions as well as real models.
Ids the model may not emit (PAD, BOS, and embeddingless columns past the
vocabulary) get -inf before the argmax/top-k.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .corpus import read_lines, write_lines
from .model import Model, decode_mask
from .tokenization import TokenSeq, Tokenizer

_LINE_BREAKS = re.compile("[\n\r\v\f\x1c-\x1e\x85\u2028\u2029]")

StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool = False

    def normalized(self, alpha: float) -> float:
        return self.score / max(len(self.ids), 1) ** alpha


@dataclass
class DecodeResult:
    ids: tuple[int, ...]  # without BOS/EOS
    score: float
    truncated: bool


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 16


def greedy_search(step_fn: StepFn, eos: int, max_len: int) -> DecodeResult:
    out: list[int] = []
    score = 0.0
    for _ in range(max_len):
        logp = step_fn([tuple(out)])[0]
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        if tok == eos:
            return DecodeResult(tuple(out), score, False)
        out.append(tok)
    return DecodeResult(tuple(out), score, True)


def beam_search(step_fn: StepFn, eos: int, beam_size: int, max_len: int, alpha: float = 1.0) -> DecodeResult:
    """Standard beam search; the winner maximises score / len**alpha.

    Length counts generated tokens including the final EOS. Search stops
    once ``beam_size`` hypotheses have finished or ``max_len`` is reached.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live = [BeamHypothesis((), 0.0)]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        logp = step_fn([h.ids for h in live])
        candidates = []
        for h, row in zip(live, logp):
            k = min(2 * beam_size, np.isfinite(row).sum())
            top = np.argsort(-row, kind="stable")[:k]
            candidates += [(h.score + float(row[t]), int(t), h) for t in top]
        candidates.sort(key=lambda c: -c[0])
        live = []
        for rank, (score, tok, parent) in enumerate(candidates):
            if tok == eos:
                if rank < beam_size:
                    finished.append(BeamHypothesis(parent.ids + (tok,), score, True))
            elif len(live) < beam_size:
                live.append(BeamHypothesis(parent.ids + (tok,), score))
            if len(live) >= beam_size and rank >= beam_size:
                break
        if len(finished) >= beam_size or not live:
            break
    pool = finished or live
    best = max(pool, key=lambda h: h.normalized(alpha))
    ids = best.ids[:-1] if best.finished else best.ids
    return DecodeResult(ids, best.score, not best.finished)


class Translator:
    """Decodes with one model; encoder memory is computed once per sentence."""

    def __init__(self, model: Model, valid_vocab: int | None = None):
        self.model = model
        self.config = model.config
        self.mask = decode_mask(model.config, valid_vocab)

    def _src_arrays(self, src: Sequence[int]):
        ids = np.array([list(src) + [self.config.eos_id]], dtype=np.int64)
        return ids, np.ones_like(ids, dtype=bool)

    def step_fn(self, src: Sequence[int]) -> StepFn:
        src_ids, src_mask = self._src_arrays(src)
        with ag.no_grad():
            memory = self.model.encode(src_ids, src_mask)
        bos = self.config.bos_id

        def step(prefixes):
            k = len(prefixes)
            tgt = np.array([(bos,) + p for p in prefixes], dtype=np.int64)
            mem = ag.Tensor(np.repeat(memory.data, k, axis=0))
            with ag.no_grad():
                logits = self.model.decode(mem, np.repeat(src_mask, k, axis=0), tgt,
                                           np.ones_like(tgt, dtype=bool)).data[:, -1, :]
            return _masked_log_softmax(logits.astype(np.float64), self.mask)

        return step

    def greedy(self, src: Sequence[int], max_len: int | None = None) -> DecodeResult:
        max_len = default_max_len(len(src)) if max_len is None else max_len
        return greedy_search(self.step_fn(src), self.config.eos_id, max_len)

    def beam(self, src: Sequence[int], beam_size: int = 5, max_len: int | None = None,
             alpha: float = 1.0) -> DecodeResult:
        max_len = default_max_len(len(src)) if max_len is None else max_len
        return beam_search(self.step_fn(src), self.config.eos_id, beam_size, max_len, alpha)

    def greedy_batch(self, sources: Sequence[Sequence[int]], max_len: int | None = None) -> list[DecodeResult]:
        """Greedy decoding of many sentences at once.

        Agrees with :meth:`greedy` except where padding reorders float sums
        enough to flip a near-tie.
        """
        if not sources:
            return []
        cfg = self.config
        src = [list(s) + [cfg.eos_id] for s in sources]
        width = max(len(s) for s in src)
        src_ids = np.full((len(src), width), cfg.pad_id, dtype=np.int64)
        for i, s in enumerate(src):
            src_ids[i, :len(s)] = s
        src_mask = src_ids != cfg.pad_id
        limits = [default_max_len(len(s)) if max_len is None else max_len for s in sources]
        with ag.no_grad():
            memory = self.model.encode(src_ids, src_mask)
        B = len(src)
        tgt = np.full((B, 1), cfg.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        scores = np.zeros(B)
        outputs: list[list[int]] = [[] for _ in range(B)]
        truncated = np.ones(B, dtype=bool)
        for t in range(max(limits)):
            with ag.no_grad():
                logits = self.model.decode(memory, src_mask, tgt, np.ones_like(tgt, dtype=bool)).data[:, -1, :]
            logp = _masked_log_softmax(logits.astype(np.float64), self.mask)
            nxt = logp.argmax(axis=-1)
            for i in range(B):
                if done[i]:
                    continue
                if t >= limits[i]:
                    done[i] = True
                    continue
                scores[i] += logp[i, nxt[i]]
                if nxt[i] == cfg.eos_id:
                    done[i] = True
                    truncated[i] = False
                else:
                    outputs[i].append(int(nxt[i]))
            if done.all():
                break
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
        return [DecodeResult(tuple(o), float(s), bool(tr)) for o, s, tr in zip(outputs, scores, truncated)]


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = logits + mask
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(model: Model, src: TokenSeq | Sequence[int], max_len: int | None = None) -> DecodeResult:
    return Translator(model).greedy(tuple(src), max_len)


def beam_decode(model: Model, src: TokenSeq | Sequence[int], beam_size: int = 5, max_len: int | None = None,
                alpha: float = 1.0) -> DecodeResult:
    return Translator(model).beam(tuple(src), beam_size, max_len, alpha)


@dataclass
class TranslateStats:
    lines: int = 0
    malformed: int = 0
    truncated: int = 0


def translate_lines(model: Model, tokenizer: Tokenizer, lines: Sequence[str], beam_size: int = 1,
                    alpha: float = 1.0, max_len: int | None = None, batch_size: int = 64,
                    stats: TranslateStats | None = None) -> list[str]:
    translator = Translator(model)
    stats = stats if stats is not None else TranslateStats()
    encoded = [tokenizer.encode(line).ids for line in lines]
    results: list[DecodeResult] = []
    if beam_size == 1:
        for start in range(0, len(encoded), batch_size):
            results += translator.greedy_batch(encoded[start:start + batch_size], max_len)
    else:
        results = [translator.beam(src, beam_size, max_len, alpha) for src in encoded]
    out = []
    for r in results:
        text = tokenizer.decode(r.ids)
        stats.lines += 1
        stats.malformed += int(getattr(text, "malformed", False))
        stats.truncated += int(r.truncated)
        out.append(_LINE_BREAKS.sub(" ", str(text)))
    return out


def translate_file(model: Model, tokenizer: Tokenizer, in_path, out_path, beam_size: int = 1,
                   alpha: float = 1.0, max_len: int | None = None) -> int:
    """Translate ``in_path`` line by line into ``out_path``; returns the line count."""
    lines = read_lines(in_path)
    stats = TranslateStats()
    out = translate_lines(model, tokenizer, lines, beam_size, alpha, max_len, stats=stats)
    write_lines(Path(out_path), out)
    return stats.lines
