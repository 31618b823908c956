"""End-to-end pipeline steps behind the CLI: prepare, train, evaluate, ablate."""

from __future__ import annotations

import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .corpus import (CleaningReport, ParallelCorpus, batch_by_bytes, clean_corpus, load_parallel,
                     split_corpus, write_lines)
from .decoding import translate_lines
from .evaluation import corpus_bleu
from .model import Model
from .tokenization import Tokenizer, build_tokenizer
from .training import TrainResult, train_loop, validation_loss

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass
class PrepareSummary:
    train: int
    valid: int
    test: int
    removed: int
    schemes: tuple[str, ...]


def _write_split(out: Path, name: str, corpus: ParallelCorpus) -> None:
    write_lines(out / f"{name}.src", corpus.sources)
    write_lines(out / f"{name}.tgt", corpus.targets)


def prepare_data(src, tgt, out_dir, seed: int = 1, max_bytes: int = 800, drop_fraction: float = 0.05,
                 schemes: Sequence[str] = ("byte", "char", "bpe"), bpe_merges: int = 10_000,
                 valid: tuple | None = None, test: tuple | None = None) -> PrepareSummary:
    """Clean the training pairs, split, and fit one shared tokenizer per scheme.

    Without explicit ``valid``/``test`` file pairs the corpus is split
    98/1/1 with ``seed`` first, and only the training part is cleaned.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_parallel(src, tgt)
    if valid is None or test is None:
        train, dev, tst = split_corpus(corpus, seed)
    else:
        train, dev, tst = corpus, load_parallel(*valid), load_parallel(*test)
    report = CleaningReport(len(train))
    cleaned = clean_corpus(train, max_bytes, drop_fraction, report)
    report.write(out / "clean_report.txt")
    for name, part in zip(SPLITS, (cleaned, dev, tst)):
        _write_split(out, name, part)
    sentences = cleaned.sources + cleaned.targets
    for scheme in schemes:
        build_tokenizer(scheme, sentences, bpe_merges).save(out / "tokenizers" / scheme)
    (out / "languages.txt").write_text(f"{corpus.src_lang}\t{corpus.tgt_lang}\n", encoding="utf-8")
    return PrepareSummary(len(cleaned), len(dev), len(tst), len(report.removed), tuple(schemes))


def load_split(data_dir, name: str) -> ParallelCorpus:
    data_dir = Path(data_dir)
    return load_parallel(data_dir / f"{name}.src", data_dir / f"{name}.tgt", drop_empty=False)


def load_tokenizer(data_dir, scheme: str) -> Tokenizer:
    return Tokenizer.load(Path(data_dir) / "tokenizers" / scheme, scheme)


@dataclass
class RunOutcome:
    result: TrainResult
    tokenizer: Tokenizer
    valid_loss: float


def run_training(run: RunConfig, out_dir, data_dir=None) -> RunOutcome:
    data_dir = Path(data_dir or run["data_dir"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = load_tokenizer(data_dir, run["scheme"])
    config = run.model_config(tokenizer.vocab)
    train_cfg = run.train_config()
    (out / "run.cfg").write_text(run.to_text(), encoding="utf-8")
    tokenizer.save(out / "tokenizer")

    budget = run["batch_bytes"]
    train_batches = batch_by_bytes(load_split(data_dir, "train"), tokenizer.encode, tokenizer.vocab, budget)
    valid_batches = batch_by_bytes(load_split(data_dir, "valid"), tokenizer.encode, tokenizer.vocab, budget)
    meta = {"scheme": run["scheme"], "label": run.label}
    result = train_loop(config, train_batches, valid_batches, train_cfg, out_dir=out, meta=meta)
    vloss = validation_loss(config, result.averaged.params, valid_batches, train_cfg.label_smoothing)
    return RunOutcome(result, tokenizer, vloss)


def bleu_tokenizer_for(lang: str) -> str:
    # no word tokenizer for these scripts here; score on characters instead
    return "char" if lang in ("zh", "ja") else "13a"


def evaluate_checkpoint(ckpt: Checkpoint, tokenizer: Tokenizer, corpus: ParallelCorpus,
                        bleu_tokenizer: str = "13a", beam_size: int = 1):
    hyps = translate_lines(Model(ckpt.config, ckpt.params), tokenizer, corpus.sources, beam_size=beam_size)
    return hyps, corpus_bleu(hyps, corpus.targets, bleu_tokenizer)


# --- ablation grid ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    data_dir: str
    schemes: tuple[str, ...] = ("byte", "byte-embeddingless")
    dropouts: tuple[float, ...] = (0.2,)
    token_dropouts: tuple[float, ...] = (0.0, 0.2)
    seeds: tuple[int, ...] = (1,)
    overrides: tuple[tuple[str, str], ...] = ()
    direction: str = "src-tgt"
    beam_size: int = 1

    def __post_init__(self):
        for name in ("schemes", "dropouts", "token_dropouts", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"empty {name} grid")
        unknown = set(self.schemes) - {"bpe", "char", "byte", "byte-embeddingless"}
        if unknown:
            raise ValueError(f"unknown schemes: {sorted(unknown)}")

    def cells(self) -> list[dict]:
        cells = []
        for scheme in self.schemes:
            for p in self.dropouts:
                for p_tok in self.token_dropouts:
                    for seed in self.seeds:
                        run_id = f"{scheme}_d{p:g}_t{p_tok:g}_s{seed}"
                        cells.append(dict(run_id=run_id, scheme=scheme, dropout=p, token_dropout=p_tok, seed=seed))
        ids = [c["run_id"] for c in cells]
        if len(set(ids)) != len(ids):
            raise ValueError("grid has duplicate run ids")
        return cells


@dataclass
class CellResult:
    run_id: str
    scheme: str
    dropout: float
    token_dropout: float
    seed: int
    status: str = "ok"
    valid_loss: float = math.nan
    bleu: float = math.nan
    error: str = ""


def cell_run_config(spec: ExperimentSpec, cell: dict) -> RunConfig:
    return RunConfig.build(dict(spec.overrides), {
        "data_dir": spec.data_dir, "scheme": cell["scheme"], "dropout": str(cell["dropout"]),
        "token_dropout": str(cell["token_dropout"]), "seed": str(cell["seed"]),
    })


def check_cells(spec: ExperimentSpec) -> None:
    """Build every cell's model config up front so a bad grid fails before any training."""
    for cell in spec.cells():
        run = cell_run_config(spec, cell)
        run.model_config(load_tokenizer(spec.data_dir, run["scheme"]).vocab)


def run_cell(spec: ExperimentSpec, cell: dict, out_dir: str) -> CellResult:
    res = CellResult(cell["run_id"], cell["scheme"], cell["dropout"], cell["token_dropout"], cell["seed"])
    cell_dir = Path(out_dir) / cell["run_id"]
    try:
        if cell_dir.exists():
            shutil.rmtree(cell_dir)
        run = cell_run_config(spec, cell)
        outcome = run_training(run, cell_dir)
        test = load_split(spec.data_dir, "test")
        lang_file = Path(spec.data_dir) / "languages.txt"
        tgt_lang = lang_file.read_text(encoding="utf-8").split()[1] if lang_file.exists() else "tgt"
        hyps, report = evaluate_checkpoint(outcome.result.averaged, outcome.tokenizer, test,
                                           bleu_tokenizer_for(tgt_lang), spec.beam_size)
        write_lines(cell_dir / "test.hyp", hyps)
        res.valid_loss = outcome.valid_loss
        res.bleu = report.bleu
    except Exception as err:  # a failed cell is reported, the grid goes on
        log.exception("cell %s failed", cell["run_id"])
        res.status = "failed"
        res.error = f"{type(err).__name__}: {err}".replace("\t", " ").replace("\n", " ")
    return res


def run_grid(spec: ExperimentSpec, out_dir, workers: int = 1) -> list[CellResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    if workers <= 1:
        return [run_cell(spec, c, str(out)) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, [spec] * len(cells), cells, [str(out)] * len(cells)))


@dataclass
class GainRow:
    scheme: str
    bleu_gain: float
    valid_loss_gain: float
    pairs: int = 0
    per_dropout: dict = field(default_factory=dict)


def token_dropout_gains(results: Sequence[CellResult], baseline: float = 0.0) -> list[GainRow]:
    """BLEU(p_tok) - BLEU(baseline p_tok) per scheme, averaged over dropout values and seeds.

    Valid-loss gain is reported as baseline minus treated, so positive is better
    in both columns. Only cells whose partner also succeeded contribute.
    """
    index = {(r.scheme, r.dropout, r.token_dropout, r.seed): r for r in results}
    rows = []
    for scheme in dict.fromkeys(r.scheme for r in results):
        bleu_d, loss_d, per_dropout = [], [], {}
        for r in results:
            if r.scheme != scheme or r.token_dropout == baseline or r.status != "ok":
                continue
            base = index.get((scheme, r.dropout, baseline, r.seed))
            if base is None or base.status != "ok":
                continue
            bleu_d.append(r.bleu - base.bleu)
            loss_d.append(base.valid_loss - r.valid_loss)
            per_dropout.setdefault(r.dropout, []).append(r.bleu - base.bleu)
        rows.append(GainRow(
            scheme,
            float(np.mean(bleu_d)) if bleu_d else math.nan,
            float(np.mean(loss_d)) if loss_d else math.nan,
            len(bleu_d),
            {p: float(np.mean(v)) for p, v in per_dropout.items()},
        ))
    return rows


def _fmt(x: float, signed: bool = False) -> str:
    if math.isnan(x):
        return "n/a"
    return f"{x:+.2f}" if signed else f"{x:.4f}"


def cell_deltas(results: Sequence[CellResult], baseline: float = 0.0) -> dict[str, tuple[float, float]]:
    """run_id -> (BLEU delta, valid-loss delta) against the same cell without token dropout."""
    index = {(r.scheme, r.dropout, r.token_dropout, r.seed): r for r in results}
    out = {}
    for r in results:
        base = index.get((r.scheme, r.dropout, baseline, r.seed))
        if base is None or base.status != "ok" or r.status != "ok":
            out[r.run_id] = (math.nan, math.nan)
        else:
            out[r.run_id] = (r.bleu - base.bleu, base.valid_loss - r.valid_loss)
    return out


def format_results(results: Sequence[CellResult]) -> str:
    deltas = cell_deltas(results)
    lines = ["run_id\tscheme\tdropout\ttoken_dropout\tseed\tstatus\tvalid_loss\tbleu"
             "\tdelta_bleu\tdelta_valid_loss\terror"]
    for r in results:
        db, dl = deltas[r.run_id]
        lines.append(f"{r.run_id}\t{r.scheme}\t{r.dropout:g}\t{r.token_dropout:g}\t{r.seed}\t{r.status}\t"
                     f"{_fmt(r.valid_loss)}\t{_fmt(r.bleu)}\t{_fmt(db, True)}\t{_fmt(dl, True)}\t{r.error}")
    return "\n".join(lines)


def format_gains(gains: Sequence[GainRow], direction: str) -> str:
    """Gain table: one row per direction, one ``+x.xx`` column per scheme."""
    header = "direction\t" + "\t".join(g.scheme for g in gains)
    bleu = f"{direction} (BLEU)\t" + "\t".join(_fmt(g.bleu_gain, True) for g in gains)
    loss = f"{direction} (valid loss)\t" + "\t".join(_fmt(g.valid_loss_gain, True) for g in gains)
    return "\n".join([header, bleu, loss])


def ablate(spec: ExperimentSpec, out_dir, workers: int = 1) -> tuple[list[CellResult], list[GainRow]]:
    results = run_grid(spec, out_dir, workers)
    gains = token_dropout_gains(results)
    out = Path(out_dir)
    (out / "results.tsv").write_text(format_results(results) + "\n", encoding="utf-8")
    (out / "gains.tsv").write_text(format_gains(gains, spec.direction) + "\n", encoding="utf-8")
    return results, gains
