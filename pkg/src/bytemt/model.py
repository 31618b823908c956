"""Transformer encoder-decoder in embedding mode and embeddingless mode.

Embedding mode ties one matrix E (|V| x d) across encoder input, decoder
input and the output projection. Embeddingless mode feeds scaled one-hot
rows straight into the trunk and reads the decoder's last hidden state as
logits over all d dimensions; its only extra parameters are three scalars
(encoder input scale, decoder input scale, output scale).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MODES = ("embedding", "embeddingless")
NEG_INF = -1e9

Params = dict[str, np.ndarray]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "embeddingless"
    vocab_size: int = 260
    model_dim: int = 64
    ffn_dim: int = 128
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    token_dropout: float = 0.0
    max_len: int = 1024
    pad_id: int = 256
    bos_id: int = 257
    eos_id: int = 258
    positions: str = "sinusoidal"
    freeze_scales: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "embeddingless" and self.vocab_size > self.model_dim:
            raise ConfigError(
                f"embeddingless mode needs vocab_size <= model_dim ({self.vocab_size} > {self.model_dim})")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if not 0 <= self.dropout < 1 or not 0 <= self.token_dropout < 1:
            raise ConfigError("dropout rates must be in [0, 1)")
        if self.positions not in ("sinusoidal", "learned"):
            raise ConfigError("positions must be 'sinusoidal' or 'learned'")
        if min(self.layers, self.heads, self.model_dim, self.ffn_dim, self.max_len) < 1:
            raise ConfigError("sizes must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"model_dim": 512, "ffn_dim": 1024, "layers": 6, "heads": 4, **overrides})

    @property
    def output_dim(self) -> int:
        return self.vocab_size if self.mode == "embedding" else self.model_dim

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw in ("True", "true", "1")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


# --- parameters -------------------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {f"{prefix}.{w}": (d, d) for w in ("wq", "wk", "wv", "wo")} | {
        f"{prefix}.{b}": (d,) for b in ("bq", "bk", "bv", "bo")}


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple]:
    return {f"{prefix}.w1": (d, f), f"{prefix}.b1": (f,), f"{prefix}.w2": (f, d), f"{prefix}.b2": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def param_shapes(config: ModelConfig, mode: str | None = None) -> dict[str, tuple]:
    """Array shapes by name. ``mode`` overrides ``config.mode`` for accounting only."""
    d, f = config.model_dim, config.ffn_dim
    shapes: dict[str, tuple] = {}
    if (mode or config.mode) == "embedding":
        shapes["embed"] = (config.vocab_size, d)
    else:
        shapes.update({"scale.enc": (), "scale.dec_in": (), "scale.dec_out": ()})
    if config.positions == "learned":
        shapes["pos"] = (config.max_len, d)
    for i in range(config.layers):
        p = f"enc.{i}"
        shapes |= _attn_shapes(f"{p}.self", d) | _ln_shapes(f"{p}.ln1", d)
        shapes |= _ffn_shapes(f"{p}.ffn", d, f) | _ln_shapes(f"{p}.ln2", d)
    for i in range(config.layers):
        p = f"dec.{i}"
        shapes |= _attn_shapes(f"{p}.self", d) | _ln_shapes(f"{p}.ln1", d)
        shapes |= _attn_shapes(f"{p}.cross", d) | _ln_shapes(f"{p}.ln2", d)
        shapes |= _ffn_shapes(f"{p}.ffn", d, f) | _ln_shapes(f"{p}.ln3", d)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    dtype = np.dtype(config.dtype)
    d = config.model_dim
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("scale."):
            value = np.asarray(math.sqrt(d))
        elif name == "embed":
            value = rng.normal(0.0, d ** -0.5, shape)
        elif name == "pos":
            value = rng.normal(0.0, 0.02, shape)
        elif leaf.startswith("w"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = np.asarray(value, dtype=dtype)
    return params


def param_count(config: ModelConfig, mode: str | None = None) -> dict[str, int]:
    """Parameter counts per component, plus ``total``.

    ``mode`` counts the same trunk under the other input/output scheme, which
    also works for widths that could not run embeddingless (|V| > d).
    """
    if mode is not None and mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    counts: dict[str, int] = {}
    for name, shape in param_shapes(config, mode).items():
        part = name.split(".")[0]
        counts[part] = counts.get(part, 0) + int(np.prod(shape, dtype=np.int64))
    counts["total"] = sum(counts.values())
    return counts


def is_trainable(name: str, config: ModelConfig) -> bool:
    return not (config.freeze_scales and name.startswith("scale."))


# --- forward ----------------------------------------------------------------------

def one_hot(ids, d: int, pad_id: int | None = None, dtype=np.float64) -> np.ndarray:
    """Rows of the d x d identity for ``ids``; PAD rows are all zero."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.max() >= d or ids.min() < 0):
        raise ConfigError(f"token id {int(ids.max())} has no one-hot column in dimension {d}")
    out = np.zeros(ids.shape + (d,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    if pad_id is not None:
        out[ids == pad_id] = 0.0
    return out


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / np.asarray(1.0 - p, dtype=dtype)


def _dropout(x: Tensor, p: float, train: bool, rng) -> Tensor:
    if not train or p <= 0:
        return x
    return ag.mul(x, dropout_mask(x.shape, p, rng, x.data.dtype))


def token_dropout_mask(ids: np.ndarray, p: float, rng: np.random.Generator, pad_id: int, dtype) -> np.ndarray:
    """Per-row multiplier [..., 1] zeroing whole token rows (PAD rows stay 1; they are already zero)."""
    keep = (rng.random(ids.shape) >= p) | (ids == pad_id)
    scale = np.where(ids == pad_id, 1.0, 1.0 / (1.0 - p))
    return (keep * scale).astype(dtype)[..., None]


class Model:
    """Binds a config to a parameter dict and runs the forward pass on the tape.

    ``params`` arrays are never mutated here; ``leaves`` maps names to the
    Tensors of the last traced forward so callers can read gradients.
    """

    def __init__(self, config: ModelConfig, params: Params):
        self.config = config
        self.params = params
        self.leaves: dict[str, Tensor] = {}
        d = config.model_dim
        self._sinusoid = sinusoid_table(config.max_len, d).astype(config.dtype)

    def _p(self, name: str) -> Tensor:
        t = self.leaves.get(name)
        if t is None:
            t = Tensor(self.params[name], requires_grad=is_trainable(name, self.config))
            self.leaves[name] = t
        return t

    def track(self) -> None:
        """Fresh leaves for a new forward/backward."""
        self.leaves = {}

    def grads(self) -> Params:
        out = {}
        for name, value in self.params.items():
            leaf = self.leaves.get(name)
            g = None if leaf is None else leaf.grad
            out[name] = np.zeros_like(value) if g is None else np.asarray(g, dtype=value.dtype)
        return out

    # inputs ------------------------------------------------------------------

    def _positions(self, n: int) -> Tensor:
        if n > self.config.max_len:
            raise ConfigError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        if self.config.positions == "learned":
            return ag.reshape(ag.take_rows(self._p("pos"), np.arange(n)), (n, self.config.model_dim))
        return Tensor(self._sinusoid[:n])

    def _token_rows(self, ids: np.ndarray, scale_name: str) -> Tensor:
        """Scaled token representations, before positions are added."""
        cfg = self.config
        if cfg.mode == "embeddingless":
            x = one_hot(ids, cfg.model_dim, cfg.pad_id, dtype=cfg.dtype)
            return ag.mul(self._p(scale_name), x)
        rows = ag.take_rows(self._p("embed"), ids)
        keep = (ids != cfg.pad_id).astype(cfg.dtype)[..., None]
        factor = np.asarray(math.sqrt(cfg.model_dim), dtype=cfg.dtype)
        return ag.mul(rows, keep * factor)

    def encoder_input(self, ids, train: bool = False, rng=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        x = self._token_rows(ids, "scale.enc")
        x = ag.add(x, self._positions(ids.shape[-1]))
        if self.config.mode == "embedding":
            x = _dropout(x, self.config.dropout, train, rng)
        return x

    def decoder_input(self, ids, train: bool = False, rng=None, token_dropout: float | None = None) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        p_tok = cfg.token_dropout if token_dropout is None else token_dropout
        x = self._token_rows(ids, "scale.dec_in")
        if cfg.mode == "embeddingless":
            x = _dropout(x, cfg.dropout, train, rng)
        if train and p_tok > 0:
            x = ag.mul(x, token_dropout_mask(ids, p_tok, rng, cfg.pad_id, cfg.dtype))
        x = ag.add(x, self._positions(ids.shape[-1]))
        if cfg.mode == "embedding":
            x = _dropout(x, cfg.dropout, train, rng)
        return x

    # trunk -------------------------------------------------------------------

    def _attention(self, prefix: str, x: Tensor, memory: Tensor, bias: np.ndarray) -> Tensor:
        cfg = self.config
        h, d = cfg.heads, cfg.model_dim
        dh = d // h
        B, n, m = x.shape[0], x.shape[1], memory.shape[1]

        def project(inp, w, b, length):
            y = ag.add(ag.matmul(inp, self._p(f"{prefix}.{w}")), self._p(f"{prefix}.{b}"))
            return ag.transpose(ag.reshape(y, (B, length, h, dh)), (0, 2, 1, 3))

        q = project(x, "wq", "bq", n)
        k = project(memory, "wk", "bk", m)
        v = project(memory, "wv", "bv", m)
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), np.asarray(dh ** -0.5, dtype=cfg.dtype))
        weights = ag.softmax(ag.add(scores, bias))
        ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (B, n, d))
        return ag.add(ag.matmul(ctx, self._p(f"{prefix}.wo")), self._p(f"{prefix}.bo"))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hidden = ag.relu(ag.add(ag.matmul(x, self._p(f"{prefix}.w1")), self._p(f"{prefix}.b1")))
        return ag.add(ag.matmul(hidden, self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def _sublayer(self, x: Tensor, out: Tensor, ln: str, train: bool, rng) -> Tensor:
        y = ag.add(x, _dropout(out, self.config.dropout, train, rng))
        return ag.layer_norm(y, self._p(f"{ln}.g"), self._p(f"{ln}.b"))

    def _key_bias(self, mask: np.ndarray) -> np.ndarray:
        return np.where(mask, 0.0, NEG_INF).astype(self.config.dtype)[:, None, None, :]

    def encode(self, src_ids, src_mask, train: bool = False, rng=None) -> Tensor:
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        src_mask = np.atleast_2d(np.asarray(src_mask, dtype=bool))
        x = self.encoder_input(src_ids, train, rng)
        bias = self._key_bias(src_mask)
        for i in range(self.config.layers):
            p = f"enc.{i}"
            x = self._sublayer(x, self._attention(f"{p}.self", x, x, bias), f"{p}.ln1", train, rng)
            x = self._sublayer(x, self._ffn(f"{p}.ffn", x), f"{p}.ln2", train, rng)
        return x

    def decode(self, memory: Tensor, src_mask, tgt_in, tgt_mask, train: bool = False, rng=None,
               token_dropout: float | None = None) -> Tensor:
        cfg = self.config
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        tgt_mask = np.atleast_2d(np.asarray(tgt_mask, dtype=bool))
        src_mask = np.atleast_2d(np.asarray(src_mask, dtype=bool))
        n = tgt_in.shape[1]
        y = self.decoder_input(tgt_in, train, rng, token_dropout)
        causal = np.triu(np.full((n, n), NEG_INF), k=1).astype(cfg.dtype)
        self_bias = self._key_bias(tgt_mask) + causal[None, None]
        cross_bias = self._key_bias(src_mask)
        for i in range(cfg.layers):
            p = f"dec.{i}"
            y = self._sublayer(y, self._attention(f"{p}.self", y, y, self_bias), f"{p}.ln1", train, rng)
            y = self._sublayer(y, self._attention(f"{p}.cross", y, memory, cross_bias), f"{p}.ln2", train, rng)
            y = self._sublayer(y, self._ffn(f"{p}.ffn", y), f"{p}.ln3", train, rng)
        # no dropout on the output head in either mode
        if cfg.mode == "embeddingless":
            return ag.mul(self._p("scale.dec_out"), y)
        return ag.matmul(y, ag.transpose(self._p("embed"), (1, 0)))

    def forward(self, src_ids, src_mask, tgt_in, tgt_mask, train: bool = False, rng=None,
                token_dropout: float | None = None) -> Tensor:
        """Logits [B, n_tgt, C]; C = |V| in embedding mode, d in embeddingless mode."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        tgt_in = np.atleast_2d(np.asarray(tgt_in))
        if src_ids.shape[0] != tgt_in.shape[0]:
            raise ValueError(f"batch size mismatch: {src_ids.shape[0]} sources, {tgt_in.shape[0]} targets")
        if np.shape(src_mask) != src_ids.shape and np.shape(np.atleast_2d(src_mask)) != src_ids.shape:
            raise ValueError("source mask shape does not match source ids")
        if np.shape(np.atleast_2d(tgt_mask)) != tgt_in.shape:
            raise ValueError("target mask shape does not match target ids")
        if train and rng is None and (self.config.dropout > 0 or (token_dropout or self.config.token_dropout) > 0):
            raise ValueError("training forward with dropout needs an rng")
        memory = self.encode(src_ids, src_mask, train, rng)
        return self.decode(memory, src_mask, tgt_in, tgt_mask, train, rng, token_dropout)


def transformer_forward(src_ids, src_mask, tgt_in, tgt_mask, params: Params, config: ModelConfig,
                        train: bool = False, rng=None) -> np.ndarray:
    """Functional forward returning plain logits (no graph kept)."""
    with ag.no_grad():
        return Model(config, params).forward(src_ids, src_mask, tgt_in, tgt_mask, train, rng).data


# --- loss ------------------------------------------------------------------------

def smoothed_targets(gold: np.ndarray, num_classes: int, valid_vocab: int, epsilon: float,
                     dtype=np.float64) -> np.ndarray:
    """(1 - eps) on gold, eps / (valid_vocab - 1) on other valid ids, 0 on ids >= valid_vocab."""
    q = np.zeros(gold.shape + (num_classes,), dtype=dtype)
    if valid_vocab > 1:
        q[..., :valid_vocab] = epsilon / (valid_vocab - 1)
        np.put_along_axis(q, gold[..., None], 1.0 - epsilon, axis=-1)
    else:
        np.put_along_axis(q, gold[..., None], 1.0, axis=-1)
    return q


def label_smoothed_loss(logits: Tensor, gold, mask, valid_vocab: int, epsilon: float = 0.1) -> tuple[Tensor, int]:
    """Mean smoothed cross-entropy over non-PAD positions, and their count.

    The softmax normalises over every logit column, including embeddingless
    columns past ``valid_vocab`` that never receive target mass.
    """
    gold = np.asarray(gold, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    ntok = int(mask.sum())
    if ntok == 0:
        raise ValueError("batch has no non-PAD target tokens")
    if gold[mask].max() >= valid_vocab:
        raise ValueError("gold id outside the valid vocabulary")
    logp = ag.log_softmax(logits)
    q = smoothed_targets(np.where(mask, gold, 0), logp.shape[-1], valid_vocab, epsilon, logp.data.dtype)
    weights = q * (mask[..., None] / -ntok).astype(logp.data.dtype)
    return ag.total(ag.mul(logp, weights)), ntok


def decode_mask(config: ModelConfig, valid_vocab: int | None = None) -> np.ndarray:
    """Additive mask over output columns: -inf on ids that may not be generated."""
    valid_vocab = config.vocab_size if valid_vocab is None else valid_vocab
    mask = np.zeros(config.output_dim)
    mask[valid_vocab:] = -np.inf
    mask[[config.pad_id, config.bos_id]] = -np.inf
    return mask
