"""Independent reference computations shared by the test modules."""

import numpy as np

from bytemt.corpus import pad_sequences
from bytemt.model import Model, ModelConfig, init_params, label_smoothed_loss


def tiny_config(mode, **kw):
    base = dict(mode=mode, vocab_size=8, model_dim=8, ffn_dim=12, layers=1, heads=2, dropout=0.0,
                max_len=16, pad_id=0, bos_id=1, eos_id=2, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch():
    src, sm = pad_sequences([[3, 4, 5, 2], [6, 2]], 0)
    tin, tm = pad_sequences([[1, 3, 7], [1, 5]], 0)
    tout, _ = pad_sequences([[3, 7, 2], [5, 2]], 0)
    return src, sm, tin, tm, tout


def perturbed_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    return {k: np.asarray(a + rng.normal(0, 0.1, a.shape)) for k, a in params.items()}


def finite_difference_check(cfg, params, h=1e-6, dropout_seed=None):
    """Largest per-array relative error between tape gradients and central differences.

    Arrays whose analytic and numeric gradients are both below 1e-8 in norm
    (e.g. self-attention key biases, which softmax cancels) count as exact.
    """
    src, sm, tin, tm, tout = tiny_batch()
    train = dropout_seed is not None

    def loss_of(p):
        rng = np.random.default_rng(dropout_seed) if train else None
        m = Model(cfg, p)
        loss, _ = label_smoothed_loss(m.forward(src, sm, tin, tm, train=train, rng=rng),
                                      tout, tm, cfg.vocab_size, 0.1)
        return m, loss

    model, loss = loss_of(params)
    loss.backward()
    grads = model.grads()
    errors = {}
    for name, a in params.items():
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = float(loss_of(params)[1].data)
            a[idx] = old - h
            down = float(loss_of(params)[1].data)
            a[idx] = old
            fd[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(grads[name]), np.linalg.norm(fd))
        errors[name] = 0.0 if scale < 1e-8 else float(np.linalg.norm(grads[name] - fd) / scale)
    return errors


def mean_oracle(arrays):
    """Elementwise mean by explicit scalar loops in Python floats."""
    first = arrays[0]
    out = np.empty(first.shape, dtype=np.float64)
    for idx in np.ndindex(first.shape):
        s = 0.0
        for a in arrays:
            s += float(a[idx])
        out[idx] = s / len(arrays)
    return out.astype(first.dtype)


def bleu_by_hand(matches, totals, hyp_len, ref_len):
    import math

    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100 * bp * math.exp(log_p)
