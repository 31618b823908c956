import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bytemt.checkpoint import (
    Checkpoint,
    CheckpointError,
    OptimState,
    average_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from bytemt.corpus import batch_by_bytes
from bytemt.model import ModelConfig, init_params
from bytemt.tokenization import Tokenizer
from bytemt.training import (
    TrainConfig,
    TrainingDiverged,
    adam_step,
    lr_inverse_sqrt,
    token_dropout,
    train_loop,
)
from oracles import mean_oracle


def test_lr_values():
    assert lr_inverse_sqrt(4000) == 5e-4
    assert abs(lr_inverse_sqrt(1000) - 1.25e-4) < 1e-12
    assert abs(lr_inverse_sqrt(16000) - 2.5e-4) < 1e-12
    assert lr_inverse_sqrt(1) == 5e-4 / 4000
    with pytest.raises(ValueError):
        lr_inverse_sqrt(0)


@settings(max_examples=100)
@given(st.integers(1, 100_000))
def test_lr_peaks_at_warmup(step):
    assert lr_inverse_sqrt(step) <= lr_inverse_sqrt(4000)


def test_adam_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -0.1, 0.0])}
    state = OptimState.zeros_like(p)
    adam_step(p, g, state, lr=0.01, weight_decay=0.0)
    # bias-corrected moments are g and g^2 after one step: update = lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(p["w"], expected, rtol=0, atol=1e-15)
    assert state.step == 1


def test_adam_coupled_weight_decay():
    p = {"w": np.array([2.0])}
    state = OptimState.zeros_like(p)
    adam_step(p, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
    # the decay term 0.5 * 2 = 1 acts as the gradient
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)


def test_adam_second_step_against_scalar_recursion():
    b1, b2, eps, lr = 0.9, 0.98, 1e-8, 0.05
    grads = [0.4, -0.2]
    p = {"w": np.array([1.0])}
    state = OptimState.zeros_like(p)
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": np.array([g])}, state, lr, (b1, b2), eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert p["w"][0] == pytest.approx(x, abs=1e-15)


def test_adam_rejects_non_finite_gradients():
    p = {"w": np.ones(2)}
    with pytest.raises(FloatingPointError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, OptimState.zeros_like(p), 0.1)


def test_adam_skips_frozen():
    p = {"a": np.ones(1), "b": np.ones(1)}
    adam_step(p, {"a": np.ones(1), "b": np.ones(1)}, OptimState.zeros_like(p), 0.1, frozen=["b"])
    assert p["b"][0] == 1.0 and p["a"][0] < 1.0


def test_token_dropout_monte_carlo():
    rng = np.random.default_rng(7)
    rows = np.ones((1000, 100, 4))
    out = token_dropout(rows, 0.2, rng)
    zero = np.all(out == 0, axis=-1)
    kept = np.all(out == 1.25, axis=-1)
    assert np.all(zero | kept)
    n = zero.size
    sigma = math.sqrt(n * 0.2 * 0.8)
    assert abs(zero.sum() - 0.2 * n) < 3 * sigma


def test_token_dropout_leaves_pad_rows():
    rows = np.zeros((1, 50, 3))
    rows[0, :25] = 1.0
    pad = np.zeros((1, 50), dtype=bool)
    pad[0, 25:] = True
    out = token_dropout(rows, 0.5, np.random.default_rng(0), pad)
    assert np.all(out[0, 25:] == 0)
    assert token_dropout(rows, 0.0, np.random.default_rng(0)) is rows


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(token_dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup=0)


# --- checkpoints -------------------------------------------------------------------

def small_config(**kw):
    base = dict(mode="embedding", vocab_size=260, model_dim=16, ffn_dim=16, layers=1, heads=2,
                dropout=0.1, max_len=64)
    base.update(kw)
    return ModelConfig(**base)


def random_checkpoint(seed, step=0, config=None):
    config = config or small_config()
    rng = np.random.default_rng(seed)
    params = {k: (a + rng.normal(0, 1, a.shape)).astype(a.dtype)
              for k, a in init_params(config, rng).items()}
    return Checkpoint(config, params, step, valid_loss=float(rng.random()))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = random_checkpoint(0, step=12)
    ck.optim = OptimState(3, {k: a * 2 for k, a in ck.params.items()}, {k: a * 3 for k, a in ck.params.items()})
    ck.meta = {"scheme": "byte", "note": "a b=c"}
    save_checkpoint(ck, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.config == ck.config
    assert (back.step, back.valid_loss, back.meta) == (ck.step, ck.valid_loss, ck.meta)
    for k, a in ck.params.items():
        assert back.params[k].dtype == a.dtype and back.params[k].tobytes() == a.tobytes()
    assert back.optim.step == 3
    assert all(back.optim.v[k].tobytes() == a.tobytes() for k, a in ck.optim.v.items())


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
    ck = random_checkpoint(1)
    save_checkpoint(ck, tmp_path / "ok.bin")
    data = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.bin")


def test_average_matches_scalar_oracle():
    ckpts = [random_checkpoint(s, step=s) for s in range(5)]
    avg = average_checkpoints(ckpts)
    for k in ckpts[0].params:
        assert np.array_equal(avg.params[k], mean_oracle([c.params[k] for c in ckpts]))
    assert avg.meta["averaged_from"] == "0,1,2,3,4"


def test_average_of_identical_checkpoints_is_identity():
    ck = random_checkpoint(9)
    avg = average_checkpoints([ck] * 5)
    assert all(avg.params[k].tobytes() == a.tobytes() for k, a in ck.params.items())


def test_average_rejects_mismatch():
    a = random_checkpoint(0)
    b = random_checkpoint(1, config=small_config(model_dim=32))
    with pytest.raises(CheckpointError):
        average_checkpoints([a, b])
    with pytest.raises(CheckpointError):
        average_checkpoints([])


# --- train loop ----------------------------------------------------------------------

@pytest.fixture
def toy_batches(digit_corpus):
    tk = Tokenizer.byte()
    train = batch_by_bytes(digit_corpus.subset(range(250)), tk.encode, tk.vocab, 400)
    valid = batch_by_bytes(digit_corpus.subset(range(250, 300)), tk.encode, tk.vocab, 400)
    return train, valid


def test_zero_steps_keeps_initialisation(toy_batches, tmp_path):
    cfg = small_config()
    result = train_loop(cfg, *toy_batches, TrainConfig(steps=0, seed=5), out_dir=tmp_path)
    assert [c.step for c in result.top] == [0]
    init = init_params(cfg, np.random.default_rng(np.random.SeedSequence(5).spawn(3)[0]))
    assert all(np.array_equal(result.averaged.params[k], a) for k, a in init.items())
    assert (tmp_path / "averaged.bin").exists() and (tmp_path / "last.bin").exists()


def test_training_reduces_loss_and_keeps_top_k(toy_batches, tmp_path):
    cfg = small_config(dropout=0.0)
    tc = TrainConfig(steps=60, warmup=20, peak_lr=3e-3, validate_every=10, keep_top_k=3, seed=2)
    result = train_loop(cfg, *toy_batches, tc, out_dir=tmp_path)
    losses = {r.step: r.valid_loss for r in result.log}
    assert sorted(losses) == [0, 10, 20, 30, 40, 50, 60]
    assert losses[60] < 0.7 * losses[0]
    best = sorted(losses, key=lambda s: (losses[s], s))[:3]
    assert [c.step for c in result.top] == best
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == sorted(f"ckpt_{s}.bin" for s in best)
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 7


def test_training_is_deterministic(toy_batches):
    cfg = small_config(dropout=0.2)
    tc = TrainConfig(steps=8, warmup=4, validate_every=4, seed=3, token_dropout=0.1)
    a = train_loop(cfg, *toy_batches, tc)
    b = train_loop(cfg, *toy_batches, tc)
    assert all(a.final.params[k].tobytes() == b.final.params[k].tobytes() for k in a.final.params)
    assert [r.valid_loss for r in a.log] == [r.valid_loss for r in b.log]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good(toy_batches):
    cfg = small_config()
    params = init_params(cfg, np.random.default_rng(0))
    params["dec.0.ffn.w1"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train_loop(cfg, *toy_batches, TrainConfig(steps=3), params=params)
    assert info.value.last_good is not None
    assert info.value.last_good.step == 0


def test_top_k_evicts_a_worse_newcomer(tmp_path):
    from bytemt.training import TopK

    top = TopK(2, tmp_path)
    for step, loss in [(0, 3.0), (1, 1.0), (2, 2.0), (3, 5.0), (4, 2.0)]:
        ck = random_checkpoint(step, step=step)
        ck.valid_loss = loss
        top.offer(ck)
    assert [c.step for c in top.items] == [1, 2]
    assert sorted(p.name for p in tmp_path.glob("*.bin")) == ["ckpt_1.bin", "ckpt_2.bin"]
