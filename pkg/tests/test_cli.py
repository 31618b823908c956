import numpy as np
import pytest

from bytemt.checkpoint import load_checkpoint
from bytemt.cli import main
from conftest import digit_pairs

TINY = ["--set", "model_dim=16", "--set", "ffn_dim=16", "--set", "layers=1", "--set", "steps=3",
        "--set", "validate_every=1", "--set", "warmup=2", "--set", "batch_bytes=2000"]


def write_pairs(path_src, path_tgt, pairs):
    path_src.write_text("".join(s + "\n" for s, _ in pairs), encoding="utf-8")
    path_tgt.write_text("".join(t + "\n" for _, t in pairs), encoding="utf-8")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(1)
    write_pairs(root / "all.num", root / "all.en", digit_pairs(1000, rng))
    write_pairs(root / "dev.num", root / "dev.en", digit_pairs(12, rng))
    write_pairs(root / "tst.num", root / "tst.en", digit_pairs(12, rng))
    out = root / "data"
    code = main(["prepare", "--src", str(root / "all.num"), "--tgt", str(root / "all.en"),
                 "--out-dir", str(out), "--valid-src", str(root / "dev.num"), "--valid-tgt", str(root / "dev.en"),
                 "--test-src", str(root / "tst.num"), "--test-tgt", str(root / "tst.en"), "--bpe-merges", "50"])
    assert code == 0
    return out


def test_prepare_with_explicit_splits_keeps_950(data_dir):
    assert len((data_dir / "train.src").read_text(encoding="utf-8").splitlines()) == 950
    assert len((data_dir / "valid.src").read_text(encoding="utf-8").splitlines()) == 12
    for scheme in ("byte", "char", "bpe"):
        assert (data_dir / "tokenizers" / scheme / "scheme.txt").exists()
    report = (data_dir / "clean_report.txt").read_text(encoding="utf-8")
    assert "ratio" in report


def test_prepare_with_internal_split(tmp_path):
    rng = np.random.default_rng(2)
    write_pairs(tmp_path / "a.src", tmp_path / "a.tgt", digit_pairs(1000, rng))
    code = main(["prepare", "--src", str(tmp_path / "a.src"), "--tgt", str(tmp_path / "a.tgt"),
                 "--out-dir", str(tmp_path / "d"), "--schemes", "byte", "--seed", "3"])
    assert code == 0
    lines = lambda name: len((tmp_path / "d" / name).read_text(encoding="utf-8").splitlines())  # noqa: E731
    assert (lines("train.src"), lines("valid.src"), lines("test.src")) == (980 - 49, 10, 10)


def test_train_translate_score(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data-dir", str(data_dir), "--out-dir", str(run), *TINY]) == 0
    for name in ("averaged.bin", "last.bin", "metrics.tsv", "best_k.txt", "run.cfg"):
        assert (run / name).exists()
    ckpt = load_checkpoint(run / "averaged.bin")
    assert ckpt.config.model_dim == 16
    hyp = tmp_path / "hyp.txt"
    assert main(["translate", "--checkpoint", str(run / "averaged.bin"), "--input", str(data_dir / "test.src"),
                 "--output", str(hyp), "--beam", "2", "--max-len", "8"]) == 0
    assert len(hyp.read_bytes().split(b"\n")) == 13
    assert all(b"\r" not in line for line in hyp.read_bytes().split(b"\n"))
    capsys.readouterr()
    assert main(["score", "--hyp", str(hyp), "--ref", str(data_dir / "test.tgt"),
                 "--json", str(tmp_path / "s.json")]) == 0
    assert capsys.readouterr().out.startswith("bleu=")


def test_train_from_config_file(data_dir, tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(f"# toy\ndata_dir = {data_dir}\nscheme = char\nmodel_dim = 16\nffn_dim = 16\n"
                   "layers = 1\nsteps = 0\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 0
    assert load_checkpoint(tmp_path / "r" / "averaged.bin").step == 0


def test_unknown_config_key_is_usage_error(data_dir, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("modle_dim = 16\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 1
    assert "modle_dim" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_embeddingless_too_narrow_is_usage_error(data_dir, tmp_path):
    args = ["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "r"),
            "--set", "scheme=byte-embeddingless", "--set", "model_dim=64"]
    assert main(args) == 1


def test_missing_input_is_data_error(tmp_path):
    assert main(["score", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")]) == 2


def test_bad_arguments_exit_1():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(data_dir, tmp_path):
    args = ["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "r"), *TINY,
            "--set", "peak_lr=1e30", "--set", "warmup=1"]
    assert main(args) == 3
    assert (tmp_path / "r" / "last_good.bin").exists()


def test_stats(data_dir, capsys):
    assert main(["stats", "--data-dir", str(data_dir)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "side\tbpe\tchar\tbyte"
    assert len(out) == 3


def test_bpe_train_command(data_dir, tmp_path):
    assert main(["bpe-train", "--input", str(data_dir / "train.tgt"), "--merges", "20",
                 "--output", str(tmp_path / "bpe.model"), "--vocab", str(tmp_path / "v.txt")]) == 0
    assert (tmp_path / "bpe.model").read_text(encoding="utf-8").startswith("bytemt-bpe v1 20 ")


def test_seed_from_environment(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("BYTEMT_SEED", "7")
    assert main(["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "r"), *TINY]) == 0
    assert "seed = 7" in (tmp_path / "r" / "run.cfg").read_text(encoding="utf-8")
    monkeypatch.setenv("BYTEMT_SEED", "x")
    assert main(["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "q"), *TINY]) == 1


def test_ablate_rejects_narrow_embeddingless_grid(data_dir, tmp_path):
    assert main(["ablate", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "a")]) == 1
