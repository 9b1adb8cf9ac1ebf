import json
import struct

import numpy as np
import pytest

from relpsp.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, run


def _idx(path, arr):
    arr = np.asarray(arr, np.uint8)
    path.write_bytes(struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
                     + arr.tobytes())


def _toy_mnist(root, n_train=60, n_test=30, seed=0):
    """Three classes of 8x8 images, each a bright bar in a different place."""
    rng = np.random.default_rng(seed)

    def make(n):
        y = rng.integers(3, size=n)
        x = rng.integers(0, 40, size=(n, 8, 8))
        for i, c in enumerate(y):
            x[i, 2 * c + 1: 2 * c + 3, :] = 255
        return x, y

    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        x, y = make(n)
        _idx(root / f"{prefix}-images-idx3-ubyte", x)
        _idx(root / f"{prefix}-labels-idx1-ubyte", y)
    return root


CONFIG = """\
[model]
architecture = 8x8-12-3
kernel = rel

[optimizer]
name = adam
lr = 0.01

[training]
epochs = 3
batch_size = 10
seed = 5
init_high = 0.5
census_probe = 20

[data]
dataset = mnist
path = {data}

[output]
dir = {out}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = _toy_mnist(root / "data")
    cfg = root / "toy.ini"
    cfg.write_text(CONFIG.format(data=data, out=root / "run"))
    code = run(["train", "--config", str(cfg), "--deterministic"])
    assert code == EXIT_OK
    return root, data, root / "run"


class TestHelp:
    @pytest.mark.parametrize("command,flags", [
        ("train", ["--config", "--seed", "--epochs", "--data", "--out", "--threads", "--deterministic"]),
        ("eval", ["--checkpoint", "--data", "--split", "--dataset", "--limit"]),
        ("gradcheck", ["--arch", "--seed", "--samples", "--kernel", "--tol"]),
        ("diagnose", ["--checkpoint", "--data", "--out", "--split", "--limit"]),
        ("inspect", ["--checkpoint"]),
    ])
    def test_flags_documented(self, command, flags, capsys):
        assert run([command, "--help"]) == EXIT_OK
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text

    def test_exit_codes_in_epilog(self):
        text = build_parser().format_help()
        assert "exit" in text.lower()


class TestExitCodes:
    def test_no_command_is_usage(self, capsys):
        assert run([]) == EXIT_USAGE

    def test_missing_required(self, capsys):
        assert run(["train"]) == EXIT_USAGE
        assert "--config" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["inspect", "--checkpoint", "x", "--bogus"]) == EXIT_USAGE

    def test_missing_checkpoint_is_io(self, tmp_path, capsys):
        missing = tmp_path / "nope.ckpt"
        assert run(["eval", "--checkpoint", str(missing), "--data", str(tmp_path)]) == EXIT_IO
        assert "nope.ckpt" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_io(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert run(["inspect", "--checkpoint", str(bad)]) == EXIT_IO

    def test_bad_architecture_is_usage(self, capsys):
        assert run(["gradcheck", "--arch", "784-x-10", "--samples", "1"]) == EXIT_USAGE

    def test_bad_config_key_is_usage(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[model]\narchitectur = 784-10\n")
        assert run(["train", "--config", str(cfg)]) == EXIT_USAGE

    def test_gradcheck_failure_is_numeric(self, capsys):
        # an impossible tolerance must fail the audit
        assert run(["gradcheck", "--arch", "16-6-3", "--samples", "2", "--tol", "0"]) == EXIT_NUMERIC

    def test_gradcheck_passes(self, capsys):
        assert run(["gradcheck", "--arch", "16-6-3", "--samples", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "max rel. err weights" in out and out.strip().endswith("PASS")


class TestRoundTrip:
    def test_train_outputs(self, trained):
        _, _, out = trained
        for name in ("best.ckpt", "final.ckpt", "metrics.jsonl", "config.json"):
            assert (out / name).exists()
        recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        epochs = [r for r in recs if r.get("kind") == "epoch"]
        assert [r["epoch"] for r in epochs] == [1, 2, 3]

    def test_inspect(self, trained, capsys):
        _, _, out = trained
        assert run(["inspect", "--checkpoint", str(out / "final.ckpt")]) == EXIT_OK
        header = json.loads(capsys.readouterr().out)
        assert header["architecture"] == "8x8-12-3"
        assert header["n_params"] == 64 * 12 + 12 * 3

    def test_eval(self, trained, capsys):
        _, data, out = trained
        assert run(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data)]) == EXIT_OK
        rec = json.loads(capsys.readouterr().out)
        assert rec["n"] == 30 and 0.0 <= rec["accuracy"] <= 1.0

    def test_eval_limit_and_train_split(self, trained, capsys):
        _, data, out = trained
        assert run(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data),
                    "--split", "train", "--limit", "7"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["n"] == 7

    def test_eval_val_split_rejected_for_mnist(self, trained, capsys):
        _, data, out = trained
        assert run(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data),
                    "--split", "val"]) == EXIT_USAGE

    def test_diagnose(self, trained, capsys, tmp_path):
        _, data, out = trained
        dest = tmp_path / "diag"
        assert run(["diagnose", "--checkpoint", str(out / "final.ckpt"), "--data", str(data),
                    "--out", str(dest)]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert set(summary) >= {"accuracy", "hidden_spiked_before_decision", "hidden_spiked_total", "max_dtdv"}
        spikes = [json.loads(s) for s in (dest / "spike_times.jsonl").read_text().splitlines()]
        assert {r["layer"] for r in spikes} == {"dense1", "dense2"}
        grad = json.loads((dest / "gradients.jsonl").read_text())
        assert abs(sum(grad["hist"]["fraction"]) - 1.0) < 1e-9 or grad["hist"]["count"] == 0
        census = json.loads((dest / "census.jsonl").read_text())
        assert 0.0 <= census["hidden_spiked_before_decision"] <= census["hidden_spiked_total"] <= 1.0

    def test_seed_override_reproducible(self, trained, tmp_path, capsys):
        root, data, _ = trained
        cfg = root / "toy.ini"
        outs = []
        for k in range(2):
            dest = tmp_path / f"r{k}"
            assert run(["train", "--config", str(cfg), "--seed", "9", "--epochs", "1", "--out", str(dest),
                        "--deterministic"]) == EXIT_OK
            outs.append((dest / "final.ckpt").read_bytes())
        assert outs[0] == outs[1]
