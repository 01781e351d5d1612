import csv
import json
import math

import numpy as np
import pytest

from ascnet.cli import main, stitch, triangular_weights, window_starts
from ascnet.signals import MetricsReport, synthetic_ecg
from ascnet.wfdb_io import load_record, write_record

MICRO = dict(n_blocks=2, channels=[4, 4], kernels=[16, 16], segment_length=64)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    for i in range(4):
        write_record(root / "records", f"1{i:02d}", synthetic_ecg(64 * 30, seed=i)[None, :])
    rng = np.random.default_rng(0)
    for kind in ("bw", "em", "ma"):
        write_record(root / "noise", kind, 0.3 * rng.standard_normal((1, 5000)).cumsum(axis=1) / 30)
    (root / "model.json").write_text(json.dumps(MICRO))
    (root / "train.json").write_text(json.dumps({"batch_size": 8, "max_epochs": 2, "seed": 3}))
    return root


def prepare(ws, out, *extra):
    return main(["prepare", "--records", str(ws / "records"), "--noise-dir", str(ws / "noise"),
                 "--L", "64", "--stride", "64", "--split", "0.5,0.25,0.25", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def prepared(workspace):
    out = workspace / "prep"
    assert prepare(workspace, out, "--noise", "awgn", "--snr", "5,15") == 0
    return out


@pytest.fixture(scope="module")
def trained(workspace, prepared):
    out = workspace / "run"
    rc = main(["train", "--data", str(prepared / "awgn_5dB"), "--model-config", str(workspace / "model.json"),
               "--train-config", str(workspace / "train.json"), "--out", str(out), "--quiet"])
    assert rc == 0
    return out


def test_prepare_families(prepared):
    fams = sorted(p.name for p in prepared.iterdir() if p.is_dir())
    assert fams == ["awgn_15dB", "awgn_5dB"]
    for fam in fams:
        for split in ("train", "val", "test"):
            assert (prepared / fam / f"{split}.seg").is_file()
            assert (prepared / fam / f"{split}.seg.json").is_file()
    man = json.loads((prepared / "manifest.json").read_text())
    assert man["command"] == "prepare" and man["seeds"] == {"dataset": 0}
    assert all(len(h) == 64 for h in man["inputs"].values())


def test_prepare_record_noise_nine_families(workspace, tmp_path):
    assert prepare(workspace, tmp_path, "--noise", "em,bw,ma", "--snr", "0,1.25,5") == 0
    assert len([p for p in tmp_path.iterdir() if p.is_dir()]) == 9


def test_prepare_is_idempotent(workspace, prepared, tmp_path):
    assert prepare(workspace, tmp_path, "--noise", "awgn", "--snr", "5,15") == 0
    for fam in ("awgn_5dB", "awgn_15dB"):
        for name in ("train.seg", "test.seg.json"):
            assert (tmp_path / fam / name).read_bytes() == (prepared / fam / name).read_bytes()


def test_prepare_missing_noise_record(workspace, tmp_path, capsys):
    (tmp_path / "noise").mkdir()
    rc = main(["prepare", "--records", str(workspace / "records"), "--noise-dir", str(tmp_path / "noise"),
               "--noise", "em", "--snr", "5", "--L", "64", "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "'em'" in capsys.readouterr().err


def test_prepare_bad_header(workspace, tmp_path, capsys):
    bad = tmp_path / "recs"
    bad.mkdir()
    (bad / "x.hea").write_text("x 1 360 10\nx.dat 212 200 eleven\n")
    rc = main(["prepare", "--records", str(bad), "--L", "4", "--out", str(tmp_path / "o")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "x.hea" in err and "line 2" in err


def test_prepare_bad_args(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["prepare", "--records", str(tmp_path), "--snr", "five", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["prepare", "--records", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_train_outputs_and_determinism(workspace, prepared, trained, tmp_path):
    assert (trained / "checkpoint.bin").is_file()
    hist = read_csv(trained / "loss_history.csv")
    assert [int(r["epoch"]) for r in hist] == [1, 2]
    assert list(hist[0]) == ["epoch", "train_loss", "val_loss"]
    assert json.loads((trained / "manifest.json").read_text())["command"] == "train"
    rc = main(["train", "--data", str(prepared / "awgn_5dB"), "--model-config", str(workspace / "model.json"),
               "--train-config", str(workspace / "train.json"), "--out", str(tmp_path), "--quiet"])
    assert rc == 0
    assert (tmp_path / "loss_history.csv").read_bytes() == (trained / "loss_history.csv").read_bytes()
    assert (tmp_path / "checkpoint.bin").read_bytes() == (trained / "checkpoint.bin").read_bytes()


def test_train_errors(workspace, prepared, tmp_path):
    assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({**MICRO, "segment_length": 128}))
    rc = main(["train", "--data", str(prepared / "awgn_5dB"), "--model-config", str(tmp_path / "bad.json"),
               "--epochs", "1", "--out", str(tmp_path / "o"), "--quiet"])
    assert rc == 5
    (tmp_path / "typo.json").write_text(json.dumps({"n_blokcs": 2}))
    rc = main(["train", "--data", str(prepared / "awgn_5dB"), "--model-config", str(tmp_path / "typo.json"),
               "--out", str(tmp_path / "o")])
    assert rc == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit(workspace, prepared, tmp_path, capsys):
    rc = main(["train", "--data", str(prepared / "awgn_5dB"), "--model-config", str(workspace / "model.json"),
               "--epochs", "1", "--lr", "1e308", "--out", str(tmp_path), "--quiet"])
    assert rc == 4
    assert "step" in capsys.readouterr().err


def test_eval_stubs(prepared, tmp_path):
    assert main(["eval", "--data", str(prepared), "--stub", "clean", "--out", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "metrics.csv")
    assert rows and all(float(r["mse"]) == 0 and float(r["prd_percent"]) == 0 for r in rows)
    assert {r["input_snr_db"] for r in rows} == {"5.0", "15.0"}
    assert main(["eval", "--data", str(prepared), "--stub", "noisy", "--out", str(tmp_path / "n")]) == 0
    report = MetricsReport.from_csv(tmp_path / "n" / "metrics.csv")
    assert all(r["snr_imp_db"] == 0 for r in report.rows)
    aggs = read_csv(tmp_path / "n" / "aggregates.csv")
    for agg in aggs:
        members = [r for r in report.rows if r["input_snr_db"] == float(agg["input_snr_db"])]
        for col in ("snr_out_db", "mse", "rmse", "prd_percent"):
            assert float(agg[col]) == pytest.approx(sum(m[col] for m in members) / len(members), rel=1e-12)
    table = read_csv(tmp_path / "n" / "table.csv")
    assert table[-1]["record_id"] == "mean"


def test_eval_checkpoint_and_mismatch(workspace, prepared, trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(prepared / "awgn_5dB"),
                 "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert rows and all(math.isfinite(float(r["snr_out_db"])) for r in rows)
    other = tmp_path / "p128"
    assert prepare(workspace, other, "--noise", "awgn", "--snr", "5", "--L", "128") == 0
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(other),
                 "--out", str(tmp_path / "m")]) == 5


def test_report_merge(prepared, tmp_path):
    main(["eval", "--data", str(prepared), "--stub", "clean", "--out", str(tmp_path / "a")])
    main(["eval", "--data", str(prepared), "--stub", "noisy", "--out", str(tmp_path / "b")])
    out = tmp_path / "r" / "report.csv"
    assert main(["report", "--eval", str(tmp_path / "a"), str(tmp_path / "b"), str(tmp_path / "a"),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    n_a = len(read_csv(tmp_path / "a" / "metrics.csv"))
    assert len(rows) == 2 * n_a
    assert {r["method"] for r in rows} == {"stub-clean", "stub-noisy"}
    first = out.read_bytes()
    main(["report", "--eval", str(tmp_path / "b"), str(tmp_path / "a"), "--out", str(out)])
    assert out.read_bytes() == first


def test_report_errors(tmp_path):
    assert main(["report", "--out", str(tmp_path / "r.csv")]) == 2
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "metrics.csv").write_text("record_id,snr\n100,5\n")
    assert main(["report", "--eval", str(tmp_path / "x"), "--out", str(tmp_path / "r.csv")]) == 6


def test_triangular_weights_partition_unity():
    w = triangular_weights(64)
    assert w[0] == pytest.approx(0.5 / 32) and np.allclose(w, w[::-1])
    np.testing.assert_allclose(w[:32] + w[32:], 1.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("n", [64, 65, 100, 1000])
def test_stitch_constant_signal_is_exact(n):
    out = stitch(np.full(n, 0.7), 64, lambda x: x)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-12)
    starts = window_starts(max(n, 64), 64)
    assert starts[0] == 0 and starts[-1] == max(n, 64) - 64


def test_stitch_identity_reproduces_signal(rng):
    x = rng.standard_normal(1000)
    np.testing.assert_allclose(stitch(x, 64, lambda b: b), x, rtol=0, atol=1e-12)


def test_denoise_row_count(workspace, trained, tmp_path):
    out = tmp_path / "d" / "den.csv"
    rec = workspace / "records" / "100.hea"
    assert main(["denoise", "--checkpoint", str(trained / "checkpoint.bin"), "--record", str(rec),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    samples = load_record(rec).samples_mv
    assert len(rows) == len(samples)
    assert list(rows[0]) == ["sample_index", "input_mv", "denoised_mv"]
    np.testing.assert_array_equal([float(r["input_mv"]) for r in rows], samples)
    assert main(["denoise", "--checkpoint", str(trained / "checkpoint.bin"), "--record", str(rec),
                 "--channel", "3", "--out", str(out)]) == 3


def test_denoise_improves_snr_after_micro_training(tmp_path):
    from ascnet.model import ModelConfig
    from ascnet.signals import NoiseSpec, build_dataset, mix_noise, snr_out, synthetic_record
    from ascnet.trainer import TrainConfig, save_checkpoint, train

    cfg = ModelConfig(n_blocks=2, channels=[8, 8], kernels=[16, 16], segment_length=128)
    recs = [synthetic_record(f"s{i}", 128 * 40, seed=i) for i in range(5)]
    data = build_dataset(recs, [NoiseSpec("awgn", 5.0)], 128, 64, (0.6, 0.2, 0.2), seed=0)
    ckpt, _ = train(data["train"], data["val"], cfg,
                    TrainConfig(batch_size=16, max_epochs=10, learning_rate=3e-3))
    save_checkpoint(ckpt, tmp_path / "c.bin")
    clean = synthetic_ecg(5000, seed=99)
    write_record(tmp_path, "noisy", mix_noise(clean, NoiseSpec("awgn", 5.0), 1)[None, :])
    out = tmp_path / "den.csv"
    assert main(["denoise", "--checkpoint", str(tmp_path / "c.bin"), "--record", str(tmp_path / "noisy"),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    noisy = np.array([float(r["input_mv"]) for r in rows])
    den = np.array([float(r["denoised_mv"]) for r in rows])
    assert snr_out(clean, noisy) == pytest.approx(5.0, abs=0.05)  # ADC quantization
    assert snr_out(clean, den) > snr_out(clean, noisy) + 3
