import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sleepseg.cli import main
from sleepseg.config_io import load_config, parse_config_text, save_config
from sleepseg.metrics import read_confusion_csv
from sleepseg.model import UTimeConfig
from sleepseg.training import TrainConfig

RATE = 4  # tiny sample rate keeps CLI runs fast; segments are 120 samples


def tiny_model_config():
    return UTimeConfig(in_channels=1, classes=5, segment_samples=120, depth=2,
                       pool_windows=(2, 2), base_filters=2, kernel_width=3,
                       dilation=1, decoder_kernels=(2, 2), transition_window=5,
                       transition_kernel=3)


def tiny_train_config(**kw):
    base = dict(lr=1e-3, batch_size=4, window=5, patience=150, max_epochs=2, seed=7)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset -> prepared caches -> config file, shared per module."""
    root = tmp_path_factory.mktemp("cliws")
    raw = root / "raw"
    assert main(["synth", "--out", str(raw), "--subjects", "5", "--segments", "60",
                 "--rate", str(RATE), "--seed", "3"]) == 0
    prepared = root / "prepared"
    assert main(["prepare", "--manifest", str(raw / "manifest.csv"),
                 "--out", str(prepared), "--rate", str(RATE)]) == 0
    config = root / "config.txt"
    save_config(config, tiny_model_config(), tiny_train_config())
    return {"root": root, "raw": raw, "prepared": prepared, "config": config}


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config file format


def test_config_roundtrip(tmp_path):
    path = tmp_path / "c.txt"
    save_config(path, tiny_model_config(), tiny_train_config(max_epochs=None))
    model_cfg, train_cfg = load_config(path)
    assert model_cfg == tiny_model_config()
    assert train_cfg == tiny_train_config(max_epochs=None)


def test_config_parses_sections_and_lists():
    sections = parse_config_text("[model]\npool_windows = [10, 8, 6, 4]\nclasses = 5\n")
    assert sections["model"]["pool_windows"] == (10, 8, 6, 4)
    assert sections["model"]["classes"] == 5


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("[model]\nnot_a_field = 3\n")
    with pytest.raises(ValueError, match="not_a_field"):
        load_config(path)


# ---------------------------------------------------------------------------
# command surface


def test_unknown_flag_is_hard_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["inspect", "--bogus"])
    assert exc.value.code == 2


def test_help_lists_all_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("prepare", "train", "cv", "eval", "predict", "synth", "inspect"):
        assert cmd in out


def test_inspect_reports_canonical_parameter_count(capsys):
    assert main(["inspect"]) == 0
    out = capsys.readouterr().out
    assert "trainable_parameters: 1187589" in out
    assert "min_input_length: 1920" in out
    assert "receptive_field: 32640" in out


def test_synth_writes_dataset(workspace):
    raw = workspace["raw"]
    assert (raw / "manifest.csv").exists()
    assert len(list(raw.glob("*.edf"))) == 5
    assert len(list(raw.glob("*.labels.csv"))) == 5


def test_prepare_outputs(workspace):
    prepared = workspace["prepared"]
    report = json.loads((prepared / "prepare_report.json").read_text())
    assert len(report["records"]) == 5 and report["failures"] == []
    assert all(r["discarded_labels"] == 0 for r in report["records"])
    assert all("channel_iqr" in r for r in report["records"])
    assert len(list(prepared.glob("*.cache"))) == 5


def test_prepare_is_deterministic(workspace, tmp_path):
    again = tmp_path / "prepared2"
    assert main(["prepare", "--manifest", str(workspace["raw"] / "manifest.csv"),
                 "--out", str(again), "--rate", str(RATE)]) == 0
    for cache in sorted(workspace["prepared"].glob("*.cache")):
        assert sha(cache) == sha(again / cache.name)


def test_prepare_trim_flag_reduces_wake_margins(tmp_path):
    from sleepseg.signal_io import load_record_cache, write_edf

    rng = np.random.default_rng(17)
    n_seg = 305
    signal = rng.standard_normal(n_seg * 30 * RATE)
    edf = tmp_path / "rec.edf"
    write_edf(edf, [("EEG synth", RATE, signal)])
    stages = ["W"] * 150 + ["N2"] * 5 + ["W"] * 150
    labels = tmp_path / "rec.labels.csv"
    labels.write_text("epoch_index,stage\n" +
                      "\n".join(f"{i},{s}" for i, s in enumerate(stages)) + "\n")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("record_path,label_path,subject_id\n"
                        f"{edf.name},{labels.name},s0\n")
    out = tmp_path / "prepared"
    assert main(["prepare", "--manifest", str(manifest), "--out", str(out),
                 "--rate", str(RATE), "--trim-wake-margins"]) == 0
    rec = load_record_cache(out / "rec.cache", "s0")
    # non-wake spans epochs [150, 154]; a 60-epoch margin keeps [90, 214]
    assert rec.n_segments == 125


def test_prepare_records_failures_without_strict(tmp_path, workspace):
    bad = tmp_path / "bad.edf"
    bad.write_bytes(b"not an edf file at all" * 20)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("record_path,label_path,subject_id\n"
                        f"{bad.name},{bad.name},sX\n")
    out = tmp_path / "out"
    assert main(["prepare", "--manifest", str(manifest), "--out", str(out),
                 "--rate", str(RATE)]) == 0
    assert main(["prepare", "--manifest", str(manifest), "--out", str(out),
                 "--rate", str(RATE), "--strict"]) == 1


def test_train_run_directory_layout(workspace, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(workspace["config"]),
                 "--manifest", str(workspace["prepared"] / "manifest.csv"),
                 "--out", str(out)]) == 0
    for name in ("config.txt", "history.csv", "best.ckpt", "latest.ckpt",
                 "metrics.json", "confusion_global.csv", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "metrics.json" in manifest["artifact_checksums"]
    history = (out / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_f1,seconds"
    assert len(history) == 3  # two epochs


def test_eval_replays_training_metrics(workspace, tmp_path):
    # fixed-epoch run evaluated on its own records, then replayed via `eval`
    run = tmp_path / "run"
    assert main(["train", "--config", str(workspace["config"]),
                 "--manifest", str(workspace["prepared"] / "manifest.csv"),
                 "--out", str(run), "--val-fraction", "0"]) == 0
    replay = tmp_path / "replay"
    assert main(["eval", "--ckpt", str(run / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--manifest", str(workspace["prepared"] / "manifest.csv"),
                 "--out", str(replay)]) == 0
    assert (run / "metrics.json").read_bytes() == (replay / "metrics.json").read_bytes()


def test_eval_empty_manifest_fails(workspace, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("record_path,label_path,subject_id\n")
    run = tmp_path / "out"
    code = main(["eval", "--ckpt", "missing.ckpt", "--config", str(workspace["config"]),
                 "--manifest", str(empty), "--out", str(run)])
    assert code == 1


def test_cv_layout_and_aggregation(workspace, tmp_path):
    out = tmp_path / "cv"
    assert main(["cv", "--config", str(workspace["config"]),
                 "--manifest", str(workspace["prepared"] / "manifest.csv"),
                 "--out", str(out), "--splits", "2", "--seed", "5"]) == 0
    split_csvs = [read_confusion_csv(out / f"split_{i}" / "confusion_global.csv")
                  for i in range(2)]
    total = read_confusion_csv(out / "confusion_global.csv")
    np.testing.assert_array_equal(total.counts,
                                  split_csvs[0].counts + split_csvs[1].counts)
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["global"]["per_class"]) == {"W", "N1", "N2", "N3", "REM"}


def test_cv_same_seed_byte_identical_metrics(workspace, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"cv_{tag}"
        assert main(["cv", "--config", str(workspace["config"]),
                     "--manifest", str(workspace["prepared"] / "manifest.csv"),
                     "--out", str(out), "--splits", "2", "--seed", "11"]) == 0
        outs.append(out)
    assert (outs[0] / "metrics.json").read_bytes() == (outs[1] / "metrics.json").read_bytes()


@pytest.fixture(scope="module")
def trained(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--config", str(workspace["config"]),
                 "--manifest", str(workspace["prepared"] / "manifest.csv"),
                 "--out", str(out)]) == 0
    return out


def test_predict_hypnogram_rows(workspace, trained, tmp_path):
    cache = sorted(workspace["prepared"].glob("*.cache"))[0]
    out_file = tmp_path / "hyp.tsv"
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(cache), "--out", str(out_file)]) == 0
    lines = out_file.read_text().splitlines()
    assert lines[0] == "segment_index\tonset_s\tstage\tconfidence"
    assert len(lines) == 1 + 60  # one row per 30 s segment
    assert lines[1].split("\t")[2] in {"W", "N1", "N2", "N3", "REM"}


def test_predict_hypnogram_matches_forward_argmax(workspace, trained, tmp_path):
    from sleepseg.checkpoint import load_checkpoint
    from sleepseg.model import build_model
    from sleepseg.signal_io import load_record_cache
    from sleepseg.tensor import Tensor

    cache = sorted(workspace["prepared"].glob("*.cache"))[0]
    out_file = tmp_path / "hyp.tsv"
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(cache), "--out", str(out_file)]) == 0
    stages = [line.split("\t")[2] for line in out_file.read_text().splitlines()[1:]]

    model = build_model(tiny_model_config(), seed=0)
    model.load_state(load_checkpoint(trained / "best.ckpt"))
    rec = load_record_cache(cache, "s")
    pred = model.forward(Tensor(rec.signal[None])).data[0].argmax(-1)
    names = ["W", "N1", "N2", "N3", "REM"]
    assert stages == [names[k] for k in pred]


def test_predict_higher_frequency_doubles_rows(workspace, trained, tmp_path):
    cache = sorted(workspace["prepared"].glob("*.cache"))[0]
    out_file = tmp_path / "hyp15.tsv"
    freq = 1.0 / 15.0  # half-width segments
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(cache), "--freq", str(freq),
                 "--out", str(out_file)]) == 0
    assert len(out_file.read_text().splitlines()) == 1 + 120


def test_predict_dense_scores(workspace, trained, tmp_path):
    cache = sorted(workspace["prepared"].glob("*.cache"))[0]
    out_file = tmp_path / "dense.csv"
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(cache), "--dense", "--out", str(out_file)]) == 0
    lines = out_file.read_text().splitlines()
    assert lines[0] == "W,N1,N2,N3,REM"
    assert len(lines) == 1 + 60 * 120  # one row per sample
    probs = np.array([float(v) for v in lines[1].split(",")])
    assert abs(probs.sum() - 1.0) < 1e-4


def test_predict_dense_binary_container(workspace, trained, tmp_path):
    from sleepseg.checkpoint import load_checkpoint

    cache = sorted(workspace["prepared"].glob("*.cache"))[0]
    out_file = tmp_path / "dense.bin"
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(cache), "--dense", "--binary",
                 "--out", str(out_file)]) == 0
    arrays = load_checkpoint(out_file)
    assert arrays["dense_scores"].shape == (60 * 120, 5)


def test_predict_accepts_raw_edf(workspace, trained, tmp_path):
    edf = sorted(workspace["raw"].glob("*.edf"))[0]
    out_file = tmp_path / "hyp_raw.tsv"
    assert main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(edf), "--out", str(out_file)]) == 0
    assert len(out_file.read_text().splitlines()) == 1 + 60


def test_predict_short_record_fails(workspace, trained, tmp_path, capsys):
    short = tmp_path / "short.cache"
    from sleepseg.signal_io import PsgRecord, save_record_cache

    rec = PsgRecord("s", "short", np.zeros((120, 1), np.float32), RATE,
                    ["ch0"], np.zeros(1, np.int8), np.ones(1, bool))
    # one segment = 120 samples, but the tiny model needs >= 4; craft shorter
    rec.signal = rec.signal[:2]
    rec.labels = rec.labels[:0]
    rec.mask = rec.mask[:0]
    save_record_cache(short, rec)
    code = main(["predict", "--ckpt", str(trained / "best.ckpt"),
                 "--config", str(workspace["config"]),
                 "--record", str(short)])
    assert code == 1


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("UTIME_SEED", "9")
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["synth", "--out", str(out_a), "--subjects", "1", "--segments", "4",
                 "--rate", str(RATE)]) == 0
    assert main(["synth", "--out", str(out_b), "--subjects", "1", "--segments", "4",
                 "--rate", str(RATE), "--seed", "9"]) == 0
    a = sorted(out_a.glob("*.edf"))[0]
    b = sorted(out_b.glob("*.edf"))[0]
    assert sha(a) == sha(b)
