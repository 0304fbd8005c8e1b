import json

import numpy as np
import pytest

from microexpr.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    ConfigError,
    load_pixel_stats,
    main,
    parse_config_file,
    resolve_option,
    save_pixel_stats,
)
from microexpr.preprocess import PixelStats


def run_pipeline(root, seed=3, classes=3, per_class=8, epochs=3, extra_train=()):
    """synth -> preprocess -> train -> eval, returning the run directory."""
    data = root / "data"
    work = root / "work"
    run = root / "run"
    assert main(["synth", "--classes", str(classes), "--per-class", str(per_class),
                 "--seed", str(seed), "--out", str(data)]) == EXIT_OK
    assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                 "--split-fraction", "0.25", "--seed", str(seed),
                 "--out", str(work)]) == EXIT_OK
    assert main(["train", "--train-manifest", str(work / "train.csv"),
                 "--stats", str(work / "pixel_stats.bin"),
                 "--batch-size", "16", "--max-epochs", str(epochs),
                 "--seed", str(seed), "--out", str(run), *extra_train]) == EXIT_OK
    assert main(["eval", "--test-manifest", str(work / "test.csv"),
                 "--checkpoint", str(run / "model.ckpt"),
                 "--seed", str(seed), "--out", str(run)]) == EXIT_OK
    return run


class TestConfigFile:
    def test_parse_flat_keys(self):
        text = "# a comment\nlr = 0.5\nbatch_size = 32  # trailing\n\nseed=9\n"
        assert parse_config_file(text) == {"lr": "0.5", "batch_size": "32", "seed": "9"}

    def test_parse_rejects_garbage(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file("just words\n")

    def test_precedence_flag_beats_file_beats_default(self):
        file_values = {"lr": "0.5", "batch_size": "32"}
        assert resolve_option("lr", 0.9, file_values) == 0.9
        assert resolve_option("lr", None, file_values) == 0.5
        assert resolve_option("momentum", None, file_values) == 0.9
        assert resolve_option("batch_size", None, file_values) == 32
        assert resolve_option("batch_size", 8, file_values) == 8
        assert resolve_option("split_mode", None, {"split_mode": "subject"}) == "subject"

    def test_config_file_drives_training_options(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("max_epochs = 2\nbatch_size = 16\n")
        data = tmp_path / "data"
        work = tmp_path / "work"
        run = tmp_path / "run"
        assert main(["synth", "--classes", "2", "--per-class", "6", "--seed", "1",
                     "--out", str(data)]) == EXIT_OK
        assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                     "--seed", "1", "--out", str(work)]) == EXIT_OK
        assert main(["train", "--train-manifest", str(work / "train.csv"),
                     "--config", str(cfg), "--seed", "1", "--out", str(run)]) == EXIT_OK
        log = (run / "train_log.csv").read_text().strip().splitlines()
        assert len(log) == 1 + 2  # header + exactly the configured two epochs

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_option = 1\n")
        rc = main(["synth", "--classes", "2", "--per-class", "4",
                   "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert rc == EXIT_VALIDATION


class TestPixelStatsFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        stats = PixelStats(rng.random((5, 4)), rng.random((5, 4)) + 0.1, 1e-6)
        path = tmp_path / "stats.bin"
        save_pixel_stats(path, stats)
        loaded = load_pixel_stats(path)
        assert np.allclose(loaded.mean, stats.mean, atol=1e-7)
        assert np.allclose(loaded.std, stats.std, atol=1e-7)
        assert loaded.epsilon == pytest.approx(1e-6)

    def test_determinism(self, tmp_path):
        stats = PixelStats(np.ones((2, 2)), np.ones((2, 2)), 1e-6)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_pixel_stats(a, stats)
        save_pixel_stats(b, stats)
        assert a.read_bytes() == b.read_bytes()


class TestPipeline:
    def test_end_to_end_artifacts(self, tmp_path, capsys):
        run = run_pipeline(tmp_path)
        metrics = json.loads((run / "metrics.json").read_text())
        assert set(metrics) == {
            "accuracy_trace", "accuracy_ovr_macro", "mae", "per_class", "macro", "protocol"
        }
        confusion = (run / "confusion.csv").read_text().splitlines()
        assert confusion[0].startswith("true,")
        assert (run / "model.ckpt").exists()
        out = capsys.readouterr().out
        assert "macro accuracy" in out
        assert "protocol" in out

    def test_synth_plus_preprocess_counts(self, tmp_path):
        data = tmp_path / "data"
        work = tmp_path / "work"
        assert main(["synth", "--classes", "3", "--per-class", "8", "--seed", "2",
                     "--out", str(data)]) == EXIT_OK
        assert len(list((data / "images").glob("*.pgm"))) == 24
        assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                     "--split-fraction", "0.25", "--seed", "2",
                     "--out", str(work)]) == EXIT_OK
        assert len(list((work / "images").glob("*.pgm"))) == 24
        train_rows = (work / "train.csv").read_text().strip().splitlines()
        test_rows = (work / "test.csv").read_text().strip().splitlines()
        assert len(train_rows) - 2 == 18  # comment + header
        assert len(test_rows) - 2 == 6
        assert (work / "pixel_stats.bin").exists()

    def test_determinism_byte_identical_artifacts(self, tmp_path):
        run_a = run_pipeline(tmp_path / "a", seed=7)
        run_b = run_pipeline(tmp_path / "b", seed=7)
        assert (run_a / "model.ckpt").read_bytes() == (run_b / "model.ckpt").read_bytes()
        assert (run_a / "metrics.json").read_bytes() == (run_b / "metrics.json").read_bytes()
        assert (run_a / "confusion.csv").read_bytes() == (run_b / "confusion.csv").read_bytes()

    def test_worker_count_never_changes_outputs(self, tmp_path):
        data = tmp_path / "data"
        assert main(["synth", "--classes", "2", "--per-class", "5", "--seed", "6",
                     "--out", str(data)]) == EXIT_OK
        outs = []
        for workers in ("1", "4"):
            work = tmp_path / f"w{workers}"
            assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                         "--workers", workers, "--seed", "6", "--out", str(work)]) == EXIT_OK
            outs.append(
                {p.name: p.read_bytes() for p in sorted((work / "images").glob("*.pgm"))}
                | {"stats": (work / "pixel_stats.bin").read_bytes(),
                   "train": (work / "train.csv").read_bytes()}
            )
        assert outs[0] == outs[1]

    def test_periodic_checkpoints(self, tmp_path):
        data = tmp_path / "data"
        work = tmp_path / "work"
        run = tmp_path / "run"
        assert main(["synth", "--classes", "2", "--per-class", "6", "--seed", "8",
                     "--out", str(data)]) == EXIT_OK
        assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                     "--seed", "8", "--out", str(work)]) == EXIT_OK
        assert main(["train", "--train-manifest", str(work / "train.csv"),
                     "--max-epochs", "5", "--checkpoint-every", "2", "--seed", "8",
                     "--out", str(run)]) == EXIT_OK
        from microexpr.network import load_checkpoint

        assert (run / "model_epoch2.ckpt").exists()
        assert (run / "model_epoch4.ckpt").exists()
        assert not (run / "model_epoch5.ckpt").exists()
        mid = load_checkpoint(run / "model_epoch2.ckpt")
        assert mid.arch.classes == 2

    def test_predict_multicrop(self, tmp_path, capsys):
        run = run_pipeline(tmp_path)
        work = tmp_path / "work"
        image = next((work / "images").glob("*.pgm"))
        capsys.readouterr()  # drop pipeline chatter
        assert main(["predict", str(image), "--checkpoint", str(run / "model.ckpt")]) == EXIT_OK
        out = capsys.readouterr().out.strip()
        label, prob = out.split()
        assert label in ("C0", "C1", "C2")
        assert 1 / 3 - 1e-9 <= float(prob) <= 1.0

    def test_predict_nearest_feature_self_gallery(self, tmp_path, capsys):
        run = run_pipeline(tmp_path)
        work = tmp_path / "work"
        manifest = (work / "train.csv").read_text().strip().splitlines()
        first_row = manifest[2].split(",")
        image = work / first_row[0]
        capsys.readouterr()  # drop pipeline chatter
        assert main(["predict", str(image), "--checkpoint", str(run / "model.ckpt"),
                     "--inference-mode", "nearest-feature",
                     "--gallery-manifest", str(work / "train.csv")]) == EXIT_OK
        out = capsys.readouterr().out.strip()
        label, dist = out.split()
        assert label == first_row[1]
        assert float(dist) == 0.0

    def test_eval_nearest_feature_mode(self, tmp_path):
        run = run_pipeline(tmp_path)
        work = tmp_path / "work"
        assert main(["eval", "--test-manifest", str(work / "test.csv"),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--inference-mode", "nearest-feature",
                     "--gallery-manifest", str(work / "train.csv"),
                     "--out", str(run)]) == EXIT_OK
        metrics = json.loads((run / "metrics.json").read_text())
        assert metrics["protocol"]["inference_mode"] == "nearest-feature"

    def test_eval_external_predictions_same_schema(self, tmp_path):
        data = tmp_path / "data"
        out = tmp_path / "out"
        assert main(["synth", "--classes", "2", "--per-class", "4", "--seed", "5",
                     "--out", str(data)]) == EXIT_OK
        manifest_lines = (data / "manifest.csv").read_text().strip().splitlines()
        rows = [line.split(",") for line in manifest_lines[2:]]
        pred_csv = tmp_path / "preds.csv"
        pred_csv.write_text(
            "path,predicted_label\n" + "\n".join(f"{r[0]},{r[1]}" for r in rows) + "\n"
        )
        assert main(["eval", "--test-manifest", str(data / "manifest.csv"),
                     "--predictions", str(pred_csv), "--out", str(out)]) == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["accuracy_trace"] == 1.0
        assert metrics["protocol"]["inference_mode"] == "external"

    def test_mlp_profile_trains_and_evaluates(self, tmp_path):
        run = run_pipeline(tmp_path, classes=2, per_class=6, epochs=2,
                           extra_train=["--profile", "mlp-handcrafted"])
        metrics = json.loads((run / "metrics.json").read_text())
        assert "accuracy_trace" in metrics

    def test_ingest_jaffe_names(self, tmp_path, capsys):
        from microexpr.dataset import GrayImage, encode_pgm

        src = tmp_path / "raw"
        src.mkdir()
        rng = np.random.default_rng(1)
        for name in ("KA.AN1.39.pgm", "KA.HA2.40.pgm", "YM.SU3.41.pgm"):
            (src / name).write_bytes(encode_pgm(GrayImage(rng.random((16, 16)))))
        out = tmp_path / "out"
        assert main(["ingest", str(src), "--out", str(out)]) == EXIT_OK
        text = (out / "manifest.csv").read_text()
        assert text.startswith("# classes: AN,DI,FE,HA,NE,SA,SU\n")
        assert "KA.AN1.39.pgm,AN,KA" in text

    def test_features_csv(self, tmp_path):
        data = tmp_path / "data"
        out = tmp_path / "feat"
        assert main(["synth", "--classes", "2", "--per-class", "3", "--size", "24",
                     "--seed", "4", "--out", str(data)]) == EXIT_OK
        assert main(["features", "--manifest", str(data / "manifest.csv"),
                     "--out", str(out)]) == EXIT_OK
        lines = (out / "descriptors.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 6
        header = lines[0].split(",")
        assert header[0] == "eyes.lbp.0"
        assert header[-1] == "label"


class TestExitCodes:
    def test_empty_manifest_is_validation_error(self, tmp_path):
        m = tmp_path / "empty.csv"
        m.write_text("path,label,subject\n")
        rc = main(["preprocess", "--manifest", str(m), "--out", str(tmp_path / "o")])
        assert rc == EXIT_VALIDATION

    def test_max_epochs_zero_rejected(self, tmp_path):
        data = tmp_path / "data"
        work = tmp_path / "work"
        assert main(["synth", "--classes", "2", "--per-class", "4", "--seed", "1",
                     "--out", str(data)]) == EXIT_OK
        assert main(["preprocess", "--manifest", str(data / "manifest.csv"),
                     "--seed", "1", "--out", str(work)]) == EXIT_OK
        rc = main(["train", "--train-manifest", str(work / "train.csv"),
                   "--max-epochs", "0", "--out", str(tmp_path / "r")])
        assert rc == EXIT_VALIDATION

    def test_malformed_pgm_predict_is_runtime_error(self, tmp_path, capsys):
        run = run_pipeline(tmp_path, classes=2, per_class=6, epochs=1)
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P5\n9 9\n255\nshort")
        rc = main(["predict", str(bad), "--checkpoint", str(run / "model.ckpt")])
        assert rc == EXIT_RUNTIME
        assert "byte offset" in capsys.readouterr().err

    def test_missing_manifest_is_validation_error(self, tmp_path):
        rc = main(["eval", "--test-manifest", str(tmp_path / "nope.csv"),
                   "--checkpoint", "x", "--out", str(tmp_path)])
        assert rc == EXIT_VALIDATION

    def test_unreadable_entries_skipped_with_runtime_exit(self, tmp_path, capsys):
        from microexpr.dataset import GrayImage, encode_pgm

        d = tmp_path / "imgs"
        d.mkdir()
        rng = np.random.default_rng(2)
        (d / "good1.pgm").write_bytes(encode_pgm(GrayImage(rng.random((20, 20)))))
        (d / "good2.pgm").write_bytes(encode_pgm(GrayImage(rng.random((20, 20)))))
        (d / "good3.pgm").write_bytes(encode_pgm(GrayImage(rng.random((20, 20)))))
        (d / "good4.pgm").write_bytes(encode_pgm(GrayImage(rng.random((20, 20)))))
        (d / "bad.pgm").write_bytes(b"P5\n5 5\n255\nxx")
        m = tmp_path / "man.csv"
        m.write_text(
            "path,label,subject\n"
            + "\n".join(f"imgs/good{i}.pgm,A,s{i % 2}" for i in range(1, 5))
            + "\nimgs/bad.pgm,B,s1\n"
        )
        rc = main(["preprocess", "--manifest", str(m), "--split-fraction", "0.5",
                   "--out", str(tmp_path / "w")])
        assert rc == EXIT_RUNTIME
        assert "skipping" in capsys.readouterr().err
        # The good images were still processed.
        assert len(list((tmp_path / "w" / "images").glob("*.pgm"))) == 4
