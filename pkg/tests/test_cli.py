"""End-to-end command-line harness behavior."""

import re
import subprocess
import sys

import numpy as np
import pytest

from cloudpyr.checkpoint import load_checkpoint, meta_from_configs, save_checkpoint
from cloudpyr.cli import main, parse_config_file, resolve_config, build_parser
from cloudpyr.data import encode_mask, load_mask

from test_model import desk_model


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert run_cli("synth", "--out", str(root), "--count", "6",
                   "--size", "64", "--seed", "3") == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    run = tmp_path_factory.mktemp("run")
    code = run_cli("train", "--profile", "desk",
                   "--dataset", str(dataset), "--run-dir", str(run),
                   "--iterations", "8", "--checkpoint-every", "4")
    assert code == 0
    return run


class TestSynth:
    def test_pairs_with_matching_stems(self, dataset):
        imgs = sorted(p.name for p in (dataset / "images").glob("*.png"))
        masks = sorted(p.name for p in (dataset / "masks").glob("*.png"))
        assert imgs == masks and len(imgs) == 6

    def test_regeneration_is_bitwise_identical(self, dataset, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path), "--count", "6",
                       "--size", "64", "--seed", "3") == 0
        for rel in ("images/scene000.png", "masks/scene005.png", "manifest.txt"):
            assert (tmp_path / rel).read_bytes() == (dataset / rel).read_bytes()

    def test_masks_validate(self, dataset):
        for p in (dataset / "masks").glob("*.png"):
            encode_mask(load_mask(p))


class TestConfig:
    def test_profile_defaults(self):
        args = build_parser().parse_args(["train", "--profile", "desk"])
        cfg = resolve_config(args)
        assert cfg.encoder == "random5"
        assert (cfg.patch, cfg.batch, cfg.iterations) == (64, 4, 300)

    def test_base_defaults_are_reference_recipe(self):
        args = build_parser().parse_args(["train"])
        cfg = resolve_config(args)
        assert cfg.encoder == "pretrained_frozen"
        assert (cfg.batch, cfg.lr, cfg.iterations, cfg.patch) == (10, 1e-4, 20000, 512)

    def test_flag_overrides_config_file(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("profile=desk\niterations=5\n# comment\n\nseed=9\n")
        args = build_parser().parse_args(
            ["train", "--config", str(f), "--iterations", "7"])
        cfg = resolve_config(args)
        assert cfg.iterations == 7
        assert cfg.seed == 9
        assert cfg.encoder == "random5"

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("warp_speed=9\n")
        from cloudpyr.errors import ConfigError
        with pytest.raises(ConfigError):
            parse_config_file(f)

    def test_resolved_config_round_trips(self, trained):
        kv = parse_config_file(trained / "config.txt")
        assert kv["profile"] == "desk"
        assert kv["iterations"] == "8"


class TestTrain:
    def test_outputs(self, trained):
        lines = (trained / "loss.txt").read_text().splitlines()
        assert len(lines) == 8
        for i, line in enumerate(lines, start=1):
            assert re.fullmatch(rf"{i} \d+\.\d{{6}}", line)
        assert (trained / "loss_curve.png").is_file()
        assert (trained / "checkpoints" / "ckpt_000004.dpnw").is_file()
        assert (trained / "checkpoints" / "ckpt_000008.dpnw").is_file()
        loaded = load_checkpoint(trained / "model.dpnw")
        assert loaded.optim is not None and loaded.optim.t == 8

    def test_loss_decreases_from_start(self, trained):
        lines = (trained / "loss.txt").read_text().splitlines()
        first = float(lines[0].split()[1])
        last = float(lines[-1].split()[1])
        assert last < first

    def test_same_seed_same_log(self, dataset, tmp_path):
        for d in ("a", "b"):
            assert run_cli("train", "--profile", "desk",
                           "--dataset", str(dataset),
                           "--run-dir", str(tmp_path / d),
                           "--iterations", "6") == 0
        assert ((tmp_path / "a" / "loss.txt").read_bytes()
                == (tmp_path / "b" / "loss.txt").read_bytes())

    def test_prefetch_matches_foreground_sampling(self, dataset, tmp_path):
        for d, pf in (("fg", "0"), ("bg", "1")):
            assert run_cli("train", "--profile", "desk",
                           "--dataset", str(dataset),
                           "--run-dir", str(tmp_path / d),
                           "--iterations", "6", "--prefetch", pf) == 0
        assert ((tmp_path / "fg" / "loss.txt").read_bytes()
                == (tmp_path / "bg" / "loss.txt").read_bytes())

    def test_bad_dataset_fails_before_training(self, tmp_path, capsys):
        run = tmp_path / "run"
        code = run_cli("train", "--profile", "desk",
                       "--dataset", str(tmp_path / "nope"),
                       "--run-dir", str(run))
        assert code == 1
        assert "category=data-error" in capsys.readouterr().err
        assert not run.exists()

    def test_pretrained_without_weights_fails_early(self, dataset, tmp_path, capsys):
        code = run_cli("train", "--dataset", str(dataset),
                       "--run-dir", str(tmp_path / "run"))
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error category=")
        assert "encoder_weights" in err


class TestInfer:
    def test_writes_binary_mask_and_latency(self, trained, dataset, capsys):
        out = trained / "mask.png"
        code = run_cli("infer", "--checkpoint", str(trained / "model.dpnw"),
                       "--image", str(dataset / "images" / "scene000.png"),
                       "--out", str(out))
        assert code == 0
        stdout = capsys.readouterr().out
        assert re.search(r"^latency_s=\d+\.\d+$", stdout, re.M)
        mask = load_mask(out)
        assert mask.shape == (64, 64)
        assert set(np.unique(mask)) <= {0, 255}

    def test_forced_tiling_matches_whole_image(self, trained, dataset, tmp_path):
        args = ["--checkpoint", str(trained / "model.dpnw"),
                "--image", str(dataset / "images" / "scene001.png")]
        assert run_cli("infer", *args, "--out", str(tmp_path / "whole.png")) == 0
        assert run_cli("infer", *args, "--out", str(tmp_path / "tiled.png"),
                       "--tile", "32") == 0
        assert ((tmp_path / "whole.png").read_bytes()
                == (tmp_path / "tiled.png").read_bytes())

    def test_checkpoint_without_metadata_rejected(self, tmp_path, capsys):
        m = desk_model(seed=1)
        save_checkpoint(m.store, tmp_path / "bare.dpnw")  # no meta block
        code = run_cli("infer", "--checkpoint", str(tmp_path / "bare.dpnw"),
                       "--image", "whatever.png",
                       "--out", str(tmp_path / "m.png"))
        assert code == 1
        assert "category=checkpoint-error" in capsys.readouterr().err


class TestEval:
    def test_report_files_and_pixel_conservation(self, trained, dataset, capsys):
        out = trained / "eval"
        code = run_cli("eval", "--checkpoint", str(trained / "model.dpnw"),
                       "--dataset", str(dataset), "--out", str(out))
        assert code == 0
        stdout = capsys.readouterr().out
        assert re.search(r"^accuracy=0\.\d{6}$|^accuracy=1\.000000$", stdout, re.M)
        text = (out / "metrics.txt").read_text()
        assert "scenes=6\n" in text
        assert f"pixels={6 * 64 * 64}\n" in text
        import json
        report = json.loads((out / "report.json").read_text())
        assert sum(s["pixels"] for s in report["scenes"]) == report["pixels"]
        assert (out / "eval_summary.png").is_file()

    def test_all_surface_predictions_report_na_precision(self, dataset, tmp_path, capsys):
        m = desk_model(seed=2)
        # slam the head toward channel 0 so every pixel decodes as surface
        m.store["generator/head/kernel"].data[:] = 0.0
        m.store["generator/head/bias"].data[:] = (50.0, -50.0)
        meta = meta_from_configs(m.enc_config, m.gen_config)
        ck = tmp_path / "surface.dpnw"
        save_checkpoint(m.store, ck, meta=meta)
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", str(ck),
                       "--dataset", str(dataset), "--out", str(out)) == 0
        assert "precision=n/a\n" in (out / "metrics.txt").read_text()

    def test_empty_dataset_rejected(self, trained, tmp_path, capsys):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        code = run_cli("eval", "--checkpoint", str(trained / "model.dpnw"),
                       "--dataset", str(tmp_path), "--out", str(tmp_path / "e"))
        assert code == 1
        assert "category=data-error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "cloudpyr.cli", "synth",
         "--out", str(tmp_path), "--count", "1", "--size", "32"],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "scenes=1" in proc.stdout
