import json

import numpy as np
import pytest

from vggexport import dpnw
from vggexport.cli import main as cli_main
from vggexport.export import (
    MEANS,
    emit_golden,
    export_weights,
    golden_input,
    run_export,
    write_manifest,
)
from vggexport.vgg import (
    ExportError,
    LAYER_NAMES,
    STAGES,
    layer_plan,
    load_source,
    synthetic_weights,
    tap_forward,
)


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    """Scale-8 synthetic export with fixture and manifest."""
    root = tmp_path_factory.mktemp("mini")
    info = run_export(
        "synthetic:11", root / "weights.dpnw",
        golden_path=root / "golden.dpnw",
        manifest_path=root / "manifest.json",
        width_scale=8,
    )
    return root, info


class TestStructure:
    def test_layer_plan_is_the_published_chain(self):
        plan = layer_plan()
        assert len(plan) == 14
        assert plan[0] == ("conv1_1", 64, 3)
        assert plan[1] == ("conv1_2", 64, 64)
        assert plan[-1] == ("conv5_2", 512, 512)
        # widths step 64,128,256,512,512 with 2,2,4,4,2 convs
        widths = [w for (w, n) in STAGES for _ in range(n)]
        assert [cout for _, cout, _ in plan] == widths

    def test_width_scale_shrinks_with_floor_two(self):
        plan = layer_plan(width_scale=256)
        assert all(cout == 2 for _, cout, _ in plan)
        plan8 = layer_plan(width_scale=8)
        assert plan8[0] == ("conv1_1", 8, 3)
        assert plan8[-1] == ("conv5_2", 64, 64)

    def test_synthetic_weights_deterministic(self):
        a = synthetic_weights(3, width_scale=8)
        b = synthetic_weights(3, width_scale=8)
        for name in LAYER_NAMES:
            assert np.array_equal(a[name][0], b[name][0])
        c = synthetic_weights(4, width_scale=8)
        assert not np.array_equal(a["conv1_1"][0], c["conv1_1"][0])


class TestSources:
    def test_bad_synthetic_seed(self):
        with pytest.raises(ExportError, match="synthetic"):
            load_source("synthetic:not-a-seed")

    def test_missing_file(self):
        with pytest.raises(ExportError, match="does not exist"):
            load_source("/no/such/weights.pth")

    def test_width_scale_rejected_for_files(self, tmp_path):
        p = tmp_path / "w.pth"
        p.write_bytes(b"xx")
        with pytest.raises(ExportError, match="synthetic"):
            load_source(str(p), width_scale=8)

    def test_torch_state_dict_roundtrip(self, tmp_path):
        torch = pytest.importorskip("torch")
        weights = synthetic_weights(5, width_scale=64)
        state = {}
        from vggexport.vgg import TORCHVISION_INDEX
        for name in LAYER_NAMES:
            idx = TORCHVISION_INDEX[name]
            state[f"features.{idx}.weight"] = torch.from_numpy(weights[name][0])
            state[f"features.{idx}.bias"] = torch.from_numpy(weights[name][1])
        path = tmp_path / "vgg.pth"
        torch.save(state, path)
        # loading only resolves names; shape policing happens at export
        loaded, source_id, sha = load_source(str(path))
        assert source_id == str(path)
        assert len(sha) == 64
        for name in LAYER_NAMES:
            assert np.array_equal(loaded[name][0], weights[name][0])

    def test_missing_layer_error_names_it(self, tmp_path):
        torch = pytest.importorskip("torch")
        weights = synthetic_weights(5, width_scale=64)
        state = {}
        from vggexport.vgg import TORCHVISION_INDEX
        for name in LAYER_NAMES:
            if name == "conv3_4":
                continue
            idx = TORCHVISION_INDEX[name]
            state[f"features.{idx}.weight"] = torch.from_numpy(weights[name][0])
            state[f"features.{idx}.bias"] = torch.from_numpy(weights[name][1])
        path = tmp_path / "partial.pth"
        torch.save(state, path)
        with pytest.raises(ExportError, match="conv3_4"):
            load_source(str(path))


class TestExport:
    def test_full_scale_dims_and_flags(self, tmp_path):
        out = tmp_path / "full.dpnw"
        weights, _, _ = load_source("synthetic:0")
        export_weights(weights, out)
        stored = dpnw.read(out)
        assert len(stored) == 28  # 14 layers x (kernel, bias)
        k11, frozen = stored["encoder/conv1_1/kernel"]
        assert k11.shape == (64, 3, 3, 3)
        assert frozen
        k52, _ = stored["encoder/conv5_2/kernel"]
        assert k52.shape == (512, 512, 3, 3)
        assert all(frozen for _, frozen in stored.values())

    def test_shape_surprise_names_layer(self, tmp_path):
        weights = synthetic_weights(0, width_scale=8)
        kernel, bias = weights["conv4_2"]
        weights["conv4_2"] = (kernel[:, :-1], bias)
        with pytest.raises(ExportError, match="conv4_2"):
            export_weights(weights, tmp_path / "bad.dpnw", width_scale=8)

    def test_reexport_byte_identical(self, mini, tmp_path):
        root, _ = mini
        again = tmp_path / "again"
        again.mkdir()
        run_export("synthetic:11", again / "weights.dpnw",
                   golden_path=again / "golden.dpnw", width_scale=8)
        assert (root / "weights.dpnw").read_bytes() == (again / "weights.dpnw").read_bytes()
        assert (root / "golden.dpnw").read_bytes() == (again / "golden.dpnw").read_bytes()

    def test_bgr_source_flips_first_kernel_only(self, tmp_path):
        weights = synthetic_weights(2, width_scale=8)
        export_weights(weights, tmp_path / "rgb.dpnw", "rgb", width_scale=8)
        export_weights(weights, tmp_path / "bgr.dpnw", "bgr", width_scale=8)
        rgb = dpnw.read(tmp_path / "rgb.dpnw")
        bgr = dpnw.read(tmp_path / "bgr.dpnw")
        a = rgb["encoder/conv1_1/kernel"][0]
        b = bgr["encoder/conv1_1/kernel"][0]
        assert np.array_equal(b, a[:, ::-1])
        for name in LAYER_NAMES[1:]:
            assert np.array_equal(rgb[f"encoder/{name}/kernel"][0],
                                  bgr[f"encoder/{name}/kernel"][0])


class TestManifest:
    def test_records_provenance(self, mini):
        root, info = mini
        doc = json.loads((root / "manifest.json").read_text())
        assert doc["source"] == "synthetic:11"
        assert doc["sha256"] == info["sha256"]
        assert doc["width_scale"] == 8
        assert doc["channel_order"] == "rgb"
        assert doc["means_rgb"] == [123.68, 116.779, 103.939]
        assert set(doc["layers"]) == set(LAYER_NAMES)
        assert doc["layers"]["conv2_2"] == [
            "encoder/conv2_2/kernel", "encoder/conv2_2/bias"]

    def test_checksum_pin_rejects_different_source(self, mini, tmp_path):
        root, _ = mini
        manifest = tmp_path / "manifest.json"
        manifest.write_text((root / "manifest.json").read_text())
        with pytest.raises(ExportError, match="refusing"):
            run_export("synthetic:12", tmp_path / "w.dpnw",
                       manifest_path=manifest, width_scale=8)

    def test_same_source_repins_quietly(self, mini, tmp_path):
        root, _ = mini
        manifest = tmp_path / "manifest.json"
        manifest.write_text((root / "manifest.json").read_text())
        run_export("synthetic:11", tmp_path / "w.dpnw",
                   manifest_path=manifest, width_scale=8)

    def test_manifest_distinct_per_seed(self, tmp_path):
        write_manifest(tmp_path / "a.json", "synthetic:1", "a" * 64, "rgb", 1)
        with pytest.raises(ExportError):
            write_manifest(tmp_path / "a.json", "synthetic:2", "b" * 64, "rgb", 1)


class TestGolden:
    def test_input_is_mean_subtracted_byte_grid(self):
        x = golden_input(0)
        assert x.shape == (1, 3, 32, 32)
        assert x.dtype == np.float32
        for c in range(3):
            raw = x[0, c].astype(np.float64) + MEANS[c]
            assert raw.min() >= -1e-4 and raw.max() < 256.0
            assert np.allclose(raw, np.round(raw), atol=1e-4)
        assert not np.array_equal(golden_input(1), x)

    def test_fixture_contents(self, mini):
        root, _ = mini
        stored = dpnw.read(root / "golden.dpnw")
        assert sorted(stored) == (
            ["golden/input"] + [f"golden/tap{i}" for i in range(1, 6)])
        widths = (8, 16, 32, 64, 64)
        extents = (32, 16, 8, 4, 2)
        for i in range(1, 6):
            tap, frozen = stored[f"golden/tap{i}"]
            assert tap.shape == (1, widths[i - 1], extents[i - 1], extents[i - 1])
            assert tap.dtype == np.float32
            assert tap.min() >= 0.0  # post-ReLU

    def test_taps_follow_weights(self, tmp_path):
        a = synthetic_weights(1, width_scale=64)
        b = synthetic_weights(2, width_scale=64)
        x = golden_input(0).astype(np.float64)
        ta = tap_forward(a, x)
        tb = tap_forward(b, x)
        assert not np.allclose(ta[0], tb[0])

    def test_engine_closes_the_loop(self, mini):
        pytest.importorskip("cloudpyr")
        from cloudpyr.checkpoint import load_checkpoint, verify_golden
        root, _ = mini
        loaded = load_checkpoint(root / "weights.dpnw")
        report = verify_golden(loaded.params, root / "golden.dpnw")
        assert report.passed, report.deviations
        assert len(report.deviations) == 5
        assert report.tolerance == 1e-4

    def test_engine_catches_perturbation(self, mini, tmp_path):
        pytest.importorskip("cloudpyr")
        from cloudpyr.checkpoint import load_checkpoint, verify_golden
        root, _ = mini
        weights = synthetic_weights(11, width_scale=8)
        kernel, bias = weights["conv5_2"]
        # nudge the tap conv's bias: at toy widths a single kernel element
        # can land on a dead ReLU channel and vanish, a bias shift cannot
        weights["conv5_2"] = (kernel, bias + np.float32(1e-2))
        export_weights(weights, tmp_path / "w.dpnw", width_scale=8)
        loaded = load_checkpoint(tmp_path / "w.dpnw")
        report = verify_golden(loaded.params, root / "golden.dpnw")
        assert not report.passed
        assert report.deviations[4] > 1e-4


class TestCli:
    def test_export_smoke(self, tmp_path, capsys):
        rc = cli_main([
            "export", "--source", "synthetic:7",
            "--out", str(tmp_path / "w.dpnw"),
            "--golden", str(tmp_path / "g.dpnw"),
            "--manifest", str(tmp_path / "m.json"),
            "--width-scale", "16",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "source synthetic:7" in out
        assert "sha256 " in out
        assert (tmp_path / "w.dpnw").exists()
        assert (tmp_path / "g.dpnw").exists()
        assert (tmp_path / "m.json").exists()

    def test_export_error_exit(self, tmp_path, capsys):
        rc = cli_main([
            "export", "--source", "/missing.pth",
            "--out", str(tmp_path / "w.dpnw"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
