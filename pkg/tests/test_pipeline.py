import csv
import json

import numpy as np
import pytest

from artifact.errors import ArtifactIOError, ConfigError, StageError
from artifact.imaging import load_npy, reconstruct_transmission
from artifact.pipeline import (
    load_config,
    resolve_config,
    run_compare,
    run_ensemble_ood,
    run_injection_test,
    run_shock_generalization,
    sha256_file,
)


def outputs(run_dir):
    return json.loads((run_dir / "run.json").read_text())["outputs"]


@pytest.fixture(scope="module")
def injection(tmp_path_factory):
    from conftest import TINY_CONFIG

    out = tmp_path_factory.mktemp("inject")
    return out, run_injection_test(resolve_config(TINY_CONFIG), out)


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config()
        assert cfg["fourier"]["lowfreq_radius"] == 20 and cfg["unet"]["epochs"] == 20
        assert cfg["dffn"]["S"] == 100 and cfg["ensemble"]["members"] == 4

    def test_nested_override_keeps_siblings(self):
        cfg = resolve_config({"unet": {"epochs": 3}})
        assert cfg["unet"]["epochs"] == 3 and cfg["unet"]["learning_rate"] == 1e-4

    @pytest.mark.parametrize("user", [
        {"bogus": 1},
        {"unet": {"bogus": 1}},
        {"unet": 5},
        {"methods": []},
        {"methods": ["raw", "magic"]},
        {"dataset": {"n_flats": 1}},
        {"dataset": {"bogus": 1}},
    ])
    def test_rejected(self, user):
        with pytest.raises(ConfigError):
            resolve_config(user)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            load_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "list.json")


class TestInjection:
    def test_report_shape(self, injection):
        out, report = injection
        assert set(report["cases"]) == {"strong", "weak"}
        for case in report["cases"].values():
            assert set(case["methods"]) == {"raw", "fourier", "dffn", "unet"}
            for row in case["methods"].values():
                assert {"mssim", "psnr", "mse", "sigma_t_outside", "rmspe", "filament_lengths"} <= set(row)
            assert case["method_details"]["dffn"]["K"] >= 0
        assert len(report["training"]) == 1 and "wall_time" not in report["training"][0]

    def test_table_and_lineouts(self, injection):
        out, report = injection
        with open(out / "table.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["case", "method", "mssim", "psnr", "mse", "sigma_t_outside", "rmspe"]
        assert len(rows) == 1 + 2 * 4
        with open(out / "strong_lineout.csv") as fh:
            lineout = list(csv.reader(fh))
        assert lineout[0] == ["x_px", "truth", "raw", "fourier", "dffn", "unet"]
        assert len(lineout) == 1 + 64

    def test_raw_row_is_plain_ratio(self, injection):
        out, _ = injection
        from artifact.dataset import Dataset

        case = Dataset(out / "dataset").case("strong")
        np.testing.assert_array_equal(load_npy(out / "strong_raw_T.npy"),
                                      reconstruct_transmission(case["shot"], case["flat"]))

    def test_png_beside_every_npy(self, injection):
        out, _ = injection
        for npy in out.glob("*_T.npy"):
            assert npy.with_suffix(".png").exists()

    def test_run_record_hashes(self, injection):
        out, _ = injection
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "inject-test"
        assert {"numpy", "scipy", "python", "artifact"} <= set(record["versions"])
        assert record["config"]["seed"] == 1
        for rel, digest in record["outputs"].items():
            assert sha256_file(out / rel) == digest
        assert "models/unet.bin" in record["outputs"]
        assert "models/unet.log.jsonl" in record["volatile_outputs"]
        assert "models/unet.log.jsonl" not in record["outputs"]

    def test_deterministic_and_rerunnable_from_record(self, injection, tmp_path):
        out, _ = injection
        again = tmp_path / "again"
        run_injection_test(resolve_config(load_config(out / "run.json")), again)
        assert outputs(again) == outputs(out)
        assert (again / "report.json").read_bytes() == (out / "report.json").read_bytes()

    def test_reuses_dataset_and_model_without_mutating(self, injection, tmp_path, tiny_config):
        out, _ = injection
        before = {p: sha256_file(p) for p in (out / "dataset").rglob("*") if p.is_file()}
        tiny_config["dataset_dir"] = str(out / "dataset")
        tiny_config["unet"]["model_path"] = str(out / "models" / "unet.bin")
        run_injection_test(resolve_config(tiny_config), tmp_path / "reuse")
        assert before == {p: sha256_file(p) for p in (out / "dataset").rglob("*") if p.is_file()}
        assert not (tmp_path / "reuse" / "models").exists()
        first = json.loads((out / "report.json").read_text())
        reused = json.loads((tmp_path / "reuse" / "report.json").read_text())
        # a loaded model has no training history; everything else is identical
        assert "training" not in reused
        first.pop("training")
        assert reused == first


class TestCompare:
    def test_raw_only(self, tmp_path, tiny_config):
        tiny_config["methods"] = ["raw"]
        report = run_compare(resolve_config(tiny_config), tmp_path)
        (case,) = report["cases"].values()
        assert set(case["methods"]) == {"raw"}
        assert case["methods"]["raw"]["sigma_t_outside"] > 0
        assert not (tmp_path / "models").exists()

    def test_named_case_and_lineout_row(self, tmp_path, tiny_config):
        tiny_config["methods"] = ["raw", "fourier"]
        tiny_config["evaluation"] = {"lineout_row": 40, "pixel_pitch": 0.5}
        report = run_compare(resolve_config(tiny_config), tmp_path, case="weak")
        assert list(report["cases"]) == ["weak"] and report["cases"]["weak"]["lineout_row"] == 40
        with open(tmp_path / "weak_lineout.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:2] == ["x_px", "x_um"] and float(rows[4][1]) == 1.5

    def test_missing_dataset_is_stage_tagged(self, tmp_path, tiny_config):
        tiny_config["dataset_dir"] = str(tmp_path / "nowhere")
        with pytest.raises(StageError) as err:
            run_compare(resolve_config(tiny_config), tmp_path / "out")
        assert err.value.stage == "dataset" and isinstance(err.value.cause, ArtifactIOError)


class TestShockAndEnsemble:
    def test_shock_generalization(self, tmp_path, tiny_config):
        report = run_shock_generalization(resolve_config(tiny_config), tmp_path)
        (case,) = report["cases"].values()
        assert set(case["methods"]) == {"filament_trained", "shock_aware"}
        assert np.isfinite(case["methods"]["shock_aware"]["mssim"])
        assert (tmp_path / "models" / "unet_shock.bin").exists()

    def test_missing_model_is_stage_tagged(self, tmp_path, tiny_config):
        tiny_config["unet"]["model_path"] = str(tmp_path / "absent.bin")
        with pytest.raises(StageError) as err:
            run_shock_generalization(resolve_config(tiny_config), tmp_path / "out")
        assert err.value.stage == "train-unet"

    def test_ensemble_ood(self, tmp_path, tiny_config):
        report = run_ensemble_ood(resolve_config(tiny_config), tmp_path)
        assert report["members"] == 2
        assert {c["kind"] for c in report["cases"].values()} == {"filament", "shock"}
        for name, c in report["cases"].items():
            assert c["ratio"] > 0 and isinstance(c["flag"], bool)
            assert (tmp_path / f"{name}_entropy.npy").exists() and (tmp_path / f"{name}_entropy.png").exists()
        # member 0 is the single network trained for the other workflows
        assert (tmp_path / "ensemble" / "member_00.bin").read_bytes() == \
            (tmp_path / "models" / "unet.bin").read_bytes()

    def test_ensemble_as_compare_method(self, tmp_path, tiny_config):
        tiny_config["methods"] = ["raw", "ensemble"]
        report = run_compare(resolve_config(tiny_config), tmp_path)
        (case,) = report["cases"].values()
        assert set(case["methods"]) == {"raw", "ensemble"}
        assert (tmp_path / "ensemble" / "ensemble.json").exists()
        assert "ensemble/member_01.bin" in outputs(tmp_path)

    def test_ensemble_missing_dir(self, tmp_path, tiny_config):
        tiny_config["ensemble"]["model_dir"] = str(tmp_path / "absent")
        with pytest.raises(StageError) as err:
            run_ensemble_ood(resolve_config(tiny_config), tmp_path / "out")
        assert err.value.stage == "ensemble-train"
