"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The desk-scale runs (criteria 8, 10 and 11) train five full-size networks
and take over an hour on one core. Set ``ARTIFACT_ACCEPTANCE_DIR`` to keep
their outputs for inspection.
"""

import json
import math
import os
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from artifact.dffn import build_eff_model, fit_weights
from artifact.ensemble import entropy_map
from artifact.features import phase_correlate, shift_image
from artifact.fourier import filter_image
from artifact.imaging import reconstruct_transmission, save_npy
from artifact.neural.loss import weighted_l1_loss
from artifact.neural.unet import UNetConfig, count_parameters
from artifact.phantom import gen_filament_map, make_artifact_model, make_bundle, random_drift
from artifact.pipeline import resolve_config, run_ensemble_ood, run_injection_test, sha256_file

from gradcheck import TOLERANCE, run_suite
from oracles import (
    PLANTED_WEIGHTS,
    planted_flat_stack,
    planted_shot,
    shift_pattern,
    sinusoid_amplitude,
    sinusoid_case,
)

TITLES = {
    1: "parameter count",
    2: "gradient suite",
    3: "weighted L1 identity",
    4: "entropy closed forms",
    5: "planted eigen-flat-field recovery",
    6: "Fourier sinusoid suppression",
    7: "phase correlation",
    8: "desk-scale method ordering",
    9: "mean transmission",
    10: "ensemble OOD entropy",
    11: "determinism",
}


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, budget=None):
        detail = {}
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield detail
            elapsed = time.perf_counter() - start + detail.pop("extra_seconds", 0.0)
            detail["seconds"] = round(elapsed, 2)
            if budget is not None:
                assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget} s"
            status = "PASS"
        except BaseException as exc:
            detail["error"] = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            raise
        finally:
            with capsys.disabled():
                print(f"\nCRITERION {number:>2} {status}: {TITLES[number]} {json.dumps(detail, default=str)}")

    return run


# -- fast identities ---------------------------------------------------------

def test_criterion_01_parameter_count(criterion):
    with criterion(1, budget=1.0) as d:
        d["count"] = count_parameters(UNetConfig(base_channels=32))
        assert d["count"] == 1_925_025


def test_criterion_02_gradient_suite(criterion):
    with criterion(2, budget=60.0) as d:
        results = run_suite(seeds_per_layer=3)
        d["checks"] = len(results)
        d["worst"] = max(results.values())
        assert len(results) >= 20
        assert all(err <= TOLERANCE for err in results.values()), results


def test_criterion_03_loss_identity(criterion):
    with criterion(3, budget=1.0) as d:
        c = 0.37
        pred, target = np.full((1, 4, 4, 1), 1.0 + c), np.ones((1, 4, 4, 1))
        mask = np.ones((1, 4, 4, 1))
        loss, _ = weighted_l1_loss(pred, target, mask, alpha=10.0)
        d["loss"] = loss
        assert abs(loss - 11 * c) <= 1e-12


def test_criterion_04_entropy(criterion):
    with criterion(4, budget=1.0) as d:
        h = entropy_map(np.array([[1 / (2 * math.pi * math.e), 1.0]]))
        sweep = entropy_map(np.logspace(-12, 3, 500)[None, :])[0]
        d["h"] = h[0].tolist()
        assert abs(h[0, 0]) <= 1e-10
        assert abs(h[0, 1] - 0.5 * math.log(2 * math.pi * math.e)) <= 1e-10
        assert np.all(np.diff(sweep) > 0)


# -- oracles ------------------------------------------------------------------

def planted_recovery(out_dir):
    """Parallel analysis and TV fit on 50 planted stacks; arrays written to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    retained, errors = [], []
    for seed in range(50):
        model = build_eff_model(planted_flat_stack(seed), seed=seed)
        retained.append(model.K)
        save_npy(model.mean_flat, out_dir / f"mean_{seed:02d}.npy")
        for k, eff in enumerate(model.effs[:model.K]):
            save_npy(eff, out_dir / f"eff_{seed:02d}_{k}.npy")
        if model.K >= 2:
            w = fit_weights(planted_shot(model), model).weights
            save_npy(w[None, :], out_dir / f"weights_{seed:02d}.npy")
            errors.append(float(np.max(np.abs(w[:2] / np.array(PLANTED_WEIGHTS) - 1))))
    return retained, errors


def test_criterion_05_planted_effs(criterion, tmp_path):
    with criterion(5, budget=300.0) as d:
        retained, errors = planted_recovery(tmp_path)
        d["K2_fraction"] = sum(k == 2 for k in retained) / len(retained)
        d["worst_weight_error"] = max(errors)
        assert d["K2_fraction"] >= 0.95
        assert d["worst_weight_error"] <= 0.05


def test_criterion_06_fourier(criterion):
    with criterion(6, budget=10.0) as d:
        img, sin = sinusoid_case((128, 128), (0, 48))
        out = filter_image(img)
        d["amplitude_ratio"] = abs(sinusoid_amplitude(out, sin) / sinusoid_amplitude(img, sin))
        d["mean_change"] = abs(out.mean() - img.mean())
        assert d["amplitude_ratio"] <= 0.1
        assert d["mean_change"] <= 1e-10


def test_criterion_07_phase_correlation(criterion):
    with criterion(7, budget=30.0) as d:
        shifts = [(dx, dy) for dx in range(-5, 6) for dy in range(-5, 6)]
        a = shift_pattern(0)
        wrong = [s for s in shifts if phase_correlate(a, shift_image(a, s)) != s]
        exact = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            p = shift_pattern(seed + 1)
            s = tuple(int(v) for v in rng.integers(-5, 6, size=2))
            b = shift_image(p, s)
            b = b + 0.05 * b.std() * rng.standard_normal(b.shape)
            exact += phase_correlate(p, b) == s
        d["circular_exact"] = f"{len(shifts) - len(wrong)}/{len(shifts)}"
        d["noisy_exact"] = exact / 50
        assert not wrong, wrong
        assert exact / 50 >= 0.95


def test_criterion_09_mean_transmission(criterion):
    with criterion(9, budget=10.0) as d:
        shape = (128, 128)
        art = make_artifact_model(0, shape)
        smap, mask, fils = gen_filament_map(1, shape, 3)
        rng = np.random.default_rng(0)
        bundle = make_bundle(art, random_drift(rng), random_drift(rng), 0.42, smap, mask, 1, 2,
                             noise_level=0.0, filaments=fils)
        T = reconstruct_transmission(bundle.shot, bundle.flat)
        d["mean"] = float(T[~mask].mean())
        assert abs(d["mean"] / 0.42 - 1) <= 0.01


# -- desk-scale runs ------------------------------------------------------------

def desk_scale_runs(root):
    """Criterion 8's injection test, then the ensemble reusing its network as member 0."""
    root = Path(root)
    # always train from scratch so cached models cannot mask nondeterminism
    shutil.rmtree(root, ignore_errors=True)
    t0 = time.perf_counter()
    inject = run_injection_test(resolve_config({}), root / "inject")
    t8 = time.perf_counter() - t0
    cfg = resolve_config({"dataset_dir": str(root / "inject" / "dataset"),
                          "unet": {"model_path": str(root / "inject" / "models" / "unet.bin")}})
    ood = run_ensemble_ood(cfg, root / "ensemble")
    t10 = time.perf_counter() - t0 - t8
    return {"root": root, "inject": inject, "ood": ood, "seconds_8": t8, "seconds_10": t10}


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory):
    given = os.environ.get("ARTIFACT_ACCEPTANCE_DIR")
    if given:
        Path(given).mkdir(parents=True, exist_ok=True)
        return Path(given)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk_run(acceptance_root):
    return desk_scale_runs(acceptance_root / "first")


def test_criterion_08_method_ordering(criterion, desk_run):
    with criterion(8, budget=30 * 60) as d:
        d["extra_seconds"] = desk_run["seconds_8"]
        cases = desk_run["inject"]["cases"]
        assert set(cases) == {"strong", "weak"}
        for name, case in cases.items():
            m = case["methods"]
            d[name] = {k: {q: round(m[k][q], 4) for q in ("sigma_t_outside", "mssim", "rmspe")} for k in m}
        for case in cases.values():
            m = case["methods"]
            assert m["unet"]["sigma_t_outside"] < m["raw"]["sigma_t_outside"]
            assert m["unet"]["mssim"] > m["fourier"]["mssim"]
            assert m["unet"]["mssim"] > m["dffn"]["mssim"]
            assert m["unet"]["rmspe"] < m["fourier"]["rmspe"]


def test_criterion_10_ensemble_ood(criterion, desk_run):
    with criterion(10, budget=45 * 60) as d:
        d["extra_seconds"] = desk_run["seconds_8"] + desk_run["seconds_10"]
        ood = desk_run["ood"]
        assert ood["members"] == 4
        cases = ood["cases"]
        d["ratios"] = {name: round(c["ratio"], 3) for name, c in cases.items()}
        kinds = {c["kind"] for c in cases.values()}
        assert {"filament", "shock"} <= kinds
        for c in cases.values():
            if c["kind"] in ("filament", "shock"):
                assert c["ratio"] > 1


def hashed_outputs(run_dir):
    """Non-volatile output hashes from a run record, plus the record's own report files."""
    record = json.loads((Path(run_dir) / "run.json").read_text())
    return record["outputs"]


def test_criterion_11_determinism(criterion, desk_run, acceptance_root, tmp_path):
    with criterion(11) as d:
        first, second = desk_run["root"], acceptance_root / "second"
        a5, b5 = tmp_path / "c5a", tmp_path / "c5b"
        planted_recovery(a5)
        planted_recovery(b5)
        files5 = sorted(p.name for p in a5.iterdir())
        assert files5 == sorted(p.name for p in b5.iterdir())
        diff5 = [f for f in files5 if sha256_file(a5 / f) != sha256_file(b5 / f)]

        desk_scale_runs(second)
        diffs = {}
        for run in ("inject", "ensemble"):
            h1, h2 = hashed_outputs(first / run), hashed_outputs(second / run)
            assert set(h1) == set(h2)
            diffs[run] = sorted(k for k in h1 if h1[k] != h2[k])
        d["files"] = {"criterion5": len(files5), **{r: len(hashed_outputs(first / r)) for r in diffs}}
        d["mismatched"] = {"criterion5": diff5, **diffs}
        assert not diff5 and not any(diffs.values())
