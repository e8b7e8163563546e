import csv
import math
from functools import partial

import numpy as np
import pytest

from ssacgan.data import Volume, normalize_volume
from ssacgan.evaluate import (DEFAULT_SIGMAS, MetricsReport, NoiseSweepResult, aggregate_runs,
                              emit_report, evaluate_direction, is_monotone, mae, mse, noise_sweep, read_metrics)
from ssacgan.evaluate import TestSubject as Subject
from ssacgan.phantom import BRAIN_INTENSITY, SKULL_INTENSITY, PhantomSpec, synth_phantom_pair


def vol(arr):
    return Volume(np.asarray(arr, dtype=np.float32), "s", "A")


@pytest.fixture(scope="module")
def stub_task():
    """Bias-free, lesion-free phantoms: the normalized B is an exact affine map of normalized A."""
    spec = PhantomSpec(image_size=32, depth=2, lesion_probability=0.0, bias_amplitude=0.0)
    subjects = []
    for i in range(3):
        a, b = synth_phantom_pair(spec, f"sub-{i}")
        subjects.append(Subject(f"sub-{i}", normalize_volume(a), normalize_volume(b)))
    return spec, subjects


def analytic_stub(spec):
    """Map normalized A to normalized B using the known phantom transform."""
    c, skull, brain = spec.inversion_level, SKULL_INTENSITY, BRAIN_INTENSITY

    def translate(stack):
        raw = (np.asarray(stack, np.float64) + 1.0) * brain / 2.0
        head = stack > -0.75
        return np.where(head, 2 * (c - raw) / (c - skull) - 1, -1.0).astype(np.float32)

    return translate


class TestMetrics:
    def test_identical(self):
        v = vol(np.random.default_rng(0).standard_normal((2, 4, 4)))
        assert mse(v, v) == 0.0 and mae(v, v) == 0.0

    def test_constant_difference(self):
        a = vol(np.zeros((2, 3, 3)))
        b = vol(np.full((2, 3, 3), 0.5))
        assert mse(a, b) == 0.25 and mae(a, b) == 0.5

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 5, 5))
        a32, b32 = a.astype(np.float32), b.astype(np.float32)
        sq = ab = 0.0
        for u, v in zip(a32.ravel().astype(float), b32.ravel().astype(float)):
            sq += (u - v) ** 2
            ab += abs(u - v)
        assert mse(vol(a32), vol(b32)) == pytest.approx(sq / a.size, abs=1e-6)
        assert mae(vol(a32), vol(b32)) == pytest.approx(ab / a.size, abs=1e-6)

    def test_jensen(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = rng.standard_normal((1, 6, 6)), rng.standard_normal((1, 6, 6))
            assert mse(a, b) >= mae(a, b) ** 2 >= 0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            mse(vol(np.zeros((1, 2, 2))), vol(np.zeros((1, 2, 3))))


class TestAggregate:
    def test_simple(self):
        assert aggregate_runs([1, 2, 3]) == (2.0, 1.0)

    def test_constant(self):
        assert aggregate_runs([0.4] * 5)[1] == 0.0

    def test_hand_formula(self):
        vals = list(np.random.default_rng(3).uniform(0, 1, 5))
        m = sum(vals) / 5
        s = math.sqrt(sum((v - m) ** 2 for v in vals) / 4)
        got = aggregate_runs(vals)
        assert abs(got[0] - m) < 1e-9 and abs(got[1] - s) < 1e-9

    def test_needs_two(self):
        with pytest.raises(ValueError):
            aggregate_runs([1.0])


class TestEvaluateDirection:
    def test_identity_on_identical_domains(self):
        rng = np.random.default_rng(4)
        subjects = []
        for i in range(2):
            v = vol(rng.uniform(-1, 1, (2, 8, 8)))
            subjects.append(Subject(str(i), v, v))
        assert evaluate_direction(lambda s: s, subjects, "x2y") == (0.0, 0.0)

    def test_order_invariant(self):
        rng = np.random.default_rng(5)
        subjects = [Subject(str(i), vol(rng.uniform(-1, 1, (1, 8, 8))), vol(rng.uniform(-1, 1, (1, 8, 8))))
                    for i in range(4)]
        fwd = evaluate_direction(lambda s: s * 0.5, subjects, "y2x")
        rev = evaluate_direction(lambda s: s * 0.5, subjects[::-1], "y2x")
        assert fwd == pytest.approx(rev, abs=1e-12)

    def test_analytic_inverse_stub(self, stub_task):
        spec, subjects = stub_task
        got_mse, _ = evaluate_direction(analytic_stub(spec), subjects, "x2y")
        assert got_mse < 1e-6

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_direction(lambda s: s, [], "x2y")

    def test_bad_direction(self, stub_task):
        with pytest.raises(ValueError):
            evaluate_direction(lambda s: s, stub_task[1], "z2x")


class TestNoiseSweep:
    def test_default_grid_endpoints(self):
        assert DEFAULT_SIGMAS[0] == 0.025 and DEFAULT_SIGMAS[-1] == 0.4
        assert list(DEFAULT_SIGMAS) == sorted(set(DEFAULT_SIGMAS))

    def test_zero_sigma_equals_clean(self, stub_task):
        spec, subjects = stub_task
        stub = analytic_stub(spec)
        res = noise_sweep(stub, subjects, [0.0, 0.1], seeds=[0])
        assert res.mean(0.0) == evaluate_direction(stub, subjects, "x2y")[1]

    def test_stub_strictly_increasing(self, stub_task):
        spec, subjects = stub_task
        res = noise_sweep(analytic_stub(spec), subjects, [0.0, *DEFAULT_SIGMAS], seeds=[0, 1])
        means = res.means()
        assert all(b > a for a, b in zip(means, means[1:]))

    def test_seeded(self, stub_task):
        spec, subjects = stub_task
        a = noise_sweep(analytic_stub(spec), subjects, [0.1], seeds=[3])
        b = noise_sweep(analytic_stub(spec), subjects, [0.1], seeds=[3])
        assert a.values == b.values

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            NoiseSweepResult([0.1, 0.05], {0.1: [1.0], 0.05: [1.0]})
        with pytest.raises(ValueError):
            noise_sweep(lambda s: s, [Subject("s", vol(np.zeros((1, 2, 2))), vol(np.zeros((1, 2, 2))))], [], [0])

    def test_merge(self):
        a = NoiseSweepResult([0.0, 0.1], {0.0: [1.0], 0.1: [2.0]})
        b = NoiseSweepResult([0.0, 0.1], {0.0: [3.0], 0.1: [4.0]})
        m = a.merge(b)
        assert m.mean(0.0) == 2.0 and m.std(0.1) == pytest.approx(math.sqrt(2))


class TestMonotone:
    def test_strict(self):
        assert is_monotone([1, 2, 3])

    def test_one_small_inversion(self):
        assert is_monotone([1.0, 2.0, 1.99, 3.0], tolerance=0.02, max_inversions=1)

    def test_two_inversions(self):
        assert not is_monotone([1.0, 0.99, 2.0, 1.99], tolerance=0.02, max_inversions=1)

    def test_large_drop(self):
        assert not is_monotone([1.0, 2.0, 1.5], tolerance=0.02, max_inversions=1)


def _reports(n_seeds=5):
    rng = np.random.default_rng(6)
    reports = []
    for regime in ("cycle", "paired_only", "semi"):
        for direction in ("x2y", "y2x"):
            r = MetricsReport(regime, direction)
            for s in range(n_seeds):
                r.add(s, *rng.uniform(0, 1, 2))
            reports.append(r)
    return reports


class TestReport:
    def test_row_count(self, tmp_path):
        emit_report(_reports(), tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 30
        assert list(rows[0]) == ["regime", "direction", "seed", "mse", "mae"]

    def test_summary_recomputable(self, tmp_path):
        reports = _reports()
        emit_report(reports, tmp_path)
        parsed = read_metrics(tmp_path / "metrics.csv")
        with open(tmp_path / "metrics_summary.csv") as fh:
            summary = {(r["regime"], r["direction"]): r for r in csv.DictReader(fh)}
        for key, rep in parsed.items():
            m, s = aggregate_runs([v[0] for v in rep.per_seed.values()])
            assert abs(m - float(summary[key]["mse_mean"])) < 1e-9
            assert abs(s - float(summary[key]["mse_std"])) < 1e-9
            assert int(summary[key]["n_seeds"]) == 5

    def test_sweep_files_only_when_present(self, tmp_path):
        written = emit_report(_reports(), tmp_path / "plain")
        assert not (tmp_path / "plain" / "noise_sweep.csv").exists()
        assert not (tmp_path / "plain" / "noise_sweep.svg").exists()
        assert len(written) == 2
        sweep = NoiseSweepResult([0.0, 0.1], {0.0: [0.1, 0.12], 0.1: [0.2, 0.22]})
        emit_report(_reports(), tmp_path / "sweep", {"semi": sweep})
        assert (tmp_path / "sweep" / "noise_sweep.csv").read_text().startswith("regime,sigma,")
        assert (tmp_path / "sweep" / "noise_sweep.svg").read_text().lstrip().startswith("<?xml")

    def test_plot_is_deterministic(self, tmp_path):
        sweep = NoiseSweepResult([0.0, 0.1], {0.0: [0.1, 0.12], 0.1: [0.2, 0.22]})
        emit_report(_reports(), tmp_path / "a", {"semi": sweep})
        emit_report(_reports(), tmp_path / "b", {"semi": sweep})
        assert (tmp_path / "a" / "noise_sweep.svg").read_bytes() == (tmp_path / "b" / "noise_sweep.svg").read_bytes()

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report(_reports(), blocker / "sub")

    def test_single_seed_summary_has_nan_std(self):
        r = MetricsReport("semi", "x2y")
        r.add(0, 0.1, 0.2)
        assert math.isnan(r.summary()["mse_std"])


def test_translate_partial_signature():
    """Bundles plug into evaluation through ``partial(bundle.translate, direction=...)``."""
    from ssacgan.nets import ArchConfig, ModelBundle
    bundle = ModelBundle(0, ArchConfig(2, 2, 1))
    x = np.zeros((2, 32, 32), dtype=np.float32)
    subj = [Subject("s", vol(x), vol(x))]
    m, a = evaluate_direction(partial(bundle.translate, direction="x2y"), subj, "x2y")
    assert m >= a ** 2 >= 0
