import csv
import json

import numpy as np
import pytest

from logitsep.bench import (
    BenchConfig,
    BenchReport,
    BenchRow,
    fit_cost_model,
    fit_line,
    is_monotone,
    parse_classes,
    run_bench,
    sign_test_positive_slope,
    single_logit_slope,
)
from logitsep.errors import DomainError


def _report(classes, times, single=None):
    rows = []
    for i, (k, t) in enumerate(zip(classes, times)):
        s = single[i] if single else t
        rows.append(BenchRow(k, t, 0.0, t / times[0], s, 0.0, [t] * 10, [s] * 10))
    return BenchReport(rows, {}, {})


def test_config_invariants():
    with pytest.raises(DomainError):
        BenchConfig(repetitions=5)
    with pytest.raises(DomainError):
        BenchConfig(classes=(2, 4))
    with pytest.raises(DomainError):
        BenchConfig(classes=(1, 8, 4))
    assert BenchConfig().classes == (1, 1024, 16384, 65536, 262144, 370727)


def test_exact_linear_timings_are_recovered():
    ks = [1, 10, 100, 1000]
    a, b = 2e-4, 3e-7
    fit = fit_cost_model(_report(ks, [a + b * k for k in ks]))
    assert fit.fixed_cost == pytest.approx(a, abs=1e-9)
    assert fit.per_class_cost == pytest.approx(b, abs=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_noisy_timings_still_fit():
    rng = np.random.default_rng(0)
    ks = np.array([1, 2**10, 2**12, 2**14, 2**16, 2**18])
    times = (1e-4 + 1e-8 * ks) * (1 + 0.05 * rng.standard_normal(ks.size))
    assert fit_line(ks, times).r_squared > 0.9


def test_degenerate_sweeps():
    with pytest.raises(DomainError):
        fit_line([5, 5, 5], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        fit_line([1, 2], [1.0, 2.0])


def test_sign_test_and_slope_on_synthetic_samples():
    rng = np.random.default_rng(1)
    ks = [1, 100, 200, 400]
    rows = []
    for k in ks:
        full = (1.0 + 0.01 * k + 0.05 * rng.standard_normal(40)).tolist()
        single = (1.0 + 0.05 * rng.standard_normal(40)).tolist()
        rows.append(BenchRow(k, float(np.mean(full)), 0.0, 1.0, float(np.mean(single)), 0.0, full, single))
    rep = BenchReport(rows, {}, {})
    assert sign_test_positive_slope(rep) < 1e-6
    flat = single_logit_slope(rep)
    assert flat.relative_spread < 0.25
    assert abs(flat.slope) < 5 * flat.stderr


def test_helpers():
    assert parse_classes("1, 2^10,2^18.5") == (1, 1024, 370727)
    assert is_monotone([1.0, 1.0, 2.0]) and not is_monotone([1.0, 0.9])


def test_single_class_run_has_unit_speedup(tmp_path):
    rep = run_bench(BenchConfig(input_dim=8, hidden=(8,), classes=(1,), repetitions=10, warmup=1, batch_size=4))
    assert len(rep.rows) == 1 and rep.rows[0].speedup == 1.0
    rep.write_csv(tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["classes", "time_per_example_s", "speedup"]
    assert rows[1][0] == "1" and float(rows[1][2]) == 1.0


def test_small_sweep_report_is_complete(tmp_path):
    cfg = BenchConfig(input_dim=16, hidden=(16,), classes=(1, 64, 256), repetitions=12, warmup=2, batch_size=4)
    rep = run_bench(cfg)
    assert rep.classes == [1, 64, 256]
    assert all(len(r.samples) == 12 and len(r.single_samples) == 12 for r in rep.rows)
    assert rep.environment["float_width"] == 32
    assert "multi_threaded" in rep.environment
    rep.write_json(tmp_path / "b.json")
    data = json.loads((tmp_path / "b.json").read_text())
    assert data["config"]["classes"] == [1, 64, 256]
    assert isinstance(data["low_confidence"], bool)


@pytest.mark.slow
def test_no_backbone_full_logit_cost_is_linear():
    ks = [2**10, 2**12, 2**14, 2**15, 2**16, 2**17]
    cfg = BenchConfig(input_dim=512, hidden=(), classes=(1, *ks), repetitions=30, warmup=5)
    rep = run_bench(cfg)
    fit = fit_cost_model(rep, ks)
    assert fit.per_class_cost > 0
    assert fit.r_squared >= 0.95
