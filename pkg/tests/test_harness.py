"""Oracle solver, configuration validation, scenario reports."""

import json

import numpy as np
import pytest

from fpcost import harness
from fpcost.harness import (
    ConfigError, ConstraintSpec, ExperimentConfig, closed_form_value,
    config_from_dict, emit_report, oracle_constrained_min, random_spec,
    run_experiment, run_scenarios,
)


# ---------------------------------------------------------------------------
# brute-force oracle vs closed forms


@pytest.mark.parametrize("spec", [
    ConstraintSpec(kind="trace", h=0.1, p=1, a=np.array([0.4]), delta=0.7),
    ConstraintSpec(kind="trace", h=0.2, p=2, a=np.array([0.1, -0.3]),
                   delta=1.8),
    ConstraintSpec(kind="diag", h=0.1, p=1, a=np.array([-0.5]), delta=2.0),
    ConstraintSpec(kind="offdiag", h=0.1, p=2, a=np.array([0.2, 0.2]),
                   delta=0.6),
    ConstraintSpec(kind="out", h=0.1, p=1, delta=0.05, r=1.0),
])
def test_oracle_matches_closed_form(spec):
    got = oracle_constrained_min(spec, vgrid=1200)
    want = closed_form_value(spec)
    assert abs(got - want) / max(abs(want), 1e-2) < 1e-2


def test_oracle_tightens_with_resolution():
    spec = ConstraintSpec(kind="trace", h=0.1, p=1, a=np.array([0.4]),
                          delta=0.7)
    want = closed_form_value(spec)
    coarse = abs(oracle_constrained_min(spec, vgrid=1000) - want)
    fine = abs(oracle_constrained_min(spec, vgrid=4000) - want)
    assert fine <= coarse + 1e-12


def test_random_spec_is_admissible():
    rng = np.random.default_rng(5)
    for kind in harness.KINDS:
        for _ in range(10):
            spec = random_spec(kind, rng)
            assert spec.kind == kind
            assert spec.h > 0
            closed_form_value(spec)  # must not raise


def test_constraint_spec_validation():
    with pytest.raises(ValueError):
        ConstraintSpec(kind="bogus", h=0.1, p=1)
    with pytest.raises(ValueError):
        ConstraintSpec(kind="offdiag", h=0.1, p=1)  # needs two axes
    with pytest.raises(ValueError):
        ConstraintSpec(kind="trace", h=-0.1, p=1)


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip_minimal():
    cfg = config_from_dict({"scenario": "tail-lemma", "n": 16})
    assert cfg.scenario == "tail-lemma"
    assert cfg.n == 16
    assert cfg.p == 1


def test_config_rejects_unknown_field():
    with pytest.raises(ConfigError, match="unknown config field"):
        config_from_dict({"scenario": "tail-lemma", "n": 16, "bogus": 1})


def test_config_rejects_missing_required():
    with pytest.raises(ConfigError, match="'n'"):
        config_from_dict({"scenario": "tail-lemma"})


def test_config_rejects_unknown_scenario():
    with pytest.raises(ConfigError, match="unknown scenario"):
        config_from_dict({"scenario": "nope", "n": 16})


def test_config_rejects_bad_solver_options():
    with pytest.raises(ConfigError, match="solver"):
        config_from_dict({"scenario": "tail-lemma", "n": 16,
                          "solver": {"bogus_option": 3}})


def test_build_drift_kinds(small_grid):
    from fpcost.harness import build_drift
    d = build_drift(small_grid, {"kind": "constant", "a": [0.2]})
    assert np.allclose(d(0.0)[:, 0], 0.2)
    d = build_drift(small_grid, {"kind": "sine", "amplitude": 0.4})
    assert abs(d(0.0)[:, 0]).max() == pytest.approx(0.4, rel=0.05)
    with pytest.raises(ConfigError):
        build_drift(small_grid, {"kind": "bogus"})


# ---------------------------------------------------------------------------
# scenario plumbing (using the cheapest scenario end to end)


def test_run_experiment_emits_report(tmp_path):
    cfg = config_from_dict({"scenario": "tail-lemma", "n": 16,
                            "output_dir": str(tmp_path)})
    result = run_experiment(cfg)
    assert result["passed"] is True
    report = json.loads((tmp_path / "report.json").read_text())
    assert report[0]["scenario"] == "tail-lemma"
    csv = (tmp_path / "report.csv").read_text()
    assert csv.splitlines()[0].startswith("# scenario,check")


def test_reports_are_byte_deterministic(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        out.mkdir()
        run_experiment(config_from_dict(
            {"scenario": "tail-lemma", "n": 16, "output_dir": str(out)}))
    assert (out_a / "report.json").read_bytes() \
        == (out_b / "report.json").read_bytes()
    assert (out_a / "report.csv").read_bytes() \
        == (out_b / "report.csv").read_bytes()


def test_run_scenarios_merges_sorted(tmp_path):
    cfgs = [config_from_dict({"scenario": "tail-lemma", "n": 16,
                              "output_dir": str(tmp_path)}),
            config_from_dict({"scenario": "heat-zero-cost", "n": 32,
                              "output_dir": str(tmp_path)})]
    results = run_scenarios(cfgs)
    names = [r["scenario"] for r in results]
    assert names == sorted(names)
    assert all(r["passed"] for r in results)


def test_checks_carry_values_and_thresholds(scenario):
    result = scenario("tail-lemma", n=16)
    for c in result["checks"]:
        assert set(c) >= {"name", "passed"}
        assert isinstance(c["passed"], bool)
