import csv
import math

import numpy as np
import pytest

from nlhomog.errors import ValidationError
from nlhomog.harness import (CONFIG_KEYS, SweepConfig, converging, empirical_rates,
                             run_energy_sweep, run_ocp_sweep, run_sweep, strictly_decreasing,
                             variation)

SMALL = dict(shape="square", size=0.2, resolution=4, n_list=(2, 4), limit_m=8,
             lipschitz_pairs=2)


def test_delta_rules():
    cfg = SweepConfig(kappa=2.0, n_list=(2, 4, 8))
    assert cfg.delta(4) == 0.5
    with pytest.raises(ValidationError):
        cfg.delta(1)
    inf = SweepConfig(kappa="inf", q=0.5)
    assert not inf.finite and math.isinf(inf.kappa)
    assert inf.delta(4) == 0.5
    # delta / eps grows without bound in the infinite regime
    assert inf.delta(64) * 64 > inf.delta(4) * 4


@pytest.mark.parametrize("bad", [dict(kappa=0.0), dict(kappa=-1.0), dict(q=1.0), dict(q=0.0),
                                 dict(n_list=(4, 2)), dict(n_list=()), dict(n_list=(0, 2))])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        SweepConfig(**bad)


def test_config_from_toml(tmp_path):
    p = tmp_path / "sweep.toml"
    p.write_text('kappa = "inf"\nn_list = [2, 4]\nshape = "disk"\nsize = 0.2\n')
    cfg = SweepConfig.from_toml(p)
    assert math.isinf(cfg.kappa) and cfg.n_list == (2, 4) and cfg.shape == "disk"
    p.write_text("kapa = 1\n")
    with pytest.raises(ValidationError, match="kapa"):
        SweepConfig.from_toml(p)


def test_every_field_documented():
    from dataclasses import fields
    assert {f.name for f in fields(SweepConfig)} == set(CONFIG_KEYS)


def test_verdict_helpers():
    assert strictly_decreasing([3, 2, 1]) and not strictly_decreasing([3, 3, 1])
    assert not strictly_decreasing([3, np.nan, 1])
    assert converging([0.0, 0.0]) and converging([4, 2, 1], halve=True)
    assert not converging([4, 3, 2.5], halve=True)
    assert empirical_rates([4.0, 2.0, 0.5]) == [1.0, 2.0]
    assert variation([1.0, 5.0, 1.5]) == 1.5
    assert variation([0.0, 0.0]) == 1.0
    assert variation([1.0, -1.0]) == math.inf


def test_zero_data_sweeps_trivially_converge():
    cfg = SweepConfig(f="zero", **SMALL)
    er = run_energy_sweep(cfg)
    assert all(r.energy == 0.0 for r in er.rows)
    assert er.verdict("energy").passed and er.verdict("two_scale_state").passed
    orr = run_ocp_sweep(cfg)
    assert all(r.cost == 0.0 for r in orr.rows)
    assert orr.verdict("cost").passed


def test_run_sweep_writes_outputs(tmp_path):
    cfg = SweepConfig(**SMALL)
    results, lines = run_sweep(cfg, tmp_path / "out")
    for name in ("energy.csv", "ocp.csv", "summary.txt"):
        assert (tmp_path / "out" / name).exists()
    with open(tmp_path / "out" / "energy.csv") as fh:
        body = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(body))
    assert [int(r["n"]) for r in rows] == [2, 4]
    assert float(rows[0]["energy_gap"]) > float(rows[1]["energy_gap"])
    assert any(ln.strip().startswith("PASS energy") for ln in lines)
    for r in results[1].rows:
        assert max(r.residual_state, r.residual_adjoint, r.residual_control) <= 1e-9
