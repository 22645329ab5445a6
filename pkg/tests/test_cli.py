import json

import numpy as np
import pytest

from twlab import cli

SMALL = {
    "grid": {"dimension": 1, "depth": 5},
    "sigma": {"generator": "doubling", "beta": 0.3},
    "omega": {"generator": "doubling", "beta": 0.3},
    "kernel": {"family": "hilbert"},
    "kappa": 1,
    "seeds": [0, 1],
    "constants": ["a2", "norm", "testing", "pivotal"],
    "forms_kappas": [1],
    "wavelet_kappas": [1, 2],
    "ratio_samples": 0,
}


def _write(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, argv, cfg=SMALL, out="out"):
    return cli.main(argv + ["--config", _write(tmp_path, cfg), "--out", str(tmp_path / out), "--no-timestamp"])


def test_constants_lebesgue_a2_is_one(tmp_path):
    cfg = dict(SMALL, sigma={"generator": "lebesgue"}, omega={"generator": "lebesgue"}, seeds=[0])
    assert _run(tmp_path, ["constants"], cfg) == cli.EXIT_OK
    rep = json.loads((tmp_path / "out" / "constants_seed0.json").read_text())
    assert rep["values"]["A2"] == pytest.approx(1.0)
    assert (tmp_path / "out" / "constants_seed0.csv").exists()


def test_zero_kernel_constants_vanish(tmp_path):
    cfg = dict(SMALL, kernel={"family": "zero"}, seeds=[0])
    assert _run(tmp_path, ["constants"], cfg) == cli.EXIT_OK
    v = json.loads((tmp_path / "out" / "constants_seed0.json").read_text())["values"]
    assert v["N"] == 0.0 and v["T"] == 0.0 and v["T_dual"] == 0.0


def test_constants_aggregate_and_determinism(tmp_path):
    assert _run(tmp_path, ["constants"], out="a") == cli.EXIT_OK
    assert _run(tmp_path, ["constants", "--parallel", "2"], out="b") == cli.EXIT_OK
    for name in ("constants_seed0.json", "constants_seed1.json", "aggregate.json", "ratios_long.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    agg = json.loads((tmp_path / "a" / "aggregate.json").read_text())
    assert "generated_at" not in agg
    text = json.dumps(agg)
    assert "min" in text and "median" in text and "max" in text


def test_timestamp_present_by_default(tmp_path):
    cfg = dict(SMALL, seeds=[0])
    assert cli.main(["constants", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "t")]) == 0
    assert "generated_at" in json.loads((tmp_path / "t" / "aggregate.json").read_text())


def test_verify_passes_and_fault_fails(tmp_path, capsys):
    assert _run(tmp_path, ["verify", "--seed", "0"]) == cli.EXIT_OK
    rows = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert rows
    assert _run(tmp_path, ["verify", "--seed", "0", "--inject-fault", "corrupt-basis"], out="bad") == cli.EXIT_VERIFY
    err = capsys.readouterr().err
    assert "FAIL" in err and "orthonormality" in err


def test_verify_reports_kappa1_commutator(tmp_path):
    cfg = dict(SMALL, grid={"dimension": 1, "depth": 8}, seeds=[0])
    assert _run(tmp_path, ["verify"], cfg) == cli.EXIT_OK
    text = (tmp_path / "out" / "verify.json").read_text()
    assert "commutator" in text


def test_decompose_constant_and_zero(tmp_path):
    cfg = dict(SMALL, sigma={"generator": "lebesgue"}, omega={"generator": "lebesgue"},
               f={"generator": "constant"}, g={"generator": "zero"}, kappa=1, seeds=[0])
    assert _run(tmp_path, ["decompose"], cfg) == cli.EXIT_OK
    corona = json.loads((tmp_path / "out" / "corona.json").read_text())
    assert len(corona["stopping"]) == 1
    ledger = json.loads((tmp_path / "out" / "ledger.json").read_text())
    assert ledger["pairing"]["direct"] == 0.0
    assert all(v == 0.0 for v in ledger["size"]["parts"].values())


def test_decompose_spike_matches_corona_module(tmp_path):
    from twlab.corona import CoronaConfig, build_corona
    from twlab.grid import Grid
    from twlab.measure import Measure
    spike = {"generator": "spike", "base": 0.0, "leaf": 11, "height": 5.0}
    cfg = dict(SMALL, sigma={"generator": "lebesgue"}, omega={"generator": "lebesgue"}, gamma=1.5,
               f=spike, seeds=[0])
    assert _run(tmp_path, ["decompose"], cfg) == cli.EXIT_OK
    corona = json.loads((tmp_path / "out" / "corona.json").read_text())
    g = Grid(1, 5)
    f = np.zeros(32)
    f[11] = 5.0
    mu = Measure.lebesgue(g)
    tree = build_corona(f, mu, mu, CoronaConfig(1.5, 1))
    assert len(corona["generations"]) == len(tree.generations) > 1
    assert len(corona["stopping"]) == len(tree.stopping)


def test_decompose_shape_mismatch_exit2(tmp_path):
    bad = tmp_path / "f.json"
    bad.write_text(json.dumps([1.0, 2.0, 3.0]))
    code = _run(tmp_path, ["decompose", "--f", str(bad)])
    assert code == cli.EXIT_CONFIG


@pytest.mark.parametrize("patch", [
    {"grid": {"dimension": 3, "depth": 2}},
    {"kernel": {"family": "nope"}},
    {"constants": ["bogus"]},
    {"gamma": 0.5},
    {"sigma": {"generator": "doubling", "beta": 0.9}},
    {"seeds": []},
    {"kernel": {"family": "hilbert", "truncation": {}}},
    {"typo_key": 1},
])
def test_invalid_config_exit2(tmp_path, patch):
    assert _run(tmp_path, ["constants"], dict(SMALL, **patch)) == cli.EXIT_CONFIG


def test_unreadable_config_exit2(tmp_path):
    assert cli.main(["constants", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_singular_truncation_exit3(tmp_path):
    cfg = dict(SMALL, kernel={"family": "hilbert", "trunc": {"delta": 0.01, "R": 2.0}})
    assert _run(tmp_path, ["constants"], cfg) == cli.EXIT_NUMERIC


def test_gen_measure_roundtrip(tmp_path):
    from twlab.measure import Measure
    assert _run(tmp_path, ["gen-measure"]) == cli.EXIT_OK
    mu = Measure.load(tmp_path / "out" / "sigma_seed1.json")
    cfg = dict(SMALL, sigma={"file": str(tmp_path / "out" / "sigma_seed1.json")}, seeds=[0])
    assert _run(tmp_path, ["constants"], cfg, out="again") == cli.EXIT_OK
    assert mu.total > 0


def test_thread_env_overrides(monkeypatch):
    from types import SimpleNamespace
    monkeypatch.setenv("TW_LAB_THREADS", "3")
    assert cli.workers(SimpleNamespace(parallel=1)) == 3
    monkeypatch.setenv("TW_LAB_THREADS", "x")
    with pytest.raises(cli.ConfigError):
        cli.workers(SimpleNamespace(parallel=1))
    monkeypatch.delenv("TW_LAB_THREADS")
    assert cli.workers(SimpleNamespace(parallel=2)) == 2
