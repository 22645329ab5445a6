"""tw-lab: ensemble constants, identity verification, decomposition traces and measure generation.

Exit codes: 0 success, 1 a verified identity exceeded its tolerance,
2 invalid configuration or input shape, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import forms
from .alpert import AlpertSystem, DegenerateCubeError, identity_residuals
from .constants import (ALL_CONSTANTS, compute_report, jsonable, pivotal_lemma_suite,
                        poisson_inequality_suite)
from .corona import CoronaConfig, CoronaError, build_corona, default_goodness, shifted, verify_corona
from .grid import GoodnessConfig, Grid, GridError
from .kernel import KernelError, KernelSpec, TruncationSpec, kernel_from_dict
from .measure import Measure, MeasureError, random_doubling
from .operator import NonConvergenceError, SingularQuadratureError, assemble, operator_norm

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERICAL_ERRORS = (SingularQuadratureError, NonConvergenceError, DegenerateCubeError, np.linalg.LinAlgError,
                    FloatingPointError)
FAULTS = ("corrupt-basis",)
INPUT_ERRORS = (GridError, KernelError, MeasureError, CoronaError)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------ config
CONFIG_KEYS = {"grid", "sigma", "omega", "kernel", "kappa", "gamma", "goodness", "seeds", "constants", "forms_kappas",
               "wavelet_kappas", "f", "g", "ratio_samples", "quad_order", "out"}


@dataclass
class ExperimentConfig:
    grid: Grid
    sigma: dict
    omega: dict
    kernel: KernelSpec
    trunc: dict | None = None
    kappa: int = 2
    gamma: float = 4.0
    goodness: GoodnessConfig | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    constants: tuple[str, ...] = ALL_CONSTANTS
    forms_kappas: tuple[int, ...] = (1, 2)
    wavelet_kappas: tuple[int, ...] = (1, 2, 3)
    f: object = None
    g: object = None
    ratio_samples: int = 200
    quad_order: int = 16
    out: str = "tw-lab-out"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        extra = set(d) - CONFIG_KEYS
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            gd = d.get("grid", {"dimension": 1, "depth": 6})
            grid = Grid(int(gd.get("dimension", 1)), int(gd.get("depth", 6)),
                        tuple(gd["origin"]) if "origin" in gd else None, float(gd.get("side", 1.0)))
            kappa = int(d.get("kappa", 2))
            spec, trunc = kernel_from_dict(d.get("kernel", {}), grid.dim)
            good = d.get("goodness")
            good = GoodnessConfig(**good) if good is not None else None
            cfg = cls(grid=grid, sigma=_resolve(d.get("sigma", {"generator": "lebesgue"}), base),
                      omega=_resolve(d.get("omega", {"generator": "lebesgue"}), base), kernel=spec, trunc=trunc,
                      kappa=kappa, gamma=float(d.get("gamma", 4.0)), goodness=good,
                      seeds=[int(s) for s in d.get("seeds", [0])],
                      constants=tuple(d.get("constants", ALL_CONSTANTS)),
                      forms_kappas=tuple(int(k) for k in d.get("forms_kappas", (1, 2))),
                      wavelet_kappas=tuple(int(k) for k in d.get("wavelet_kappas", (1, 2, 3))),
                      f=_resolve(d.get("f", {"generator": "random", "seed": 1}), base),
                      g=_resolve(d.get("g", {"generator": "random", "seed": 2}), base),
                      ratio_samples=int(d.get("ratio_samples", 200)), quad_order=int(d.get("quad_order", 16)),
                      out=str(d.get("out", "tw-lab-out")))
        except ConfigError:
            raise
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = set(self.constants) - set(ALL_CONSTANTS)
        if bad:
            raise ConfigError(f"unknown constants {sorted(bad)}")
        if self.kappa < 1 or min(self.forms_kappas + self.wavelet_kappas, default=1) < 1:
            raise ConfigError("kappa values must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        try:
            if self.goodness is not None:
                self.goodness.validate(self.kappa, self.grid.dim, self.kernel.alpha)
            CoronaConfig(self.gamma, self.kappa, self.kernel.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def goodness_for(self, kappa: int) -> GoodnessConfig:
        return self.goodness if self.goodness is not None else default_goodness(kappa)

    def truncation(self, kappa: int) -> TruncationSpec:
        if self.trunc:
            return TruncationSpec(float(self.trunc["delta"]), float(self.trunc["R"]),
                                  int(self.trunc.get("kappa_s", kappa + 1)))
        return TruncationSpec.default(self.grid, kappa)


def _resolve(spec, base: Path | None):
    """Make file references relative to the config file's directory."""
    if isinstance(spec, dict) and "file" in spec and base is not None:
        spec = dict(spec)
        spec["file"] = str((base / spec["file"]).resolve()) if not os.path.isabs(spec["file"]) else spec["file"]
    return spec


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.from_dict({})
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d, Path(path).resolve().parent)


# ---------------------------------------------------------- instances
def make_measure(spec: dict, grid: Grid, seed: int) -> Measure:
    if "file" in spec:
        try:
            mu = Measure.load(spec["file"])
        except OSError as exc:
            raise ConfigError(f"cannot read measure file: {exc}") from exc
        if mu.grid != grid:
            raise ConfigError(f"shape mismatch: measure file grid {mu.grid.to_dict()} differs from config grid")
        return mu
    gen = spec.get("generator", "lebesgue")
    if gen == "lebesgue":
        return Measure.lebesgue(grid, float(spec.get("scale", 1.0)))
    if gen == "doubling":
        beta = float(spec.get("beta", 0.25))
        if not 0 < beta <= 1.0 / (1 << grid.dim):
            raise ConfigError(f"doubling beta must lie in (0, 2^-n], got {beta}")
        return random_doubling(grid, beta, int(spec.get("seed", seed)))
    raise ConfigError(f"unknown measure generator {gen!r}")


def make_function(spec, grid: Grid, seed: int) -> np.ndarray:
    """Leaf values from an inline list, a file (.json, .npy or text) or a generator."""
    N = grid.n_leaves
    if isinstance(spec, (list, tuple)):
        vals = np.asarray(spec, dtype=float)
    elif "file" in spec:
        vals = read_values(spec["file"])
    else:
        gen = spec.get("generator", "random")
        if gen == "random":
            vals = np.random.default_rng(int(spec.get("seed", 0)) + 1000 * seed).standard_normal(N)
        elif gen == "constant":
            vals = np.full(N, float(spec.get("value", 1.0)))
        elif gen == "zero":
            vals = np.zeros(N)
        elif gen == "spike":
            vals = np.full(N, float(spec.get("base", 1.0)))
            vals[int(spec.get("leaf", 0))] = float(spec.get("height", 1e3))
        else:
            raise ConfigError(f"unknown function generator {gen!r}")
    if vals.shape != (N,):
        raise ConfigError(f"shape mismatch: expected {N} leaf values, got shape {vals.shape}")
    return vals


def read_values(path) -> np.ndarray:
    try:
        if str(path).endswith(".npy"):
            return np.load(path).astype(float).ravel()
        if str(path).endswith(".json"):
            with open(path) as fh:
                d = json.load(fh)
            return np.asarray(d["values"] if isinstance(d, dict) else d, dtype=float).ravel()
        return np.loadtxt(path, dtype=float, ndmin=1).ravel()
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read leaf values from {path}: {exc}") from exc


def instance_measures(cfg: ExperimentConfig, seed: int) -> tuple[Measure, Measure]:
    return make_measure(cfg.sigma, cfg.grid, 2 * seed), make_measure(cfg.omega, cfg.grid, 2 * seed + 1)


def instance_operator(cfg: ExperimentConfig, sigma: Measure, omega: Measure, kappa: int):
    return assemble(cfg.kernel, cfg.truncation(kappa), sigma, omega, quad_order=cfg.quad_order,
                    q_src=kappa, q_tgt=2 * kappa - 1 if kappa > 1 else 1)


# ----------------------------------------------------------- commands
def run_constants(cfg: ExperimentConfig, seed: int) -> dict:
    sigma, omega = instance_measures(cfg, seed)
    op = instance_operator(cfg, sigma, omega, cfg.kappa)
    rep = compute_report(op, cfg.kappa, cfg.constants)
    rep.meta["seed"] = seed
    return {"seed": seed, "json": rep.to_json_dict(), "csv": rep.to_csv(), "values": rep.values}


def main_ratio(v: dict) -> float | None:
    """N / (sqrt(A2) + T + T*), None if an ingredient is missing or the denominator vanishes."""
    try:
        den = np.sqrt(v["A2"]) + v["T"] + v["T_dual"]
        return float(v["N"] / den) if den > 0 else None
    except KeyError:
        return None


def aggregate(results: list[dict]) -> dict:
    names = sorted({k for r in results for k in r["values"]})
    out = {"n_instances": len(results), "constants": {}, "ratios": {}}
    for k in names:
        vals = np.array([r["values"][k] for r in results if k in r["values"]])
        out["constants"][k] = _stats(vals)
    ratios = {
        "N_over_sqrtA2_T_Tdual": [main_ratio(r["values"]) for r in results],
        "T_over_N": [_safe_div(r["values"].get("T"), r["values"].get("N")) for r in results],
        "sqrtA2_over_N": [_safe_div(np.sqrt(r["values"]["A2"]) if "A2" in r["values"] else None,
                                    r["values"].get("N")) for r in results],
    }
    for k, vals in ratios.items():
        vals = np.array([v for v in vals if v is not None], dtype=float)
        out["ratios"][k] = _stats(vals)
    return out


def _safe_div(a, b):
    if a is None or b is None or b == 0:
        return None
    return float(a / b)


def _stats(vals: np.ndarray) -> dict:
    vals = vals[np.isfinite(vals)]
    if not vals.size:
        return {"min": None, "median": None, "max": None, "count": 0}
    return {"min": float(vals.min()), "median": float(np.median(vals)), "max": float(vals.max()),
            "count": int(vals.size)}


def long_csv(results: list[dict], kappa: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "kappa", "quantity", "value"])
    for r in results:
        for k in sorted(r["values"]):
            w.writerow([r["seed"], kappa, k, repr(float(r["values"][k]))])
        m = main_ratio(r["values"])
        if m is not None:
            w.writerow([r["seed"], kappa, "N_over_sqrtA2_T_Tdual", repr(m)])
    return buf.getvalue()


@dataclass
class Check:
    instance: int
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def to_dict(self) -> dict:
        return {"instance": self.instance, "name": self.name, "value": jsonable(self.value), "tol": self.tol,
                "passed": self.passed}


def corrupt_basis(system: AlpertSystem) -> None:
    """Test hook: scale one basis vector so orthonormality breaks."""
    for cid in sorted(system.bases):
        if system.bases[cid].shape[1]:
            system.bases[cid] = system.bases[cid].copy()
            system.bases[cid][:, 0] *= 1.01
            return


def run_verify(cfg: ExperimentConfig, fault: str | None, seed: int) -> dict:
    sigma, omega = instance_measures(cfg, seed)
    g = cfg.grid
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    info: dict = {"seed": seed}
    for k in cfg.wavelet_kappas:
        for side, mu in (("sigma", sigma), ("omega", omega)):
            sysm = AlpertSystem(mu, k)
            if fault == "corrupt-basis":
                corrupt_basis(sysm)
            res = identity_residuals(sysm, rng.standard_normal((g.n_leaves, sysm.p)),
                                     rng.standard_normal((g.n_leaves, sysm.p)))
            checks += [Check(seed, f"wavelet.{name}.{side}.kappa{k}", v, 1e-9) for name, v in sorted(res.items())]
    f = make_function(cfg.f, g, seed)
    gg = make_function(cfg.g, g, seed)
    info["corona"] = {}
    info["ratios"] = {}
    for k in cfg.forms_kappas:
        op = instance_operator(cfg, sigma, omega, k)
        good = cfg.goodness_for(k)
        tree = build_corona(f, sigma, omega, CoronaConfig(cfg.gamma, k, cfg.kernel.alpha))
        sh = shifted(tree, good.tau)
        diag = verify_corona(tree, f, sigma, omega)
        checks.append(Check(seed, f"corona.shift_overlap.kappa{k}", float(sh.overlap.max(initial=0)), float(good.tau)))
        for name in ("average_control", "pivotal_control", "maximal", "partition"):
            checks.append(Check(seed, f"corona.{name}.kappa{k}", 0.0 if getattr(diag, name) else 1.0, 0.0))
        checks.append(Check(seed, f"corona.first_step.kappa{k}", diag.first_step, 1.0 + 1e-12))
        info["corona"][f"kappa{k}"] = {"carleson": diag.carleson, "quasi_orthogonality": diag.quasi_orthogonality,
                                       "n_stopping": len(tree.stopping)}
        led = forms.decompose(op, f, gg, k, tree, sh, good)
        res = led.residuals()
        checks.append(Check(seed, f"forms.pairing_expansion.kappa{k}", res.pop("pairing_expansion"), 1e-9))
        checks += [Check(seed, f"forms.{name}.kappa{k}", v, 1e-8) for name, v in sorted(res.items())]
        for part in ("farabove", "disjoint"):
            checks.append(Check(seed, f"forms.{part}_pairs.kappa{k}", float(led.canonical["counts"][part]), 0.0))
        if k == 1:
            scale = max(1.0, abs(led.pairing["direct"]))
            checks.append(Check(seed, "forms.commutator_kappa1", led.commutator_max() / scale, 1e-10))
        info["ratios"][f"kappa{k}_spec_literal_blocks"] = led.canonical["blocks_only_residual"]
    op = instance_operator(cfg, sigma, omega, 1)
    rep = compute_report(op, 1, ("testing",))
    checks.append(Check(seed, "testing_le_norm", rep.values["T"] - operator_norm(op), 1e-9))
    if cfg.ratio_samples > 0:
        pois = poisson_inequality_suite(sigma, cfg.kappa, cfg.kernel.alpha, cfg.goodness_for(cfg.kappa).eps, cfg.ratio_samples, seed)
        piv = pivotal_lemma_suite(cfg.kernel, cfg.truncation(cfg.kappa), sigma, omega, cfg.kappa,
                                  n_samples=cfg.ratio_samples, seed=seed)
        info["ratios"]["poisson_inequality"] = pois.constant
        info["ratios"]["pivotal_lemma"] = piv.constant
    return {"seed": seed, "checks": [c.to_dict() for c in checks], "info": info}


def run_decompose(cfg: ExperimentConfig, f, g, seed: int) -> dict:
    sigma, omega = instance_measures(cfg, seed)
    k = cfg.kappa
    op = instance_operator(cfg, sigma, omega, k)
    tree = build_corona(f, sigma, omega, CoronaConfig(cfg.gamma, k, cfg.kernel.alpha))
    sh = shifted(tree, cfg.goodness_for(k).tau)
    rep = compute_report(op, k, ("a2", "testing", "testing_kappa", "pivotal"))
    led = forms.decompose(op, f, g, k, tree, sh, cfg.goodness_for(k), rep.values)
    trace = tree.to_dict()
    trace["diagnostics"] = jsonable(vars(verify_corona(tree, f, sigma, omega, rep.values["V2"])))
    trace["shifted"] = {"tau": sh.tau, "max_overlap": int(sh.overlap.max(initial=0))}
    return {"corona": trace, "ledger": led}


# ------------------------------------------------------------- output
def dump_json(obj, path: Path, timestamp: bool) -> None:
    obj = jsonable(obj)
    if timestamp:
        obj = dict(obj)
        obj["generated_at"] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def workers(args) -> int:
    env = os.environ.get("TW_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"TW_LAB_THREADS must be an integer, got {env!r}")
    return max(1, args.parallel)


def pool_map(fn, items, n: int, *extra):
    """Ordered map; results come back in input order whatever the worker count."""
    if n <= 1 or len(items) <= 1:
        return [fn(*extra, it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_call, [(fn, extra, it) for it in items]))


def _call(job):
    fn, extra, it = job
    return fn(*extra, it)


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else cfg.seeds


def cmd_constants(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = pool_map(run_constants, _seeds(cfg, args), workers(args), cfg)
    for r in results:
        dump_json(r["json"], out / f"constants_seed{r['seed']}.json", not args.no_timestamp)
        (out / f"constants_seed{r['seed']}.csv").write_text(r["csv"])
    agg = aggregate(results)
    dump_json(agg, out / "aggregate.json", not args.no_timestamp)
    (out / "ratios_long.csv").write_text(long_csv(results, cfg.kappa))
    r = agg["ratios"]["N_over_sqrtA2_T_Tdual"]
    print(f"{len(results)} instance(s); N/(sqrt A2 + T + T*): min={r['min']} median={r['median']} max={r['max']}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = pool_map(run_verify, _seeds(cfg, args), workers(args), cfg, args.inject_fault)
    failed = [c for r in results for c in r["checks"] if not c["passed"]]
    dump_json({"instances": results, "failed": failed, "passed": not failed}, out / "verify.json",
              not args.no_timestamp)
    worst: dict[str, dict] = {}
    for r in results:
        for c in r["checks"]:
            key = c["name"]
            if key not in worst or _num(c["value"]) > _num(worst[key]["value"]):
                worst[key] = c
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "worst", "tol", "passed"])
    for k in sorted(worst):
        w.writerow([k, repr(_num(worst[k]["value"])), worst[k]["tol"], all(
            c["passed"] for r in results for c in r["checks"] if c["name"] == k)])
    (out / "verify.csv").write_text(buf.getvalue())
    width = max(len(k) for k in worst)
    for k in sorted(worst):
        print(f"{k:<{width}}  {_num(worst[k]['value']):.3e}  (tol {worst[k]['tol']:.0e})")
    for c in failed:
        print(f"FAIL {c['name']} instance={c['instance']} value={c['value']} tol={c['tol']}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def _num(v) -> float:
    return float(v) if not isinstance(v, str) else float("inf")


def cmd_decompose(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seeds(cfg, args)[0]
    f = make_function({"file": args.f} if args.f else cfg.f, cfg.grid, seed)
    g = make_function({"file": args.g} if args.g else cfg.g, cfg.grid, seed)
    res = run_decompose(cfg, f, g, seed)
    dump_json(res["corona"], out / "corona.json", not args.no_timestamp)
    dump_json(res["ledger"].to_dict(), out / "ledger.json", not args.no_timestamp)
    (out / "ledger.csv").write_text(res["ledger"].to_csv())
    print(f"{len(res['corona']['stopping'])} stopping cube(s) in {len(res['corona']['generations'])} generation(s)")
    return EXIT_OK


def cmd_gen_measure(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in _seeds(cfg, args):
        sigma, omega = instance_measures(cfg, seed)
        sigma.save(out / f"sigma_seed{seed}.json")
        omega.save(out / f"omega_seed{seed}.json")
    print(f"wrote {2 * len(_seeds(cfg, args))} measure file(s) to {out}")
    return EXIT_OK


COMMANDS = {"constants": cmd_constants, "verify": cmd_verify, "decompose": cmd_decompose,
            "gen-measure": cmd_gen_measure}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="run a single instance seed instead of the config's list")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--no-timestamp", action="store_true", help="omit generated_at for byte-identical reports")
    common.add_argument("--parallel", type=int, default=1, metavar="K", help="worker processes (TW_LAB_THREADS wins)")
    p = argparse.ArgumentParser(prog="tw-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("constants", parents=[common], help="compute constants for each instance plus an aggregate")
    v = sub.add_parser("verify", parents=[common], help="run identity checks and ratio suites")
    v.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    d = sub.add_parser("decompose", parents=[common], help="corona trace and form ledger for one f, g")
    d.add_argument("--f", help="leaf values of f (.json, .npy or text)")
    d.add_argument("--g", help="leaf values of g")
    sub.add_parser("gen-measure", parents=[common], help="write generated measures as JSON files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if not hasattr(args, "inject_fault"):
            args.inject_fault = None
        return COMMANDS[args.command](cfg, args)
    except NUMERICAL_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except INPUT_ERRORS as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if "shape mismatch" not in str(exc):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
