"""Command-line entry point: ``wfintertwine verify | simulate | analyze | replay``.

Every run with ``--out DIR`` writes its outputs and a ``manifest.json``
recording the resolved configuration, the seed and where it came from, the
tool version, timestamps and SHA-256 digests of the outputs.  ``replay``
re-runs a manifest; outputs are byte-identical.

Settings resolve in the order: built-in default, ``WFINTERTWINE_SEED`` (seed
only), ``--config`` file (flat ``key = value`` lines), explicit flags.

Exit codes: 0 pass, 1 verification failure, 2 usage or input error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import math
import os
import sys
from fractions import Fraction
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from . import analytics, intertwine, sim
from .kernels import phi_lift, psi_lift
from .poly import FLOAT, RATIONAL, EvenPolynomial, LatticeFunction, NumericFailure

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "WFINTERTWINE_SEED"


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------- settings

DEFAULTS = {
    "verify": {
        "n_max": 12,
        "y0_max": None,
        "t": "0.01,0.1,1",
        "mode": "exact",
        "tol": 1e-12,
        "trials": 1000,
        "perturb_rate": None,
        "seed": 0,
    },
    "simulate": {
        "kind": "coupled",
        "x0": 0.0,
        "y_start": 0,
        "paths": 10_000,
        "dt": 1e-4,
        "eps_boundary": 1e-4,
        "t_max": 20.0,
        "t": "",
        "level_cap": 256,
        "seed": 0,
        "workers": 1,
    },
    "analyze": {
        "task": "moments",
        "input": None,
        "x0": 0.0,
        "paths": 10_000,
        "dt": 1e-4,
        "eps_boundary": 1e-4,
        "t_max": 20.0,
        "t": "0.25,0.5",
        "level_cap": 256,
        "seed": 0,
        "workers": 1,
        "tv_tol": 0.02,
        "ks_tol": 0.03,
        "allowance": 0.005,
        "z": 3.0,
        "n_trunc": 25,
    },
}

_TYPES = {
    "n_max": int, "y0_max": int, "trials": int, "paths": int, "y_start": int,
    "level_cap": int, "seed": int, "workers": int, "n_trunc": int,
    "tol": float, "x0": float, "dt": float, "eps_boundary": float, "t_max": float,
    "tv_tol": float, "ks_tol": float, "allowance": float, "z": float,
}


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    if value is None or value == "None":
        return None
    kind = _TYPES.get(key)
    if kind is None:
        return value
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def resolve_settings(command: str, flags: dict, config_file=None, env=None) -> tuple[dict, str]:
    """Merge defaults, environment seed, config file and flags; returns (settings, seed source)."""
    env = os.environ if env is None else env
    settings = dict(DEFAULTS[command])
    source = "default"
    if env.get(SEED_ENV):
        settings["seed"] = env[SEED_ENV]
        source = f"env:{SEED_ENV}"
    if config_file is not None:
        cfg = read_config_file(config_file)
        unknown = set(cfg) - set(settings)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
        settings.update(cfg)
        if "seed" in cfg:
            source = "config"
    for key, value in flags.items():
        if value is not None:
            settings[key] = value
            if key == "seed":
                source = "flag"
    settings = {k: _coerce(k, v) for k, v in settings.items()}
    if not 0 <= settings["seed"] < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    return settings, source


def parse_times(spec) -> np.ndarray:
    """``"a,b,c"`` or ``"start:stop:step"`` (stop included when on the grid)."""
    if spec is None or str(spec).strip() == "":
        return np.empty(0)
    spec = str(spec)
    try:
        if ":" in spec:
            a, b, h = (float(s) for s in spec.split(":"))
            if h <= 0 or b < a:
                raise ValueError
            n = int(math.floor((b - a) / h + 1e-9))
            return a + h * np.arange(n + 1)
        return np.array([float(s) for s in spec.split(",") if s.strip()])
    except ValueError as exc:
        raise UsageError(f"cannot parse times {spec!r}") from exc


def _sim_config(s: dict) -> sim.SimConfig:
    try:
        return sim.SimConfig(
            dt_base=s["dt"],
            boundary_eps=s["eps_boundary"],
            t_max=s["t_max"],
            n_paths=s["paths"],
            master_seed=s["seed"],
            level_cap=s["level_cap"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- output


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Fraction):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _write_json(path: Path, obj) -> Path:
    path.write_text(_dump(obj), encoding="utf-8")
    return path


def write_manifest(out: Path, command: str, settings: dict, seed_source: str, started, outputs, timings=None):
    manifest = {
        "subcommand": command,
        "config": settings,
        "master_seed": settings["seed"],
        "seed_source": seed_source,
        "tool_version": _version(),
        "started": started.isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": {p.name: _sha256(p) for p in outputs},
        "timings": timings or {},
    }
    return _write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------- verify


def _parse_perturbation(spec, mode: str) -> dict | None:
    if not spec:
        return None
    rates = {}
    for item in str(spec).split(","):
        try:
            y, v = item.split("=")
            rates[int(y)] = Fraction(v.strip()) if mode == RATIONAL else float(v)
        except ValueError as exc:
            raise UsageError(f"bad --perturb-rate entry {item!r}; expected Y=VALUE") from exc
    return rates


def run_verify(s: dict) -> tuple[int, dict, dict]:
    mode = {"exact": RATIONAL, "rational": RATIONAL, "float": FLOAT}.get(s["mode"])
    if mode is None:
        raise UsageError("--mode must be exact or float")
    n_max = s["n_max"]
    y0_max = n_max if s["y0_max"] is None else s["y0_max"]
    if n_max < 0 or y0_max < 0:
        raise UsageError("--n-max and --y0-max must be >= 0")
    t_list = parse_times(s["t"])
    if np.any(t_list < 0):
        raise UsageError("times must be >= 0")
    rates = _parse_perturbation(s["perturb_rate"], mode)
    tol = s["tol"]

    reports = []
    for y0 in range(y0_max + 1):
        reports.append(intertwine.verify_GK_KH(y0, mode, tol, rates=rates))
    for t in t_list:
        reports.append(intertwine.verify_PtK_KQt(float(t), y0_max))
    for n in range(n_max + 1):
        reports.append(intertwine.verify_Lambda_intertwining(n, mode, tol))
    for y0 in range(y0_max + 1):
        reports.append(intertwine.verify_Psi_intertwining(y0, mode, tol))

    timings = {}
    entries = []
    for r in reports:
        d = r.to_json()
        timings[f"{r.identity}[n={r.n},{d['details'].get('t', '')}]"] = d.pop("elapsed")
        entries.append(d)

    approx = []
    for name, f in (
        ("Psi 1{0}", psi_lift(LatticeFunction.indicator(0, 0))),
        ("Phi x^2", phi_lift(EvenPolynomial.monomial(1, 1))),
    ):
        a = intertwine.verify_Pt_approximation(intertwine.APPROX_TIMES, f, intertwine.APPROX_POINTS)
        approx.append({"function": name, **a.to_json()})

    maxp = None
    if s["trials"] > 0:
        maxp = intertwine.positive_maximum_check(5, s["trials"], np.random.default_rng(s["seed"])).to_json()

    passed = all(e["passed"] for e in entries) and all(a["passed"] for a in approx)
    passed = passed and (maxp is None or maxp["violations"] == 0)
    report = {
        "passed": passed,
        "mode": "exact" if mode == RATIONAL else "float",
        "identities": entries,
        "approximation": approx,
        "maximum_principle": maxp,
    }
    failing = next((e for e in entries if not e["passed"]), None)
    if failing is not None:
        print(_dump(failing), file=sys.stderr, end="")
    return (EXIT_PASS if passed else EXIT_FAIL), report, timings


# ---------------------------------------------------------------- simulate


def run_simulate(s: dict, out: Path | None) -> tuple[int, dict, list]:
    kind = s["kind"]
    config = _sim_config(s)
    times = parse_times(s["t"])
    if not 0.0 <= s["x0"] <= 1.0:
        raise UsageError("--x0 must lie in [0, 1]")
    outputs = []
    if kind == "birth":
        ens = sim.birth_ensemble(config, y_start=s["y_start"], workers=s["workers"])
    elif kind == "coupled":
        ens = sim.coupled_ensemble(s["x0"], config, times, workers=s["workers"])
    elif kind == "wf":
        ens = sim.wf_ensemble(s["x0"], config, times, workers=s["workers"])
    else:
        raise UsageError("kind must be coupled, wf or birth")
    if ens.failed.any():
        first = int(np.flatnonzero(ens.failed)[0])
        raise NumericFailure(f"{int(ens.failed.sum())} paths hit a non-finite state; first stream {ens.stream_id(first)}")
    summary = sim.ensemble_summary(ens)
    if kind == "birth":
        summary["reference_mean"] = analytics.explosion_mean(s["y_start"])
    else:
        summary["reference_mean"] = analytics.absorption_mean_from(s["x0"])
    if out is not None:
        outputs.append(sim.write_absorption_csv(out / "absorption.csv", ens.event_time))
        if ens.x is not None and ens.times.size:
            outputs.append(sim.write_trajectories_csv(out / "trajectories.csv", ens))
        outputs.append(_write_json(out / "summary.json", summary))
    return EXIT_PASS, summary, outputs


# ---------------------------------------------------------------- analyze


def _read_csv(path: Path, header: list[str]) -> np.ndarray:
    if not path.exists():
        raise UsageError(f"missing input {path}")
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().strip().split(",")
    if first != header:
        raise UsageError(f"{path}: expected header {','.join(header)}, found {','.join(first)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{path}: malformed CSV ({exc})") from exc
    if data.shape[1] != len(header):
        raise UsageError(f"{path}: expected {len(header)} columns")
    return data


def _input_manifest(path: Path) -> dict:
    mf = path / "manifest.json"
    if not mf.exists():
        raise UsageError(f"missing input {mf}")
    try:
        return json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{mf}: malformed JSON") from exc


def _load_trajectories(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = _read_csv(path / "trajectories.csv", ["path_id", "t", "x", "y"])
    ids = data[:, 0].astype(np.int64)
    n_paths = int(ids.max()) + 1 if ids.size else 0
    if n_paths == 0 or data.shape[0] % n_paths:
        raise UsageError(f"{path / 'trajectories.csv'}: ragged trajectories")
    m = data.shape[0] // n_paths
    if not np.array_equal(ids, np.repeat(np.arange(n_paths), m)):
        raise UsageError(f"{path / 'trajectories.csv'}: rows must be grouped by path_id")
    times = data[:m, 1]
    return times, data[:, 2].reshape(n_paths, m), data[:, 3].reshape(n_paths, m)


def _coupled_input(s: dict):
    """``(x0, times, X, Y)`` from ``--input`` or from a fresh simulation."""
    if s["input"] is not None:
        src = Path(s["input"])
        mf = _input_manifest(src)
        if mf.get("config", {}).get("kind") != "coupled":
            raise UsageError(f"{src} does not hold a coupled simulation")
        times, x, y = _load_trajectories(src)
        return float(mf["config"]["x0"]), times, x, y
    times = parse_times(s["t"])
    if times.size == 0:
        raise UsageError("--t must list at least one time")
    ens = sim.coupled_ensemble(s["x0"], _sim_config(s), times, workers=s["workers"])
    if ens.failed.any():
        raise NumericFailure(f"{int(ens.failed.sum())} paths hit a non-finite state")
    return s["x0"], ens.times, ens.x, ens.y


def _analyze_moments(s):
    x0, times, x, _ = _coupled_input(s)
    rows = []
    for j, t in enumerate(times):
        x2 = x[:, j] ** 2
        x2 = x2[np.isfinite(x2)]
        exact = 1.0 - (1.0 - x0 * x0) * math.exp(-2.0 * t)
        se = float(x2.std(ddof=1) / math.sqrt(x2.size)) if x2.size > 1 else 0.0
        dev = abs(float(x2.mean()) - exact)
        rows.append({
            "t": float(t), "mean_x2": float(x2.mean()), "exact": exact, "se": se,
            "budget": s["z"] * se + s["allowance"], "passed": dev <= s["z"] * se + s["allowance"],
        })
    return {"task": "moments", "x0": x0, "rows": rows, "passed": all(r["passed"] for r in rows)}


def _analyze_averaging(s):
    x0, times, x, y = _coupled_input(s)
    rep = sim.averaging_statistics(x, y, times, x0, tv_tol=s["tv_tol"])
    return {"task": "averaging", **rep.to_json()}


def _analyze_drift(s):
    if s["input"] is None:
        cfg = _sim_config(s)
        rep = sim.drift_sign_check(n_paths=s["paths"], config=cfg, workers=s["workers"])
    else:
        _, times, x, y = _coupled_input(s)
        if times.size < 2:
            raise UsageError("drift-sign needs at least two sample times")
        h = float(np.diff(times).max())
        rep = sim.drift_sign_from_samples(x, y, h)
    rep.z_threshold = s["z"]
    return {"task": "drift-sign", **rep.to_json()}


def _analyze_absorption(s, out: Path | None):
    if s["input"] is not None:
        src = Path(s["input"])
        mf = _input_manifest(src)
        x0 = float(mf.get("config", {}).get("x0", s["x0"]))
        data = _read_csv(src / "absorption.csv", ["path_id", "time"])
        samples = data[:, 1]
        seed = int(mf.get("master_seed", s["seed"]))
    else:
        x0 = s["x0"]
        ens = sim.wf_ensemble(x0, _sim_config(s), workers=s["workers"])
        samples = ens.event_time
        seed = s["seed"]
    finite = samples[np.isfinite(samples)]
    if finite.size == 0:
        raise UsageError("no finite absorption times")
    top = max(20.0, float(finite.max()))
    grid = np.linspace(0.0, top, 4001)
    lower, upper = analytics.absorption_cdf_from(x0, grid, s["n_trunc"])
    lo, up = analytics.step_bounds(grid, lower, upper)
    d_sandwich = analytics.ks_statistic(samples, lo, up)
    ref_cfg = sim.SimConfig(n_paths=samples.size, master_seed=(seed + 1) % 2**64, level_cap=s["level_cap"])
    reference = sim.birth_ensemble(ref_cfg, x_mix=x0).event_time
    d_two = float(ks_2samp(samples, reference).statistic)
    outputs = []
    if out is not None:
        outputs.append(analytics.write_cdf_csv(out / "cdf.csv", grid, lower, upper))
    report = {
        "task": "absorption-ks",
        "x0": x0,
        "n_samples": int(samples.size),
        "ks_vs_sandwich": d_sandwich,
        "ks_two_sample_vs_birth_mixture": d_two,
        "ks_tol": s["ks_tol"],
        "sample_mean": float(finite.mean()),
        "exact_mean": analytics.absorption_mean_from(x0),
        "passed": d_sandwich <= s["ks_tol"] and d_two <= s["ks_tol"],
    }
    return report, outputs


def run_analyze(s: dict, out: Path | None) -> tuple[int, dict, list]:
    task = s["task"]
    outputs = []
    if task == "moments":
        report = _analyze_moments(s)
    elif task == "averaging":
        report = _analyze_averaging(s)
    elif task == "drift-sign":
        report = _analyze_drift(s)
    elif task == "absorption-ks":
        report, outputs = _analyze_absorption(s, out)
    else:
        raise UsageError("task must be averaging, absorption-ks, moments or drift-sign")
    return (EXIT_PASS if report["passed"] else EXIT_FAIL), report, outputs


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wfintertwine", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("--out", help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, help=f"master seed (default from ${SEED_ENV} or 0)")

    v = sub.add_parser("verify", help="run the intertwining verifiers")
    common(v)
    v.add_argument("--n-max", type=int)
    v.add_argument("--y0-max", type=int)
    v.add_argument("--t", help="semigroup times, 'a,b,c' or 'start:stop:step'")
    v.add_argument("--mode", choices=["exact", "float"])
    v.add_argument("--tol", type=float, help="float-mode tolerance (ignored in exact mode)")
    v.add_argument("--trials", type=int, help="maximum principle trials at n=5 (0 skips)")
    v.add_argument("--perturb-rate", help="negative control: override birth rates as Y=VALUE[,...]")

    def sim_flags(sp):
        sp.add_argument("--x0", type=float)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--eps-boundary", type=float)
        sp.add_argument("--t-max", type=float)
        sp.add_argument("--t", help="sample times, 'a,b,c' or 'start:stop:step'")
        sp.add_argument("--level-cap", type=int)
        sp.add_argument("--workers", type=int)

    s = sub.add_parser("simulate", help="simulate coupled, wf or birth ensembles")
    common(s)
    s.add_argument("kind", nargs="?", choices=["coupled", "wf", "birth"])
    sim_flags(s)
    s.add_argument("--y-start", type=int)

    a = sub.add_parser("analyze", help="statistics against closed forms")
    common(a)
    a.add_argument("task", nargs="?", choices=["averaging", "absorption-ks", "moments", "drift-sign"])
    a.add_argument("--input", help="directory written by 'simulate'; simulates afresh when omitted")
    sim_flags(a)
    a.add_argument("--tv-tol", type=float)
    a.add_argument("--ks-tol", type=float)
    a.add_argument("--allowance", type=float)
    a.add_argument("--z", type=float)
    a.add_argument("--n-trunc", type=int)

    r = sub.add_parser("replay", help="re-run the configuration stored in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="output directory (created if missing)")
    return p


def _flags(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "out", "manifest"}
    return {k: v for k, v in vars(ns).items() if k not in skip}


def execute(command: str, settings: dict, seed_source: str, out: Path | None) -> int:
    started = dt.datetime.now(dt.timezone.utc)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timings = {}
    if command == "verify":
        code, report, timings = run_verify(settings)
        outputs = []
    elif command == "simulate":
        code, report, outputs = run_simulate(settings, out)
    else:
        code, report, outputs = run_analyze(settings, out)
    print(_dump(report), end="")
    if out is not None:
        if command != "simulate":
            outputs.append(_write_json(out / "report.json", report))
        write_manifest(out, command, settings, seed_source, started, outputs, timings)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_PASS
    out = Path(ns.out) if getattr(ns, "out", None) else None
    try:
        if ns.command == "replay":
            try:
                mf = json.loads(Path(ns.manifest).read_text(encoding="utf-8"))
                command, settings, seed_source = mf["subcommand"], mf["config"], mf["seed_source"]
            except (OSError, KeyError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read manifest {ns.manifest}: {exc}") from exc
            return execute(command, settings, seed_source, out)
        settings, seed_source = resolve_settings(ns.command, _flags(ns), ns.config)
        return execute(ns.command, settings, seed_source, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, analytics.CancellationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
