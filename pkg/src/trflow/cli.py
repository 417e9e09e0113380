"""Batch experiment runner.

Verbs: `run` (flow a scenario and write diagnostics), `verify` (structural
suites over a refinement ladder at t = 0), `presets` (list scenario
presets) and `inspect` (summarize a snapshot file).

Config files are flat key = value text with dotted sections and '#'
comments; the full schema is printed by `trflow presets --schema` and
documented in the README.  Runs are deterministic for a fixed config and
seed, and a run directory always receives a copy of the resolved config.

Exit codes: 0 success, 1 failed verification verdict, 2 config error,
3 blow-up, 4 solver failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ambient as amb
from . import flow, geometry, hodge, immersion
from .errors import (BlowUpError, ConfigError, SnapshotError, SolverError,
                     TrflowError)

_SUITES = ("identities", "evolution", "spectrum", "decay", "all")


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s):
    return tuple(int(tok) for tok in s.split())


def _parse_float_list(s):
    return tuple(float(tok) for tok in s.split())


def _parse_str_list(s):
    return tuple(s.split())


SCHEMA = {
    "ambient.kind": (str, None),
    "ambient.n": (int, 2),
    "ambient.chart_radius_max": (float, 10.0),
    "preset.name": (str, None),
    "preset.epsilon": (float, 0.0),
    "preset.epsilon_transverse": (float, 0.0),
    "preset.mode": (_parse_int_list, None),
    "preset.r1": (float, 1.0),
    "preset.r2": (float, 1.0),
    "preset.path": (str, None),
    "grid.resolution": (_parse_int_list, (64, 64)),
    "grid.periods": (_parse_float_list, None),
    "grid.fd_order": (int, 4),
    "flow.c_cfl": (float, 0.05),
    "flow.max_time": (float, 1.0),
    "flow.diagnostic_stride": (int, 10),
    "flow.eigen_stride": (int, 10),
    "flow.sup_H_floor": (float, 0.0),
    "flow.control_b": (float, 4.0),
    "flow.control_eps": (float, None),
    "flow.dt_floor_factor": (float, 1e-6),
    "flow.growth_reject": (float, 1.2),
    "flow.t0_steps": (int, 10),
    "flow.decay_window": (float, 0.5),
    "flow.curvature_ball_R": (float, 1.0),
    "flow.r0": (float, None),
    "flow.measure_kappa_final": (_parse_bool, True),
    "flow.record_smoothing": (_parse_bool, True),
    "verify.suites": (_parse_str_list, ("identities",)),
    "verify.resolutions": (_parse_int_list, (32, 64, 128)),
    "verify.probe_dt": (float, 5e-4),
    "verify.tolerance": (float, 1e-6),
    "verify.max_time": (float, 0.05),
    "output.figures": (_parse_bool, True),
    "seed": (int, 0),
}

_PRESET_AMBIENT = {
    "flat_lagrangian_torus": "flat-torus",
    "product_circles": "flat-torus",
    "clifford_cp2": "fubini-study",
}


@dataclass
class ExperimentConfig:
    """Validated scenario configuration."""

    values: dict = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and fully validate a config; collects precise errors."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    seen = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        conv, _ = SCHEMA[key]
        try:
            values[key] = conv(val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
            continue
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r} "
                          f"(first set on line {seen[key]})")
        seen[key] = lineno

    def line_of(key):
        return f"{source}:{seen[key]}" if key in seen else source

    preset = values["preset.name"]
    if preset is None:
        errors.append(f"{source}: preset.name is required")
    elif preset not in immersion.PRESETS and preset != "file":
        errors.append(
            f"{line_of('preset.name')}: unknown preset {preset!r}; "
            f"available: {sorted(immersion.PRESETS)} or 'file'"
        )
    if preset == "file" and values["preset.path"] is None:
        errors.append(f"{source}: preset.path is required for the file preset")

    kind = values["ambient.kind"]
    want = _PRESET_AMBIENT.get(preset)
    if kind is not None and want is not None and kind != want:
        errors.append(
            f"{line_of('ambient.kind')}: ambient.kind = {kind} conflicts with "
            f"preset.name = {preset} (set on {line_of('preset.name')}), "
            f"which requires {want}"
        )
    if values["grid.fd_order"] not in (2, 4):
        errors.append(
            f"{line_of('grid.fd_order')}: fd_order must be an even order, 2 or 4"
        )
    if any(r < 8 for r in values["grid.resolution"]):
        errors.append(f"{line_of('grid.resolution')}: resolution must be >= 8 per axis")
    if not (0.0 < values["flow.c_cfl"] <= 0.5):
        errors.append(f"{line_of('flow.c_cfl')}: flow.c_cfl must lie in (0, 0.5]")
    if values["grid.periods"] is not None and preset in ("product_circles", "clifford_cp2"):
        errors.append(
            f"{line_of('grid.periods')}: grid.periods is fixed to (2pi, 2pi) "
            f"for preset {preset}"
        )
    bad = [s for s in values["verify.suites"] if s not in _SUITES]
    if bad:
        errors.append(f"{line_of('verify.suites')}: unknown suites {bad}; "
                      f"choose from {_SUITES}")
    if errors:
        raise ConfigError("\n".join(errors))
    return ExperimentConfig(values=values, source=source)


def build_state(cfg: ExperimentConfig, resolution=None) -> immersion.ImmersionState:
    preset = cfg["preset.name"]
    res = tuple(resolution) if resolution is not None else tuple(cfg["grid.resolution"])
    fd = cfg["grid.fd_order"]
    if preset == "file":
        return immersion.load_snapshot(cfg["preset.path"])
    if preset == "flat_lagrangian_torus":
        kwargs = dict(resolution=res, fd_order=fd,
                      epsilon=cfg["preset.epsilon"],
                      intrinsic_dim=len(res))
        if cfg["grid.periods"] is not None:
            kwargs["periods"] = cfg["grid.periods"]
        if cfg["preset.mode"] is not None:
            kwargs["mode"] = cfg["preset.mode"]
        return immersion.flat_lagrangian_torus(**kwargs)
    if preset == "product_circles":
        return immersion.product_circles(cfg["preset.r1"], cfg["preset.r2"],
                                         resolution=res, fd_order=fd)
    if preset == "clifford_cp2":
        return immersion.clifford_cp2(resolution=res, fd_order=fd,
                                      epsilon=cfg["preset.epsilon"],
                                      epsilon_transverse=cfg["preset.epsilon_transverse"],
                                      chart_radius_max=cfg["ambient.chart_radius_max"])
    raise ConfigError(f"unknown preset {preset!r}")


def flow_config(cfg: ExperimentConfig, seed=None) -> flow.FlowConfig:
    return flow.FlowConfig(
        c_cfl=cfg["flow.c_cfl"],
        max_time=cfg["flow.max_time"],
        diagnostic_stride=cfg["flow.diagnostic_stride"],
        eigen_stride=cfg["flow.eigen_stride"],
        sup_H_floor=cfg["flow.sup_H_floor"],
        growth_reject=cfg["flow.growth_reject"],
        dt_floor_factor=cfg["flow.dt_floor_factor"],
        seed=cfg["seed"] if seed is None else seed,
        control_b=cfg["flow.control_b"],
        control_eps=cfg["flow.control_eps"],
        r0=cfg["flow.r0"],
        curvature_ball_R=cfg["flow.curvature_ball_R"],
        t0_steps=cfg["flow.t0_steps"],
        decay_window=cfg["flow.decay_window"],
        measure_kappa_final=cfg["flow.measure_kappa_final"],
        record_smoothing=cfg["flow.record_smoothing"],
    )


# ---------------------------------------------------------------------------
# Artifact writers


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(records, path) -> None:
    lines = [",".join(flow.CSV_COLUMNS)]
    for rec in records:
        lines.append(",".join(_fmt(v) for v in flow.record_to_row(rec)))
    Path(path).write_text("\n".join(lines) + "\n")


PLOT_SCRIPT = """\
# gnuplot script for the diagnostics of this run
set datafile separator ','
set key autotitle columnhead
set logscale y
set xlabel 't'
set terminal pngcairo size 900,600

set output 'gp_decay.png'
plot 'diagnostics.csv' using 1:7 with lines title 'int |H|^2', \\
     'diagnostics.csv' using 1:8 with lines title 'int |omega|^2'

set output 'gp_sups.png'
plot 'diagnostics.csv' using 1:4 with lines title 'sup|A|^2', \\
     'diagnostics.csv' using 1:5 with lines title 'sup|H|^2', \\
     'diagnostics.csv' using 1:6 with lines title 'sup|omega|^2'

unset logscale y
set output 'gp_spectrum.png'
plot 'diagnostics.csv' using 1:9 with lines title 'lambda0', \\
     'diagnostics.csv' using 1:10 with lines title 'rho1', \\
     'diagnostics.csv' using 1:11 with lines title 'lambda11'
"""


def _echo_config(cfg: ExperimentConfig) -> str:
    out = []
    for key in sorted(SCHEMA):
        v = cfg.values[key]
        if v is None:
            continue
        if isinstance(v, (tuple, list)):
            v = " ".join(str(t) for t in v)
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"


def _identity_reports(state) -> list:
    cache = geometry.build_cache(state, full=True)
    reports = geometry.standard_identity_suite(cache)
    if state.model.kind == amb.FUBINI_STUDY:
        reports.append(geometry.ricci_contraction_identity(cache))
    return reports


def run_experiment(cfg: ExperimentConfig, outdir, *, seed=None, resolution=None,
                   quiet=False) -> int:
    """Flow the configured scenario and write all artifacts."""
    state = build_state(cfg, resolution)
    fc = flow_config(cfg, seed)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.cfg").write_text(_echo_config(cfg))

    def say(msg):
        if not quiet:
            print(msg, flush=True)

    t_wall = time.perf_counter()
    say(f"running preset {cfg['preset.name']} on grid {state.grid.resolution} ...")
    blowup = None
    try:
        result = flow.run(state, fc)
    except BlowUpError as exc:
        blowup = exc
        result = exc.partial

    write_csv(result.records, out / "diagnostics.csv")
    with open(out / "certificates.jsonl", "w") as fh:
        for cert in result.certificates:
            fh.write(cert.to_json() + "\n")
    reports = _identity_reports(state)
    try:
        reports_final = _identity_reports(result.final_state)
    except TrflowError:
        reports_final = []
    with open(out / "identity_reports.json", "w") as fh:
        fh.write(json.dumps(
            {"initial": [json.loads(r.to_json()) for r in reports],
             "final": [json.loads(r.to_json()) for r in reports_final]},
            indent=2))
    immersion.save_snapshot(result.final_state, out / "final_state.snap")
    (out / "plots.gp").write_text(PLOT_SCRIPT)

    fit = None
    ts = [r.t for r in result.records]
    h2 = [r.int_H2 for r in result.records]
    if len(ts) >= 10 and all(v > 0 for v in h2):
        try:
            fit = flow.decay_fit(ts, h2, window=cfg["flow.decay_window"])
        except ConfigError:
            fit = None

    summary = {
        "stopped": result.stopped if blowup is None else f"blow-up: {blowup.cause}",
        "blowup_time": blowup.time if blowup is not None else None,
        "final_time": result.records[-1].t if result.records else 0.0,
        "final_sup_H": math.sqrt(result.records[-1].sup_H2) if result.records else None,
        "final_sup_omega": math.sqrt(result.records[-1].sup_omega2) if result.records else None,
        "decay_rate": fit[0] if fit else None,
        "decay_r2": fit[1] if fit else None,
        "monitors": result.monitors,
        "baseline": asdict(result.baseline),
        "epsilon_budget": flow.epsilon_budget(result.baseline,
                                              result.monitors.get("a_run")),
        "wall_seconds": time.perf_counter() - t_wall,
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2, default=str))
    if blowup is not None:
        (out / "blowup.json").write_text(json.dumps(
            {"time": blowup.time, "cause": blowup.cause}, indent=2))

    if cfg["output.figures"]:
        from . import plotting
        plotting.render_figures(result.records, str(out), result.baseline, fit)

    say(f"wrote artifacts to {out} ({summary['wall_seconds']:.1f}s)")
    if blowup is not None:
        say(f"flow blew up at t = {blowup.time:.6g}: {blowup.cause}")
        raise blowup
    return 0


def measure_order(residuals, resolutions):
    """Least-squares convergence order from a refinement ladder."""
    r = np.asarray(residuals, dtype=float)
    n = np.asarray(resolutions, dtype=float)
    if np.any(r <= 0):
        return math.inf
    slope, _ = np.polyfit(np.log(n), np.log(r), 1)
    return float(-slope)


# residuals below this are round-off dominated and carry no order information
ROUNDOFF_FLOOR = 1e-9


def verify(cfg: ExperimentConfig, outdir, *, seed=None, quiet=False) -> int:
    """Run the requested verification suites at t = 0 over a refinement ladder."""
    suites = set(cfg["verify.suites"])
    if "all" in suites:
        suites = {"identities", "evolution", "spectrum", "decay"}
    resolutions = cfg["verify.resolutions"]
    fd_order = cfg["grid.fd_order"]
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"suites": sorted(suites), "resolutions": list(resolutions)}
    ok = True

    def say(msg):
        if not quiet:
            print(msg, flush=True)

    if "identities" in suites:
        ladder = {}
        for res in resolutions:
            n_axes = len(cfg["grid.resolution"])
            state = build_state(cfg, (res,) * n_axes)
            for rep in _identity_reports(state):
                ladder.setdefault(rep.name, []).append(rep.max_norm)
        rows = []
        for name, vals in ladder.items():
            order = measure_order(vals, resolutions)
            at_roundoff = max(vals) < ROUNDOFF_FLOOR
            passed = (at_roundoff or order >= fd_order - 1) and vals[-1] < cfg["verify.tolerance"]
            ok &= passed
            rows.append({"identity": name, "residuals": vals, "order": order,
                         "at_roundoff": at_roundoff, "passed": passed})
            say(f"  identity {name:24s} order {order:6.2f} "
                f"finest {vals[-1]:.3e} {'PASS' if passed else 'FAIL'}")
        report["identities"] = rows

    if "spectrum" in suites:
        rows = []
        for res in resolutions:
            n_axes = len(cfg["grid.resolution"])
            state = build_state(cfg, (res,) * n_axes)
            cache = geometry.build_cache(state, full=True)
            spec = hodge.spectrum(cache, seed=cfg["seed"] if seed is None else seed)
            worst = max(max(v) for v in spec.residual_norms.values() if v)
            passed = worst < 1e-6 and spec.lambda11 > 0
            ok &= passed
            rows.append({"resolution": res, "lambda0": spec.lambda0,
                         "rho1": spec.rho1, "lambda11": spec.lambda11,
                         "harmonic_dimension": spec.harmonic_dimension,
                         "worst_residual": worst, "passed": passed})
            say(f"  spectrum {res}: lambda0 {spec.lambda0:.4f} rho1 {spec.rho1:.4f} "
                f"lambda11 {spec.lambda11:.4f} harm {spec.harmonic_dimension} "
                f"{'PASS' if passed else 'FAIL'}")
        report["spectrum"] = rows

    if "evolution" in suites:
        state = build_state(cfg)
        dt0 = cfg["verify.probe_dt"]
        r1 = flow.consistency_probe(state, dt0, t_center=2 * dt0)
        r2 = flow.consistency_probe(state, dt0 / 2, t_center=2 * dt0)
        ratios = {k: r1[k] / r2[k] for k in r1}
        passed = all(v >= 3.5 for v in ratios.values())
        ok &= passed
        say(f"  evolution dt {dt0:g}: ratios " +
            " ".join(f"{k} {v:.2f}" for k, v in ratios.items()) +
            f" {'PASS' if passed else 'FAIL'}")
        report["evolution"] = {"dt": dt0, "residuals_dt": r1, "residuals_half": r2,
                               "ratios": ratios, "passed": passed}

    if "decay" in suites:
        fc = flow_config(cfg, seed)
        fc = flow.FlowConfig(**{**asdict(fc), "max_time": cfg["verify.max_time"]})
        state = build_state(cfg)
        result = flow.run(state, fc)
        ts = [r.t for r in result.records]
        h2 = [r.int_H2 for r in result.records]
        rate, r2fit = flow.decay_fit(ts, h2, window=cfg["flow.decay_window"])
        a_run = result.monitors.get("a_run", math.nan)
        floor = a_run / 20.0 if math.isfinite(a_run) else -math.inf
        passed = rate >= floor
        ok &= passed
        say(f"  decay: fitted rate {rate:.3f} floor {floor:.3f} R2 {r2fit:.4f} "
            f"{'PASS' if passed else 'FAIL'}")
        report["decay"] = {"rate": rate, "r_squared": r2fit, "floor": floor,
                           "passed": passed}

    report["passed"] = bool(ok)
    (out / "verification_report.json").write_text(json.dumps(report, indent=2))
    say(("verification PASSED" if ok else "verification FAILED") +
        f"; report in {out / 'verification_report.json'}")
    return 0 if ok else 1


def inspect_snapshot(path, quiet=False) -> int:
    state = immersion.load_snapshot(path)
    cache = geometry.build_cache(state, full=False)
    info = {
        "grid": state.grid.to_dict(),
        "ambient": state.model.to_dict(),
        "time": state.time,
        "coordinate_min": [float(v) for v in state.points.reshape(-1, state.model.real_dim).min(0)],
        "coordinate_max": [float(v) for v in state.points.reshape(-1, state.model.real_dim).max(0)],
        "volume": cache.volume(),
        "sup_A2": float(np.max(cache.A_sq)),
        "sup_H2": float(np.max(cache.H_normsq_g)),
        "sup_omega2": float(np.max(cache.omega_normsq)),
        "chart_margin": amb.chart_margin(state.model, state.points),
    }
    print(json.dumps(info, indent=2))
    return 0


def list_presets(show_schema=False) -> int:
    print("presets:")
    print("  flat_lagrangian_torus  flat sub-torus of T^{2n}; epsilon, mode perturb the last v coordinate")
    print("  product_circles        r1 x r2 product of circles in flat C^2 (Lagrangian)")
    print("  clifford_cp2           Clifford torus in one affine chart of CP^2; epsilon perturbs the moduli")
    print("  file                   load preset.path as a snapshot")
    if show_schema:
        print("\nconfig keys (key, default):")
        for key in sorted(SCHEMA):
            print(f"  {key:28s} {SCHEMA[key][1]!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="trflow", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "verify"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resolution", type=int, default=None,
                       help="override the per-axis grid resolution")
        p.add_argument("--quiet", action="store_true")
    p = sub.add_parser("presets")
    p.add_argument("--schema", action="store_true")
    p = sub.add_parser("inspect")
    p.add_argument("snapshot")
    p.add_argument("--quiet", action="store_true")

    args = parser.parse_args(argv)
    try:
        if args.verb == "presets":
            return list_presets(args.schema)
        if args.verb == "inspect":
            return inspect_snapshot(args.snapshot, quiet=args.quiet)
        cfg_text = Path(args.config).read_text()
        cfg = parse_config(cfg_text, source=str(args.config))
        if args.verb == "run":
            res = (args.resolution,) * len(cfg["grid.resolution"]) \
                if args.resolution else None
            return run_experiment(cfg, args.out, seed=args.seed,
                                  resolution=res, quiet=args.quiet)
        return verify(cfg, args.out, seed=args.seed, quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return 3
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4
    except (OSError, SnapshotError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
