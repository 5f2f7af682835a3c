"""Command-line front end for the identification/damping-design pipeline.

Subcommands mirror the pipeline stages::

    wadc simulate | identify | design | scenario | pipeline

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 protocol violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .caseio import bundled_case_names
from .errors import ConfigError, NumericalError, ProtocolError, WadcError
from .estimation import EstimatedModel
from .pipeline import Pipeline, RunConfig, dump_json, read_events

__all__ = ["main", "build_parser"]


def _add_config_flags(p):
    p.add_argument("--case", default="two_area",
                   help=f"case file path or bundled name ({', '.join(bundled_case_names())})")
    p.add_argument("--window-s", type=float, default=300.0, help="window length, s")
    p.add_argument("--rate-hz", type=float, default=50.0, help="PMU sampling rate, Hz")
    p.add_argument("--tau-ms", type=float, default=100.0, help="correlation lag, ms")
    p.add_argument("--alpha-pct", type=float, default=5.0, help="gain perturbation, per cent")
    p.add_argument("--target-zeta", type=float, default=0.10, help="damping-ratio target")
    p.add_argument("--sigma", type=float, default=0.05, help="load fluctuation intensity")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--band-hz", type=float, nargs=2, default=(0.1, 1.0),
                   metavar=("LO", "HI"), help="inter-area frequency band, Hz")
    p.add_argument("--initial-gain", type=float, default=0.0,
                   help="uniform starting damping gain per entry")
    p.add_argument("--fallback-gain", type=float, default=-30.0,
                   help="absolute perturbation used for all-zero gain rows")
    p.add_argument("--settle-s", type=float, default=10.0,
                   help="settling interval discarded after gain switches, s")
    p.add_argument("--design-margin-zeta", type=float, default=0.01,
                   help="damping headroom added to the target when designing "
                   "from an estimated model")
    p.add_argument("--backend", choices=("linear", "nonlinear"), default="linear",
                   help="ambient data generator")
    p.add_argument("--scenario-duration-s", type=float, default=60.0)
    p.add_argument("--out", default="wadc-out", help="output directory")


def _config_from(args):
    return RunConfig(
        case=args.case,
        sigma=args.sigma,
        window_s=args.window_s,
        rate_hz=args.rate_hz,
        tau_ms=args.tau_ms,
        alpha_pct=args.alpha_pct,
        target_zeta=args.target_zeta,
        band_hz=tuple(args.band_hz),
        seed=args.seed,
        initial_gain=args.initial_gain,
        fallback_gain=args.fallback_gain,
        settle_s=args.settle_s,
        design_margin_zeta=args.design_margin_zeta,
        backend=args.backend,
        scenario_duration_s=args.scenario_duration_s,
        out_dir=args.out,
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="wadc",
        description="Measurement-driven identification and modal damping design "
        "for grids with converter-based actuators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="emit the pre/post-perturbation ambient windows")
    _add_config_flags(p)

    p = sub.add_parser("identify", help="estimate the state-space model from windows")
    _add_config_flags(p)
    p.add_argument("--windows", default=None,
                   help="directory holding window1.csv/window2.csv/windows_meta.json "
                   "(default: simulate in-process)")

    p = sub.add_parser("design", help="synthesize damping gains from an estimate")
    _add_config_flags(p)
    p.add_argument("--estimate", default=None,
                   help="estimate.json from a previous identify run "
                   "(default: identify in-process)")
    p.add_argument("--use-true-model", action="store_true",
                   help="design on the case's true linearization instead of an estimate")

    p = sub.add_parser("scenario", help="nonlinear disturbance response with/without control")
    _add_config_flags(p)
    p.add_argument("--events", required=True, help="JSON file with the event list")
    p.add_argument("--design", default=None,
                   help="design.json from a previous run (default: full design in-process)")
    p.add_argument("--adapt", action="store_true",
                   help="re-identify and redesign on the post-event topology")

    p = sub.add_parser("pipeline", help="run every stage")
    _add_config_flags(p)
    p.add_argument("--events", default=None, help="optional JSON event list for scenarios")
    p.add_argument("--adapt", action="store_true")
    return parser


def _load_design(path, pipe):
    from .control import MlqrDesign, ModeReport, Mode

    d = json.loads(Path(path).read_text())

    def report(entries):
        return ModeReport(
            modes=tuple(
                Mode(
                    eigenvalue=complex(e["real"], e["imag"]),
                    freq_hz=e["freq_hz"],
                    zeta=e["damping_pct"] / 100.0,
                    kind=e["kind"],
                    targeted=e["targeted"],
                )
                for e in entries
            )
        )

    return MlqrDesign(
        l_map=np.array(d["l_map"]),
        w_q=np.array(d["w_q"]),
        w_r=np.array(d["w_r"]),
        gamma=np.array(d["gamma"]),
        gain=np.array(d["gain"]),
        open_modes=report(d["open_modes"]),
        achieved_modes=report(d["achieved_modes"]),
        target_zeta=d["target_zeta"],
        converged=d["converged"],
        iterations=d["iterations"],
        diagnostics=d.get("diagnostics", {}),
    )


def run(args):
    config = _config_from(args)
    pipe = Pipeline(config)

    if args.command == "simulate":
        pipe.simulate()
        pipe._write("pipeline_report.json", pipe.report.to_dict())
        dump_json(pipe.timings, pipe.out / "timings.json")
        print(f"windows written to {pipe.out}")
        return 0

    if args.command == "identify":
        est = pipe.identify(windows=args.windows)
        pipe._write("pipeline_report.json", pipe.report.to_dict())
        dump_json(pipe.timings, pipe.out / "timings.json")
        err = pipe.report.summary["identify"]["a_rel_fro"]
        print(f"estimate written to {pipe.out} (state-matrix rel. error {err:.2e})")
        print(f"identify stage took {pipe.timings['identify']:.3f} s")
        return 0

    if args.command == "design":
        if args.use_true_model:
            truth = pipe.true_model()
            est = EstimatedModel(
                ac1=truth.a_closed, ac2=truth.a_closed,
                acc_ddelta=truth.a[pipe.rm.ng:, : pipe.rm.ng],
                acc_dpv=truth.b[pipe.rm.ng:, :],
                speed_damping=truth.a[pipe.rm.ng:, pipe.rm.ng:],
                a=truth.a, b=truth.b, omega0=pipe.case.omega0,
            )
        elif args.estimate:
            est = EstimatedModel.from_dict(json.loads(Path(args.estimate).read_text()))
        else:
            est = pipe.identify()
        design = pipe.design(est)
        pipe._write("pipeline_report.json", pipe.report.to_dict())
        dump_json(pipe.timings, pipe.out / "timings.json")
        worst = pipe.report.summary["design"]["true_worst_band_zeta"]
        print(f"design written to {pipe.out}; worst in-band damping on the true "
              f"system: {100 * worst:.2f}%" if worst is not None else "design written")
        print((pipe.out / "modes.txt").read_text())
        return 0

    if args.command == "scenario":
        events = read_events(args.events)
        if args.design:
            design = _load_design(args.design, pipe)
        else:
            design = pipe.design(pipe.identify())
        summary = pipe.scenario(design, events, adapt=args.adapt)
        pipe._write("pipeline_report.json", pipe.report.to_dict())
        dump_json(pipe.timings, pipe.out / "timings.json")
        w = summary["with_control"]
        wo = summary["without_control"]
        print(f"scenario written to {pipe.out}")
        print(f"  with control:    settle {w['settle_s']:.1f} s, "
              f"max modulation {w['max_modulation']:.3f} p.u.")
        print(f"  without control: settle {wo['settle_s']:.1f} s")
        if args.adapt:
            a = summary["adaptiveness"]
            print(f"  stale worst in-band damping:    {100 * a['stale_worst_band_zeta']:.2f}%")
            print(f"  restored worst in-band damping: {100 * a['restored_worst_band_zeta']:.2f}%")
        return 0

    if args.command == "pipeline":
        events = read_events(args.events) if args.events else None
        pipe.run(events=events, adapt=args.adapt)
        ident = pipe.timings.get("identify", 0.0) + pipe.timings.get("design", 0.0)
        print(f"pipeline artifacts in {pipe.out} (config {config.config_hash()})")
        print(f"identify+design core compute: {ident:.3f} s")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return 4
    except WadcError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
