"""Batch pipeline: simulate ambient data, identify, design, run scenarios.

Each stage writes plain-text artifacts (CSV for series, canonical JSON for
matrices and reports) into the run's output directory; identical
configuration and seed produce byte-identical artifacts, with wall-clock
timings kept in a separate file excluded from that guarantee.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .caseio import load_case
from .control import design_wadc, modes
from .dynamics import NoiseModel, PmuWindow, assemble_state_space, closed_loop
from .errors import ConfigError, ProtocolError
from .estimation import (
    EstimatedModel,
    OuWindowSource,
    TransientWindowSource,
    make_perturbation,
    run_identification,
)
from .network import eliminate_vsc, jacobian_blocks, solve_equilibrium
from .transient import ScenarioEvent, simulate_nonlinear

__all__ = ["RunConfig", "PipelineReport", "Pipeline", "read_events", "dump_json"]


def dump_json(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n")
    return text


def read_events(path):
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ConfigError(f"{path}: expected a JSON list of events")
    return [ScenarioEvent.from_dict(d) for d in data]


@dataclass(frozen=True)
class RunConfig:
    """Reproducible description of one pipeline run.

    All quantities follow the library defaults: 300 s windows at 50 Hz with
    a 100 ms correlation lag, 5 per cent gain perturbations, a 10 per cent
    damping-ratio target, and load-fluctuation intensities of 0.05.
    """

    case: str = "two_area"
    sigma: float = 0.05
    window_s: float = 300.0
    rate_hz: float = 50.0
    tau_ms: float = 100.0
    alpha_pct: float = 5.0
    target_zeta: float = 0.10
    band_hz: tuple[float, float] = (0.1, 1.0)
    seed: int = 0
    initial_gain: float = 0.0  # uniform starting damping gain, per entry
    fallback_gain: float = -30.0  # absolute perturbation for all-zero gain rows
    settle_s: float = 10.0
    design_margin_zeta: float = 0.01  # extra damping headroom when designing
    # from an estimated model, absorbing estimation error on the true system
    backend: str = "linear"  # linear | nonlinear ambient data generator
    dt_nonlinear: float = 0.01
    scenario_duration_s: float = 60.0
    out_dir: str = "wadc-out"

    def __post_init__(self):
        if self.backend not in ("linear", "nonlinear"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        for name in ("sigma", "window_s", "rate_hz", "tau_ms", "settle_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 < self.target_zeta < 1:
            raise ConfigError("target_zeta must be a fraction in (0, 1)")
        object.__setattr__(self, "band_hz", tuple(float(b) for b in self.band_hz))

    @property
    def tau_s(self):
        return self.tau_ms / 1000.0

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["band_hz"] = list(self.band_hz)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "band_hz" in d:
            d["band_hz"] = tuple(d["band_hz"])
        return cls(**d)

    def config_hash(self):
        """Hash of every semantic field (the output location is excluded)."""
        semantic = self.to_dict()
        semantic.pop("out_dir")
        blob = json.dumps(semantic, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PipelineReport:
    config: dict
    config_hash: str
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "artifacts": self.artifacts,
            "summary": self.summary,
        }


def _mode_report_doc(report):
    return report.to_dicts()


def _dominant_errors(est, true, quantile=0.75):
    err = {}
    thr = np.quantile(np.abs(true), quantile) if true.size else 0.0
    mask = np.abs(true) >= thr if true.size else np.zeros_like(true, dtype=bool)
    if true.size:
        err["rel_fro"] = float(np.linalg.norm(est - true) / max(np.linalg.norm(true), 1e-300))
        rel = np.abs(est - true)[mask] / np.abs(true)[mask]
        err["dominant_rel"] = [float(x) for x in rel]
        err["dominant_rel_max"] = float(rel.max()) if rel.size else 0.0
    return err


class Pipeline:
    """Stage runner bound to one configuration and output directory."""

    def __init__(self, config):
        self.config = config
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.case = load_case(config.case)
        self.rm = solve_equilibrium(self.case)
        self.elim = eliminate_vsc(jacobian_blocks(self.rm), self.rm.inertia)
        self.noise = NoiseModel(sigma=config.sigma, seed=config.seed)
        self.timings = {}
        self.report = PipelineReport(config=config.to_dict(), config_hash=config.config_hash())

    # --- helpers -----------------------------------------------------------
    def initial_gain_matrix(self):
        return np.full((self.rm.nv, self.rm.ng), float(self.config.initial_gain))

    def window_source(self):
        cfg = self.config
        if cfg.backend == "linear":
            return OuWindowSource(
                self.rm,
                self.noise,
                rate_hz=cfg.rate_hz,
                window_s=cfg.window_s,
                settle_s=cfg.settle_s,
                elim=self.elim,
            )
        return TransientWindowSource(
            self.case,
            self.noise,
            rate_hz=cfg.rate_hz,
            window_s=cfg.window_s,
            settle_s=cfg.settle_s,
            dt=cfg.dt_nonlinear,
            rm=self.rm,
        )

    def true_model(self, case=None):
        if case is None:
            return assemble_state_space(self.rm, elim=self.elim, sigma=self.config.sigma)
        rm = solve_equilibrium(case)
        return assemble_state_space(rm, sigma=self.config.sigma)

    def _timed(self, name, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timings[name] = time.perf_counter() - t0
        return out

    def _write(self, name, obj):
        path = self.out / name
        dump_json(obj, path)
        self.report.artifacts[name] = name
        return path

    # --- stages ------------------------------------------------------------
    def simulate(self):
        """Emit the pre/post-perturbation ambient window pair as CSV."""
        cfg = self.config
        gain = self.initial_gain_matrix()
        plan = make_perturbation(gain, cfg.alpha_pct, fallback_abs=cfg.fallback_gain)
        source = self.window_source()

        def run():
            w1 = source(gain, 0)
            w2 = source(gain + plan.delta_gain, 1)
            return w1, w2

        w1, w2 = self._timed("simulate", run)
        p1, p2 = self.out / "window1.csv", self.out / "window2.csv"
        w1.to_csv(p1)
        w2.to_csv(p2)
        self.report.artifacts["window1.csv"] = "window1.csv"
        self.report.artifacts["window2.csv"] = "window2.csv"
        self._write(
            "windows_meta.json",
            {
                "config_hash": self.config.config_hash(),
                "seed": cfg.seed,
                "gain": gain.tolist(),
                "delta_gain": plan.delta_gain.tolist(),
                "alpha_pct": cfg.alpha_pct,
                "perturbation_columns": list(plan.columns),
                "fallback_rows": list(plan.fallback_rows),
            },
        )
        return w1, w2

    def identify(self, windows=None):
        """Estimate the model, from files when given, else via the simulator."""
        cfg = self.config
        gain = self.initial_gain_matrix()
        omega0 = self.case.omega0

        if windows is not None:
            w_dir = Path(windows)
            meta_path = w_dir / "windows_meta.json"
            w1_path, w2_path = w_dir / "window1.csv", w_dir / "window2.csv"
            if not w1_path.exists():
                raise ProtocolError(f"missing first window: {w1_path}")
            if not w2_path.exists():
                raise ProtocolError(
                    f"missing second (post-perturbation) window: {w2_path}; "
                    "the identification protocol needs both"
                )
            if not meta_path.exists():
                raise ProtocolError(f"missing windows_meta.json next to the windows")
            meta = json.loads(meta_path.read_text())
            gain = np.array(meta["gain"])
            delta = np.array(meta["delta_gain"])
            pool = [PmuWindow.from_csv(w1_path), PmuWindow.from_csv(w2_path)]

            def source(g, index):
                expected = gain if index == 0 else gain + delta
                if not np.allclose(g, expected, atol=1e-12):
                    raise ProtocolError("window files do not match the requested gains")
                return pool[index]

        else:
            source = self.window_source()

        def run():
            return run_identification(
                source,
                gain,
                omega0,
                alpha_pct=cfg.alpha_pct,
                tau=cfg.tau_s,
                fallback_abs=cfg.fallback_gain,
            )

        est = self._timed("identify", run)
        self._write("estimate.json", est.to_dict())

        # the bundled cases are synthetic: emit the truth-comparison table
        truth = self.true_model()
        errors = {
            "a_rel_fro": float(
                np.linalg.norm(est.a - truth.a) / np.linalg.norm(truth.a)
            ),
            "speed_damping": _dominant_errors(
                est.speed_damping, -np.diag(self.rm.damping / self.rm.inertia)
            ),
            "acc_ddelta": _dominant_errors(est.acc_ddelta, self.elim.acc_ddelta),
            "acc_dpv": _dominant_errors(est.acc_dpv, self.elim.acc_dpv),
        }
        self._write("estimate_errors.json", errors)
        self.report.summary["identify"] = {
            "a_rel_fro": errors["a_rel_fro"],
            "diagnostics": est.diagnostics,
        }
        return est

    def design(self, est, margin=None):
        """Synthesize the damping gains from an estimated (or true) model.

        The tuning target carries a small headroom above the configured
        damping ratio so estimation error does not pull the true system
        below the requested level.
        """
        cfg = self.config
        margin = cfg.design_margin_zeta if margin is None else margin

        def run():
            return design_wadc(
                est.a,
                est.b,
                target_zeta=cfg.target_zeta + margin,
                band=cfg.band_hz,
                modulation_limits=[v.p_mod_limit for v in self.case.vscs],
            )

        design = self._timed("design", run)
        self._write("design.json", design.to_dict())

        truth = self.true_model()
        true_open = modes(truth.a, band=cfg.band_hz)
        true_closed = modes(closed_loop(truth.a, truth.b, design.gain), band=cfg.band_hz)
        self._write(
            "modes.json",
            {
                "design_model_open": _mode_report_doc(design.open_modes),
                "design_model_closed": _mode_report_doc(design.achieved_modes),
                "true_system_open": _mode_report_doc(true_open),
                "true_system_closed": _mode_report_doc(true_closed),
            },
        )
        table = [
            "open loop (true system):",
            true_open.table(),
            "",
            f"closed loop with designed gains (true system):",
            true_closed.table(),
        ]
        (self.out / "modes.txt").write_text("\n".join(table) + "\n")
        self.report.artifacts["modes.txt"] = "modes.txt"

        worst = true_closed.worst_in_band()
        self.report.summary["design"] = {
            "converged": design.converged,
            "iterations": design.iterations,
            "gain": design.gain.tolist(),
            "true_worst_band_zeta": None if worst is None else worst.zeta,
        }
        return design

    def scenario(self, design, events, adapt=False):
        """Nonlinear disturbance response with and without the designed gains."""
        cfg = self.config
        gain = design.gain if design is not None else None

        def run_pair():
            with_ctrl = simulate_nonlinear(
                self.case,
                gain_p=gain,
                events=events,
                dt=cfg.dt_nonlinear,
                duration=cfg.scenario_duration_s,
                rm=self.rm,
            )
            without = simulate_nonlinear(
                self.case,
                gain_p=None,
                events=events,
                dt=cfg.dt_nonlinear,
                duration=cfg.scenario_duration_s,
                rm=self.rm,
            )
            return with_ctrl, without

        with_ctrl, without = self._timed("scenario", run_pair)
        with_ctrl.to_csv(self.out / "scenario_with_control.csv")
        without.to_csv(self.out / "scenario_without_control.csv")
        self.report.artifacts["scenario_with_control.csv"] = "scenario_with_control.csv"
        self.report.artifacts["scenario_without_control.csv"] = "scenario_without_control.csv"

        def settle_metrics(traj):
            dev = np.abs(traj.omega - traj.omega[-1])
            over = np.nonzero(dev.max(axis=1) > 1e-5)[0]
            settle = float(traj.times[over[-1]]) if over.size else 0.0
            mod = traj.p_vsc - self.rm.p_vsc[None, :]
            return {
                "settle_s": settle,
                "max_speed_dev": float(np.abs(traj.omega - 1.0).max()),
                "max_modulation": float(np.abs(mod).max()),
            }

        summary = {
            "events": [e.to_dict() for e in events],
            "with_control": settle_metrics(with_ctrl),
            "without_control": settle_metrics(without),
        }

        if adapt:
            summary["adaptiveness"] = self.adaptiveness(design, events)
        self._write("scenario.json", summary)
        self.report.summary["scenario"] = summary
        return summary

    def adaptiveness(self, design, events):
        """Re-identify and redesign after an undetected topology change.

        Persistent events build the changed case; the stale gains are
        evaluated against the changed system, the controller is taken out
        of service, the model is re-identified from fresh ambient windows
        of the changed system, and the redesign is evaluated the same way.
        """
        cfg = self.config
        changed = self.case
        for ev in events:
            if ev.kind == "line_outage":
                changed = changed.without_branch(ev.branch)
            elif ev.kind == "load_step":
                changed = changed.scale_load(ev.bus, 1.0 + ev.frac)
            elif ev.kind == "gen_step":
                changed = changed.scale_generation(ev.gen, 1.0 + ev.frac)
        if changed is self.case:
            raise ConfigError("adaptiveness run needs at least one persistent event")

        rm2 = solve_equilibrium(changed)
        truth2 = assemble_state_space(rm2, sigma=cfg.sigma)
        stale = modes(closed_loop(truth2.a, truth2.b, design.gain), band=cfg.band_hz)

        if cfg.backend == "linear":
            source = OuWindowSource(
                rm2,
                dataclasses.replace(self.noise, seed=self.noise.seed + 1),
                rate_hz=cfg.rate_hz,
                window_s=cfg.window_s,
                settle_s=cfg.settle_s,
            )
        else:
            source = TransientWindowSource(
                changed,
                dataclasses.replace(self.noise, seed=self.noise.seed + 1),
                rate_hz=cfg.rate_hz,
                window_s=cfg.window_s,
                settle_s=cfg.settle_s,
                dt=cfg.dt_nonlinear,
                rm=rm2,
            )
        est2 = run_identification(
            source,
            self.initial_gain_matrix(),
            changed.omega0,
            alpha_pct=cfg.alpha_pct,
            tau=cfg.tau_s,
            fallback_abs=cfg.fallback_gain,
        )
        redesign = design_wadc(
            est2.a,
            est2.b,
            target_zeta=cfg.target_zeta + cfg.design_margin_zeta,
            band=cfg.band_hz,
            modulation_limits=[v.p_mod_limit for v in changed.vscs],
        )
        restored = modes(closed_loop(truth2.a, truth2.b, redesign.gain), band=cfg.band_hz)

        def worst(report):
            m = report.worst_in_band()
            return None if m is None else m.zeta

        doc = {
            "stale_modes": _mode_report_doc(stale),
            "restored_modes": _mode_report_doc(restored),
            "stale_worst_band_zeta": worst(stale),
            "restored_worst_band_zeta": worst(restored),
            "redesign_gain": redesign.gain.tolist(),
        }
        self._write("adaptiveness.json", doc)
        return doc

    # --- orchestration -----------------------------------------------------
    def run(self, events=None, adapt=False):
        """The full flow: ambient data, identification, design, scenarios."""
        self.simulate()
        est = self.identify(windows=self.out)
        design = self.design(est)
        if events:
            self.scenario(design, events, adapt=adapt)
        self._write("pipeline_report.json", self.report.to_dict())
        dump_json({k: round(v, 6) for k, v in self.timings.items()}, self.out / "timings.json")
        return self.report
