"""Nonlinear swing simulation with converter feedback and discrete events.

Semi-implicit (trapezoidal) integration of the machine differential
equations coupled with the network algebraic equations, solved together by
Newton each step.  Events (line outages, load/generation steps, three-phase
faults) modify the topology at their exact times; the admittance model is
rebuilt and Kron-reduced after every change.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .network import injections, jacobian_blocks, reduce_network, solve_equilibrium

__all__ = ["ScenarioEvent", "TransientTrajectory", "simulate_nonlinear", "FAULT_SHUNT_G"]

#: conductance representing a bolted three-phase fault, p.u.
FAULT_SHUNT_G = 1e4

_KINDS = ("line_outage", "load_step", "gen_step", "fault")


@dataclass(frozen=True)
class ScenarioEvent:
    """One discrete disturbance applied during a simulation.

    kind:
      line_outage  remove branch ``branch`` (index into the case branch list)
      load_step    scale the load admittance at ``bus`` by ``1 + frac``
      gen_step     scale the mechanical power of generator ``gen`` by ``1 + frac``
      fault        three-phase fault at ``bus``, cleared after ``clear_s``
    """

    time: float
    kind: str
    branch: int | None = None
    bus: int | None = None
    gen: int | None = None
    frac: float | None = None
    clear_s: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if self.time < 0:
            raise ConfigError("event time must be nonnegative")
        need = {
            "line_outage": ("branch",),
            "load_step": ("bus", "frac"),
            "gen_step": ("gen", "frac"),
            "fault": ("bus", "clear_s"),
        }[self.kind]
        for f in need:
            if getattr(self, f) is None:
                raise ConfigError(f"event {self.kind!r} requires field {f!r}")
        if self.kind == "fault" and self.clear_s <= 0:
            raise ConfigError("fault clearing time must be positive")

    def to_dict(self):
        out = {"time": self.time, "kind": self.kind}
        for f in ("branch", "bus", "gen", "frac", "clear_s"):
            v = getattr(self, f)
            if v is not None:
                out[f] = v
        return out

    @classmethod
    def from_dict(cls, d):
        allowed = {"time", "kind", "branch", "bus", "gen", "frac", "clear_s"}
        bad = set(d) - allowed
        if bad:
            raise ConfigError(f"unknown event fields: {sorted(bad)}")
        return cls(**d)


@dataclass(frozen=True)
class TransientTrajectory:
    """Uniformly recorded nonlinear simulation output (absolute quantities)."""

    times: np.ndarray  # (n,)
    delta: np.ndarray  # (n, ng), rotor angles, rad
    omega: np.ndarray  # (n, ng), rotor speeds, p.u.
    theta: np.ndarray  # (n, nv), converter bus angles, rad
    vmag: np.ndarray  # (n, nv), converter bus voltages, p.u.
    p_vsc: np.ndarray  # (n, nv), converter active injections, p.u.
    q_vsc: np.ndarray  # (n, nv), converter reactive injections, p.u.

    @property
    def rate_hz(self):
        return 1.0 / (self.times[1] - self.times[0])

    @property
    def ng(self):
        return self.delta.shape[1]

    @property
    def nv(self):
        return self.theta.shape[1]

    def to_csv(self, path):
        cols = ["time"]
        cols += [f"gen{i + 1}.delta" for i in range(self.ng)]
        cols += [f"gen{i + 1}.omega" for i in range(self.ng)]
        cols += [f"vsc{j + 1}.p" for j in range(self.nv)]
        cols += [f"vsc{j + 1}.q" for j in range(self.nv)]
        lines = [",".join(cols)]
        for k in range(len(self.times)):
            vals = np.concatenate(
                [[self.times[k]], self.delta[k], self.omega[k], self.p_vsc[k], self.q_vsc[k]]
            )
            lines.append(",".join(f"{v:.17g}" for v in vals))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        text = Path(path).read_text().strip().splitlines()
        header = text[0].split(",")
        ng = sum(1 for h in header if h.endswith(".delta"))
        nv = sum(1 for h in header if h.endswith(".p"))
        data = np.loadtxt(io.StringIO("\n".join(text[1:])), delimiter=",", ndmin=2)
        times = data[:, 0]
        delta = data[:, 1 : 1 + ng]
        omega = data[:, 1 + ng : 1 + 2 * ng]
        p = data[:, 1 + 2 * ng : 1 + 2 * ng + nv]
        q = data[:, 1 + 2 * ng + nv : 1 + 2 * ng + 2 * nv]
        # theta/vmag are not serialized; store empty blocks of matching length
        empty = np.zeros((len(times), 0))
        if nv:
            empty = np.full((len(times), nv), np.nan)
        return cls(times=times, delta=delta, omega=omega, theta=empty, vmag=empty, p_vsc=p, q_vsc=q)


class _NetworkState:
    """Current topology bookkeeping: persistent edits plus active fault shunts."""

    def __init__(self, case, rm0):
        self.base = case  # persistent topology (outages, steps applied)
        self.fault_shunts = []  # list of (bus, g)
        self.template = rm0
        self.rebuild()

    def rebuild(self):
        case = self.base
        for bus, g in self.fault_shunts:
            case = case.with_shunt(bus, g, 0.0)
        self.case = case
        self.rm = replace(self.template, case=case, y_red=reduce_network(case))

    def apply(self, ev, p_mech):
        """Apply one event; returns the possibly updated mechanical power."""
        if ev.kind == "line_outage":
            self.base = self.base.without_branch(ev.branch)
        elif ev.kind == "load_step":
            self.base = self.base.scale_load(ev.bus, 1.0 + ev.frac)
        elif ev.kind == "gen_step":
            p_mech = p_mech.copy()
            p_mech[ev.gen] *= 1.0 + ev.frac
        elif ev.kind == "fault":
            self.fault_shunts.append((ev.bus, FAULT_SHUNT_G))
        self.rebuild()
        return p_mech

    def clear_fault(self, bus):
        self.fault_shunts = [(b, g) for b, g in self.fault_shunts if b != bus]
        self.rebuild()


def _commanded_power(vscs, gain_p, gain_q, omega_dev):
    p_ref = np.array([v.p_ref for v in vscs])
    q_ref = np.array([v.q_ref for v in vscs])
    limit = np.array([v.p_mod_limit for v in vscs])
    nv = len(vscs)
    if nv == 0:
        return p_ref, q_ref, np.zeros((0, len(omega_dev)), dtype=bool)
    mod = gain_p @ omega_dev if gain_p is not None else np.zeros(nv)
    saturated = np.abs(mod) >= limit
    p_cmd = p_ref + np.clip(mod, -limit, limit)
    q_cmd = q_ref + (gain_q @ omega_dev if gain_q is not None else 0.0)
    return p_cmd, q_cmd, saturated


def _solve_algebraic(rm, delta, omega, theta0, vmag0, gain_p, gain_q, tol=1e-11):
    """Network re-solve at frozen machine state (used after discontinuities)."""
    nv = rm.nv
    if nv == 0:
        return theta0, vmag0
    theta, vmag = theta0.copy(), vmag0.copy()
    p_cmd, q_cmd, _ = _commanded_power(rm.case.vscs, gain_p, gain_q, omega - 1.0)

    def res(th, v):
        _, pv, qv = injections(rm, delta, th, v)
        return np.concatenate([pv - p_cmd, qv - q_cmd])

    r = res(theta, vmag)
    for _ in range(60):
        if np.max(np.abs(r)) < tol:
            return theta, vmag
        bl = jacobian_blocks(rm, delta, theta, vmag)
        jac = np.block([[bl.dpv_dth, bl.dpv_dv], [bl.dqv_dth, bl.dqv_dv]])
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("network re-solve: singular Jacobian") from exc
        t = 1.0
        base = np.linalg.norm(r)
        while t > 1.0 / 256.0:
            th = theta + t * step[:nv]
            v = vmag + t * step[nv:]
            if np.all(v > 0.02):
                cand = res(th, v)
                if np.linalg.norm(cand) < base:
                    theta, vmag, r = th, v, cand
                    break
            t /= 2.0
        else:
            raise NumericalError("network re-solve stalled (voltage collapse?)")
    raise NumericalError("network re-solve did not converge")


def simulate_nonlinear(
    case,
    gain_p=None,
    gain_q=None,
    noise=None,
    events=(),
    dt=0.01,
    duration=10.0,
    x0_delta=None,
    x0_omega=None,
    rm=None,
):
    """Integrate the coupled swing/network model under noise and events.

    The machine equations are stepped by the trapezoidal rule with the
    converter-bus algebra solved simultaneously; load noise enters as the
    per-step independent increment consistent with the continuous forcing.
    Events apply at their exact times (sub-step splitting), after which the
    admittance matrix is rebuilt, the reduction re-run, and the algebraic
    variables re-solved.  Converter modulation saturates at the terminal
    limits.

    Returns the trajectory sampled on the uniform ``dt`` grid.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    n_rec = int(round(duration / dt))
    if n_rec < 1 or abs(n_rec * dt - duration) > 1e-9:
        raise ConfigError("duration must be an integer multiple of dt")
    events = sorted(events, key=lambda e: e.time)
    for ev in events:
        if ev.time > duration:
            raise ConfigError(f"event at t={ev.time} outside horizon {duration}")

    rm0 = rm if rm is not None else solve_equilibrium(case)
    ng, nv = rm0.ng, rm0.nv
    if gain_p is not None:
        gain_p = np.asarray(gain_p, dtype=float)
        if gain_p.shape != (nv, ng):
            raise ConfigError(f"gain_p must be {nv}x{ng}")
    if gain_q is not None:
        gain_q = np.asarray(gain_q, dtype=float)

    m_vec = rm0.inertia
    d_vec = rm0.damping
    emf = rm0.emf
    omega0 = case.omega0
    p_mech = rm0.p_mech_eff.copy()

    # expand faults into apply/clear actions, then sort by time
    actions = []
    for ev in events:
        actions.append((ev.time, "apply", ev))
        if ev.kind == "fault":
            actions.append((ev.time + ev.clear_s, "clear", ev))
    actions.sort(key=lambda a: a[0])

    state = _NetworkState(case, rm0)
    rng = noise.stream("transient") if noise is not None else None
    sigma = noise.sigma_vector(ng) if noise is not None else np.zeros(ng)

    delta = rm0.delta + (np.asarray(x0_delta, dtype=float) if x0_delta is not None else 0.0)
    omega = np.ones(ng) + (np.asarray(x0_omega, dtype=float) if x0_omega is not None else 0.0)
    theta = rm0.theta.copy()
    vmag = rm0.vmag.copy()
    if x0_delta is not None or x0_omega is not None:
        theta, vmag = _solve_algebraic(state.rm, delta, omega, theta, vmag, gain_p, gain_q)

    out = {
        "delta": np.zeros((n_rec, ng)),
        "omega": np.zeros((n_rec, ng)),
        "theta": np.zeros((n_rec, nv)),
        "vmag": np.zeros((n_rec, nv)),
        "p": np.zeros((n_rec, nv)),
        "q": np.zeros((n_rec, nv)),
    }

    def record(k):
        p_cmd, q_cmd, _ = _commanded_power(state.case.vscs, gain_p, gain_q, omega - 1.0)
        out["delta"][k] = delta
        out["omega"][k] = omega
        out["theta"][k] = theta
        out["vmag"][k] = vmag
        out["p"][k] = p_cmd
        out["q"][k] = q_cmd

    def swing_rhs(rm_now, d, w, th, v):
        pe, _, _ = injections(rm_now, d, th, v)
        return p_mech - pe - d_vec * (w - 1.0)

    def step(h, noise_vec):
        nonlocal delta, omega, theta, vmag
        rm_now = state.rm
        f0 = swing_rhs(rm_now, delta, omega, theta, vmag)
        forcing = emf**2 * rm_now.g_diag * sigma * noise_vec * np.sqrt(h)
        w = omega.copy()
        th = theta.copy()
        v = vmag.copy()
        for it in range(30):
            d_new = delta + 0.5 * h * omega0 * (omega + w - 2.0)
            pe, pv, qv = injections(rm_now, d_new, th, v)
            f1 = p_mech - pe - d_vec * (w - 1.0)
            p_cmd, q_cmd, sat = _commanded_power(state.case.vscs, gain_p, gain_q, w - 1.0)
            r_w = m_vec * (w - omega) - 0.5 * h * (f0 + f1) + forcing
            r_p = pv - p_cmd
            r_q = qv - q_cmd
            res = np.concatenate([r_w, r_p, r_q])
            if np.max(np.abs(res)) < 1e-11:
                break
            bl = jacobian_blocks(rm_now, d_new, th, v)
            gain_eff = np.zeros((nv, ng))
            if gain_p is not None and nv:
                gain_eff = gain_p * (~sat)[:, None]
            jac = np.zeros((ng + 2 * nv, ng + 2 * nv))
            jac[:ng, :ng] = (
                np.diag(m_vec) + 0.25 * h * h * omega0 * bl.dpe_dd + 0.5 * h * np.diag(d_vec)
            )
            jac[:ng, ng : ng + nv] = 0.5 * h * bl.dpe_dth
            jac[:ng, ng + nv :] = 0.5 * h * bl.dpe_dv
            jac[ng : ng + nv, :ng] = 0.5 * h * omega0 * bl.dpv_dd - gain_eff
            jac[ng : ng + nv, ng : ng + nv] = bl.dpv_dth
            jac[ng : ng + nv, ng + nv :] = bl.dpv_dv
            jac[ng + nv :, :ng] = 0.5 * h * omega0 * bl.dqv_dd
            if gain_q is not None and nv:
                jac[ng + nv :, :ng] -= gain_q
            jac[ng + nv :, ng : ng + nv] = bl.dqv_dth
            jac[ng + nv :, ng + nv :] = bl.dqv_dv
            try:
                upd = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("transient step: singular iteration matrix") from exc
            w = w + upd[:ng]
            th = th + upd[ng : ng + nv]
            v = v + upd[ng + nv :]
            if nv and np.any(v < 0.02):
                raise NumericalError("voltage collapse during transient step")
        else:
            raise NumericalError("transient step Newton did not converge")
        delta = delta + 0.5 * h * omega0 * (omega + w - 2.0)
        omega, theta, vmag = w, th, v

    ai = 0
    record(0)
    for k in range(1, n_rec):
        t0, t1 = (k - 1) * dt, k * dt
        t = t0
        while ai < len(actions) and actions[ai][0] <= t1 + 1e-12:
            et, what, ev = actions[ai]
            et = min(max(et, t), t1)
            if et > t + 1e-12:
                z = rng.standard_normal(ng) if rng is not None else np.zeros(ng)
                step(et - t, z)
                t = et
            if what == "apply":
                p_mech = state.apply(ev, p_mech)
            else:
                state.clear_fault(ev.bus)
            try:
                theta, vmag = _solve_algebraic(state.rm, delta, omega, theta, vmag, gain_p, gain_q)
            except NumericalError as exc:
                raise NumericalError(f"{exc} (event {ev.kind!r} at t={actions[ai][0]:.4f}s)") from exc
            ai += 1
        if t1 > t + 1e-12:
            z = rng.standard_normal(ng) if rng is not None else np.zeros(ng)
            try:
                step(t1 - t, z)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at t={t1:.4f}s") from exc
        record(k)

    return TransientTrajectory(
        times=dt * np.arange(n_rec),
        delta=out["delta"],
        omega=out["omega"],
        theta=out["theta"],
        vmag=out["vmag"],
        p_vsc=out["p"],
        q_vsc=out["q"],
    )
