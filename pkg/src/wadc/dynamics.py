"""Linear stochastic electromechanical model and PMU window emulation.

The state vector is ``x = [rotor-angle deviations; speed deviations]`` of
the ``ng`` machines.  Converter active-power modulation enters through the
input matrix; ambient load fluctuation enters as white noise shaped by the
machine loading.  The linear simulator uses the exact discretization of the
process (matrix exponential transition plus the interval noise covariance),
so no integration bias pollutes estimator tests.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .linalg import matrix_exp, solve_lyapunov
from .network import eliminate_vsc, jacobian_blocks

__all__ = [
    "StateSpaceModel",
    "NoiseModel",
    "assemble_state_space",
    "closed_loop",
    "ou_discretization",
    "simulate_linear_ou",
    "OuTrajectory",
    "PmuWindow",
    "emulate_pmu",
]


@dataclass(frozen=True)
class NoiseModel:
    """Load-fluctuation intensities and the RNG seed that drives them."""

    sigma: float | np.ndarray = 0.05
    seed: int = 0

    def sigma_vector(self, ng):
        s = np.asarray(self.sigma, dtype=float)
        out = np.full(ng, float(s)) if s.ndim == 0 else s.copy()
        if out.shape != (ng,):
            raise ConfigError(f"sigma must be scalar or length {ng}")
        if np.any(out < 0):
            raise ConfigError("fluctuation intensities must be nonnegative")
        return out

    def stream(self, *index):
        """Independent deterministic generator for a (seed, index...) stream."""
        import zlib

        keys = [int(self.seed)]
        for i in index:
            keys.append(zlib.crc32(i.encode()) if isinstance(i, str) else int(i))
        return np.random.default_rng(keys)


@dataclass(frozen=True)
class StateSpaceModel:
    """Linear model ``xdot = A x + B u + S xi`` with speed feedback closed loop.

    ``a_closed`` embeds the converter damping gains acting on the speed
    deviations; with zero gains it equals ``a``.
    """

    a: np.ndarray  # (2ng, 2ng)
    b: np.ndarray  # (2ng, nv), active-power modulation channel
    s: np.ndarray  # (2ng, ng), noise input
    a_closed: np.ndarray  # (2ng, 2ng)
    ng: int
    nv: int
    omega0: float

    def __post_init__(self):
        n = 2 * self.ng
        for name in ("a", "a_closed"):
            m = getattr(self, name)
            if m.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}")
        if self.b.shape != (n, self.nv):
            raise ValueError(f"b must be {n}x{self.nv}")
        if self.s.shape != (n, self.ng):
            raise ValueError(f"s must be {n}x{self.ng}")
        top = slice(0, self.ng)
        for name in ("a", "a_closed"):
            m = getattr(self, name)
            if np.any(m[top, top] != 0.0) or np.any(
                m[top, self.ng :] != self.omega0 * np.eye(self.ng)
            ):
                raise ValueError(f"{name} violates the [0, omega0*I] top-row structure")
        if np.any(self.b[top, :] != 0.0) or np.any(self.s[top, :] != 0.0):
            raise ValueError("b and s must have zero top blocks")


def assemble_state_space(rm, elim=None, sigma=0.05, gain_p=None, gain_q=None):
    """Build the linear model around a solved operating point.

    Parameters
    ----------
    rm : ReducedModel
        Network at its equilibrium.
    elim : EliminationResult, optional
        Reduced sensitivities; computed from ``rm`` when omitted.
    sigma : float or (ng,) array
        Load-fluctuation intensity per machine.
    gain_p, gain_q : (nv, ng) arrays or None
        Converter active/reactive damping gains on the machine speed
        deviations.  ``None`` means zero (reactive damping is disabled by
        default).
    """
    if elim is None:
        elim = eliminate_vsc(jacobian_blocks(rm), rm.inertia)
    ng, nv = rm.ng, rm.nv
    omega0 = rm.case.omega0
    m = rm.inertia
    d = rm.damping
    sig = NoiseModel(sigma=sigma).sigma_vector(ng)

    a = np.zeros((2 * ng, 2 * ng))
    a[:ng, ng:] = omega0 * np.eye(ng)
    a[ng:, :ng] = elim.acc_ddelta
    a[ng:, ng:] = -np.diag(d / m)

    b = np.zeros((2 * ng, nv))
    b[ng:, :] = elim.acc_dpv

    s = np.zeros((2 * ng, ng))
    s[ng:, :] = -np.diag(rm.emf**2 * rm.g_diag * sig / m)

    a_closed = a.copy()
    if gain_p is not None:
        gain_p = np.asarray(gain_p, dtype=float)
        if gain_p.shape != (nv, ng):
            raise ValueError(f"gain_p must be {nv}x{ng}")
        a_closed = closed_loop(a_closed, b, gain_p)
    if gain_q is not None:
        gain_q = np.asarray(gain_q, dtype=float)
        if gain_q.shape != (nv, ng):
            raise ValueError(f"gain_q must be {nv}x{ng}")
        a_closed[ng:, ng:] += elim.acc_dqv @ gain_q

    return StateSpaceModel(a=a, b=b, s=s, a_closed=a_closed, ng=ng, nv=nv, omega0=omega0)


def closed_loop(a, b, gain_p):
    """State matrix with converter speed feedback ``u = gain_p * domega``."""
    a = np.asarray(a, dtype=float)
    ng = a.shape[0] // 2
    out = a.copy()
    out[:, ng:] += b @ np.asarray(gain_p, dtype=float)
    return out


def ou_discretization(a_c, s, dt):
    """Exact one-step transition and noise covariance of the linear SDE.

    Returns ``(F, Q)`` with ``x_{k+1} = F x_k + w_k``, ``w_k ~ N(0, Q)``,
    where ``F = exp(A_c dt)`` and ``Q`` is the interval integral of
    ``exp(A_c t) S S' exp(A_c' t)``.  Computed through one block matrix
    exponential, valid for marginally stable ``A_c`` as well.
    """
    a_c = np.asarray(a_c, dtype=float)
    s = np.asarray(s, dtype=float)
    n = a_c.shape[0]
    w = s @ s.T
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = -a_c
    big[:n, n:] = w
    big[n:, n:] = a_c.T
    phi = matrix_exp(big, dt)
    f = phi[n:, n:].T
    q = f @ phi[:n, n:]
    return f, (q + q.T) / 2.0


def _psd_factor(q, tol=1e-13):
    w, v = np.linalg.eigh(q)
    floor = tol * max(w.max(), 0.0)
    w = np.clip(w, 0.0, None)
    w[w < floor] = 0.0
    return v * np.sqrt(w)


@dataclass(frozen=True)
class OuTrajectory:
    """Sampled state deviations of the linear model."""

    times: np.ndarray  # (n,)
    x: np.ndarray  # (n, 2ng)
    ng: int

    @property
    def rate_hz(self):
        return 1.0 / (self.times[1] - self.times[0])

    @property
    def delta(self):
        return self.x[:, : self.ng]

    @property
    def omega(self):
        return self.x[:, self.ng :]


def simulate_linear_ou(model, dt, duration, seed=0, rng=None, x0=None, stationary_start=False):
    """Sample the closed-loop ambient process by exact discretization.

    ``duration * (1/dt)`` samples are generated at spacing ``dt`` starting
    from ``x0`` (zero by default).  With ``stationary_start`` the initial
    state is drawn from the stationary law, which requires a Hurwitz
    closed-loop matrix; otherwise marginally stable models (the rigid-body
    angle mode) are simulated as-is.  Fixed ``seed`` gives identical output.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    n_steps = int(round(duration / dt))
    if abs(n_steps * dt - duration) > 1e-9 * max(duration, 1.0) or n_steps < 1:
        raise ConfigError("duration must be an integer multiple of dt")
    a_c = model.a_closed
    f, q = ou_discretization(a_c, model.s, dt)
    factor = _psd_factor(q)
    gen = rng if rng is not None else np.random.default_rng(seed)

    n = a_c.shape[0]
    x = np.zeros((n_steps, n))
    if stationary_start:
        abscissa = np.max(np.linalg.eigvals(a_c).real)
        if abscissa >= -1e-9:
            raise NumericalError(
                f"stationary start requires a Hurwitz closed loop (abscissa {abscissa:.3g})"
            )
        c_inf = solve_lyapunov(a_c, model.s @ model.s.T)
        x[0] = _psd_factor(c_inf) @ gen.standard_normal(n)
    elif x0 is not None:
        x[0] = np.asarray(x0, dtype=float)
    noise = gen.standard_normal((n_steps - 1, n))
    for k in range(n_steps - 1):
        x[k + 1] = f @ x[k] + factor @ noise[k]
    times = dt * np.arange(n_steps)
    return OuTrajectory(times=times, x=x, ng=model.ng)


@dataclass(frozen=True)
class PmuWindow:
    """Uniformly sampled rotor angle/speed deviation records.

    Deviations are taken about the window mean of each channel.
    """

    rate_hz: float
    start: float
    ddelta: np.ndarray  # (n, ng), rad
    domega: np.ndarray  # (n, ng), p.u.

    def __post_init__(self):
        if self.ddelta.shape != self.domega.shape:
            raise ValueError("angle and speed records must have equal shapes")

    @property
    def n_samples(self):
        return self.ddelta.shape[0]

    @property
    def ng(self):
        return self.ddelta.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.rate_hz

    @property
    def x(self):
        """Samples in the [ddelta; domega] state ordering, (n, 2ng)."""
        return np.hstack([self.ddelta, self.domega])

    def to_csv(self, path):
        ng = self.ng
        cols = ["time"]
        for i in range(1, ng + 1):
            cols += [f"gen{i}.ddelta", f"gen{i}.domega"]
        lines = [",".join(cols)]
        times = self.start + np.arange(self.n_samples) / self.rate_hz
        for k in range(self.n_samples):
            row = [f"{times[k]:.17g}"]
            for i in range(ng):
                row += [f"{self.ddelta[k, i]:.17g}", f"{self.domega[k, i]:.17g}"]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        text = Path(path).read_text().strip().splitlines()
        header = text[0].split(",")
        if header[0] != "time" or (len(header) - 1) % 2 != 0:
            raise ConfigError(f"{path}: not a PMU window file")
        ng = (len(header) - 1) // 2
        data = np.loadtxt(io.StringIO("\n".join(text[1:])), delimiter=",", ndmin=2)
        times = data[:, 0]
        if len(times) < 2:
            raise ConfigError(f"{path}: window too short")
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > 1e-9:
            raise ConfigError(f"{path}: non-uniform sampling")
        ddelta = data[:, 1 : 1 + 2 * ng : 2]
        domega = data[:, 2 : 2 + 2 * ng : 2]
        return cls(rate_hz=1.0 / steps[0], start=times[0], ddelta=ddelta, domega=domega)


def emulate_pmu(traj, rate_hz, noise_std=0.0, seed=0, rng=None, start=None):
    """Decimate a trajectory into a PMU measurement window.

    The trajectory sampling rate must be an integer multiple of the
    requested rate.  Rotor angles are unwrapped before the per-channel mean
    removal; optional Gaussian measurement noise (same std for every
    channel) is added before the means are taken.
    """
    traj_rate = traj.rate_hz
    ratio = traj_rate / rate_hz
    decim = int(round(ratio))
    if decim < 1 or abs(ratio - decim) > 1e-9:
        raise ConfigError(
            f"trajectory rate {traj_rate:g} Hz is not an integer multiple of {rate_hz:g} Hz"
        )
    delta = np.unwrap(np.asarray(traj.delta, dtype=float), axis=0)[::decim]
    omega = np.asarray(traj.omega, dtype=float)[::decim]
    if noise_std > 0.0:
        gen = rng if rng is not None else np.random.default_rng(seed)
        delta = delta + noise_std * gen.standard_normal(delta.shape)
        omega = omega + noise_std * gen.standard_normal(omega.shape)
    ddelta = delta - delta.mean(axis=0)
    domega = omega - omega.mean(axis=0)
    t0 = float(traj.times[0]) if start is None else float(start)
    return PmuWindow(rate_hz=float(rate_hz), start=t0, ddelta=ddelta, domega=domega)
