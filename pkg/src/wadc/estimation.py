"""Ambient-data identification of the electromechanical state-space model.

The closed-loop state matrix is estimated from the stationary statistics of
PMU angle/speed deviations: the lag correlation of the ambient process obeys
``R(tau) = exp(A_c tau) C``, so ``A_c = log(R C^-1)/tau``.  Estimating once,
perturbing the converter damping gains by a known generalized-permutation
increment, and estimating again separates the open-loop dynamics from the
converter input channel without any network information.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .dynamics import NoiseModel, OuTrajectory, assemble_state_space, emulate_pmu, simulate_linear_ou
from .errors import ConfigError, NumericalError, ProtocolError
from .linalg import genperm_pinv, matrix_log_principal
from .network import eliminate_vsc, jacobian_blocks

__all__ = [
    "SampleStatistics",
    "sample_stats",
    "estimate_ac",
    "PerturbationPlan",
    "make_perturbation",
    "EstimatedModel",
    "separate_ab",
    "stationarity_check",
    "run_identification",
    "OuWindowSource",
    "TransientWindowSource",
]


@dataclass(frozen=True)
class SampleStatistics:
    """Sample covariance and lag correlation of one measurement window."""

    cov: np.ndarray  # (2ng, 2ng)
    lag_corr: np.ndarray  # (2ng, 2ng), R(tau)
    tau: float  # s
    n_samples: int
    rate_hz: float


def sample_stats(window, tau):
    """Appendix-style sample statistics in the [ddelta; domega] ordering.

    Both estimators use the plain 1/N normalization; the lag sum truncates
    at ``N - lag``.  ``tau`` must be an integer number of sampling periods.
    """
    lag_f = tau * window.rate_hz
    lag = int(round(lag_f))
    if abs(lag_f - lag) > 1e-9 or lag < 0:
        raise ConfigError(
            f"lag {tau} s is not an integer number of samples at {window.rate_hz} Hz"
        )
    x = window.x
    n = x.shape[0]
    if n <= lag + 1:
        raise ProtocolError(f"window too short: {n} samples for a {lag}-sample lag")
    x = x - x.mean(axis=0)
    cov = x.T @ x / n
    cov = (cov + cov.T) / 2.0
    lag_corr = x[lag:].T @ x[: n - lag] / n
    return SampleStatistics(
        cov=cov, lag_corr=lag_corr, tau=float(tau), n_samples=n, rate_hz=window.rate_hz
    )


def _floor_spectrum(cov, floor_rel):
    n = cov.shape[0]
    w, v = np.linalg.eigh(cov)
    floor = floor_rel * np.trace(cov) / n
    w_reg = np.maximum(w, floor)
    reg = (v * w_reg) @ v.T
    change = np.linalg.norm(reg - cov) / max(np.linalg.norm(cov), 1e-300)
    return (reg + reg.T) / 2.0, change


def estimate_ac(stats, floor_rel=1e-10):
    """Closed-loop state matrix from one window's statistics.

    Returns ``(a_c, diagnostics)`` where the matrix is
    ``log(R(tau) C^-1) / tau`` on the principal branch.  The covariance is
    regularized by an eigenvalue floor before inversion; a well-conditioned
    covariance is altered only at machine precision.
    """
    if stats.tau <= 0:
        raise ConfigError("estimation requires a positive lag")
    eig_min = float(np.min(np.linalg.eigvalsh(stats.cov)))
    if eig_min <= 1e-14 * max(np.trace(stats.cov), 1e-300) / stats.cov.shape[0]:
        raise NumericalError(
            f"sample covariance is rank deficient (min eigenvalue {eig_min:.3g}): "
            "insufficient excitation in the window"
        )
    cov, floor_change = _floor_spectrum(stats.cov, floor_rel)
    cond = np.linalg.cond(cov)
    # right-divide: (R C^-1) via the symmetric solve C X' = R'
    ratio = np.linalg.solve(cov, stats.lag_corr.T).T
    eigs = np.linalg.eigvals(ratio)
    # distance of the spectrum from the principal-branch cut
    margin = float(np.pi - np.max(np.abs(np.angle(eigs)))) if eigs.size else np.pi
    try:
        a_c = matrix_log_principal(ratio) / stats.tau
    except NumericalError as exc:
        raise NumericalError(
            f"{exc}; lag tau={stats.tau} s may be too large for the fastest mode"
        ) from exc
    diagnostics = {
        "cov_condition": float(cond),
        "cov_floor_change": float(floor_change),
        "log_branch_margin": margin,
    }
    return a_c, diagnostics


@dataclass(frozen=True)
class PerturbationPlan:
    """Generalized-permutation gain increment used to expose the input matrix.

    Row ``i`` perturbs exactly one gain entry, in column ``columns[i]``;
    rows listed in ``fallback_rows`` had no nonzero gain to scale and carry
    an absolute increment instead.
    """

    delta_gain: np.ndarray  # (nv, ng)
    columns: tuple[int, ...]
    alpha_pct: float
    fallback_rows: tuple[int, ...] = ()

    @property
    def nv(self):
        return self.delta_gain.shape[0]


def make_perturbation(gain, alpha_pct, fallback_abs=-1.0):
    """Greedy one-entry-per-row perturbation of the damping gain matrix.

    Row by row, the column with the largest remaining absolute gain entry is
    selected (first such column on ties) and perturbed by ``alpha_pct`` per
    cent of its value; selected columns are excluded for later rows, so the
    increment matrix is a generalized permutation and every input channel
    stays separable.  All-zero rows fall back to an absolute increment of
    ``fallback_abs`` in the first free column and are reported.  Keep the
    fallback negative (droop-like: injection drops when the machine speeds
    up) so the perturbed system gains damping rather than losing it.
    """
    gain = np.asarray(gain, dtype=float)
    if gain.ndim != 2:
        raise ConfigError("gain must be a 2-d matrix")
    nv, ng = gain.shape
    if nv > ng:
        raise ConfigError(
            f"{nv} converters but only {ng} machines: cannot assign distinct columns"
        )
    delta = np.zeros_like(gain)
    remaining = list(range(ng))
    columns = []
    fallback_rows = []
    for i in range(nv):
        vals = np.abs(gain[i, remaining])
        j = remaining[int(np.argmax(vals))]
        if np.max(vals) == 0.0:
            j = remaining[0]
            delta[i, j] = fallback_abs
            fallback_rows.append(i)
        else:
            delta[i, j] = (alpha_pct / 100.0) * gain[i, j]
        columns.append(j)
        remaining.remove(j)
    return PerturbationPlan(
        delta_gain=delta,
        columns=tuple(columns),
        alpha_pct=float(alpha_pct),
        fallback_rows=tuple(fallback_rows),
    )


@dataclass(frozen=True)
class EstimatedModel:
    """Identified dynamic components and the assembled state-space matrices.

    ``acc_ddelta_alt`` keeps the pre-perturbation estimate of the same block
    for comparison (the protocol's own formula uses the post-perturbation
    window).
    """

    ac1: np.ndarray  # closed-loop estimate, window 1
    ac2: np.ndarray  # closed-loop estimate, window 2 (perturbed gains)
    acc_ddelta: np.ndarray  # (ng, ng)
    acc_dpv: np.ndarray  # (ng, nv)
    speed_damping: np.ndarray  # (ng, ng), the -M^-1 D block
    a: np.ndarray  # (2ng, 2ng)
    b: np.ndarray  # (2ng, nv)
    omega0: float
    acc_ddelta_alt: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ng(self):
        return self.acc_ddelta.shape[0]

    @property
    def nv(self):
        return self.acc_dpv.shape[1]

    def to_dict(self):
        out = {
            "omega0": self.omega0,
            "ng": self.ng,
            "nv": self.nv,
            "ac1": self.ac1.tolist(),
            "ac2": self.ac2.tolist(),
            "acc_ddelta": self.acc_ddelta.tolist(),
            "acc_dpv": self.acc_dpv.tolist(),
            "speed_damping": self.speed_damping.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "diagnostics": self.diagnostics,
        }
        if self.acc_ddelta_alt is not None:
            out["acc_ddelta_alt"] = self.acc_ddelta_alt.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        alt = d.get("acc_ddelta_alt")
        return cls(
            ac1=np.array(d["ac1"]),
            ac2=np.array(d["ac2"]),
            acc_ddelta=np.array(d["acc_ddelta"]),
            acc_dpv=np.array(d["acc_dpv"]),
            speed_damping=np.array(d["speed_damping"]),
            a=np.array(d["a"]),
            b=np.array(d["b"]),
            omega0=float(d["omega0"]),
            acc_ddelta_alt=None if alt is None else np.array(alt),
            diagnostics=dict(d.get("diagnostics", {})),
        )


def separate_ab(ac1, ac2, plan, gain, omega0):
    """Split the two closed-loop estimates into open-loop and input parts.

    The lower-left block of the perturbed estimate is the angle-coupling
    block; the lower-right difference right-multiplied by the
    pseudo-inverse of the gain increment recovers the input sensitivities;
    substituting those back into the first window's lower-right block
    isolates the speed-damping term.  With noise-free inputs the recovery
    is algebraically exact.
    """
    ac1 = np.asarray(ac1, dtype=float)
    ac2 = np.asarray(ac2, dtype=float)
    if ac1.shape != ac2.shape or ac1.ndim != 2 or ac1.shape[0] != ac1.shape[1]:
        raise ValueError("the two closed-loop estimates must be equal square matrices")
    n = ac1.shape[0]
    if n % 2:
        raise ValueError("state dimension must be even ([ddelta; domega])")
    ng = n // 2
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (plan.nv, ng) or plan.delta_gain.shape != (plan.nv, ng):
        raise ValueError("gain/plan dimensions do not match the estimates")
    if plan.nv and np.any(np.all(plan.delta_gain == 0.0, axis=1)):
        raise ProtocolError(
            "perturbation increment has an all-zero row (alpha = 0?): "
            "input channels are not separable"
        )

    lr1 = ac1[ng:, ng:]
    ll2 = ac2[ng:, :ng]
    lr2 = ac2[ng:, ng:]

    acc_ddelta = ll2.copy()
    acc_dpv = (lr2 - lr1) @ genperm_pinv(plan.delta_gain)
    speed_damping = lr1 - acc_dpv @ gain

    a = np.zeros((n, n))
    a[:ng, ng:] = omega0 * np.eye(ng)
    a[ng:, :ng] = acc_ddelta
    a[ng:, ng:] = speed_damping
    b = np.zeros((n, plan.nv))
    b[ng:, :] = acc_dpv
    return EstimatedModel(
        ac1=ac1,
        ac2=ac2,
        acc_ddelta=acc_ddelta,
        acc_dpv=acc_dpv,
        speed_damping=speed_damping,
        a=a,
        b=b,
        omega0=float(omega0),
        acc_ddelta_alt=ac1[ng:, :ng].copy(),
    )


def stationarity_check(window, z_max=3.0, n_batches=25):
    """Guard against drifting operating points during a window.

    Compares first/second-half means of each channel against the standard
    error of the mean estimated by batch means (robust to the
    autocorrelation of ambient data) and aggregates the per-channel drift
    scores as an RMS across channels, so one window yields one test.  The
    guard is enforced on the speed channels; angle drift is reported only,
    because the rotor-angle reference wanders by construction under the
    stochastic swing model.

    Returns ``(z_speed, z_angle)`` RMS drift scores; raises
    :class:`ProtocolError` when the speed drift exceeds ``z_max``.
    """

    def half_drift_z(series):
        n = len(series)
        half = n // 2
        m1, m2 = series[:half].mean(), series[half : 2 * half].mean()
        batches = series[: (n // n_batches) * n_batches].reshape(n_batches, -1).mean(axis=1)
        var_batch = batches.var(ddof=1)
        var_half_mean = var_batch / (n_batches / 2.0)
        return abs(m1 - m2) / np.sqrt(max(2.0 * var_half_mean, 1e-300))

    def rms(channels):
        return float(np.sqrt(np.mean([half_drift_z(c) ** 2 for c in channels.T])))

    z_speed = rms(window.domega)
    z_angle = rms(window.ddelta)
    if z_speed > z_max:
        raise ProtocolError(
            f"window fails the stationarity guard (speed drift z = {z_speed:.2f} > {z_max}); "
            "ambient conditions required"
        )
    return z_speed, z_angle


class OuWindowSource:
    """Ambient windows from the exact-discretization linear simulator.

    Each call rebuilds the closed loop for the requested gains, continues
    the process from the end of the previous window, discards a settling
    interval after the gain switch, and emulates the PMU records.
    """

    def __init__(self, rm, noise, rate_hz=50.0, window_s=300.0, settle_s=10.0, elim=None):
        self.rm = rm
        self.noise = noise if isinstance(noise, NoiseModel) else NoiseModel(sigma=noise)
        self.rate_hz = float(rate_hz)
        self.window_s = float(window_s)
        self.settle_s = float(settle_s)
        self.elim = elim if elim is not None else eliminate_vsc(jacobian_blocks(rm), rm.inertia)
        self._carry = None

    def __call__(self, gain, index):
        model = assemble_state_space(
            self.rm, elim=self.elim, sigma=self.noise.sigma, gain_p=gain
        )
        dt = 1.0 / self.rate_hz
        duration = self.window_s + self.settle_s
        traj = simulate_linear_ou(
            model,
            dt=dt,
            duration=duration,
            rng=self.noise.stream("ou-window", index),
            x0=self._carry,
        )
        self._carry = traj.x[-1].copy()
        n_skip = int(round(self.settle_s * self.rate_hz))
        sliced = OuTrajectory(times=traj.times[n_skip:], x=traj.x[n_skip:], ng=traj.ng)
        return emulate_pmu(sliced, rate_hz=self.rate_hz)


class TransientWindowSource:
    """Ambient windows from the nonlinear simulator (slower, no linearization)."""

    def __init__(self, case, noise, rate_hz=50.0, window_s=300.0, settle_s=10.0, dt=0.01, rm=None):
        from .network import solve_equilibrium
        from .transient import simulate_nonlinear

        self._simulate = simulate_nonlinear
        self.case = case
        self.rm = rm if rm is not None else solve_equilibrium(case)
        self.noise = noise if isinstance(noise, NoiseModel) else NoiseModel(sigma=noise)
        self.rate_hz = float(rate_hz)
        self.window_s = float(window_s)
        self.settle_s = float(settle_s)
        self.dt = float(dt)
        self._carry = None

    def __call__(self, gain, index):
        noise = dc_replace(self.noise, seed=self.noise.stream("nl-window", index).integers(2**31))
        kw = {}
        if self._carry is not None:
            kw = {"x0_delta": self._carry[0] - self.rm.delta, "x0_omega": self._carry[1] - 1.0}
        traj = self._simulate(
            self.case,
            gain_p=gain,
            noise=noise,
            dt=self.dt,
            duration=self.window_s + self.settle_s,
            rm=self.rm,
            **kw,
        )
        self._carry = (traj.delta[-1].copy(), traj.omega[-1].copy())
        n_skip = int(round(self.settle_s / self.dt))
        sliced = dc_replace(
            traj,
            times=traj.times[n_skip:],
            delta=traj.delta[n_skip:],
            omega=traj.omega[n_skip:],
            theta=traj.theta[n_skip:],
            vmag=traj.vmag[n_skip:],
            p_vsc=traj.p_vsc[n_skip:],
            q_vsc=traj.q_vsc[n_skip:],
        )
        return emulate_pmu(sliced, rate_hz=self.rate_hz)


def run_identification(
    source,
    gain,
    omega0,
    alpha_pct=5.0,
    tau=0.1,
    fallback_abs=-1.0,
    guard=True,
    floor_rel=1e-10,
):
    """Full two-window identification protocol.

    ``source(gain_matrix, window_index) -> PmuWindow`` supplies ambient
    measurement windows under the given deployed gains.  The current gains
    are measured once, perturbed by the generalized-permutation increment,
    measured again, and the two closed-loop estimates are separated into
    the open-loop matrix, the input matrix, and the speed-damping block.
    Diagnostics cover covariance conditioning, log-branch margins, the
    structural deviation of the top-right block from ``omega0 * I``, and
    the stationarity guard statistics.
    """
    gain = np.asarray(gain, dtype=float)
    if alpha_pct == 0.0 and np.any(np.any(gain != 0.0, axis=1)):
        raise ProtocolError("alpha = 0 produces a zero perturbation: nothing to separate")

    diag = {"alpha_pct": float(alpha_pct), "tau": float(tau)}
    plan = make_perturbation(gain, alpha_pct, fallback_abs=fallback_abs)
    diag["perturbation_columns"] = list(plan.columns)
    diag["perturbation_fallback_rows"] = list(plan.fallback_rows)

    estimates = []
    for index, g in ((0, gain), (1, gain + plan.delta_gain)):
        window = source(g, index)
        if guard:
            z_speed, z_angle = stationarity_check(window)
            diag[f"window{index + 1}_drift_z_speed"] = z_speed
            diag[f"window{index + 1}_drift_z_angle"] = z_angle
        stats = sample_stats(window, tau)
        ac, d = estimate_ac(stats, floor_rel=floor_rel)
        ng = ac.shape[0] // 2
        top_right = ac[:ng, ng:]
        d["top_right_deviation"] = float(
            np.linalg.norm(top_right - omega0 * np.eye(ng)) / np.linalg.norm(omega0 * np.eye(ng))
        )
        diag[f"window{index + 1}"] = d
        estimates.append(ac)

    model = separate_ab(estimates[0], estimates[1], plan, gain, omega0)
    model.diagnostics.update(diag)
    return model
