"""Grid model: admittance assembly, Kron reduction, injections, equilibrium.

The network is described by a :class:`NetworkCase` (buses, branches,
generators behind transient reactance, converter terminals, shunt-admittance
loads).  Everything downstream works on the reduced admittance over the
dynamic nodes: the generator internal nodes first, then the converter buses.

Angle convention: generator rotor angles ``delta`` (rad) at the internal
nodes, converter-bus voltage angles ``theta`` (rad), magnitudes ``vmag``
(p.u.).  Generator 1's rotor angle is the system angle reference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Bus",
    "Branch",
    "Load",
    "GeneratorParams",
    "VscTerminal",
    "NetworkCase",
    "Admittance",
    "ReducedModel",
    "JacobianBlocks",
    "EliminationResult",
    "build_admittance",
    "kron_reduce",
    "reduce_network",
    "injections",
    "solve_equilibrium",
    "jacobian_blocks",
    "eliminate_vsc",
]

BUS_KINDS = ("generator", "vsc", "passive")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # generator | vsc | passive


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float  # series conductance, p.u.
    b: float  # series susceptance, p.u.
    b_shunt: float = 0.0  # total line charging, split half per end


@dataclass(frozen=True)
class Load:
    bus: int
    g: float  # admittance-equivalent conductance, p.u.
    b: float  # admittance-equivalent susceptance, p.u.


@dataclass(frozen=True)
class GeneratorParams:
    bus: int
    inertia: float  # M, p.u. power-seconds per p.u. speed/s
    damping: float  # D, p.u. power per p.u. speed deviation
    emf: float  # E, internal voltage behind transient reactance, p.u.
    p_mech: float  # mechanical power set point, p.u.
    xd_t: float  # transient reactance, p.u.


@dataclass(frozen=True)
class VscTerminal:
    bus: int
    p_ref: float  # steady-state active power injection, p.u.
    q_ref: float  # steady-state reactive power injection, p.u.
    p_mod_limit: float = 1.0  # max |supplementary active power|, p.u.


@dataclass(frozen=True)
class NetworkCase:
    """Physical grid description, immutable after construction."""

    name: str
    base_mva: float
    omega0: float  # base angular frequency, rad/s
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[GeneratorParams, ...]
    vscs: tuple[VscTerminal, ...] = ()
    loads: tuple[Load, ...] = ()

    def __post_init__(self):
        if self.base_mva <= 0 or self.omega0 <= 0:
            raise ConfigError("base_mva and omega0 must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bus ids")
        known = set(ids)
        for b in self.buses:
            if b.kind not in BUS_KINDS:
                raise ConfigError(f"bus {b.id}: unknown kind {b.kind!r}")
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise ConfigError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.from_bus == br.to_bus:
                raise ConfigError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
        gen_buses = [g.bus for g in self.generators]
        vsc_buses = [v.bus for v in self.vscs]
        if len(set(gen_buses)) != len(gen_buses) or len(set(vsc_buses)) != len(vsc_buses):
            raise ConfigError("at most one generator and one converter per bus")
        kinds = {b.id: b.kind for b in self.buses}
        for g in self.generators:
            if g.bus not in known:
                raise ConfigError(f"generator references unknown bus {g.bus}")
            if kinds[g.bus] != "generator":
                raise ConfigError(f"bus {g.bus} hosts a generator but is typed {kinds[g.bus]!r}")
            if g.inertia <= 0 or g.emf <= 0 or g.damping < 0 or g.xd_t <= 0:
                raise ConfigError(f"generator at bus {g.bus}: invalid parameters")
        for v in self.vscs:
            if v.bus not in known:
                raise ConfigError(f"converter references unknown bus {v.bus}")
            if kinds[v.bus] != "vsc":
                raise ConfigError(f"bus {v.bus} hosts a converter but is typed {kinds[v.bus]!r}")
            if v.p_mod_limit <= 0:
                raise ConfigError(f"converter at bus {v.bus}: modulation limit must be positive")
        for ld in self.loads:
            if ld.bus not in known:
                raise ConfigError(f"load references unknown bus {ld.bus}")
        declared_gen = {b.id for b in self.buses if b.kind == "generator"}
        if declared_gen != set(gen_buses):
            raise ConfigError("every generator-typed bus needs a generator entry and vice versa")
        declared_vsc = {b.id for b in self.buses if b.kind == "vsc"}
        if declared_vsc != set(vsc_buses):
            raise ConfigError("every vsc-typed bus needs a converter entry and vice versa")

    @property
    def ng(self):
        return len(self.generators)

    @property
    def nv(self):
        return len(self.vscs)

    def bus_index(self, bus_id):
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise ConfigError(f"unknown bus id {bus_id}")

    # --- event edits: each returns a new case -------------------------------
    def without_branch(self, branch_index):
        if not 0 <= branch_index < len(self.branches):
            raise ConfigError(f"branch index {branch_index} out of range")
        rest = self.branches[:branch_index] + self.branches[branch_index + 1 :]
        return replace(self, branches=rest)

    def scale_load(self, bus_id, factor):
        if not any(ld.bus == bus_id for ld in self.loads):
            raise ConfigError(f"no load at bus {bus_id}")
        loads = tuple(
            replace(ld, g=ld.g * factor, b=ld.b * factor) if ld.bus == bus_id else ld
            for ld in self.loads
        )
        return replace(self, loads=loads)

    def scale_generation(self, gen_index, factor):
        if not 0 <= gen_index < self.ng:
            raise ConfigError(f"generator index {gen_index} out of range")
        gens = tuple(
            replace(g, p_mech=g.p_mech * factor) if i == gen_index else g
            for i, g in enumerate(self.generators)
        )
        return replace(self, generators=gens)

    def with_shunt(self, bus_id, g, b=0.0):
        if bus_id not in {bus.id for bus in self.buses}:
            raise ConfigError(f"unknown bus id {bus_id}")
        return replace(self, loads=self.loads + (Load(bus_id, g, b),))


@dataclass(frozen=True)
class Admittance:
    """Full bus admittance matrix including generator internal nodes.

    Node order: the case's physical buses, then one internal node per
    generator (labelled ``("gen", k)``).
    """

    y: np.ndarray  # complex (n, n)
    labels: tuple[tuple[str, int], ...]

    def index(self, label):
        return self.labels.index(label)


def build_admittance(case):
    """Assemble the full admittance matrix for a case.

    Loads are absorbed as shunt admittances and each generator contributes an
    internal node behind its transient reactance.  Raises if some island of
    the network contains no generator.
    """
    nb = len(case.buses)
    n = nb + case.ng
    y = np.zeros((n, n), dtype=complex)
    idx = {b.id: i for i, b in enumerate(case.buses)}

    edges = []
    for br in case.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = br.g + 1j * br.b
        y[i, i] += ys + 0.5j * br.b_shunt
        y[j, j] += ys + 0.5j * br.b_shunt
        y[i, j] -= ys
        y[j, i] -= ys
        edges.append((i, j))
    for ld in case.loads:
        i = idx[ld.bus]
        y[i, i] += ld.g + 1j * ld.b
    for k, gen in enumerate(case.generators):
        t = idx[gen.bus]
        g_int = nb + k
        yg = 1.0 / (1j * gen.xd_t)
        y[g_int, g_int] += yg
        y[t, t] += yg
        y[g_int, t] -= yg
        y[t, g_int] -= yg
        edges.append((t, g_int))

    comp = _components(n, edges)
    gen_nodes = set(range(nb, n))
    for members in comp:
        if not (members & gen_nodes):
            bad = sorted(case.buses[i].id for i in members if i < nb)
            raise ConfigError(f"disconnected island without a generator: buses {bad}")

    labels = tuple(("bus", b.id) for b in case.buses) + tuple(
        ("gen", k) for k in range(case.ng)
    )
    return Admittance(y=y, labels=labels)


def _components(n, edges):
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


def kron_reduce(y, keep):
    """Schur-complement elimination of all nodes outside ``keep``.

    Injections at the retained nodes are preserved for any retained-node
    voltage profile provided the eliminated nodes carry zero injection.
    """
    y = np.asarray(y, dtype=complex)
    n = y.shape[0]
    keep = list(keep)
    drop = [i for i in range(n) if i not in set(keep)]
    if not drop:
        return y[np.ix_(keep, keep)]
    y_kk = y[np.ix_(keep, keep)]
    y_ke = y[np.ix_(keep, drop)]
    y_ek = y[np.ix_(drop, keep)]
    y_ee = y[np.ix_(drop, drop)]
    cond = np.linalg.cond(y_ee)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(
            f"Kron reduction: eliminated sub-block is singular (cond {cond:.3g})"
        )
    return y_kk - y_ke @ np.linalg.solve(y_ee, y_ek)


def reduce_network(case, adm=None):
    """Reduced admittance over the dynamic nodes (gen internals, then VSC buses)."""
    adm = adm if adm is not None else build_admittance(case)
    keep = [adm.index(("gen", k)) for k in range(case.ng)]
    keep += [adm.index(("bus", v.bus)) for v in case.vscs]
    return kron_reduce(adm.y, keep)


@dataclass(frozen=True)
class ReducedModel:
    """Kron-reduced network with its solved operating point.

    Retained node order: ``ng`` generator internal nodes then ``nv``
    converter buses.  The equilibrium satisfies active-power balance at the
    generators (against ``p_mech_eff``, the dispatch after distributed-slack
    correction) and the converter set points.
    """

    case: NetworkCase
    y_red: np.ndarray  # complex (ng+nv, ng+nv)
    delta: np.ndarray  # rotor angles, rad
    theta: np.ndarray  # converter bus voltage angles, rad
    vmag: np.ndarray  # converter bus voltage magnitudes, p.u.
    p_gen: np.ndarray  # generator electrical power at equilibrium, p.u.
    p_vsc: np.ndarray
    q_vsc: np.ndarray
    p_mech_eff: np.ndarray  # dispatch actually balancing the network
    slack: float  # total distributed-slack power, p.u.

    @property
    def ng(self):
        return self.case.ng

    @property
    def nv(self):
        return self.case.nv

    @property
    def emf(self):
        return np.array([g.emf for g in self.case.generators])

    @property
    def inertia(self):
        return np.array([g.inertia for g in self.case.generators])

    @property
    def damping(self):
        return np.array([g.damping for g in self.case.generators])

    @property
    def g_diag(self):
        """Diagonal of the reduced conductance at the generator nodes."""
        return np.real(np.diag(self.y_red))[: self.ng]

    # block views of the reduced admittance, generator/converter partition
    @property
    def g_gg(self):
        return np.real(self.y_red[: self.ng, : self.ng])

    @property
    def b_gg(self):
        return np.imag(self.y_red[: self.ng, : self.ng])

    @property
    def g_gv(self):
        return np.real(self.y_red[: self.ng, self.ng :])

    @property
    def b_gv(self):
        return np.imag(self.y_red[: self.ng, self.ng :])

    @property
    def g_vg(self):
        return np.real(self.y_red[self.ng :, : self.ng])

    @property
    def b_vg(self):
        return np.imag(self.y_red[self.ng :, : self.ng])

    @property
    def g_vv(self):
        return np.real(self.y_red[self.ng :, self.ng :])

    @property
    def b_vv(self):
        return np.imag(self.y_red[self.ng :, self.ng :])

    def residuals(self):
        """Power-balance residuals of the stored equilibrium."""
        pe, pv, qv = injections(self, self.delta, self.theta, self.vmag)
        p_ref = np.array([v.p_ref for v in self.case.vscs])
        q_ref = np.array([v.q_ref for v in self.case.vscs])
        return np.concatenate([pe - self.p_mech_eff, pv - p_ref, qv - q_ref])


def _injection_terms(y_red, mag, ang):
    """Angle-difference kernels shared by injections and their Jacobian."""
    g = np.real(y_red)
    b = np.imag(y_red)
    diff = ang[:, None] - ang[None, :]
    w = g * np.cos(diff) + b * np.sin(diff)  # active-power kernel
    z = g * np.sin(diff) - b * np.cos(diff)  # reactive-power kernel
    return w, z


def _raw_injections(y_red, mag, ang, ng):
    w, z = _injection_terms(y_red, mag, ang)
    p = mag * (w @ mag)
    q = mag * (z @ mag)
    return p[:ng], p[ng:], q[ng:]


def injections(rm, delta, theta, vmag):
    """Active/reactive injections at the dynamic nodes (explicit trig form).

    Evaluates, term by term, the angle-difference sums for generator active
    power and converter active/reactive power over the reduced admittance.
    """
    delta = np.asarray(delta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    vmag = np.asarray(vmag, dtype=float)
    if delta.shape != (rm.ng,) or theta.shape != (rm.nv,) or vmag.shape != (rm.nv,):
        raise ValueError(
            f"dimension mismatch: expected ({rm.ng},), ({rm.nv},), ({rm.nv},); "
            f"got {delta.shape}, {theta.shape}, {vmag.shape}"
        )
    mag = np.concatenate([rm.emf, vmag])
    ang = np.concatenate([delta, theta])
    return _raw_injections(rm.y_red, mag, ang, rm.ng)


@dataclass(frozen=True)
class JacobianBlocks:
    """Partial derivatives of the injections at an operating point.

    Row groups: generator active power, converter active power, converter
    reactive power.  Column groups: rotor angles, converter angles,
    converter voltage magnitudes.
    """

    dpe_dd: np.ndarray  # (ng, ng)
    dpe_dth: np.ndarray  # (ng, nv)
    dpe_dv: np.ndarray  # (ng, nv)
    dpv_dd: np.ndarray  # (nv, ng)
    dpv_dth: np.ndarray  # (nv, nv)
    dpv_dv: np.ndarray  # (nv, nv)
    dqv_dd: np.ndarray  # (nv, ng)
    dqv_dth: np.ndarray  # (nv, nv)
    dqv_dv: np.ndarray  # (nv, nv)


def _full_jacobian(y_red, mag, ang, ng):
    """Full angle/magnitude Jacobian of (P, Q) at all retained nodes.

    Returns ``(dp_da, dp_dm, dq_da, dq_dm)`` over the combined node set; the
    caller slices out the generator/converter blocks it needs.
    """
    n = y_red.shape[0]
    g = np.real(y_red)
    b = np.imag(y_red)
    w, z = _injection_terms(y_red, mag, ang)
    p = mag * (w @ mag)
    q = mag * (z @ mag)
    mm = np.outer(mag, mag)

    dp_da = mm * z
    np.fill_diagonal(dp_da, 0.0)
    np.fill_diagonal(dp_da, -dp_da.sum(axis=1))

    dq_da = -mm * w
    np.fill_diagonal(dq_da, 0.0)
    np.fill_diagonal(dq_da, -dq_da.sum(axis=1))

    dp_dm = mag[:, None] * w
    np.fill_diagonal(dp_dm, p / mag + mag * np.diag(g))

    dq_dm = mag[:, None] * z
    np.fill_diagonal(dq_dm, q / mag - mag * np.diag(b))

    return dp_da, dp_dm, dq_da, dq_dm


def jacobian_blocks(rm, delta=None, theta=None, vmag=None):
    """Analytic injection Jacobian, by default at the stored equilibrium."""
    delta = rm.delta if delta is None else np.asarray(delta, dtype=float)
    theta = rm.theta if theta is None else np.asarray(theta, dtype=float)
    vmag = rm.vmag if vmag is None else np.asarray(vmag, dtype=float)
    ng, nv = rm.ng, rm.nv
    mag = np.concatenate([rm.emf, vmag])
    ang = np.concatenate([delta, theta])
    dp_da, dp_dm, dq_da, dq_dm = _full_jacobian(rm.y_red, mag, ang, ng)
    gsl = slice(0, ng)
    vsl = slice(ng, ng + nv)
    return JacobianBlocks(
        dpe_dd=dp_da[gsl, gsl],
        dpe_dth=dp_da[gsl, vsl],
        dpe_dv=dp_dm[gsl, vsl],
        dpv_dd=dp_da[vsl, gsl],
        dpv_dth=dp_da[vsl, vsl],
        dpv_dv=dp_dm[vsl, vsl],
        dqv_dd=dq_da[vsl, gsl],
        dqv_dth=dq_da[vsl, vsl],
        dqv_dv=dq_dm[vsl, vsl],
    )


def solve_equilibrium(case, tol=1e-10, max_iter=50):
    """Newton solve of the steady state around which the dynamics linearize.

    Active power balances the mechanical set points at the generator
    internal nodes and the converter buses hold their PQ set points.  A
    distributed slack absorbs network losses, weighted by the damping
    coefficients so the solved point coincides with where the undriven
    dynamics (whose only frequency droop is D) would settle; generator 1's
    rotor angle is the reference (delta_1 = 0).  The returned model stores
    the slack-corrected dispatch so the equilibrium is an exact fixed point
    of the dynamic model.
    """
    ng, nv = case.ng, case.nv
    if ng == 0:
        raise ConfigError("case has no generators")
    y_red = reduce_network(case)
    emf = np.array([g.emf for g in case.generators])
    p_mech = np.array([g.p_mech for g in case.generators])
    p_ref = np.array([v.p_ref for v in case.vscs])
    q_ref = np.array([v.q_ref for v in case.vscs])
    d_vec = np.array([g.damping for g in case.generators])
    w_slack = d_vec / d_vec.sum() if d_vec.sum() > 0 else np.full(ng, 1.0 / ng)

    delta = np.zeros(ng)
    theta = np.zeros(nv)
    vmag = np.ones(nv)
    slack = 0.0

    def residual(d, th, v, s):
        pe, pv, qv = _raw_injections(y_red, np.concatenate([emf, v]), np.concatenate([d, th]), ng)
        return np.concatenate([pe - (p_mech + s * w_slack), pv - p_ref, qv - q_ref])

    r = residual(delta, theta, vmag, slack)
    for it in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        mag = np.concatenate([emf, vmag])
        ang = np.concatenate([delta, theta])
        dp_da, dp_dm, dq_da, dq_dm = _full_jacobian(y_red, mag, ang, ng)
        gsl, vsl = slice(0, ng), slice(ng, ng + nv)
        n_unknown = (ng - 1) + 2 * nv + 1
        jac = np.zeros((ng + 2 * nv, n_unknown))
        # columns: delta[1:], theta, vmag, slack
        jac[:ng, : ng - 1] = dp_da[gsl, 1:ng]
        jac[:ng, ng - 1 : ng - 1 + nv] = dp_da[gsl, vsl]
        jac[:ng, ng - 1 + nv : ng - 1 + 2 * nv] = dp_dm[gsl, vsl]
        jac[:ng, -1] = -w_slack
        jac[ng : ng + nv, : ng - 1] = dp_da[vsl, 1:ng]
        jac[ng : ng + nv, ng - 1 : ng - 1 + nv] = dp_da[vsl, vsl]
        jac[ng : ng + nv, ng - 1 + nv : ng - 1 + 2 * nv] = dp_dm[vsl, vsl]
        jac[ng + nv :, : ng - 1] = dq_da[vsl, 1:ng]
        jac[ng + nv :, ng - 1 : ng - 1 + nv] = dq_da[vsl, vsl]
        jac[ng + nv :, ng - 1 + nv : ng - 1 + 2 * nv] = dq_dm[vsl, vsl]

        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"equilibrium Jacobian singular at iteration {it}") from exc

        # backtracking line search on the residual norm
        base = np.linalg.norm(r)
        t = 1.0
        while t > 1.0 / 64.0:
            d = delta.copy()
            d[1:] += t * step[: ng - 1]
            th = theta + t * step[ng - 1 : ng - 1 + nv]
            v = vmag + t * step[ng - 1 + nv : ng - 1 + 2 * nv]
            s = slack + t * step[-1]
            if np.all(v > 0.05):
                cand = residual(d, th, v, s)
                if np.linalg.norm(cand) < (1.0 - 1e-4 * t) * base or base < 1e-14:
                    delta, theta, vmag, slack, r = d, th, v, s, cand
                    break
            t /= 2.0
        else:
            raise NumericalError(
                f"equilibrium Newton stalled at iteration {it} (residual {base:.3g}); "
                "case may be infeasible"
            )
    else:
        raise NumericalError(
            f"equilibrium Newton did not converge in {max_iter} iterations "
            f"(residual {np.max(np.abs(r)):.3g})"
        )

    cond = np.linalg.cond(jac) if (ng + 2 * nv) > 1 else 1.0
    if not np.isfinite(cond) or cond > 1e10:
        raise NumericalError(f"equilibrium Jacobian ill-conditioned (cond {cond:.3g})")

    pe, pv, qv = _raw_injections(
        y_red, np.concatenate([emf, vmag]), np.concatenate([delta, theta]), ng
    )
    return ReducedModel(
        case=case,
        y_red=y_red,
        delta=delta,
        theta=theta,
        vmag=vmag,
        p_gen=pe,
        p_vsc=pv,
        q_vsc=qv,
        p_mech_eff=p_mech + slack * w_slack,
        slack=slack,
    )


@dataclass(frozen=True)
class EliminationResult:
    """Reduced sensitivities after eliminating the converter algebra.

    ``dpe_*`` are the sensitivities of generator active power to rotor
    angles and to the converter power commands once the converter bus
    angles/magnitudes are solved out; ``acc_*`` are the same blocks scaled
    by minus the inverse inertia (rotor acceleration sensitivities).
    """

    dpe_ddelta: np.ndarray  # (ng, ng)
    dpe_dpv: np.ndarray  # (ng, nv)
    dpe_dqv: np.ndarray  # (ng, nv)
    acc_ddelta: np.ndarray  # -M^-1 dpe_ddelta
    acc_dpv: np.ndarray  # -M^-1 dpe_dpv
    acc_dqv: np.ndarray  # -M^-1 dpe_dqv


def _inv_labeled(mat, label):
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"converter elimination: {label} is singular (cond {cond:.3g})")
    return np.linalg.inv(mat)


def eliminate_vsc(blocks, inertia):
    """Eliminate the converter bus algebra from the injection Jacobian.

    Solves the converter active/reactive rows for the bus angle and
    magnitude deviations and substitutes them into the generator power row,
    yielding the closed-form reduced sensitivities.  Raises with the
    offending factor named when one of the required inverses does not exist.
    """
    inertia = np.asarray(inertia, dtype=float)
    ng = blocks.dpe_dd.shape[0]
    nv = blocks.dpe_dth.shape[1]
    if inertia.shape != (ng,):
        raise ValueError(f"inertia vector must have length {ng}")
    minv = 1.0 / inertia

    if nv == 0:
        dpe_ddelta = blocks.dpe_dd.copy()
        empty = np.zeros((ng, 0))
        return EliminationResult(
            dpe_ddelta=dpe_ddelta,
            dpe_dpv=empty,
            dpe_dqv=empty.copy(),
            acc_ddelta=-minv[:, None] * dpe_ddelta,
            acc_dpv=empty.copy(),
            acc_dqv=empty.copy(),
        )

    a22_i = _inv_labeled(blocks.dpv_dth, "the converter P/angle block")
    a23_i = _inv_labeled(blocks.dpv_dv, "the converter P/voltage block")
    a32_i = _inv_labeled(blocks.dqv_dth, "the converter Q/angle block")
    a33_i = _inv_labeled(blocks.dqv_dv, "the converter Q/voltage block")
    f1 = _inv_labeled(a23_i @ blocks.dpv_dth - a33_i @ blocks.dqv_dth, "the angle recovery factor")
    f2 = _inv_labeled(a22_i @ blocks.dpv_dv - a32_i @ blocks.dqv_dv, "the voltage recovery factor")

    dpe_ddelta = (
        blocks.dpe_dd
        + blocks.dpe_dth @ f1 @ (-a23_i @ blocks.dpv_dd + a33_i @ blocks.dqv_dd)
        + blocks.dpe_dv @ f2 @ (-a22_i @ blocks.dpv_dd + a32_i @ blocks.dqv_dd)
    )
    dpe_dpv = blocks.dpe_dth @ f1 @ a23_i + blocks.dpe_dv @ f2 @ a22_i
    dpe_dqv = -blocks.dpe_dth @ f1 @ a33_i - blocks.dpe_dv @ f2 @ a32_i

    return EliminationResult(
        dpe_ddelta=dpe_ddelta,
        dpe_dpv=dpe_dpv,
        dpe_dqv=dpe_dqv,
        acc_ddelta=-minv[:, None] * dpe_ddelta,
        acc_dpv=-minv[:, None] * dpe_dpv,
        acc_dqv=-minv[:, None] * dpe_dqv,
    )
