"""Modal analysis and modal-LQR synthesis of the converter damping gains.

The state cost of the regulator is expressed in the coordinates of the
ordered real Schur form of the state matrix, so individual oscillatory
modes can be weighted without touching the rest.  The full-state gain is
then projected onto the speed-feedback channel that the converters
actually implement, and the modal weights are grown until the deployed
closed loop meets the damping-ratio target.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .dynamics import closed_loop
from .errors import NumericalError
from .linalg import real_schur, solve_care, solve_lyapunov

__all__ = [
    "Mode",
    "ModeReport",
    "modes",
    "modal_transform",
    "mlqr_gain",
    "deploy_gain",
    "MlqrDesign",
    "design_wadc",
    "evaluate_cost",
]

INTER_AREA_BAND = (0.1, 1.0)  # Hz


@dataclass(frozen=True)
class Mode:
    """One eigenvalue of the electromechanical model (conjugates merged)."""

    eigenvalue: complex
    freq_hz: float
    zeta: float  # damping ratio, fraction in [-1, 1]
    kind: str  # inter-area | local | real
    targeted: bool = False

    @classmethod
    def from_eigenvalue(cls, lam, band=INTER_AREA_BAND, targeted=False):
        lam = complex(lam)
        mag = abs(lam)
        freq = abs(lam.imag) / (2.0 * np.pi)
        if mag < 1e-12:
            zeta = 1.0  # rigid-body reference mode: undriven, never targeted
        else:
            zeta = -lam.real / mag
        if abs(lam.imag) < 1e-9:
            kind = "real"
        elif band[0] <= freq <= band[1]:
            kind = "inter-area"
        else:
            kind = "local"
        return cls(eigenvalue=lam, freq_hz=freq, zeta=zeta, kind=kind, targeted=targeted)

    def to_dict(self):
        return {
            "real": self.eigenvalue.real,
            "imag": self.eigenvalue.imag,
            "freq_hz": self.freq_hz,
            "damping_pct": 100.0 * self.zeta,
            "kind": self.kind,
            "targeted": self.targeted,
        }


@dataclass(frozen=True)
class ModeReport:
    """Modes of a state matrix, worst damped first."""

    modes: tuple[Mode, ...]
    band: tuple[float, float] = INTER_AREA_BAND

    def __iter__(self):
        return iter(self.modes)

    def __len__(self):
        return len(self.modes)

    @property
    def oscillatory(self):
        return tuple(m for m in self.modes if m.kind != "real")

    @property
    def inter_area(self):
        return tuple(m for m in self.modes if m.kind == "inter-area")

    def worst_in_band(self):
        cands = self.inter_area
        return min(cands, key=lambda m: m.zeta) if cands else None

    def to_dicts(self):
        return [m.to_dict() for m in self.modes]

    def table(self):
        lines = ["  freq (Hz)   damping (%)  kind        targeted   eigenvalue"]
        for m in self.modes:
            lines.append(
                f"  {m.freq_hz:9.4f}   {100 * m.zeta:10.3f}  {m.kind:<11} "
                f"{'yes' if m.targeted else 'no ':<9} "
                f"{m.eigenvalue.real:+.5f}{m.eigenvalue.imag:+.5f}j"
            )
        return "\n".join(lines)


def modes(a, band=INTER_AREA_BAND):
    """Eigenvalues with frequency, damping ratio, and band classification.

    Conjugate pairs are reported once (nonnegative imaginary part); the list
    is ordered by ascending damping ratio, then frequency.
    """
    a = np.asarray(a, dtype=float)
    lam = np.linalg.eigvals(a)
    kept = [l for l in lam if l.imag > 1e-9 or abs(l.imag) <= 1e-9]
    kept = [l for l in kept if l.imag >= -1e-9]
    out = [Mode.from_eigenvalue(l, band=band) for l in kept]
    out.sort(key=lambda m: (m.zeta, m.freq_hz))
    return ModeReport(modes=tuple(out), band=tuple(band))


def modal_transform(a, order=None):
    """Orthogonal modal mapping from the ordered real Schur decomposition.

    Returns ``(L, schur_form)`` with ``z = L x``: the rows of ``L`` span the
    modal coordinates, ordered (by default) by ascending damping ratio so
    the critical oscillatory modes occupy the leading 2x2 blocks.
    """
    form = real_schur(a) if order is None else real_schur(a, order=order)
    return form.q.T.copy(), form


def evaluate_cost(a_closed, q_state, gain_term, forcing=None):
    """Stationary quadratic cost of a stabilizing feedback, via one Lyapunov solve.

    ``gain_term`` is ``Gamma' W_R Gamma``; ``forcing`` defaults to identity
    state excitation.
    """
    n = a_closed.shape[0]
    w = np.eye(n) if forcing is None else forcing
    x_cov = solve_lyapunov(a_closed, w)
    return float(np.trace((q_state + gain_term) @ x_cov))


def _decoupled_refinement(l_map, a):
    """Block-decoupled, scale-balanced refinement of a Schur modal map.

    ``l_map`` rows span ordered Schur coordinates of ``a``; the
    quasi-triangular factor still couples later blocks into earlier
    coordinates, and a standardized 2x2 block carries its two coordinates
    at very different natural scales (for the swing model, angle-like vs
    speed-like differ by roughly the base frequency).  This routine
    block-diagonalizes the triangular factor by Sylvester solves and
    rescales each 2x2 block to equal-amplitude coordinates.  The returned
    map ``l_eff`` satisfies: ``l_eff a = D l_eff`` with ``D`` block
    diagonal, so a penalty on one block's coordinates is exactly blind to
    every other mode.
    """
    t = l_map @ a @ l_map.T
    n = t.shape[0]
    blocks = _detect_blocks(t)
    y = np.eye(n)
    # zero the coupling of each leading block to everything after it
    for start, size, _ in blocks:
        lead = slice(start, start + size)
        rest = slice(start + size, n)
        if rest.start >= n:
            break
        t11 = t[lead, lead]
        t22 = t[rest, rest]
        t12 = t[lead, rest]
        if not t12.size or not np.any(t12):
            continue
        x = sla.solve_sylvester(t11, -t22, -t12)
        embed = np.eye(n)
        embed[lead, rest] = x
        y = y @ embed
        inv_embed = np.eye(n)
        inv_embed[lead, rest] = -x
        t = inv_embed @ t @ embed
    # balance the internal scales of each 2x2 block
    scale = np.ones(n)
    for start, size, _ in blocks:
        if size == 2:
            b_off = t[start, start + 1]
            c_off = t[start + 1, start]
            if b_off != 0.0 and c_off != 0.0:
                scale[start + 1] = np.sqrt(abs(b_off / c_off))
    y = y * scale[None, :]
    l_eff = np.linalg.solve(y, l_map)
    # normalize each block to a unit coordinate scale (geometric mean of its
    # row norms, so the internal balance just established is preserved)
    for start, size, _ in blocks:
        rows = l_eff[start : start + size]
        norms = np.linalg.norm(rows, axis=1)
        g = float(np.exp(np.mean(np.log(norms)))) if np.all(norms > 0) else 1.0
        l_eff[start : start + size] /= g
    return l_eff


def _detect_blocks(t, tol=1e-9):
    """1x1/2x2 diagonal block layout of a numerically quasi-triangular matrix."""
    n = t.shape[0]
    cut = tol * max(1.0, float(np.abs(t).max()))
    out = []
    i = 0
    while i < n:
        if i + 1 < n and abs(t[i + 1, i]) > cut:
            out.append((i, 2, None))
            i += 2
        else:
            out.append((i, 1, None))
            i += 1
    return out


def mlqr_gain(a, b, l_map, w_q, w_r, stability_margin=0.01, return_details=False):
    """Full-state gain minimizing the modal-weighted quadratic cost.

    Each entry of ``w_q`` weights one modal coordinate of the Schur map
    ``l_map``.  The state penalty is built on the block-decoupled,
    scale-balanced refinement of the map (see
    :func:`_decoupled_refinement`), so unweighted modes carry exactly zero
    cost and the stabilizing solution leaves them untouched: this is what
    makes per-mode targeting decouple.

    The swing model carries a structural rigid-body eigenvalue at zero,
    which would place Hamiltonian eigenvalues on the imaginary axis.  With
    the rigid mode unweighted, the Riccati equation is solved on the state
    matrix shifted just below the axis, which is always solvable and
    provably returns a gain exactly blind to the rigid-body direction.  A
    strictly Hurwitz matrix is solved unshifted, preserving exact
    optimality; a genuinely unstable one is shifted upward so the solution
    still stabilizes it.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w_q = np.asarray(w_q, dtype=float)
    w_r = np.asarray(w_r, dtype=float)
    if w_r.ndim == 1:
        w_r = np.diag(w_r)
    nv = b.shape[1]
    if not np.any(w_q):
        gamma = np.zeros((nv, a.shape[0]))
        if return_details:
            return gamma, {"q_state": np.zeros_like(a), "shift": 0.0, "l_eff": l_map}
        return gamma

    l_eff = _decoupled_refinement(l_map, a)
    if w_q.ndim == 1:
        if np.any(w_q < 0):
            raise ValueError("modal weights must be nonnegative")
        q_state = l_eff.T @ np.diag(w_q) @ l_eff
    else:
        q_state = l_eff.T @ w_q @ l_eff
    q_state = (q_state + q_state.T) / 2.0

    eigs = np.linalg.eigvals(a)
    scale = max(1.0, np.max(np.abs(eigs)))
    abscissa = float(np.max(eigs.real))
    shift = 0.0
    try:
        p = solve_care(a, b, q_state, w_r)
    except NumericalError as first_exc:
        # marginal modes invisible to the cost (the rigid-body angle mode)
        # put Hamiltonian eigenvalues on the axis; retry on a shifted matrix
        if abscissa > 1e-7 * scale:
            shift = abscissa + stability_margin  # unstable: force stabilization
        else:
            shift = -stability_margin  # marginal: solve stably, leave it alone
        try:
            p = solve_care(a + shift * np.eye(a.shape[0]), b, q_state, w_r)
        except NumericalError as exc:
            raise NumericalError(
                f"modal regulator synthesis failed ({exc}); a weighted mode may be "
                "uncontrollable from the converter inputs"
            ) from first_exc
    gamma = np.linalg.solve(w_r, b.T @ p)
    if return_details:
        return gamma, {"q_state": q_state, "shift": shift, "l_eff": l_eff}
    return gamma


def deploy_gain(gamma, ng=None):
    """Project the full-state gain onto the implementable speed feedback.

    The converters modulate on speed deviations only, so the deployed gain
    is minus the speed-column block of the regulator gain.  Returns
    ``(gain, angle_block_norm)``; a large angle-block norm means the
    projection discards real control authority, which is reported as a
    deployment-fidelity diagnostic.
    """
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[1]
    ng = n // 2 if ng is None else ng
    gain = -gamma[:, ng:].copy()
    angle_norm = float(np.linalg.norm(gamma[:, :ng]))
    return gain, angle_norm


def _eig_with_vectors(a):
    lam, vec = np.linalg.eig(a)
    keep = lam.imag >= -1e-9
    return lam[keep], vec[:, keep]


def _mac(v1, v2):
    num = abs(np.vdot(v1, v2)) ** 2
    den = (np.vdot(v1, v1) * np.vdot(v2, v2)).real
    return num / den


def _match_modes(lam_ref, vec_ref, lam_new, vec_new):
    """Pair reference modes with closed-loop modes by eigenvector correlation."""
    pairs = []
    used = set()
    for i in range(len(lam_ref)):
        scores = [
            (-1.0 if j in used else _mac(vec_ref[:, i], vec_new[:, j]), j)
            for j in range(len(lam_new))
        ]
        score, j = max(scores)
        used.add(j)
        pairs.append((j, score))
    return pairs


@dataclass(frozen=True)
class MlqrDesign:
    """Synthesis result: modal map, weights, gains, and achieved modes."""

    l_map: np.ndarray  # (2ng, 2ng)
    w_q: np.ndarray  # (2ng,) modal weights
    w_r: np.ndarray  # (nv, nv)
    gamma: np.ndarray  # (nv, 2ng) full-state gain
    gain: np.ndarray  # (nv, ng) deployed speed-feedback gain
    open_modes: ModeReport
    achieved_modes: ModeReport
    target_zeta: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "target_zeta": self.target_zeta,
            "converged": self.converged,
            "iterations": self.iterations,
            "l_map": self.l_map.tolist(),
            "w_q": self.w_q.tolist(),
            "w_r": self.w_r.tolist(),
            "gamma": self.gamma.tolist(),
            "gain": self.gain.tolist(),
            "open_modes": self.open_modes.to_dicts(),
            "achieved_modes": self.achieved_modes.to_dicts(),
            "diagnostics": self.diagnostics,
        }


def design_wadc(
    a,
    b,
    target_zeta=0.10,
    band=INTER_AREA_BAND,
    mode_selection=None,
    w_r=None,
    modulation_limits=None,
    growth=1.5,
    max_iter=100,
    stability_margin=0.01,
):
    """Tune modal weights until the deployed loop damps the critical modes.

    Targets default to the oscillatory modes inside the inter-area band
    whose damping ratio is below ``target_zeta``; ``mode_selection`` (a list
    of indices into the open-loop :func:`modes` report) overrides the
    choice.  Starting from unit weight on each targeted modal coordinate
    (input weights identity, or scaled by the inverse squared modulation
    limits when given), the weight of every still-underdamped target is
    multiplied by ``growth`` until the speed-feedback closed loop reaches
    the target everywhere.

    Raises :class:`NumericalError` with the partial design attached (in
    ``exc.design``) when the iteration cap is exceeded.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    ng = n // 2
    nv = b.shape[1]
    open_report = modes(a, band=band)

    if mode_selection is None:
        targets = [
            mi
            for mi, m in enumerate(open_report)
            if m.kind == "inter-area" and m.zeta < target_zeta
        ]
    else:
        targets = list(mode_selection)
        for mi in targets:
            if not 0 <= mi < len(open_report):
                raise ValueError(f"mode index {mi} out of range")
            if abs(open_report.modes[mi].eigenvalue) < 1e-12:
                raise ValueError("the rigid-body reference mode cannot be targeted")

    # order the Schur form with the targeted modes in the leading blocks, so
    # each target's modal coordinates span exactly its own invariant
    # subspace; coordinates of a mode sitting behind other blocks would see
    # a phase-skewed projection of its motion and the regulator would fight
    # the wrong phase once the gain is projected onto speed feedback
    target_eigs = [open_report.modes[mi].eigenvalue for mi in targets]

    def order_key(lam):
        from .linalg import ascending_damping_key

        hit = any(abs(lam - lt) < 1e-8 * max(1.0, abs(lt)) for lt in target_eigs)
        return (0 if hit else 1,) + ascending_damping_key(lam)

    l_map, form = modal_transform(a, order=order_key)

    # map report entries onto Schur block coordinates via the eigenvalues
    coords = {}
    used_blocks = set()
    for mi, mode in enumerate(open_report):
        best, best_d = None, np.inf
        for bi, (start, size, lam) in enumerate(form.blocks):
            if bi in used_blocks:
                continue
            d = abs(lam - mode.eigenvalue)
            if d < best_d:
                best, best_d = bi, d
        used_blocks.add(best)
        start, size, _ = form.blocks[best]
        coords[mi] = list(range(start, start + size))

    open_marked = ModeReport(
        modes=tuple(
            replace(m, targeted=(mi in targets)) for mi, m in enumerate(open_report)
        ),
        band=open_report.band,
    )

    if w_r is None:
        if modulation_limits is not None:
            lim = np.asarray(modulation_limits, dtype=float)
            w_r = np.diag((lim.min() / lim) ** 2)
        else:
            w_r = np.eye(nv)
    else:
        w_r = np.asarray(w_r, dtype=float)
        if w_r.ndim == 1:
            w_r = np.diag(w_r)

    lam_open, vec_open = _eig_with_vectors(a)
    # controllability screen for the targeted modes
    lam_all, vec_all = np.linalg.eig(a)
    left = np.linalg.inv(vec_all)
    for mi in targets:
        lam_t = open_report.modes[mi].eigenvalue
        i = int(np.argmin(np.abs(lam_all - lam_t)))
        reach = np.abs(left[i] @ b).max()
        if reach < 1e-9 * max(1.0, np.abs(left[i]).max()):
            raise NumericalError(
                f"targeted mode at {lam_t:.4f} is uncontrollable from the converters"
            )

    # initial weight scale from the first-order (small-weight) sensitivity
    # of each targeted eigenvalue to its own modal weight on the deployed
    # loop: start safely below the damping target so the growth loop walks
    # up in small, trackable steps
    def initial_weight(mi):
        lam_t = open_report.modes[mi].eigenvalue
        w_q_probe = np.zeros(n)
        w_q_probe[coords[mi]] = 1.0
        try:
            l_eff = _decoupled_refinement(l_map, a)
            q1 = l_eff.T @ np.diag(w_q_probe) @ l_eff
            a_sh = a - stability_margin * np.eye(n)
            p1 = solve_lyapunov(a_sh.T, (q1 + q1.T) / 2.0)
        except NumericalError:
            return 1e-3
        gain1, _ = deploy_gain(np.linalg.solve(w_r, b.T @ p1), ng)
        upd = np.zeros((n, n))
        upd[:, ng:] = b @ gain1
        # eigenvalue sensitivity via left/right eigenvectors
        lam_full, v_full = np.linalg.eig(a)
        k = int(np.argmin(np.abs(lam_full - lam_t)))
        w_left = np.linalg.inv(v_full)[k]
        dlam = (w_left @ upd @ v_full[:, k]) / (w_left @ v_full[:, k])
        need = target_zeta * abs(lam_t) + lam_t.real
        if abs(dlam.real) < 1e-12 or need <= 0:
            return 1e-3
        return max(0.25 * need / abs(dlam.real), 1e-9)

    w_q = np.zeros(n)
    for mi in targets:
        w_q[coords[mi]] = initial_weight(mi)

    # per-target tracking state, updated every iteration: weights move the
    # closed-loop modes gradually, so matching by eigenvector correlation
    # stays unambiguous even when a mode travels far overall
    track = {}
    for mi in targets:
        lam_t = open_report.modes[mi].eigenvalue
        i = int(np.argmin(np.abs(lam_open - lam_t)))
        track[mi] = (lam_open[i], vec_open[:, i])

    gamma = np.zeros((nv, n))
    gain = np.zeros((nv, ng))
    achieved = {mi: open_report.modes[mi].zeta for mi in targets}
    iteration = 0
    converged = not targets
    while iteration < max_iter and targets:
        iteration += 1
        gamma = mlqr_gain(a, b, l_map, w_q, w_r, stability_margin=stability_margin)
        gain, _ = deploy_gain(gamma, ng)
        a_dep = closed_loop(a, b, gain)
        lam_new, vec_new = _eig_with_vectors(a_dep)
        under = []
        for mi in targets:
            lam_ref, vec_ref = track[mi]
            j, _ = _match_modes(
                np.array([lam_ref]), vec_ref[:, None], lam_new, vec_new
            )[0]
            lam_c = lam_new[j]
            track[mi] = (lam_c, vec_new[:, j])
            z = -lam_c.real / abs(lam_c) if abs(lam_c) > 1e-12 else 1.0
            achieved[mi] = z
            if z < target_zeta:
                under.append(mi)
        if not under:
            converged = True
            break
        for mi in under:
            w_q[coords[mi]] *= growth

    a_dep = closed_loop(a, b, gain)
    achieved_report = modes(a_dep, band=band)
    targeted_closed = {complex(track[mi][0]) for mi in targets}
    achieved_report = ModeReport(
        modes=tuple(
            replace(
                m,
                targeted=any(
                    abs(m.eigenvalue - lc) < 1e-9 or abs(m.eigenvalue - lc.conjugate()) < 1e-9
                    for lc in targeted_closed
                ),
            )
            for m in achieved_report
        ),
        band=achieved_report.band,
    )

    # decoupling diagnostics: movement of untargeted eigenvalues under the
    # deployed gain and under the full-state gain
    def untargeted_movement(a_cl):
        lam_c = np.linalg.eigvals(a_cl)
        moves = []
        for mi, m in enumerate(open_report):
            if mi in targets:
                continue
            lam_t = m.eigenvalue
            d = np.min(np.abs(lam_c - lam_t))
            moves.append(float(d))
        return max(moves) if moves else 0.0

    _, angle_norm = deploy_gain(gamma, ng)
    diagnostics = {
        "gamma_angle_block_norm": angle_norm,
        "untargeted_movement_deployed": untargeted_movement(a_dep),
        "untargeted_movement_full_state": untargeted_movement(a - b @ gamma),
        "achieved_target_zetas": {str(mi): achieved[mi] for mi in targets},
        "stability_shift_margin": stability_margin,
    }

    design = MlqrDesign(
        l_map=l_map,
        w_q=w_q,
        w_r=w_r,
        gamma=gamma,
        gain=gain,
        open_modes=open_marked,
        achieved_modes=achieved_report,
        target_zeta=float(target_zeta),
        converged=converged,
        iterations=iteration,
        diagnostics=diagnostics,
    )
    if not converged:
        err = NumericalError(
            f"damping design hit the iteration cap ({max_iter}); best achieved: "
            + ", ".join(f"mode {mi}: {100 * z:.2f}%" for mi, z in achieved.items())
        )
        err.design = design
        raise err
    return design
