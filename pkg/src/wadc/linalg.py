"""Dense real-matrix kernels used throughout the package.

Thin, contract-checked wrappers around LAPACK-backed scipy routines:
matrix exponential (Pade scaling-and-squaring), principal matrix logarithm
(Schur + inverse scaling-and-squaring), real Schur decomposition with full
eigenvalue reordering, continuous Riccati/Lyapunov solvers, and the
pseudo-inverse of generalized permutation matrices.

All functions are pure and operate on float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import NumericalError

__all__ = [
    "SchurForm",
    "matrix_exp",
    "matrix_log_principal",
    "real_schur",
    "ascending_damping_key",
    "solve_care",
    "solve_lyapunov",
    "genperm_pinv",
]

#: default relative tolerance for reconstruction-style checks
RECONSTRUCTION_TOL = 1e-9
#: default absolute tolerance for equation residuals
RESIDUAL_TOL = 1e-8


def _as_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if a.size and not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matrix_exp(a, t=1.0):
    """Return exp(a*t) for a square real matrix.

    Pade scaling-and-squaring with norm-based order selection (LAPACK-backed).
    ``t = 0`` returns the identity exactly.
    """
    a = _as_square(a)
    n = a.shape[0]
    if t == 0.0:
        return np.eye(n)
    return sla.expm(a * float(t))


def matrix_log_principal(m, axis_tol=1e-12):
    """Principal logarithm of a real square matrix.

    The input must be invertible with no eigenvalue on the closed negative
    real axis; otherwise no real principal branch exists.  In the estimation
    context a spectrum touching the negative axis signals that the
    correlation lag is too large for the fastest mode, or that the sample
    statistics are inconsistent.

    Raises
    ------
    NumericalError
        If the matrix is singular or an eigenvalue lies on the closed
        negative real axis.
    """
    m = _as_square(m)
    w = np.linalg.eigvals(m)
    scale = max(np.max(np.abs(w)), 1.0)
    if np.min(np.abs(w)) <= axis_tol * scale:
        raise NumericalError("matrix logarithm: input is singular to working precision")
    on_axis = (w.real <= 0.0) & (np.abs(w.imag) <= axis_tol * np.abs(w))
    if np.any(on_axis):
        bad = w[on_axis]
        raise NumericalError(
            "matrix logarithm: eigenvalue(s) on the closed negative real axis "
            f"(e.g. {bad[0]:.6g}); lag too large or statistics inconsistent"
        )
    log = sla.logm(m)
    if np.iscomplexobj(log):
        leak = np.max(np.abs(log.imag))
        if leak > 1e-8 * max(1.0, np.max(np.abs(log.real))):
            raise NumericalError(
                f"matrix logarithm: imaginary leakage {leak:.3g} in principal branch"
            )
        log = log.real
    return np.ascontiguousarray(log)


@dataclass(frozen=True)
class SchurForm:
    """Ordered real Schur factorization A = Q T Q^T.

    ``blocks`` lists the diagonal blocks of the quasi-triangular factor as
    ``(start, size, eigenvalue)`` with the eigenvalue of each 2x2 block
    reported once with nonnegative imaginary part.
    """

    q: np.ndarray
    t: np.ndarray
    blocks: tuple[tuple[int, int, complex], ...]

    @property
    def eigenvalues(self):
        """Block eigenvalues in diagonal order (conjugates listed once)."""
        return np.array([lam for _, _, lam in self.blocks])


def _diag_blocks(t):
    """Yield (start, size, eigenvalue) for a standardized quasi-triangular t."""
    n = t.shape[0]
    out = []
    i = 0
    while i < n:
        if i + 1 < n and t[i + 1, i] != 0.0:
            a, b = t[i, i], t[i, i + 1]
            c, d = t[i + 1, i], t[i + 1, i + 1]
            disc = (a - d) ** 2 / 4.0 + b * c
            # standardized blocks have complex pair eigenvalues (disc < 0)
            mu = (a + d) / 2.0
            nu = np.sqrt(max(-disc, 0.0))
            out.append((i, 2, complex(mu, nu)))
            i += 2
        else:
            out.append((i, 1, complex(t[i, i], 0.0)))
            i += 1
    return out


def ascending_damping_key(lam):
    """Default eigenvalue ordering: ascending damping ratio.

    Ties break by ascending frequency, with marginal eigenvalues
    (|lambda| ~ 0, damping ratio defined as 1) strictly last.  Oscillatory
    critical modes thereby occupy the leading Schur coordinates and the
    rigid-body mode never does.
    """
    mag = abs(lam)
    marginal = mag < 1e-12
    zeta = 1.0 if marginal else -lam.real / mag
    freq = abs(lam.imag) / (2.0 * np.pi)
    return (zeta, freq, 1.0 if marginal else 0.0)


def real_schur(a, order=ascending_damping_key):
    """Real Schur decomposition with the diagonal blocks fully ordered.

    Parameters
    ----------
    a : (n, n) array_like
        Real square matrix.
    order : callable or None
        Maps a block eigenvalue (complex, Im >= 0) to a sort key.  Blocks are
        arranged along the diagonal by ascending key via orthogonal
        similarity swaps (LAPACK ``dtrexc``).  ``None`` keeps the order
        returned by the QR iteration.

    Returns
    -------
    SchurForm
    """
    a = _as_square(a)
    n = a.shape[0]
    if n == 0:
        return SchurForm(np.eye(0), np.zeros((0, 0)), ())
    try:
        t, q = sla.schur(a, output="real")
    except sla.LinAlgError as exc:  # pragma: no cover - QR iteration cap
        raise NumericalError(f"real Schur decomposition failed to converge: {exc}") from exc

    if order is not None:
        pos = 0
        while pos < n:
            blocks = [blk for blk in _diag_blocks(t) if blk[0] >= pos]
            if not blocks:
                break
            # stable selection: among remaining blocks pick the smallest key,
            # earliest block on ties, and move it to the current position
            best = min(blocks, key=lambda blk: (order(blk[2]), blk[0]))
            if best[0] != pos:
                t, q, info = lapack.dtrexc(t, q, best[0] + 1, pos + 1)
                if info != 0:
                    raise NumericalError(
                        f"Schur reordering failed while moving block at {best[0]} (info={info})"
                    )
            # re-scan; the moved block's size may have been re-standardized
            placed = next(blk for blk in _diag_blocks(t) if blk[0] == pos)
            pos += placed[1]

    return SchurForm(q=q, t=t, blocks=tuple(_diag_blocks(t)))


def _check_sym(m, name, tol=1e-8):
    m = _as_square(m, name)
    dev = np.max(np.abs(m - m.T)) if m.size else 0.0
    if dev > tol * max(1.0, np.max(np.abs(m))):
        raise ValueError(f"{name} must be symmetric (asymmetry {dev:.3g})")
    return (m + m.T) / 2.0


def solve_care(a, b, q, r, newton_steps=2):
    """Stabilizing solution of A'P + PA - P B R^-1 B' P + Q = 0.

    Schur/invariant-subspace method followed by up to ``newton_steps`` of
    Newton refinement (each step solves one Lyapunov equation); a step is
    kept only if it reduces the residual.

    Returns the symmetric positive semidefinite ``P``; the closed loop
    ``A - B R^-1 B' P`` is verified to be Hurwitz.
    """
    a = _as_square(a, "a")
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    q = _check_sym(q, "q")
    r = _check_sym(r, "r")
    if np.min(np.linalg.eigvalsh(r)) <= 0.0:
        raise ValueError("r must be symmetric positive definite")
    if q.size and np.min(np.linalg.eigvalsh(q)) < -1e-10 * max(1.0, np.max(np.abs(q))):
        raise ValueError("q must be positive semidefinite")

    try:
        p = sla.solve_continuous_are(a, b, q, r)
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Riccati solve found no stabilizing solution: {exc}") from exc
    p = (p + p.T) / 2.0

    def residual(pk):
        gain = sla.solve(r, b.T @ pk, assume_a="pos")
        return a.T @ pk + pk @ a - pk @ b @ gain + q

    res = residual(p)
    res_norm = np.linalg.norm(res)
    for _ in range(max(0, newton_steps)):
        if res_norm <= 1e-14 * max(1.0, np.linalg.norm(p)):
            break
        acl = a - b @ sla.solve(r, b.T @ p, assume_a="pos")
        try:
            dp = sla.solve_continuous_lyapunov(acl.T, -res)
        except sla.LinAlgError:
            break
        cand = (p + dp + (p + dp).T) / 2.0
        cand_norm = np.linalg.norm(residual(cand))
        if cand_norm < res_norm:
            p, res_norm = cand, cand_norm
        else:
            break

    closed = a - b @ sla.solve(r, b.T @ p, assume_a="pos")
    abscissa = np.max(np.linalg.eigvals(closed).real)
    if abscissa >= 0.0:
        raise NumericalError(
            f"Riccati solution is not stabilizing (closed-loop abscissa {abscissa:.3g})"
        )
    return p


def solve_lyapunov(a, w):
    """Solve A C + C A' + W = 0 for symmetric C (A must be Hurwitz).

    Bartels-Stewart via the real Schur form.  For W = S S' this is the
    stationary covariance of the linear SDE dx = A x dt + S dW.
    """
    a = _as_square(a, "a")
    w = _check_sym(w, "w")
    eigs = np.linalg.eigvals(a)
    if a.size and np.max(eigs.real) >= 0.0:
        raise NumericalError(
            f"Lyapunov solve requires a Hurwitz matrix (abscissa {np.max(eigs.real):.3g})"
        )
    c = sla.solve_continuous_lyapunov(a, -w)
    return (c + c.T) / 2.0


def genperm_pinv(p, zero_tol=0.0):
    """Moore-Penrose pseudo-inverse of a generalized permutation matrix.

    The input may be rectangular but must have at most one nonzero entry per
    row and per column (entries with magnitude <= ``zero_tol`` count as
    zero).  For this structure the pseudo-inverse is the transposed pattern
    with reciprocal entries, which is returned exactly.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {p.shape}")
    mask = np.abs(p) > zero_tol
    if np.any(mask.sum(axis=1) > 1) or np.any(mask.sum(axis=0) > 1):
        raise ValueError(
            "not a generalized permutation matrix: more than one nonzero in a row or column"
        )
    out = np.zeros((p.shape[1], p.shape[0]))
    rows, cols = np.nonzero(mask)
    out[cols, rows] = 1.0 / p[rows, cols]
    return out
