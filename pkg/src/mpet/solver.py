"""Preconditioned MinRes with the two norm-equivalent block preconditioners.

Two symmetric positive definite preconditioners are provided:

* ``full_block``: block diagonal over the full system, pairing the
  stabilized elasticity-plus-flux-mass block with a pressure block that
  realizes the weighted pressure HDG norm plus the Lambda mass.
* ``schur_reduced``: the fluxes are eliminated element-wise first (their
  mass block is element-block-diagonal, so the inverse is exact), and the
  reduced system on displacement and pressures is preconditioned with the
  elasticity block and the resulting pressure Schur complement plus the
  Lambda mass.

Both inner blocks are inverted by direct sparse factorization; the
iteration itself is a standard three-term preconditioned MinRes recurrence
whose convergence is measured in the preconditioned residual norm.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .assembly import mean_correct, pressure_hdg_matrix, pressure_nullspace

__all__ = [
    "PreconditionerError",
    "PreconditionerConfig",
    "SolveReport",
    "minres",
    "preconditioner_matrices",
    "build_preconditioner",
    "condense_velocity",
    "mean_zero_functionals",
    "solve",
]


class PreconditionerError(RuntimeError):
    pass


@dataclass
class PreconditionerConfig:
    """Choice of preconditioner variant and factorization options."""

    variant: str = "schur_reduced"
    eta: float = 10.0
    spd_check_max_size: int = 6000

    def __post_init__(self):
        if self.variant not in ("schur_reduced", "full_block"):
            raise ValueError(f"unknown preconditioner variant {self.variant!r}")


@dataclass
class SolveReport:
    iterations: int
    residuals: list
    converged: bool
    wall_time: float = 0.0
    conservation: float = None
    variant: str = ""

    @property
    def final_residual(self):
        return self.residuals[-1] if self.residuals else 0.0


# ----------------------------------------------------------------------
# MinRes
# ----------------------------------------------------------------------


def minres(operator, apply_prec, rhs, tol=1e-8, maxit=500, x0=None):
    """Preconditioned MinRes for a symmetric operator and SPD preconditioner.

    Stops when the preconditioned residual norm falls below ``tol`` times
    its initial value.  Returns ``(x, SolveReport)``; hitting ``maxit``
    yields a non-converged report, not an exception.
    """
    n = rhs.shape[0]
    matvec = operator.dot if hasattr(operator, "dot") else operator
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    t0 = time.perf_counter()

    v_prev = np.zeros(n)
    v = rhs - matvec(x)
    z = apply_prec(v)
    gamma2 = float(v @ z)
    if gamma2 < 0:
        raise PreconditionerError("preconditioner not SPD")
    gamma = float(np.sqrt(gamma2))
    history = [gamma]
    if gamma == 0.0:
        return x, SolveReport(0, history, True, time.perf_counter() - t0)

    gamma_prev = 1.0
    eta = gamma
    s_prev = s = 0.0
    c_prev = c = 1.0
    w = np.zeros(n)
    w_prev = np.zeros(n)
    z = z / gamma
    converged = False
    it = 0
    while it < maxit:
        it += 1
        az = matvec(z)
        delta = float(z @ az)
        v_next = az - (delta / gamma) * v - (gamma / gamma_prev) * v_prev
        z_next = apply_prec(v_next)
        gamma_next2 = float(v_next @ z_next)
        if gamma_next2 < 0:
            raise PreconditionerError("preconditioner not SPD")
        gamma_next = float(np.sqrt(gamma_next2))

        a0 = c * delta - c_prev * s * gamma
        a1 = float(np.hypot(a0, gamma_next))
        a2 = s * delta + c_prev * c * gamma
        a3 = s_prev * gamma
        c_prev, s_prev = c, s
        c, s = a0 / a1, gamma_next / a1

        w_next = (z - a3 * w_prev - a2 * w) / a1
        x = x + (c * eta) * w_next
        eta = -s * eta
        history.append(abs(eta))

        if abs(eta) <= tol * history[0]:
            converged = True
            break
        if gamma_next == 0.0:
            converged = True
            break

        w_prev, w = w, w_next
        v_prev, v = v, v_next
        gamma_prev, gamma = gamma, gamma_next
        z = z_next / gamma_next

    return x, SolveReport(it, history, converged, time.perf_counter() - t0)


# ----------------------------------------------------------------------
# factorization with SPD certificate
# ----------------------------------------------------------------------


class _SPDFactor:
    """Direct factorization of an SPD block; raises if the block is not SPD."""

    def __init__(self, mat, max_dense_check=6000):
        mat = sps.csc_matrix(mat)
        n = mat.shape[0]
        if n <= max_dense_check:
            try:
                np.linalg.cholesky(mat.toarray())
            except np.linalg.LinAlgError as exc:
                raise PreconditionerError(
                    "preconditioner not SPD (penalty too small, or R, alpha_p and "
                    "xi all vanish)"
                ) from exc
        try:
            self._lu = spla.splu(mat)
        except RuntimeError as exc:
            raise PreconditionerError("preconditioner not SPD (singular factor)") from exc

    def solve(self, r):
        return self._lu.solve(r)


class BlockDiagPreconditioner:
    """Applies the inverse of blockdiag(X_1, X_2) split at ``cut``."""

    def __init__(self, x1, x2, cut, max_dense_check=6000):
        self.cut = cut
        self.f1 = _SPDFactor(x1, max_dense_check)
        self.f2 = _SPDFactor(x2, max_dense_check)
        self.x1 = x1
        self.x2 = x2

    def __call__(self, r):
        out = np.empty_like(r)
        out[: self.cut] = self.f1.solve(r[: self.cut])
        out[self.cut :] = self.f2.solve(r[self.cut :])
        return out

    def matrix(self):
        return sps.block_diag([self.x1, self.x2], format="csr")


# ----------------------------------------------------------------------
# reduced system (velocity condensation)
# ----------------------------------------------------------------------


def _block_diag_inverse(mat, block_size):
    """Exact inverse of an element-block-diagonal sparse matrix."""
    mat = mat.tocsr()
    n = mat.shape[0]
    blocks = []
    for start in range(0, n, block_size):
        sl = slice(start, start + block_size)
        blocks.append(np.linalg.inv(mat[sl, sl].toarray()))
    return sps.block_diag(blocks, format="csr")


@dataclass
class CondensedSystem:
    """System on (u, uhat, p, phat) after element-wise flux elimination."""

    constrained: object            # the originating ConstrainedSystem
    K_red: sps.csr_matrix
    iu: np.ndarray                 # positions of (u, uhat) inside the free vector
    iw: list                       # per network
    iq: np.ndarray
    Mw_inv: list                   # per network, exact block-diagonal inverses
    B_wq: list                     # per network, rows w_i, cols q
    schur: sps.csr_matrix          # sum_i B^T Mw^-1 B on the q block
    A_uu: sps.csr_matrix
    G: sps.csr_matrix              # rows q, cols (u, uhat)

    def rhs(self, full_rhs=None):
        r = self.constrained.rhs(full_rhs)
        rq = r[self.iq].copy()
        for i, (minv, b) in enumerate(zip(self.Mw_inv, self.B_wq)):
            rw = r[self.iw[i]]
            if np.any(rw):
                rq -= b.T @ (minv @ rw)
        return np.concatenate([r[self.iu], rq])

    def expand(self, x_red, full_rhs=None):
        """Recover fluxes element-wise and return the full free vector."""
        nu = len(self.iu)
        r = self.constrained.rhs(full_rhs)
        x_free = np.zeros(len(self.constrained.free))
        x_free[self.iu] = x_red[:nu]
        q = x_red[nu:]
        x_free[self.iq] = q
        for i, (minv, b) in enumerate(zip(self.Mw_inv, self.B_wq)):
            x_free[self.iw[i]] = minv @ (r[self.iw[i]] - b @ q)
        return x_free


def condense_velocity(constrained):
    """Eliminate the broken fluxes; their mass block inverts element-wise.

    Returns a :class:`CondensedSystem` whose matrix is the symmetric
    reduced operator on (u, uhat, p, phat) with the flux Schur complement
    folded into the pressure block.
    """
    con = constrained
    layout = con.layout
    spaces = con.base.kernels.spaces
    n = layout.n_networks
    pos = con.free_pos

    def positions(fields):
        idx = np.concatenate([layout.indices(f) for f in fields])
        p = pos[idx]
        return p[p >= 0]

    iu = positions(["u", "uhat"])
    iw = [positions([f"w{i}"]) for i in range(n)]
    iq = positions(layout.q_fields)

    K = con.K_ff
    A_uu = K[np.ix_(iu, iu)].tocsr()
    G = K[np.ix_(iq, iu)].tocsr()
    Cq = K[np.ix_(iq, iq)].tocsr()

    Mw_inv, B_wq = [], []
    schur = None
    for i in range(n):
        Mw = K[np.ix_(iw[i], iw[i])].tocsr()
        minv = _block_diag_inverse(Mw, spaces.n_w)
        b = K[np.ix_(iw[i], iq)].tocsr()
        term = (b.T @ (minv @ b)).tocsr()
        schur = term if schur is None else schur + term
        Mw_inv.append(minv)
        B_wq.append(b)

    K_red = sps.bmat([[A_uu, G.T], [G, Cq - schur]], format="csr")
    return CondensedSystem(
        constrained=con,
        K_red=K_red,
        iu=iu,
        iw=iw,
        iq=iq,
        Mw_inv=Mw_inv,
        B_wq=B_wq,
        schur=schur,
        A_uu=A_uu,
        G=G,
    )


# ----------------------------------------------------------------------
# preconditioners
# ----------------------------------------------------------------------


def _lambda_mass_q(kernels, scaled):
    """Lambda-weighted pressure mass on the q block (zeros on the multipliers)."""
    spaces = kernels.spaces
    n = scaled.n
    lam_mass = sps.kron(sps.csr_matrix(scaled.Lambda), kernels.M_p, format="csr")
    z = sps.csr_matrix((n * spaces.size_phat, n * spaces.size_phat))
    return sps.bmat([[lam_mass, None], [None, z]], format="csr")


def _embed_per_network(mat, spaces, n, weights):
    """Place a (p, phat) matrix on each network's diagonal with given weights.

    The q block orders all volume pressures first, then all multipliers,
    so the embedding splits the per-network matrix into its four parts.
    """
    np_, nph = spaces.size_p, spaces.size_phat
    mat = mat.tocsr()
    app = mat[:np_, :np_]
    aph = mat[:np_, np_:]
    ahp = mat[np_:, :np_]
    ahh = mat[np_:, np_:]
    pp = sps.block_diag([w * app for w in weights], format="csr")
    hh = sps.block_diag([w * ahh for w in weights], format="csr")
    ph = sps.block_diag([w * aph for w in weights], format="csr")
    hp = sps.block_diag([w * ahp for w in weights], format="csr")
    return sps.bmat([[pp, ph], [hp, hh]], format="csr")


def _augment_with_kernel(mat, kernel_vectors):
    if not kernel_vectors:
        return mat
    scale = abs(mat.diagonal()).mean()
    mat = mat.tocsr()
    for k in kernel_vectors:
        mat = mat + scale * sps.csr_matrix(np.outer(k, k) / float(k @ k))
    return mat.tocsr()


def preconditioner_matrices(target, scaled, config=None, kernel_vectors=None):
    """The two diagonal blocks of the chosen preconditioner, unfactorized.

    Returns ``(x_first, x_pressure)``.  With ``kernel_vectors`` the
    pressure block is made definite by rank-one augmentation (needed only
    when all-Neumann networks without transfer are present); spectrum
    diagnostics should pass none and restrict the pencil to the mean-zero
    subspace instead.
    """
    config = config or PreconditionerConfig()
    if config.variant == "full_block":
        con = target
        layout = con.layout
        spaces = con.base.kernels.spaces
        pos = con.free_pos
        iv = np.concatenate([layout.indices(f) for f in layout.v_fields])
        iv = pos[iv]
        iv = iv[iv >= 0]
        x_uw = con.K_ff[np.ix_(iv, iv)].tocsr()

        p_hdg = pressure_hdg_matrix(spaces.mesh, spaces, include_h2=False)
        x_p_full = _embed_per_network(p_hdg, spaces, scaled.n, scaled.R)
        x_p_full = x_p_full + _lambda_mass_q(con.base.kernels, scaled)
        x_p = con.restrict_matrix(x_p_full, layout.q_fields, layout.q_fields)
    else:
        condensed = target
        con = condensed.constrained
        x_uw = condensed.A_uu
        x_p = condensed.schur + con.restrict_matrix(
            _lambda_mass_q(con.base.kernels, scaled),
            con.layout.q_fields,
            con.layout.q_fields,
        )
    if kernel_vectors:
        kq = _restrict_kernel_to_q(con, kernel_vectors)
        x_p = _augment_with_kernel(x_p, kq)
    return x_uw, x_p


def build_preconditioner(target, scaled, config=None, kernel_vectors=None):
    """SPD block-diagonal preconditioner for a constrained or condensed system.

    ``full_block`` expects a :class:`~mpet.assembly.ConstrainedSystem` and
    pairs the (u, uhat, w) block of the operator with the weighted pressure
    HDG norm plus Lambda mass.  ``schur_reduced`` expects a
    :class:`CondensedSystem` and pairs the elasticity block with the flux
    Schur complement plus Lambda mass.  Singular constant-pressure modes
    (all-Neumann networks without transfer) are handled by rank-one
    augmentation with the supplied kernel vectors.
    """
    config = config or PreconditionerConfig()
    x1, x2 = preconditioner_matrices(target, scaled, config, kernel_vectors)
    return BlockDiagPreconditioner(x1, x2, x1.shape[0], config.spd_check_max_size)


def _restrict_kernel_to_q(con, kernel_vectors):
    layout = con.layout
    q_idx = np.concatenate([layout.indices(f) for f in layout.q_fields])
    mask = np.isin(q_idx, con.free, assume_unique=True)
    return [k[q_idx][mask] for k in kernel_vectors]


def mean_zero_functionals(system):
    """Full-layout constraint vectors whose joint null space is the
    per-network mean-zero pressure subspace, where the uniform spectral
    bounds live."""
    spaces = system.kernels.spaces
    layout = system.layout
    ones = np.zeros(spaces.size_p)
    for t in range(spaces.mesh.n_elements):
        ones[spaces.p_dofs(t)[0]] = 1.0
    out = []
    for i in range(layout.n_networks):
        m = np.zeros(layout.total)
        m[layout.sl(f"p{i}")] = system.kernels.M_p @ ones
        out.append(m)
    return out


def reduced_subspace_vectors(condensed, vectors):
    """Map full-layout q-side vectors into condensed-system coordinates."""
    con = condensed.constrained
    nu = len(condensed.iu)
    return [
        np.concatenate([np.zeros(nu), kq])
        for kq in _restrict_kernel_to_q(con, vectors)
    ]


# ----------------------------------------------------------------------
# high-level solve
# ----------------------------------------------------------------------


def solve(constrained, scaled, config=None, tol=1e-8, maxit=500, bcs=None,
          full_rhs=None, reuse=None):
    """Solve a constrained block system with preconditioned MinRes.

    Returns ``(x_full, report, reuse)`` where ``x_full`` is the solution in
    the full layout (constrained values inserted) and ``reuse`` bundles the
    factorizations and condensed operator for repeated solves with new
    right-hand sides.  With ``bcs`` given, all-Neumann networks without
    transfer are detected, the right-hand side is compatibility-corrected
    and the pressure means of the solution are zeroed.
    """
    config = config or PreconditionerConfig()
    kernel_vectors = []
    null_networks = []
    if bcs is not None:
        kernel_vectors = pressure_nullspace(constrained.base, bcs)
        layout = constrained.layout
        for k in kernel_vectors:
            for i in range(layout.n_networks):
                if np.any(k[layout.sl(f"p{i}")]):
                    null_networks.append(i)

    if reuse is None:
        if config.variant == "schur_reduced":
            target = condense_velocity(constrained)
        else:
            target = constrained
        prec = build_preconditioner(target, scaled, config, kernel_vectors)
        reuse = (target, prec)
    else:
        target, prec = reuse

    if config.variant == "schur_reduced":
        rhs = target.rhs(full_rhs)
        operator = target.K_red
    else:
        rhs = constrained.rhs(full_rhs)
        operator = constrained.K_ff

    if kernel_vectors:
        rhs = rhs.copy()
        if config.variant == "schur_reduced":
            nu = len(target.iu)
            for k in _restrict_kernel_to_q(constrained, kernel_vectors):
                kk = np.concatenate([np.zeros(nu), k])
                rhs -= (kk @ rhs) / (kk @ kk) * kk
        else:
            # kernel vectors are zero outside the q block in the free vector
            for k in kernel_vectors:
                kf = k[constrained.free]
                rhs -= (kf @ rhs) / (kf @ kf) * kf

    x_red, report = minres(operator, prec, rhs, tol=tol, maxit=maxit)
    report.variant = config.variant

    if config.variant == "schur_reduced":
        x_free = target.expand(x_red, full_rhs)
    else:
        x_free = x_red
    x_full = constrained.expand(x_free)
    if null_networks:
        x_full = mean_correct(x_full, constrained.base, sorted(set(null_networks)))
    if report.converged:
        from .diagnostics import conservation_residual

        used = constrained.base.F if full_rhs is None else full_rhs
        report.conservation, _ = conservation_residual(x_full, constrained.base, used)
    return x_full, report, reuse
