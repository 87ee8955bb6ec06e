import numpy as np
import pytest
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from mpet.assembly import (
    BoundaryConditionSet,
    apply_boundary_conditions,
    assemble_kernels,
    assemble_volume_rhs,
    build_block_system,
    homogeneous_bcs,
    pressure_hdg_matrix,
)
from mpet.manufactured import default_manufactured
from mpet.mesh import generate_unit_square
from mpet.params import scaled_from_direct
from mpet.solver import (
    CondensedSystem,
    PreconditionerConfig,
    PreconditionerError,
    build_preconditioner,
    condense_velocity,
    minres,
    solve,
)
from mpet.spaces import SpaceSet


def identity_prec(r):
    return r


def make_problem(n_side=2, ell=1, n_networks=2, lam=1.0, R=1.0, alpha_p=0.0,
                 xi=0.0, pressure_bc="dirichlet", rhs=True):
    mesh = generate_unit_square(n_side)
    spaces = SpaceSet(mesh, ell, n_networks)
    xi_mat = np.full((n_networks, n_networks), xi)
    np.fill_diagonal(xi_mat, 0.0)
    scaled = scaled_from_direct(lam, [R] * n_networks, [alpha_p] * n_networks, xi_mat)
    system = build_block_system(assemble_kernels(mesh, spaces), scaled)
    manu = default_manufactured(min(n_networks, 2))
    if rhs:
        g = manu.mass_sources(scaled)
        while len(g) < n_networks:
            g.append(g[-1])
        system.F = assemble_volume_rhs(mesh, spaces, f=manu.body_force(scaled), g=g)
    if pressure_bc == "dirichlet":
        pres = []
        for i in range(n_networks):
            fn = manu.pressure_trace_bc(min(i, manu.n - 1))
            pres.append({"boundary": ("dirichlet", fn)})
        bcs = BoundaryConditionSet(
            {"boundary": ("dirichlet", lambda x, t: np.zeros(2))}, pres
        )
    else:
        bcs = homogeneous_bcs(n_networks)
    con = apply_boundary_conditions(system, bcs)
    return mesh, spaces, scaled, system, bcs, con


# ----------------------------------------------------------------------
# minres on small fixed systems
# ----------------------------------------------------------------------


def test_minres_diagonal_spd():
    A = np.diag([2.0, 3.0])
    x, report = minres(A, identity_prec, np.array([2.0, 3.0]))
    assert report.converged
    assert report.iterations <= 2
    assert np.allclose(x, [1.0, 1.0], atol=1e-12)


def test_minres_symmetric_indefinite():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    x, report = minres(A, identity_prec, np.array([1.0, 0.0]))
    assert report.converged
    assert report.iterations <= 2
    assert np.allclose(x, [0.0, 1.0], atol=1e-12)


def test_minres_zero_rhs():
    A = np.diag([1.0, 2.0])
    x, report = minres(A, identity_prec, np.zeros(2))
    assert report.converged
    assert report.iterations == 0
    assert np.all(x == 0.0)


def test_minres_maxit_returns_unconverged():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(40, 40))
    A = m + m.T
    b = rng.normal(size=40)
    x, report = minres(A, identity_prec, b, tol=1e-14, maxit=3)
    assert not report.converged
    assert report.iterations == 3


def test_minres_history_non_increasing():
    _, _, _, _, _, con = make_problem(n_side=2, ell=1)
    x, report = minres(con.K_ff, identity_prec, con.rhs(), tol=1e-10, maxit=300)
    h = np.array(report.residuals)
    assert np.all(h[1:] <= h[:-1] + 1e-14 * h[0])
    if report.converged:
        assert report.final_residual <= 1e-10 * h[0]


def test_minres_exact_preconditioner_two_iterations():
    """With the SPD absolute value of the operator, the spectrum is {-1, +1}."""
    _, _, _, _, _, con = make_problem(n_side=1, ell=1, n_networks=1)
    K = con.K_ff.toarray()
    lam, V = np.linalg.eigh(K)
    apply_abs_inv = lambda r: V @ ((V.T @ r) / np.abs(lam))
    x, report = minres(con.K_ff, apply_abs_inv, con.rhs(), tol=1e-10)
    assert report.converged
    assert report.iterations <= 2
    x_direct = np.linalg.solve(K, con.rhs())
    assert np.allclose(x, x_direct, atol=1e-8 * np.linalg.norm(x_direct))


# ----------------------------------------------------------------------
# condensation
# ----------------------------------------------------------------------


def test_condense_matches_dense_schur_oracle():
    _, spaces, scaled, system, bcs, con = make_problem(n_side=1, ell=1, n_networks=1)
    condensed = condense_velocity(con)

    # dense algebra oracle, separate index bookkeeping
    K = con.K_ff.toarray()
    layout = con.layout
    pos = con.free_pos
    iu = [pos[d] for d in np.concatenate([layout.indices("u"), layout.indices("uhat")]) if pos[d] >= 0]
    iw = [pos[d] for d in layout.indices("w0") if pos[d] >= 0]
    iq = [
        pos[d]
        for d in np.concatenate([layout.indices("p0"), layout.indices("phat0")])
        if pos[d] >= 0
    ]
    Auu = K[np.ix_(iu, iu)]
    G = K[np.ix_(iq, iu)]
    Mw = K[np.ix_(iw, iw)]
    B = K[np.ix_(iw, iq)]
    Cq = K[np.ix_(iq, iq)]
    expected = np.block([[Auu, G.T], [G, Cq - B.T @ np.linalg.inv(Mw) @ B]])
    assert np.allclose(condensed.K_red.toarray(), expected, atol=1e-12 * np.abs(expected).max())


def test_condensed_solve_matches_unreduced():
    _, _, scaled, system, bcs, con = make_problem(n_side=2, ell=2, n_networks=2,
                                                  alpha_p=0.3, xi=0.1)
    x_direct = np.zeros(system.layout.total)
    x_direct[con.free] = spla.spsolve(con.K_ff.tocsc(), con.rhs())
    x_direct[con.constrained] = con.values

    condensed = condense_velocity(con)
    rhs_red = condensed.rhs()
    x_red = spla.spsolve(condensed.K_red.tocsc(), rhs_red)
    x_full = con.expand(condensed.expand(x_red))
    scale = np.abs(x_direct).max()
    assert np.abs(x_full - x_direct).max() <= 1e-10 * scale


def test_condensed_network_blocks_identical_for_equal_R():
    _, spaces, scaled, system, bcs, con = make_problem(n_side=1, ell=1, n_networks=2, R=0.7)
    condensed = condense_velocity(con)
    s = condensed.schur.toarray()
    np_free = spaces.size_p  # all volume pressures are free
    b0 = s[:np_free, :np_free]
    b1 = s[np_free : 2 * np_free, np_free : 2 * np_free]
    assert np.allclose(b0, b1, atol=1e-13 * np.abs(b0).max())


# ----------------------------------------------------------------------
# preconditioners
# ----------------------------------------------------------------------


def test_both_variants_spd_at_hard_corner():
    """Factorization succeeds at the hardest sweep corner R -> 0, alpha_p = xi = 0."""
    _, _, scaled, system, bcs, con = make_problem(n_side=2, ell=1, n_networks=2, R=1e-8)
    condensed = condense_velocity(con)
    build_preconditioner(condensed, scaled, PreconditionerConfig("schur_reduced"))
    build_preconditioner(con, scaled, PreconditionerConfig("full_block"))


def test_small_penalty_rejected():
    _, spaces, scaled, system, bcs, _ = make_problem(n_side=1, ell=2)
    mesh = spaces.mesh
    kernels = assemble_kernels(mesh, spaces, eta=0.05)
    sys2 = build_block_system(kernels, scaled)
    sys2.F = system.F
    con2 = apply_boundary_conditions(sys2, bcs)
    condensed = condense_velocity(con2)
    with pytest.raises(PreconditionerError, match="not SPD"):
        build_preconditioner(condensed, scaled, PreconditionerConfig("schur_reduced"))


def test_xp_and_schur_pressure_blocks_spectrally_equivalent():
    """Generalized eigenvalues of (X_p, X_p_tilde) stay in a bounded interval."""
    bounds = []
    for n_side in (1, 2, 4):
        _, spaces, scaled, system, bcs, con = make_problem(
            n_side=n_side, ell=1, n_networks=1, R=1.0
        )
        condensed = condense_velocity(con)
        prec_full = build_preconditioner(con, scaled, PreconditionerConfig("full_block"))
        prec_red = build_preconditioner(condensed, scaled, PreconditionerConfig("schur_reduced"))
        xp = prec_full.x2.toarray()
        xpt = prec_red.x2.toarray()
        from scipy.linalg import eigh

        eigs = eigh(xp, xpt, eigvals_only=True)
        bounds.append((eigs.min(), eigs.max()))
    lo = min(b[0] for b in bounds)
    hi = max(b[1] for b in bounds)
    assert lo > 0.05
    assert hi / lo < 50.0


def test_preconditioned_solve_matches_direct():
    for variant in ("schur_reduced", "full_block"):
        _, _, scaled, system, bcs, con = make_problem(
            n_side=2, ell=2, n_networks=2, lam=1e4, R=1e-4, alpha_p=1e-4, xi=1e-4
        )
        x, report, _ = solve(con, scaled, PreconditionerConfig(variant), tol=1e-10)
        assert report.converged
        x_direct = np.zeros(system.layout.total)
        x_direct[con.free] = spla.spsolve(con.K_ff.tocsc(), con.rhs())
        x_direct[con.constrained] = con.values
        assert np.abs(x - x_direct).max() <= 1e-6 * np.abs(x_direct).max()


def test_solve_reuse_is_identical():
    _, _, scaled, system, bcs, con = make_problem(n_side=2, ell=1)
    x1, r1, reuse = solve(con, scaled, tol=1e-9)
    x2, r2, _ = solve(con, scaled, tol=1e-9, reuse=reuse)
    assert np.array_equal(x1, x2)
    assert r1.iterations == r2.iterations


def test_solve_report_carries_conservation_summary():
    _, _, scaled, system, bcs, con = make_problem(n_side=2, ell=1, alpha_p=0.2)
    _, report, _ = solve(con, scaled, tol=1e-9)
    assert report.converged
    assert report.conservation is not None
    assert report.conservation <= 1e-8


def test_all_neumann_mean_zero_network():
    """Pure flux data with no transfer: singular mode handled by projection."""
    mesh = generate_unit_square(2)
    spaces = SpaceSet(mesh, 1, 1)
    scaled = scaled_from_direct(1.0, [1.0], [0.0])
    system = build_block_system(assemble_kernels(mesh, spaces), scaled)
    manu = default_manufactured(1)
    system.F = assemble_volume_rhs(
        mesh, spaces, f=manu.body_force(scaled), g=manu.mass_sources(scaled)
    )
    bcs = homogeneous_bcs(1)
    con = apply_boundary_conditions(system, bcs)
    x, report, _ = solve(con, scaled, tol=1e-9, bcs=bcs)
    assert report.converged
    layout = system.layout
    ones = spaces.interpolate_p(lambda xx: 1.0)
    kernels = system.kernels
    mean = float(ones @ (kernels.M_p @ x[layout.sl("p0")])) / kernels.volume
    assert abs(mean) < 1e-10

    # oracle: least-squares solution of the singular system, mean-corrected
    K = con.K_ff.toarray()
    x_ls, *_ = np.linalg.lstsq(K, con.rhs(), rcond=None)
    x_ls_full = con.expand(x_ls)
    from mpet.assembly import mean_correct

    x_ls_full = mean_correct(x_ls_full, system, [0])
    assert np.abs(x - x_ls_full).max() < 1e-6 * (1 + np.abs(x_ls_full).max())
