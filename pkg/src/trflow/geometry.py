"""Per-node tensor cache and structural identity residuals.

`build_cache` evaluates every pointwise quantity attached to an immersed
totally real torus: first and second fundamental data, the normal frame
and its metric eta, the three mean-curvature traces (H, xi and the
connection trace xi_J), both connections, and the norm fields used by the
flow monitors.  The identity_* functions report residuals of relations
between these quantities that hold exactly in the continuum.

Norm convention used everywhere: |omega|^2 = (1/2) om_ij om_kl g^ik g^jl,
|H|^2_g = g^ij H_i H_j, |H|^2_eta = eta^ij H_i H_j.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from . import ambient as amb
from . import hodge
from .errors import ConfigError, ImmersionDegenerate, TotallyRealViolation
from .immersion import ImmersionState, grid_diff, partial_derivatives, second_derivatives


@dataclass
class GeometryCache:
    """Immutable bundle of per-node tensors for one immersion state."""

    state: ImmersionState
    Fi: np.ndarray            # (*res, nL, 2n)
    Fij: np.ndarray           # (*res, nL, nL, 2n)
    gbar: np.ndarray | None   # ambient metric per node; None means identity
    JF: np.ndarray            # (*res, nL, 2n)
    cov_FF: np.ndarray        # ambient covariant second derivatives
    g: np.ndarray             # induced metric
    g_inv: np.ndarray
    omega: np.ndarray         # restricted Kahler form
    om_mixed: np.ndarray      # omega_i^p = omega_iq g^{qp}
    N: np.ndarray             # normal frame vectors
    eta: np.ndarray
    eta_inv: np.ndarray
    h: np.ndarray             # (*res, nL, nL, nL), h_ijk
    H: np.ndarray             # mean curvature 1-form
    H_hat: np.ndarray         # mean curvature vector components, normal frame
    A_sq: np.ndarray          # |A|^2 scalar field
    sqrt_detg: np.ndarray
    H_normsq_g: np.ndarray
    H_normsq_eta: np.ndarray
    omega_normsq: np.ndarray
    xi: np.ndarray | None = None
    xi_J: np.ndarray | None = None
    gamma: np.ndarray | None = None       # Levi-Civita of g
    gamma_hat: np.ndarray | None = None   # normal connection
    full: bool = False

    @property
    def grid(self):
        return self.state.grid

    @property
    def model(self):
        return self.state.model

    def volume(self) -> float:
        return float(np.sum(self.sqrt_detg) * self.grid.cell_volume)

    def integral(self, scalar_field) -> float:
        """Integral against the Riemannian volume of the evolving metric."""
        return float(np.sum(scalar_field * self.sqrt_detg) * self.grid.cell_volume)


@dataclass
class IdentityReport:
    """Residual of one structural identity on a given grid."""

    name: str
    max_norm: float
    l2_norm: float
    resolution: tuple
    tolerance: float | None = None

    @property
    def passed(self) -> bool | None:
        if self.tolerance is None:
            return None
        return self.max_norm < self.tolerance

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "max_norm": self.max_norm,
                "l2_norm": self.l2_norm,
                "resolution": list(self.resolution),
                "tolerance": self.tolerance,
                "passed": self.passed,
            }
        )


def _inner_vectors(gbar, X, Y):
    """<X_i, Y_j> per node for frame arrays (*res, nL, 2n)."""
    if gbar is None:
        return np.matmul(X, np.swapaxes(Y, -1, -2))
    return np.matmul(np.matmul(X, gbar), np.swapaxes(Y, -1, -2))


def _inv_spd_small(mat, nL):
    """Closed-form inverse for the (..., 1, 1) and (..., 2, 2) SPD blocks."""
    if nL == 1:
        return 1.0 / mat
    a = mat[..., 0, 0]
    b = mat[..., 0, 1]
    c = mat[..., 1, 0]
    d = mat[..., 1, 1]
    det = a * d - b * c
    out = np.empty_like(mat)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


def _min_eig_check(mat, exc_cls, resolution):
    """Smallest eigenvalue of symmetric (..., nL, nL) blocks, nL <= 2."""
    if mat.shape[-1] == 1:
        eigs = mat[..., 0, 0]
    else:
        tr = mat[..., 0, 0] + mat[..., 1, 1]
        det = mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
        eigs = 0.5 * (tr - disc)
    min_eig = float(eigs.min())
    if min_eig <= 0.0:
        node = np.unravel_index(int(np.argmin(eigs)), resolution)
        raise exc_cls(node, min_eig)
    return min_eig


def build_cache(state: ImmersionState, full: bool = True) -> GeometryCache:
    """Evaluate the tensor pipeline at every node.

    With full=False only the fields needed for the flow velocity and the
    step-rejection monitor are computed, which keeps time stepping cheap.
    Raises ImmersionDegenerate / TotallyRealViolation when g or eta stops
    being positive definite.
    """
    grid, model = state.grid, state.model
    nL = grid.intrinsic_dim
    res = grid.resolution
    amb.check_chart(model, state.points)
    Fi = partial_derivatives(state)
    Fij = second_derivatives(state)
    Jmat = amb.complex_structure_matrix(model.n)
    JF = np.matmul(Fi, Jmat.T)

    if model.kind == amb.FLAT:
        gbar = None
        cov_FF = Fij
    else:
        gbar, gammabar = amb.metric_and_christoffel(model, state.points)
        m2 = model.real_dim
        # t[j, a, c] = Gamma^a_{bc} F_j^b via batched matmuls, then over c
        gam_b = np.swapaxes(gammabar, -3, -2).reshape(res + (m2, m2 * m2))
        t = np.matmul(Fi, gam_b).reshape(res + (nL, m2, m2))
        corr = np.matmul(t.reshape(res + (nL * m2, m2)),
                         np.swapaxes(Fi, -1, -2)).reshape(res + (nL, m2, nL))
        cov_FF = Fij + np.moveaxis(corr, -1, -2)
        cov_FF = 0.5 * (cov_FF + np.swapaxes(cov_FF, -3, -2))

    g = _inner_vectors(gbar, Fi, Fi)
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    _min_eig_check(g, ImmersionDegenerate, res)
    g_inv = _inv_spd_small(g, nL)

    omega = _inner_vectors(gbar, JF, Fi)
    omega = 0.5 * (omega - np.swapaxes(omega, -1, -2))
    om_mixed = np.matmul(omega, g_inv)

    N = JF - np.matmul(om_mixed, Fi)
    eta = _inner_vectors(gbar, N, N)
    eta = 0.5 * (eta + np.swapaxes(eta, -1, -2))
    _min_eig_check(eta, TotallyRealViolation, res)
    eta_inv = _inv_spd_small(eta, nL)

    Ng = N if gbar is None else np.matmul(N, gbar)
    m = 2 * model.n
    cov_flat = cov_FF.reshape(res + (nL * nL, m))
    h = -np.matmul(Ng, np.swapaxes(cov_flat, -1, -2)).reshape(res + (nL, nL, nL))
    h = 0.5 * (h + np.swapaxes(h, -2, -1))

    h_rows = h.reshape(res + (nL, nL * nL))
    H = np.matmul(g_inv.reshape(res + (1, nL * nL)), np.swapaxes(h_rows, -1, -2))[..., 0, :]
    H_hat = -np.matmul(eta_inv, H[..., None])[..., 0]
    h_up = np.matmul(eta_inv, h_rows).reshape(res + (nL, nL, nL))
    # raise the two symmetric slots with g^{-1}: contract over j then k
    h_up = np.einsum("...ja,...pjk->...pak", g_inv, h_up)
    h_up = np.einsum("...kb,...pak->...pab", g_inv, h_up)
    A_sq = np.einsum("...pab,...pab->...", h_up, h)

    if nL == 1:
        sqrt_detg = np.sqrt(g[..., 0, 0])
    else:
        sqrt_detg = np.sqrt(g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0])
    H_normsq_g = np.einsum("...i,...i->...", np.einsum("...ij,...j->...i", g_inv, H), H)
    H_normsq_eta = np.einsum("...i,...i->...", np.einsum("...ij,...j->...i", eta_inv, H), H)
    om_up = np.einsum("...ik,...kl->...il", g_inv, omega)
    om_up = np.einsum("...il,...jl->...ij", om_up, g_inv)
    omega_normsq = 0.5 * np.einsum("...ij,...ij->...", omega, om_up)

    cache = GeometryCache(
        state=state, Fi=Fi, Fij=Fij, gbar=gbar, JF=JF, cov_FF=cov_FF,
        g=g, g_inv=g_inv, omega=omega, om_mixed=om_mixed, N=N,
        eta=eta, eta_inv=eta_inv, h=h, H=H, H_hat=H_hat, A_sq=A_sq,
        sqrt_detg=sqrt_detg, H_normsq_g=H_normsq_g, H_normsq_eta=H_normsq_eta,
        omega_normsq=omega_normsq, full=False,
    )
    if not full:
        return cache

    cache.xi = np.einsum("...jk,...jik->...i", g_inv, h)
    cache.xi_J = np.einsum("...jk,...kij->...i", eta_inv, h)

    # Levi-Civita of g from stencil derivatives of the metric field
    dg = np.stack([grid_diff(grid, g, k) for k in range(nL)], axis=-3)
    gamma = 0.5 * (
        np.einsum("...kl,...ijl->...kij", g_inv, dg)
        + np.einsum("...kl,...jil->...kij", g_inv, dg)
        - np.einsum("...kl,...lij->...kij", g_inv, dg)
    )
    cache.gamma = gamma

    term1 = np.einsum("...pr,...qjr,...qs->...sjp", om_mixed, h, eta_inv)
    term2 = np.einsum("...qr,...rjp,...qs->...sjp", om_mixed, h, eta_inv)
    cache.gamma_hat = term1 - term2 + gamma
    cache.full = True
    return cache


# ---------------------------------------------------------------------------
# Individual cache views requested by name


def first_fundamental(state: ImmersionState):
    c = build_cache(state, full=False)
    return c.g, c.g_inv


def restricted_kahler(state: ImmersionState):
    return build_cache(state, full=False).omega


def normal_frame(state: ImmersionState):
    c = build_cache(state, full=False)
    return c.N, c.eta, c.eta_inv


def second_fundamental(state: ImmersionState):
    c = build_cache(state, full=False)
    return c.h, c.A_sq


def mean_curvature(state: ImmersionState):
    c = build_cache(state, full=True)
    return c.H, c.H_hat, c.xi


def maslov_form(state: ImmersionState):
    return build_cache(state, full=True).xi_J


def normal_connection(state: ImmersionState):
    return build_cache(state, full=True).gamma_hat


def lagrangian_angle(cache: GeometryCache) -> np.ndarray:
    """Angle of the complex Jacobian determinant, as a unit complex field.

    Only defined in the flat ambient, where the chart carries a global
    holomorphic volume form.
    """
    if cache.model.kind != amb.FLAT:
        raise ConfigError("lagrangian angle requires the flat ambient model")
    n = cache.model.n
    Z = cache.Fi[..., 0::2] + 1j * cache.Fi[..., 1::2]  # Z[..., j, k] = dz^k(F_j)
    det = np.linalg.det(np.swapaxes(Z, -1, -2))
    mod = np.abs(det)
    if np.any(mod == 0):
        raise ImmersionDegenerate((-1,) * cache.grid.intrinsic_dim, 0.0)
    return det / mod


def angle_differential(cache: GeometryCache, theta_unit: np.ndarray) -> np.ndarray:
    """d(theta) for an angle stored as a unit complex field; branch-cut free."""
    grid = cache.grid
    comps = [
        np.imag(grid_diff(grid, theta_unit, k) * np.conj(theta_unit))
        for k in range(grid.intrinsic_dim)
    ]
    return np.stack(comps, axis=-1)


# ---------------------------------------------------------------------------
# Norms and reports


def oneform_norm_fields(cache: GeometryCache, r: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(np.einsum("...ij,...i,...j->...", cache.g_inv, r, r), 0.0))


def _report(cache, name, pointwise_norm, tolerance=None) -> IdentityReport:
    l2 = np.sqrt(cache.integral(pointwise_norm**2))
    return IdentityReport(
        name=name,
        max_norm=float(np.max(pointwise_norm)),
        l2_norm=float(l2),
        resolution=cache.grid.resolution,
        tolerance=tolerance,
    )


def _tensor3_norm(cache, T):
    sq = np.einsum(
        "...ijk,...abc,...ia,...jb,...kc->...", T, T, cache.g_inv, cache.g_inv, cache.g_inv
    )
    return np.sqrt(np.maximum(sq, 0.0))


def _twoform_norm(cache, r):
    sq = 0.5 * np.einsum("...ij,...kl,...ik,...jl->...", r, r, cache.g_inv, cache.g_inv)
    return np.sqrt(np.maximum(sq, 0.0))


def grad_omega(cache: GeometryCache) -> np.ndarray:
    """nabla_k omega_ji, shape (*res, k, j, i)."""
    grid = cache.grid
    dom = np.stack([grid_diff(grid, cache.omega, k) for k in range(grid.intrinsic_dim)], axis=-3)
    corr1 = np.einsum("...mkj,...mi->...kji", cache.gamma, cache.omega)
    corr2 = np.einsum("...mki,...jm->...kji", cache.gamma, cache.omega)
    return dom - corr1 - corr2


def identity_xi_H_dstar_omega(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of (xi - H) - d* omega."""
    dstar = hodge.codifferential2(hodge.TwoFormField.from_matrix(cache.omega), cache)
    r = cache.xi - cache.H - dstar.components
    return _report(cache, "xi_H_dstar_omega", oneform_norm_fields(cache, r), tolerance)


def identity_index_commutation(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of h_ijk - h_jik - nabla_k omega_ji."""
    nab = grad_omega(cache)  # [k, j, i]
    T = cache.h - np.swapaxes(cache.h, -3, -2) - np.einsum("...kji->...ijk", nab)
    return _report(cache, "index_commutation", _tensor3_norm(cache, T), tolerance)


def pullback_ricci_form(cache: GeometryCache) -> np.ndarray:
    """Ambient Ricci form restricted to the submanifold."""
    if cache.model.kind == amb.FLAT:
        return np.zeros_like(cache.omega)
    curv = amb.riemann_at(cache.model, cache.state.points)
    return np.einsum(
        "...ab,...ia,...jb->...ij", curv.ricci_form_coefficients, cache.Fi, cache.Fi
    )


def identity_dxiJ_rho(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of d(xi_J) - rho; in the flat ambient rho = 0."""
    dxiJ = hodge.d1(hodge.OneFormField(cache.xi_J), cache)
    rho = pullback_ricci_form(cache)
    r = dxiJ.to_matrix() - rho
    return _report(cache, "dxiJ_rho", _twoform_norm(cache, r), tolerance)


def identity_nabla_hat_eta(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of the normal-connection metric compatibility nabla-hat eta = 0."""
    grid = cache.grid
    deta = np.stack(
        [grid_diff(grid, cache.eta, k) for k in range(grid.intrinsic_dim)], axis=-3
    )
    corr1 = np.einsum("...ski,...sj->...kij", cache.gamma_hat, cache.eta)
    corr2 = np.einsum("...skj,...is->...kij", cache.gamma_hat, cache.eta)
    T = deta - corr1 - corr2
    return _report(cache, "nabla_hat_eta", _tensor3_norm(cache, T), tolerance)


def identity_xi_xiJ_closed_form(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of (xi - xi_J) against its closed-form expression in omega and h."""
    closed = np.einsum(
        "...js,...sp,...pq,...qr,...rk,...jik->...i",
        cache.eta_inv, cache.omega, cache.g_inv, cache.omega, cache.g_inv, cache.h,
    )
    r = cache.xi - cache.xi_J - closed
    return _report(cache, "xi_xiJ_closed_form", oneform_norm_fields(cache, r), tolerance)


def identity_dH_formula(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Residual of dH - (d xi - d d* omega)."""
    dH = hodge.d1(hodge.OneFormField(cache.H), cache).to_matrix()
    dxi = hodge.d1(hodge.OneFormField(cache.xi), cache).to_matrix()
    dstar = hodge.codifferential2(hodge.TwoFormField.from_matrix(cache.omega), cache)
    ddstar = hodge.d1(dstar, cache).to_matrix()
    r = dH - (dxi - ddstar)
    return _report(cache, "dH_chain", _twoform_norm(cache, r), tolerance)


def ricci_contraction_identity(cache: GeometryCache, tolerance=None) -> IdentityReport:
    """Pointwise four-term curvature contraction against lambda * g.

    Purely algebraic in cached tensors and the closed-form ambient
    curvature: no stencil enters, so the residual is round-off plus the
    exactness of the curvature evaluator.
    """
    lam = cache.model.ke_constant
    if cache.model.kind == amb.FLAT:
        r = -lam * cache.g  # all five terms vanish identically
        return _report(cache, "ricci_contraction", _twoform_sym_norm(cache, r), tolerance)
    riem = amb.riemann_at(cache.model, cache.state.points).riemann
    Fi, N, JF = cache.Fi, cache.N, cache.JF

    def contract(X, Y, Z, W):
        t = np.einsum("...abcd,...pa->...pbcd", riem, X)
        t = np.einsum("...pbcd,...jb->...pjcd", t, Y)
        t = np.einsum("...pjcd,...kc->...pjkd", t, Z)
        return np.einsum("...pjkd,...ld->...pjkl", t, W)

    T1 = contract(N, Fi, Fi, N)     # [p, j, k, i]
    T2 = contract(JF, Fi, Fi, Fi)
    T3 = contract(JF, Fi, N, N)     # [p, j, r, i]
    T4 = contract(Fi, Fi, Fi, N)    # [r, j, k, i]

    om_upper = np.einsum("...km,...mn,...ni->...ki", cache.g_inv, cache.omega, cache.g_inv)
    term1 = np.einsum("...ik,...pjki->...pj", cache.g_inv, T1)
    term2 = 0.5 * np.einsum("...ki,...pjki->...pj", om_upper, T2)
    term3 = 0.5 * np.einsum("...ik,...kr,...pjri->...pj", cache.eta_inv, cache.om_mixed, T3)
    term4 = np.einsum("...ik,...pr,...rjki->...pj", cache.g_inv, cache.om_mixed, T4)

    r = term1 + term2 + term3 + term4 - lam * cache.g
    return _report(cache, "ricci_contraction", _twoform_sym_norm(cache, r), tolerance)


def _twoform_sym_norm(cache, r):
    sq = np.einsum("...ij,...kl,...ik,...jl->...", r, r, cache.g_inv, cache.g_inv)
    return np.sqrt(np.maximum(sq, 0.0))


def metric_sandwich_check(cache: GeometryCache, slack: float = 1e-10):
    """Per-node check of the g/eta norm equivalence when sup |omega|^2 < 1.

    Returns (applicable, satisfied, worst_margin).  The margin is the most
    negative relative gap over nodes and both inequalities.  The slack
    grows with the conditioning of eta: near the totally-real boundary
    (sup |omega|^2 -> 1) the eta-norm is computed through a nearly
    singular inverse and round-off scales like eps / (1 - sup)^2.
    """
    sup_om2 = float(np.max(cache.omega_normsq))
    if sup_om2 >= 1.0:
        return False, True, np.inf
    lower = cache.H_normsq_g / (1.0 + sup_om2)
    upper = cache.H_normsq_g / (1.0 - sup_om2)
    scale = np.maximum(cache.H_normsq_g, 1e-300)
    margin_low = np.min((cache.H_normsq_eta - lower) / scale)
    margin_high = np.min((upper - cache.H_normsq_eta) / scale)
    worst = float(min(margin_low, margin_high))
    slack_eff = slack + 64.0 * np.finfo(float).eps / (1.0 - sup_om2) ** 2
    return True, bool(worst >= -slack_eff), worst


def standard_identity_suite(cache: GeometryCache, tolerance=None) -> list[IdentityReport]:
    """The six stencil-based structural identities, in a fixed order."""
    return [
        identity_xi_H_dstar_omega(cache, tolerance),
        identity_index_commutation(cache, tolerance),
        identity_dxiJ_rho(cache, tolerance),
        identity_nabla_hat_eta(cache, tolerance),
        identity_xi_xiJ_closed_form(cache, tolerance),
        identity_dH_formula(cache, tolerance),
    ]
