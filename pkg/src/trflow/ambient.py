"""Closed-form evaluators for the supported Kahler-Einstein ambient spaces.

Two models are available: the flat complex torus C^n/Lambda with the
identity metric, and CP^n with the Fubini-Study metric in one fixed affine
chart.  Real chart coordinates are ordered (u_1, v_1, ..., u_n, v_n) with
the complex structure acting as J du_k = dv_k, so w_k = u_k + i v_k.

The Fubini-Study metric comes from the potential log(1 + |w|^2).  The real
metric is normalized as twice the real form of the complex Hessian of the
potential, which makes the Einstein constant come out as n + 1 (verified
numerically by `verify_ke`, not assumed).  With this normalization the
metric at the chart origin is 2 * Id.

All evaluators are pure functions of (model, point) and accept batched
points of shape (..., 2n); tensors come back with matching leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import ChartGuardError, ConfigError

FLAT = "flat-torus"
FUBINI_STUDY = "fubini-study"


@dataclass(frozen=True)
class AmbientModel:
    """Ambient space descriptor: kind, complex dimension and chart data."""

    kind: str
    n: int
    lattice_periods: tuple = ()
    chart_radius_max: float = 10.0

    def __post_init__(self):
        if self.kind not in (FLAT, FUBINI_STUDY):
            raise ConfigError(f"unknown ambient kind {self.kind!r}")
        if self.n < 1:
            raise ConfigError("complex dimension must be >= 1")
        if self.kind == FLAT:
            periods = tuple(float(p) for p in self.lattice_periods) or (1.0,) * (2 * self.n)
            if len(periods) != 2 * self.n or any(p <= 0 for p in periods):
                raise ConfigError("flat torus needs 2n positive lattice periods")
            object.__setattr__(self, "lattice_periods", periods)
        else:
            object.__setattr__(self, "lattice_periods", ())
        if self.chart_radius_max <= 0:
            raise ConfigError("chart_radius_max must be positive")

    @property
    def ke_constant(self) -> float:
        """Einstein constant lambda, with Ric = lambda * g."""
        return 0.0 if self.kind == FLAT else float(self.n + 1)

    @property
    def real_dim(self) -> int:
        return 2 * self.n

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "lattice_periods": list(self.lattice_periods),
            "chart_radius_max": self.chart_radius_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "AmbientModel":
        return AmbientModel(
            kind=d["kind"],
            n=int(d["n"]),
            lattice_periods=tuple(d.get("lattice_periods", ())),
            chart_radius_max=float(d.get("chart_radius_max", 10.0)),
        )


@dataclass
class CurvatureData:
    """Riemann tensor and its Ricci contractions at a batch of points.

    Index convention: riemann[..., a, b, c, d] = <R(e_a, e_b) e_c, e_d>,
    ricci[..., b, c] = g^{ad} riemann[..., a, b, c, d], and the Ricci form
    is rho(X, Y) = Ric(JX, Y).
    """

    riemann: np.ndarray
    ricci: np.ndarray
    ricci_form_coefficients: np.ndarray


@dataclass
class KEReport:
    """Residuals and curvature bounds from `verify_ke`.

    `lambda_floor` is the smallest Lambda for which the local curvature
    bounds sup |nabla^l Rm|^2 <= Lambda^(2+l), l <= 5, all hold.
    """

    kind: str
    sample_count: int
    max_ricci_residual: float
    max_ricci_relative: float
    sup_rm_norm: list          # |nabla^l Rm| for l = 0..5
    lambda_floor: float
    notes: str


def flat_torus(n: int, periods=()) -> AmbientModel:
    return AmbientModel(kind=FLAT, n=n, lattice_periods=tuple(periods))


def fubini_study(n: int, chart_radius_max: float = 10.0) -> AmbientModel:
    return AmbientModel(kind=FUBINI_STUDY, n=n, chart_radius_max=chart_radius_max)


def point_from_complex(w) -> np.ndarray:
    """Pack complex chart coordinates (..., n) into real ones (..., 2n)."""
    w = np.asarray(w, dtype=complex)
    out = np.empty(w.shape[:-1] + (2 * w.shape[-1],))
    out[..., 0::2] = w.real
    out[..., 1::2] = w.imag
    return out


def point_to_complex(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p[..., 0::2] + 1j * p[..., 1::2]


def chart_margin(model: AmbientModel, p) -> float:
    """Distance to the chart guard in max coordinate modulus; inf for flat."""
    if model.kind == FLAT:
        return np.inf
    w = point_to_complex(np.asarray(p, dtype=float))
    return float(model.chart_radius_max - np.max(np.abs(w)))


def check_chart(model: AmbientModel, p) -> None:
    margin = chart_margin(model, p)
    if not margin > 0.0:
        raise ChartGuardError(
            f"point outside chart: margin {margin:.3e} (radius {model.chart_radius_max})"
        )


def complex_structure_matrix(n: int) -> np.ndarray:
    """Constant matrix of J in chart coordinates, J e_{u_k} = e_{v_k}."""
    J = np.zeros((2 * n, 2 * n))
    for k in range(n):
        J[2 * k + 1, 2 * k] = 1.0
        J[2 * k, 2 * k + 1] = -1.0
    return J


def _real_form(P: np.ndarray) -> np.ndarray:
    """Real symmetric form (with factor 2) of a Hermitian (..., n, n) matrix."""
    n = P.shape[-1]
    G = np.zeros(P.shape[:-2] + (2 * n, 2 * n))
    G[..., 0::2, 0::2] = 2.0 * P.real
    G[..., 1::2, 1::2] = 2.0 * P.real
    G[..., 0::2, 1::2] = 2.0 * P.imag
    G[..., 1::2, 0::2] = -2.0 * P.imag
    return G


def _fs_hessian(model: AmbientModel, p) -> np.ndarray:
    """Complex Hessian of log(1 + |w|^2), shape (..., n, n)."""
    w = point_to_complex(p)
    s = 1.0 + np.sum(w.real**2 + w.imag**2, axis=-1)[..., None, None]
    eye = np.eye(model.n)
    return eye / s - np.conj(w)[..., :, None] * w[..., None, :] / s**2


def _fs_dhessian(model: AmbientModel, p) -> np.ndarray:
    """Analytic derivative of the Hessian: out[..., e, a, b] = d_e P_ab."""
    n = model.n
    w = point_to_complex(p)
    wb = np.conj(w)
    s = (1.0 + np.sum(w.real**2 + w.imag**2, axis=-1))[..., None, None, None]
    eye_ab = np.eye(n)
    eye_cb = np.eye(n)[:, None, :]
    eye_ca = np.eye(n)[:, :, None]
    w_a = w[..., None, :, None]
    w_b = w[..., None, None, :]
    w_c = w[..., :, None, None]
    wb_a = wb[..., None, :, None]
    wb_b = wb[..., None, None, :]
    wb_c = wb[..., :, None, None]
    dP_dw = (-eye_ab * wb_c - wb_a * eye_cb) / s**2 + 2.0 * wb_a * w_b * wb_c / s**3
    dP_dwb = (-eye_ab * w_c - eye_ca * w_b) / s**2 + 2.0 * wb_a * w_b * w_c / s**3
    out = np.empty(w.shape[:-1] + (2 * n, n, n), dtype=complex)
    out[..., 0::2, :, :] = dP_dw + dP_dwb
    out[..., 1::2, :, :] = 1j * (dP_dw - dP_dwb)
    return out


def metric_at(model: AmbientModel, p) -> np.ndarray:
    """Ambient metric at p, shape (..., 2n, 2n); symmetric positive definite."""
    p = np.asarray(p, dtype=float)
    check_chart(model, p)
    if model.kind == FLAT:
        eye = np.eye(model.real_dim)
        return np.broadcast_to(eye, p.shape[:-1] + eye.shape).copy()
    return _real_form(_fs_hessian(model, p))


def complex_structure_at(model: AmbientModel, p) -> np.ndarray:
    """J as a (1,1)-tensor; constant in the holomorphic chart."""
    p = np.asarray(p, dtype=float)
    check_chart(model, p)
    J = complex_structure_matrix(model.n)
    return np.broadcast_to(J, p.shape[:-1] + J.shape).copy()


def kahler_form_at(model: AmbientModel, p) -> np.ndarray:
    """omega_ab = g(J e_a, e_b)."""
    g = metric_at(model, p)
    J = complex_structure_matrix(model.n)
    return np.einsum("ca,...cb->...ab", J, g)


def metric_derivative_at(model: AmbientModel, p) -> np.ndarray:
    """d_e g_ab, shape (..., 2n, 2n, 2n); zero for the flat model."""
    p = np.asarray(p, dtype=float)
    if model.kind == FLAT:
        m = model.real_dim
        return np.zeros(p.shape[:-1] + (m, m, m))
    return _real_form(_fs_dhessian(model, p))


def christoffel_at(model: AmbientModel, p) -> np.ndarray:
    """Levi-Civita symbols Gamma^a_{bc}, shape (..., 2n, 2n, 2n)."""
    return metric_and_christoffel(model, p)[1]


def metric_and_christoffel(model: AmbientModel, p):
    """Both evaluators at once, sharing the Hessian work (hot-path helper)."""
    p = np.asarray(p, dtype=float)
    check_chart(model, p)
    m = model.real_dim
    if model.kind == FLAT:
        eye = np.eye(m)
        g = np.broadcast_to(eye, p.shape[:-1] + eye.shape).copy()
        return g, np.zeros(p.shape[:-1] + (m, m, m))
    g = _real_form(_fs_hessian(model, p))
    gi = np.linalg.inv(g)
    dg = _real_form(_fs_dhessian(model, p))
    # T_{dbc} = d_b g_{dc} + d_c g_{bd} - d_d g_{bc}, then one batched matmul
    T = np.swapaxes(dg, -3, -2) + np.swapaxes(dg, -3, -1) - dg
    gamma = 0.5 * np.matmul(gi, T.reshape(T.shape[:-2] + (m * m,))).reshape(T.shape)
    return g, gamma


def riemann_at(model: AmbientModel, p) -> CurvatureData:
    """Curvature tensors; FS uses the constant-holomorphic-curvature closed form."""
    p = np.asarray(p, dtype=float)
    check_chart(model, p)
    m = model.real_dim
    if model.kind == FLAT:
        batch = p.shape[:-1]
        return CurvatureData(
            riemann=np.zeros(batch + (m, m, m, m)),
            ricci=np.zeros(batch + (m, m)),
            ricci_form_coefficients=np.zeros(batch + (m, m)),
        )
    g = metric_at(model, p)
    om = kahler_form_at(model, p)
    # Holomorphic sectional curvature 2 under this normalization; the overall
    # sign is pinned against finite differences of christoffel_at in the tests.
    riem = 0.5 * (
        np.einsum("...bc,...ad->...abcd", g, g)
        - np.einsum("...ac,...bd->...abcd", g, g)
        + np.einsum("...bc,...ad->...abcd", om, om)
        - np.einsum("...ac,...bd->...abcd", om, om)
        - 2.0 * np.einsum("...ab,...cd->...abcd", om, om)
    )
    gi = np.linalg.inv(g)
    ricci = np.einsum("...ad,...abcd->...bc", gi, riem)
    J = complex_structure_matrix(model.n)
    rho = np.einsum("ca,...cb->...ab", J, ricci)
    return CurvatureData(riemann=riem, ricci=ricci, ricci_form_coefficients=rho)


def _rm_norm_sq(g_inv, riem):
    return np.einsum(
        "...abcd,...efgh,...ae,...bf,...cg,...dh->...",
        riem, riem, g_inv, g_inv, g_inv, g_inv,
    )


def _covariant_driemann(model: AmbientModel, p, h=1e-4) -> np.ndarray:
    """nabla_e R_abcd via fourth-order FD of the closed form plus connection terms."""
    p = np.asarray(p, dtype=float)
    m = model.real_dim
    dR = np.zeros(p.shape[:-1] + (m, m, m, m, m))
    for e in range(m):
        delta = np.zeros(m)
        delta[e] = h
        rp2 = riemann_at(model, p + 2 * delta).riemann
        rp1 = riemann_at(model, p + delta).riemann
        rm1 = riemann_at(model, p - delta).riemann
        rm2 = riemann_at(model, p - 2 * delta).riemann
        dR[..., e, :, :, :, :] = (-rp2 + 8 * rp1 - 8 * rm1 + rm2) / (12 * h)
    gam = christoffel_at(model, p)
    riem = riemann_at(model, p).riemann
    # connection corrections, one per tensor slot; gam[..., f, e, a] = Gamma^f_{ea}
    corr = (
        np.einsum("...fea,...fbcd->...eabcd", gam, riem)
        + np.einsum("...feb,...afcd->...eabcd", gam, riem)
        + np.einsum("...fec,...abfd->...eabcd", gam, riem)
        + np.einsum("...fed,...abcf->...eabcd", gam, riem)
    )
    return dR - corr


def verify_ke(model: AmbientModel, sample_count: int = 100, seed: int = 0) -> KEReport:
    """Sample-based Einstein residuals and curvature bounds.

    Reports max |Ric - lambda g| (absolute and relative) and sup |nabla^l Rm|
    for l <= 5.  Both supported models are locally symmetric, so derivatives
    of order >= 2 vanish identically; the l = 1 entry is measured by finite
    differences as a transcription guard.
    """
    rng = np.random.default_rng(seed)
    if model.kind == FLAT:
        return KEReport(
            kind=model.kind,
            sample_count=sample_count,
            max_ricci_residual=0.0,
            max_ricci_relative=0.0,
            sup_rm_norm=[0.0] * 6,
            lambda_floor=0.0,
            notes="flat model: curvature identically zero",
        )
    pts = rng.uniform(-1.2, 1.2, size=(sample_count, model.real_dim))
    g = metric_at(model, pts)
    gi = np.linalg.inv(g)
    curv = riemann_at(model, pts)
    lam = model.ke_constant
    resid = curv.ricci - lam * g
    max_abs = float(np.max(np.abs(resid)))
    max_rel = float(np.max(np.abs(resid)) / np.max(np.abs(lam * g)))
    rm0 = float(np.sqrt(np.max(_rm_norm_sq(gi, curv.riemann))))
    # first covariant derivative on a small subsample (FD cost grows fast)
    sub = pts[: min(8, sample_count)]
    dR = _covariant_driemann(model, sub)
    gi_sub = np.linalg.inv(metric_at(model, sub))
    drm_sq = np.einsum(
        "...eabcd,...fghij,...ef,...ag,...bh,...ci,...dj->...",
        dR, dR, gi_sub, gi_sub, gi_sub, gi_sub, gi_sub,
    )
    rm1 = float(np.sqrt(np.max(np.abs(drm_sq))))
    norms = [rm0, rm1, 0.0, 0.0, 0.0, 0.0]
    lam_floor = max(v ** (2.0 / (2 + ell)) for ell, v in enumerate(norms) if v > 0)
    return KEReport(
        kind=model.kind,
        sample_count=sample_count,
        max_ricci_residual=max_abs,
        max_ricci_relative=max_rel,
        sup_rm_norm=norms,
        lambda_floor=lam_floor,
        notes=(
            "l=1 entry is FD noise around zero; orders >= 2 vanish identically "
            "(locally symmetric model)"
        ),
    )
