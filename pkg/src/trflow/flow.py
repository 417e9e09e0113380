"""Mean curvature flow stepping with full diagnostic monitoring.

The integrator is a classical four-stage explicit scheme on dF/dt = H-vec
with a parabolic CFL step size and growth-based step rejection.  Runs emit
DiagnosticsRecord rows at a configurable stride and ControlCertificate
entries at the eigenvalue stride; both serialize through the CLI.

Monitored quantities follow one convention throughout: |omega|^2 is the
half-contraction tensor norm, |H|^2 is taken with g unless the eta norm is
named explicitly, and integrals are against the evolving Riemannian
volume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
import numpy as np

from . import ambient as amb
from . import geometry, hodge
from .errors import BlowUpError, ConfigError, ChartGuardError, ImmersionDegenerate, TotallyRealViolation
from .immersion import ImmersionState, grid_diff


@dataclass
class FlowConfig:
    """Stepper and diagnostics controls."""

    c_cfl: float = 0.05
    max_time: float = 1.0
    diagnostic_stride: int = 10
    eigen_stride: int = 10
    sup_H_floor: float = 0.0
    blowup_A_sq: float = 1e12
    growth_reject: float = 1.2
    dt_floor_factor: float = 1e-6
    max_steps: int = 2_000_000
    seed: int = 0
    control_b: float = 4.0
    control_eps: float | None = None     # default: measured at t = 0
    r0: float | None = None
    curvature_ball_R: float = 1.0
    t0_steps: int = 10                   # smoothing onset: first record past this
    decay_window: float = 0.5            # trailing fraction of the run to fit
    kappa_samples: int = 6
    measure_kappa_final: bool = True
    record_smoothing: bool = True

    def __post_init__(self):
        if not (0.0 < self.c_cfl <= 0.5):
            raise ConfigError("c_cfl must lie in (0, 0.5]")
        if self.diagnostic_stride < 1 or self.eigen_stride < 1:
            raise ConfigError("strides must be >= 1")
        if self.max_time <= 0:
            raise ConfigError("max_time must be positive")


@dataclass
class DiagnosticsRecord:
    """One monitored snapshot of the flow."""

    step: int
    t: float
    dt: float
    vol: float
    sup_A2: float
    sup_H2: float
    sup_omega2: float
    int_H2: float
    int_omega2: float
    lambda0: float = math.nan
    rho1: float = math.nan
    lambda11: float = math.nan
    mu: float = math.nan
    kappa_lower: float = math.nan
    res_identities: dict = field(default_factory=dict)
    res_evol_g: float = math.nan
    res_evol_vol: float = math.nan
    res_evol_omega: float = math.nan
    chart_margin: float = math.inf
    sup_AH: float = 0.0
    sup_grad_H: float = 0.0
    sup_H2_eta: float = 0.0
    cohomology: float = math.nan
    velocity_orth: float = 0.0
    sup_control: float = math.nan        # sup(Lambda^-1 |H|^2 + |omega|^2)
    supl2_bound: float = math.nan
    sandwich_ok: bool = True
    smoothing_ratio_1: float = math.nan
    smoothing_ratio_2: float = math.nan
    eigen_measured: bool = False


CSV_COLUMNS = [
    "t", "dt", "vol", "sup_A2", "sup_H2", "sup_omega2", "int_H2", "int_omega2",
    "lambda0", "rho1", "lambda11", "mu", "kappa_lower",
    "res_xi_H_dstar_omega", "res_index_commutation", "res_dxiJ_rho",
    "res_nabla_hat_eta", "res_xi_xiJ_closed_form", "res_dH_chain",
    "res_evol_g", "res_evol_vol", "res_evol_omega", "chart_margin",
]

_IDENTITY_KEYS = [
    "xi_H_dstar_omega", "index_commutation", "dxiJ_rho",
    "nabla_hat_eta", "xi_xiJ_closed_form", "dH_chain",
]


def record_to_row(rec: DiagnosticsRecord) -> list:
    row = [rec.t, rec.dt, rec.vol, rec.sup_A2, rec.sup_H2, rec.sup_omega2,
           rec.int_H2, rec.int_omega2, rec.lambda0, rec.rho1, rec.lambda11,
           rec.mu, rec.kappa_lower]
    row += [rec.res_identities.get(k, math.nan) for k in _IDENTITY_KEYS]
    row += [rec.res_evol_g, rec.res_evol_vol, rec.res_evol_omega, rec.chart_margin]
    return row


@dataclass
class Baseline:
    """Fixed geometric parameters of the initial submanifold."""

    Lambda: float
    V: float
    kappa: float
    r0: float
    lambda11_0: float
    lambda0_0: float
    rho1_0: float
    lam: float
    n: int
    R: float
    eps0: float


@dataclass
class ControlCertificate:
    """Runtime verdicts for the control clauses and the decay hypothesis."""

    t: float
    b: float
    eps: float
    clause_A: bool
    clause_volume: bool
    clause_eigenvalue: bool
    clause_noncollapse: bool
    clause_smallness: bool
    sup_control: float
    a: float
    psi: float
    B_big: float
    q_small: float
    decay_line1_lhs: float
    decay_line1_rhs: float
    decay_line1_ok: bool
    decay_line2_ok: bool
    prop_l2_status: str                   # satisfied | violated | vacuous
    budget: dict
    caveat: str = "proof constants evaluated with C = 1 (paper constant unquantified)"

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)


@dataclass
class RunResult:
    records: list
    certificates: list
    final_state: ImmersionState
    baseline: Baseline
    eigen_history: list                  # (t, lambda0, rho1, lambda11)
    monitors: dict
    stopped: str = "max_time"


# ---------------------------------------------------------------------------
# Velocity and stepping


def velocity(state: ImmersionState, cache: geometry.GeometryCache | None = None) -> np.ndarray:
    """Ambient velocity field of the flow, normal by construction."""
    if cache is None:
        cache = geometry.build_cache(state, full=False)
    return np.einsum("...p,...pa->...a", cache.H_hat, cache.N)


def velocity_orthogonality(cache: geometry.GeometryCache) -> float:
    v = np.einsum("...p,...pa->...a", cache.H_hat, cache.N)
    if cache.gbar is None:
        dots = np.einsum("...a,...ia->...i", v, cache.Fi)
    else:
        dots = np.einsum("...a,...ab,...ib->...i", v, cache.gbar, cache.Fi)
    return float(np.max(np.abs(dots)))


def cfl_dt(state: ImmersionState, cache: geometry.GeometryCache, config: FlowConfig) -> float:
    h_min = min(state.grid.spacings)
    sup_A = math.sqrt(max(float(np.max(cache.A_sq)), 0.0))
    return config.c_cfl * h_min**2 / (1.0 + sup_A * h_min)


def _rk4(state: ImmersionState, cache: geometry.GeometryCache, dt: float) -> ImmersionState:
    k1 = velocity(state, cache)
    s2 = state.with_points(state.points + 0.5 * dt * k1)
    k2 = velocity(s2)
    s3 = state.with_points(state.points + 0.5 * dt * k2)
    k3 = velocity(s3)
    s4 = state.with_points(state.points + dt * k3)
    k4 = velocity(s4)
    pts = state.points + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state.with_points(pts, time=state.time + dt)


def step(state: ImmersionState, config: FlowConfig,
         cache: geometry.GeometryCache | None = None):
    """One accepted flow step.

    Returns (new_state, new_cache, dt_used).  The trial step is rejected
    and dt halved whenever sup|A|^2 grows by more than the configured
    factor or the trial state leaves the admissible region; repeated
    rejection below the dt floor is a blow-up.
    """
    if cache is None:
        cache = geometry.build_cache(state, full=False)
    dt = cfl_dt(state, cache, config)
    dt_floor = config.dt_floor_factor * config.c_cfl * min(state.grid.spacings) ** 2
    sup_A2 = float(np.max(cache.A_sq))
    while True:
        if dt < dt_floor:
            raise BlowUpError(state.time, "time step collapsed below floor")
        try:
            trial = _rk4(state, cache, dt)
            trial_cache = geometry.build_cache(trial, full=False)
        except (ChartGuardError, TotallyRealViolation, ImmersionDegenerate) as exc:
            dt *= 0.5
            last = exc
            continue
        trial_A2 = float(np.max(trial_cache.A_sq))
        if trial_A2 > config.growth_reject * sup_A2 + 1e-30:
            dt *= 0.5
            continue
        if trial_A2 > config.blowup_A_sq:
            raise BlowUpError(trial.time, "second fundamental form above threshold")
        return trial, trial_cache, dt


# ---------------------------------------------------------------------------
# Evolution-law consistency


def _nonuniform_dot(f_prev, f_mid, f_next, dt_minus, dt_plus):
    """Second-order derivative estimate at the middle of three samples."""
    w_prev = -dt_plus / (dt_minus * (dt_minus + dt_plus))
    w_mid = (dt_plus - dt_minus) / (dt_plus * dt_minus)
    w_next = dt_minus / (dt_plus * (dt_minus + dt_plus))
    return w_prev * f_prev + w_mid * f_mid + w_next * f_next


def evolution_residuals(prev_cache, mid_cache, next_cache,
                        t_prev, t_mid, t_next) -> dict:
    """Sup-norm residuals of the evolution laws at the middle state.

    Checks d/dt g = 2 Hhat^p h_pij, d/dt of the total volume against
    -int |H|^2_eta, and the Kahler-form law.  In the fully antisymmetrized
    component convention used here, (d alpha)_ij = d_i alpha_j - d_j
    alpha_i, the form law reads d/dt omega_ij = (dH)_ij; the same law is
    written 2 dH under the half-coefficient wedge convention.
    """
    dtm, dtp = t_mid - t_prev, t_next - t_mid
    g_dot = _nonuniform_dot(prev_cache.g, mid_cache.g, next_cache.g, dtm, dtp)
    g_rhs = 2.0 * np.einsum("...p,...pij->...ij", mid_cache.H_hat, mid_cache.h)
    res_g = float(np.max(np.abs(g_dot - g_rhs)))

    vol_dot = _nonuniform_dot(prev_cache.volume(), mid_cache.volume(),
                              next_cache.volume(), dtm, dtp)
    vol_rhs = -mid_cache.integral(mid_cache.H_normsq_eta)
    res_vol = abs(vol_dot - vol_rhs)

    om_dot = _nonuniform_dot(prev_cache.omega, mid_cache.omega, next_cache.omega, dtm, dtp)
    dH = hodge.d1(hodge.OneFormField(mid_cache.H), mid_cache).to_matrix()
    res_om = float(np.max(np.abs(om_dot - dH)))
    return {"g": res_g, "vol": res_vol, "omega": res_om}


def evolution_consistency(state_prev: ImmersionState, state_next: ImmersionState,
                          caches=None) -> dict:
    """Central-difference check of the evolution laws between two states.

    The right-hand sides are evaluated at the midpoint, reached by a
    half-step from `state_prev`; optional `caches` supplies prebuilt light
    caches for the two endpoint states.
    """
    dt = state_next.time - state_prev.time
    if dt <= 0:
        raise ConfigError("states must be ordered in time")
    if caches is not None:
        prev_cache, next_cache = caches
    else:
        prev_cache = geometry.build_cache(state_prev, full=False)
        next_cache = geometry.build_cache(state_next, full=False)
    mid = _rk4(state_prev, prev_cache, 0.5 * dt)
    mid_cache = geometry.build_cache(mid, full=False)
    return evolution_residuals(prev_cache, mid_cache, next_cache,
                               state_prev.time, mid.time, state_next.time)


def consistency_probe(state: ImmersionState, dt: float,
                      t_center: float | None = None) -> dict:
    """Fixed-dt march to t_center, then a central check around it.

    Residuals are evaluated at the state closest to t_center using the
    neighbors one step on either side.  Centering different dt runs at the
    same time makes the dt^2 scaling of the time-discretization error
    clean (the prefactor involves third time derivatives evaluated at the
    common center), so halving dt divides the residuals by about four once
    they dominate the fixed-grid stencil floor.
    """
    if t_center is None:
        t_center = dt
    n_mid = max(int(round(t_center / dt)), 1)
    s = state
    cache = geometry.build_cache(s, full=False)
    trio = [(s, cache)]
    for _ in range(n_mid + 1):
        s = _rk4(s, trio[-1][1], dt)
        cache = geometry.build_cache(s, full=False)
        trio.append((s, cache))
        if len(trio) > 3:
            trio.pop(0)
    (sp, cp), (sm, cm), (sn, cn) = trio
    return evolution_residuals(cp, cm, cn, sp.time, sm.time, sn.time)


def cohomology_integral(state_or_cache) -> float:
    """Quadrature of omega over the fundamental coordinate 2-cycle."""
    cache = state_or_cache
    if isinstance(state_or_cache, ImmersionState):
        cache = geometry.build_cache(state_or_cache, full=False)
    if cache.grid.intrinsic_dim != 2:
        raise ConfigError("cohomology integral needs an intrinsic surface")
    return float(np.sum(cache.omega[..., 0, 1]) * cache.grid.cell_volume)


# ---------------------------------------------------------------------------
# Scale-invariant monitors


def mu_accumulate(times, sup_AH=None) -> np.ndarray:
    """mu(t): trapezoidal accumulation of 2 sup(|A||H|).

    Accepts either (times, values) series or a list of DiagnosticsRecord.
    """
    if sup_AH is None:
        records = times
        times = [r.t for r in records]
        sup_AH = [r.sup_AH for r in records]
    times = np.asarray(times, dtype=float)
    vals = 2.0 * np.asarray(sup_AH, dtype=float)
    if times.ndim != 1 or times.shape != vals.shape:
        raise ConfigError("mu accumulation needs matching 1-d series")
    out = np.zeros_like(times)
    if len(times) > 1:
        out[1:] = np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(times))
    return out


def kappa_envelope(kappa0: float, mu_series, n: int) -> np.ndarray:
    """Lower envelope kappa0 * exp(-(n+1) mu(t)) for the collapsing scale."""
    return kappa0 * np.exp(-(n + 1) * np.asarray(mu_series, dtype=float))


def eigen_envelope(lambda11_0: float, mu_series):
    """Two-sided envelope exp(-+3 mu) around the initial 1-form eigenvalue."""
    mu = np.asarray(mu_series, dtype=float)
    return lambda11_0 * np.exp(-3.0 * mu), lambda11_0 * np.exp(3.0 * mu)


def sup_from_l2(C0: float, m: float, kappa: float, r0: float, n: int) -> float:
    """Sup bound for a tensor with |grad S| <= C0 and int |S|^2 <= m."""
    for name, v in (("C0", C0), ("m", m), ("kappa", kappa), ("r0", r0)):
        if v <= 0:
            raise ConfigError(f"sup_from_l2 needs positive inputs, got {name} = {v}")
    first = 2.0 * C0 ** (n / (n + 2.0)) / kappa ** (1.0 / (n + 2.0))
    second = 2.0 ** ((n + 2.0) / 2.0) * m ** (n / (2.0 * (n + 2.0))) / math.sqrt(kappa * r0**n)
    return max(first, second) * m ** (1.0 / (n + 2.0))


def grad_H_sup(cache: geometry.GeometryCache) -> float:
    """sup |nabla H| with the Levi-Civita connection of g."""
    grid = cache.grid
    dH = np.stack([grid_diff(grid, cache.H, k) for k in range(grid.intrinsic_dim)], axis=-2)
    nH = dH - np.einsum("...mji,...m->...ji", cache.gamma, cache.H)
    sq = np.einsum("...ji,...ab,...ja,...ib->...", nH, cache.g_inv, cache.g_inv, nH)
    return float(np.sqrt(np.maximum(sq, 0.0).max()))


def _covariant_dA(cache):
    """nabla applied to A^s_{jk} = -eta^{si} h_{ijk}; hat connection on s."""
    grid = cache.grid
    A = -np.einsum("...si,...ijk->...sjk", cache.eta_inv, cache.h)
    dA = np.stack([grid_diff(grid, A, k) for k in range(grid.intrinsic_dim)], axis=-4)
    out = (
        dA
        + np.einsum("...slp,...pjk->...lsjk", cache.gamma_hat, A)
        - np.einsum("...mlj,...smk->...lsjk", cache.gamma, A)
        - np.einsum("...mlk,...sjm->...lsjk", cache.gamma, A)
    )
    return A, out


def smoothing_ratios(cache: geometry.GeometryCache, t: float, Lambda: float):
    """Reported ratios t^m sup|nabla^m A|^2 / Lambda for m = 1, 2."""
    if Lambda <= 0 or t <= 0:
        return math.nan, math.nan
    grid = cache.grid
    A, dA = _covariant_dA(cache)
    sq1 = np.einsum(
        "...lsjk,...mtbc,...st,...lm,...jb,...kc->...",
        dA, dA, cache.eta, cache.g_inv, cache.g_inv, cache.g_inv,
    )
    ratio1 = t * float(np.max(sq1)) / Lambda
    ddA = np.stack([grid_diff(grid, dA, k) for k in range(grid.intrinsic_dim)], axis=-5)
    ddA = (
        ddA
        + np.einsum("...smp,...lpjk->...mlsjk", cache.gamma_hat, dA)
        - np.einsum("...nml,...snjk->...mlsjk", cache.gamma, dA)
        - np.einsum("...nmj,...lsnk->...mlsjk", cache.gamma, dA)
        - np.einsum("...nmk,...lsjn->...mlsjk", cache.gamma, dA)
    )
    sq2 = np.einsum(
        "...mlsjk,...abtcd,...st,...ma,...lb,...jc,...kd->...",
        ddA, ddA, cache.eta, cache.g_inv, cache.g_inv, cache.g_inv, cache.g_inv,
    )
    ratio2 = t**2 * float(np.max(sq2)) / Lambda
    return ratio1, ratio2


# ---------------------------------------------------------------------------
# Non-collapsing measurement (direct spot check)


def measure_kappa(cache: geometry.GeometryCache, r0: float, samples: int = 6) -> float:
    """Geodesic-ball volume ratio min Vol(B_r)/r^n over sample centers.

    Distances come from Dijkstra on the 8-neighbor grid graph with
    metric edge lengths, which slightly overestimates distances; used for
    like-for-like comparisons along the flow.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    grid = cache.grid
    nL = grid.intrinsic_dim
    res = grid.resolution
    M = grid.node_count
    idx = np.arange(M).reshape(res)
    offsets = []
    if nL == 1:
        offsets = [(1,), (-1,)]
    else:
        offsets = [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1) if (i, j) != (0, 0)]
    rows, cols, vals = [], [], []
    h = grid.spacings
    g = cache.g.reshape((M, nL, nL))
    for off in offsets:
        nbr = idx
        for ax, o in enumerate(off):
            nbr = np.roll(nbr, -o, axis=ax)
        d = np.array([o * h[ax] for ax, o in enumerate(off)])
        glen = np.einsum("i,mij,j->m", d, g, d)
        # edge length from the average quadratic form at the two endpoints
        w = np.sqrt(0.5 * np.maximum(glen + glen[nbr.reshape(-1)], 0.0))
        rows.append(idx.reshape(-1))
        cols.append(nbr.reshape(-1))
        vals.append(w)
    graph = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, M)
    )
    rng = np.random.default_rng(12345)
    sources = rng.choice(M, size=min(samples, M), replace=False)
    dist = dijkstra(graph, indices=sources)
    weights = (cache.sqrt_detg * grid.cell_volume).reshape(-1)
    kappa = np.inf
    for frac in (0.5, 0.75, 1.0):
        r = frac * r0
        ball = np.where(dist <= r, 1.0, 0.0) @ weights
        kappa = min(kappa, float(np.min(ball)) / r**nL)
    return kappa


def default_r0(state: ImmersionState, cache: geometry.GeometryCache) -> float:
    """Quarter of the shortest metric period of the torus."""
    grid = state.grid
    lengths = []
    for k in range(grid.intrinsic_dim):
        gc = np.sqrt(np.maximum(cache.g[..., k, k], 0.0))
        lengths.append(float(np.min(gc)) * grid.periods[k])
    return 0.25 * min(lengths)


# ---------------------------------------------------------------------------
# Certificates


def measure_baseline(state: ImmersionState, cache: geometry.GeometryCache,
                     config: FlowConfig, spec: hodge.SpectrumResult) -> Baseline:
    Lambda = float(np.max(cache.A_sq))
    V = cache.volume()
    r0 = config.r0 if config.r0 is not None else default_r0(state, cache)
    kappa = measure_kappa(cache, r0, config.kappa_samples)
    lam = state.model.ke_constant
    eps0 = sup_control_value(cache, Lambda)
    return Baseline(
        Lambda=Lambda, V=V, kappa=kappa, r0=r0,
        lambda11_0=spec.lambda11, lambda0_0=spec.lambda0, rho1_0=spec.rho1,
        lam=lam, n=state.grid.intrinsic_dim, R=config.curvature_ball_R, eps0=eps0,
    )


def sup_control_value(cache: geometry.GeometryCache, Lambda: float) -> float:
    """sup over nodes of Lambda^-1 |H|^2 + |omega|^2 (0/0 read as 0)."""
    if Lambda > 0:
        f = cache.H_normsq_g / Lambda + cache.omega_normsq
    else:
        f = cache.omega_normsq
    return float(np.max(f))


def _a_value(baseline: Baseline, eigen_history) -> float:
    if baseline.lam < 0:
        return -baseline.lam
    vals = [e[3] - baseline.lam for e in eigen_history]
    return min(vals) if vals else math.nan


def control_check(rec: DiagnosticsRecord, baseline: Baseline, *,
                  a: float, t0: float, b: float = 4.0,
                  eps: float | None = None) -> ControlCertificate:
    """Clause-by-clause control verdicts plus the decay-hypothesis check."""
    if not math.isfinite(rec.lambda11):
        raise ConfigError("control check needs a record with spectrum data")
    eps_val = baseline.eps0 if eps is None else float(eps)
    Lam = baseline.Lambda
    lam = baseline.lam
    c1 = rec.sup_A2 <= b * Lam + 1e-30
    c2 = (rec.vol <= b * baseline.V + 1e-30) and (rec.vol >= 1.0 / (b * baseline.V) - 1e-30)
    c3 = (rec.lambda11 - lam) >= (a / b if math.isfinite(a) else -math.inf)
    c4 = rec.kappa_lower >= baseline.kappa / b - 1e-30
    c5 = rec.sup_control <= eps_val + 1e-30

    psi = math.sqrt(Lam / t0) + Lam if (t0 > 0 and Lam > 0) else math.inf
    if Lam > 0 and math.isfinite(a) and a > 0 and math.isfinite(psi):
        lhs = math.sqrt(rec.sup_H2 / Lam) + math.sqrt(rec.sup_omega2)
        lam11 = rec.lambda11
        m3 = min(1.0, math.sqrt(max(lam11 - lam, 0.0) / lam11)) if lam11 > 0 else 0.0
        rhs = (
            min(1.0, a / Lam)
            * min(1.0, math.sqrt(a / psi), a**2 / (Lam * psi))
            * m3
        )
        line1 = lhs < rhs
        line2 = rec.sup_omega2 < abs(a / (2.0 * lam + a)) if (2.0 * lam + a) != 0 else False
        B_big = 3380.0 * Lam / a
        q_small = min(a**2 / (1600.0 * psi), a / 16.0) * (
            min(1.0, (lam11 - lam) / lam11) if lam11 > 0 else 0.0
        )
    else:
        lhs, rhs = math.nan, math.nan
        line1 = line2 = False
        B_big, q_small = math.inf, 0.0

    prop = _l2_control_status(rec, baseline, a)
    budget = epsilon_budget(baseline, a)
    return ControlCertificate(
        t=rec.t, b=b, eps=eps_val,
        clause_A=bool(c1), clause_volume=bool(c2), clause_eigenvalue=bool(c3),
        clause_noncollapse=bool(c4), clause_smallness=bool(c5),
        sup_control=rec.sup_control, a=a, psi=psi, B_big=B_big, q_small=q_small,
        decay_line1_lhs=lhs, decay_line1_rhs=rhs,
        decay_line1_ok=bool(line1), decay_line2_ok=bool(line2),
        prop_l2_status=prop, budget=budget,
    )


def _l2_control_status(rec: DiagnosticsRecord, baseline: Baseline, a: float) -> str:
    """The L^2 estimate: a int|omega|^2 <= 4 max{1, l/(l-lam)} int|H|^2."""
    lam, Lam = baseline.lam, baseline.Lambda
    lam11 = rec.lambda11
    if not (math.isfinite(a) and a > 0 and lam11 > 0 and Lam > 0):
        return "vacuous"
    hyp = rec.sup_omega2 <= min((lam11 - lam) / lam11, 1.0) * a / (4.0 * Lam)
    if not hyp:
        return "vacuous"
    factor = max(1.0, lam11 / (lam11 - lam)) if lam11 > lam else math.inf
    ok = a * rec.int_omega2 <= 4.0 * factor * rec.int_H2 + 1e-14 * (1.0 + rec.int_H2)
    return "satisfied" if ok else "violated"


def epsilon_budget(baseline: Baseline, a: float | None = None) -> dict:
    """Scale-invariant budget quantities and the two smallness expressions.

    Evaluated with the undetermined dimensional constant set to 1 and
    flagged as such.
    """
    n = baseline.n
    Lam, V, kap, r0 = baseline.Lambda, baseline.V, baseline.kappa, baseline.r0
    lam11, lam, R = baseline.lambda11_0, baseline.lam, baseline.R
    if a is None:
        a = -lam if lam < 0 else lam11 - lam
    B0 = Lam**n * V**2
    B1 = a / Lam if Lam > 0 else math.inf
    B2 = kap * r0**n / V
    B3 = min(1.0, (lam11 - lam) / lam11) if lam11 > 0 else 0.0
    e1 = min(
        R**2,
        B3 ** (2 * (n + 2)),
        (B1**6 * B3) ** (n + 2),
        kap**2 / B0 if B0 > 0 else math.inf,
        B2 ** ((n + 2) / (n + 1)),
        kap**2 * B1**2 * B3 / B0 if B0 > 0 else math.inf,
    )
    e2 = min(
        ((B1 ** (2 * (n + 2))) * kap**2 / B0) ** (n + 2) if B0 > 0 else math.inf,
        (B2 * B1**2) ** (2 * (n + 2)),
        (B1 * B2 * B3) ** ((n + 2) / (n + 1)),
    )
    return {
        "B0": B0, "B1": B1, "B2": B2, "B3": B3,
        "eps_bound_short_time": e1, "eps_bound_decay": e2,
        "constant_caveat": "evaluated with C = 1",
    }


def decay_fit(times, values, window: float | None = None):
    """Least-squares decay rate of log(values) over the trailing window.

    Returns (rate, r_squared); rate is positive for decaying data.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None and len(t) and t[-1] > t[0]:
        lo = t[-1] - window * (t[-1] - t[0])
        keep = t >= lo
        t, v = t[keep], v[keep]
    if len(t) < 10:
        raise ConfigError("decay fit needs at least 10 samples in the window")
    if np.any(v <= 0):
        raise ConfigError("decay fit needs positive samples")
    y = np.log(v)
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-coef[0]), r2


# ---------------------------------------------------------------------------
# The driver


def run(state0: ImmersionState, config: FlowConfig) -> RunResult:
    """Flow until max_time, the sup|H| floor, or blow-up.

    Emits records at the diagnostic stride (including the initial and
    final states) and certificates whenever the spectrum is recomputed.
    Eigenvalue columns between spectrum recomputations are linearly
    interpolated afterwards.
    """
    state = state0
    cache_full = geometry.build_cache(state, full=True)
    spec = hodge.spectrum(cache_full, seed=config.seed)
    baseline = measure_baseline(state, cache_full, config, spec)
    eigen_history = [(0.0, spec.lambda0, spec.rho1, spec.lambda11)]
    warm = spec

    records: list[DiagnosticsRecord] = []
    certificates: list[ControlCertificate] = []
    pending: list[tuple] = []   # (step_index, state, light cache, dt, eigen_measured)
    monitors = {
        "velocity_orth_max": 0.0,
        "volume_increase_events": 0,
        "sandwich_violations": 0,
        "supl2_violations": 0,
        "prop_l2_violations": 0,
        "lambda11_envelope_ok": True,
        "kappa_envelope_ok": True,
    }
    t0_time = None
    stopped = "max_time"

    def emit_record(step_idx, st, dt_used, eigen_measured, prev=None, nxt=None):
        full = geometry.build_cache(st, full=True)
        rec = DiagnosticsRecord(
            step=step_idx, t=st.time, dt=dt_used,
            vol=full.volume(),
            sup_A2=float(np.max(full.A_sq)),
            sup_H2=float(np.max(full.H_normsq_g)),
            sup_omega2=float(np.max(full.omega_normsq)),
            int_H2=full.integral(full.H_normsq_g),
            int_omega2=full.integral(full.omega_normsq),
            chart_margin=amb.chart_margin(st.model, st.points),
            sup_AH=float(np.max(np.sqrt(np.maximum(full.A_sq, 0.0))
                                * np.sqrt(np.maximum(full.H_normsq_g, 0.0)))),
            sup_grad_H=grad_H_sup(full),
            sup_H2_eta=float(np.max(full.H_normsq_eta)),
            velocity_orth=velocity_orthogonality(full),
            sup_control=sup_control_value(full, baseline.Lambda),
            eigen_measured=eigen_measured,
        )
        if st.grid.intrinsic_dim == 2:
            rec.cohomology = cohomology_integral(full)
        rec.res_identities = {
            r.name: r.max_norm for r in geometry.standard_identity_suite(full)
        }
        applicable, ok, _ = geometry.metric_sandwich_check(full)
        rec.sandwich_ok = ok or not applicable
        if prev is not None and nxt is not None:
            res = evolution_residuals(prev[2], full, nxt[2],
                                      prev[1].time, st.time, nxt[1].time)
            rec.res_evol_g, rec.res_evol_vol, rec.res_evol_omega = (
                res["g"], res["vol"], res["omega"])
        if config.record_smoothing and st.time > 0:
            rec.smoothing_ratio_1, rec.smoothing_ratio_2 = smoothing_ratios(
                full, st.time, baseline.Lambda)
        return rec

    # initial record
    cache_light = geometry.build_cache(state, full=False)
    rec0 = emit_record(0, state, 0.0, True)
    rec0.lambda0, rec0.rho1, rec0.lambda11 = spec.lambda0, spec.rho1, spec.lambda11
    records.append(rec0)

    step_idx = 0
    window = [(0, state, cache_light, 0.0)]  # (step, state, light cache, dt)
    try:
        while state.time < config.max_time and step_idx < config.max_steps:
            state, cache_light, dt = step(state, config, cache_light)
            step_idx += 1
            monitors["velocity_orth_max"] = max(
                monitors["velocity_orth_max"], velocity_orthogonality(cache_light))
            window.append((step_idx, state, cache_light, dt))
            if len(window) > 3:
                window.pop(0)

            if t0_time is None and step_idx >= config.t0_steps:
                t0_time = state.time

            if step_idx % config.eigen_stride == 0:
                full_tmp = geometry.build_cache(state, full=True)
                spec = hodge.spectrum(full_tmp, seed=config.seed, warm=warm)
                warm = spec
                eigen_history.append((state.time, spec.lambda0, spec.rho1, spec.lambda11))

            # records go out for the middle of the window, one step late,
            # so the evolution laws can be checked by a central difference
            if len(window) == 3 and window[1][0] % config.diagnostic_stride == 0:
                mid_idx, mid_state, _, mid_dt = window[1]
                rec = emit_record(mid_idx, mid_state, mid_dt,
                                  mid_idx % config.eigen_stride == 0,
                                  prev=window[0], nxt=window[2])
                records.append(rec)

            sup_H = math.sqrt(max(float(np.max(cache_light.H_normsq_g)), 0.0))
            if config.sup_H_floor > 0 and sup_H < config.sup_H_floor:
                stopped = "sup_H_floor"
                break
    except BlowUpError as exc:
        exc.partial = _finalize(records, certificates, state, baseline,
                                eigen_history, monitors, config, t0_time,
                                f"blow-up: {exc.cause}")
        raise

    # final record for the last state
    final_full = geometry.build_cache(state, full=True)
    spec = hodge.spectrum(final_full, seed=config.seed, warm=warm)
    eigen_history.append((state.time, spec.lambda0, spec.rho1, spec.lambda11))
    if records[-1].step != step_idx:
        rec = emit_record(step_idx, state, records[-1].dt, True)
        records.append(rec)
    records[-1].lambda0, records[-1].rho1, records[-1].lambda11 = (
        spec.lambda0, spec.rho1, spec.lambda11)

    return _finalize(records, certificates, state, baseline, eigen_history,
                     monitors, config, t0_time, stopped)


def _finalize(records, certificates, state, baseline, eigen_history, monitors,
              config, t0_time, stopped) -> RunResult:
    # interpolate eigenvalue columns onto record times
    eh = np.asarray(eigen_history, dtype=float)
    ts = np.array([r.t for r in records])
    if len(eh):
        for j, attr in ((1, "lambda0"), (2, "rho1"), (3, "lambda11")):
            vals = np.interp(ts, eh[:, 0], eh[:, j])
            for r, v in zip(records, vals):
                setattr(r, attr, float(v))
    mu = mu_accumulate(ts, [r.sup_AH for r in records])
    kap_env = kappa_envelope(baseline.kappa, mu, baseline.n)
    lo_env, hi_env = eigen_envelope(baseline.lambda11_0, mu)
    for r, m, kl in zip(records, mu, kap_env):
        r.mu = float(m)
        r.kappa_lower = float(kl)

    a = _a_value(baseline, eigen_history)
    t0 = t0_time if t0_time is not None else (records[-1].t if records else 1.0)
    if t0 <= 0:
        t0 = records[-1].t if records and records[-1].t > 0 else 1.0

    # certificates at records with measured spectrum
    for r in records:
        if r.eigen_measured and math.isfinite(r.lambda11):
            cert = control_check(r, baseline, a=a, t0=t0, b=config.control_b,
                                 eps=config.control_eps)
            certificates.append(cert)
            if cert.prop_l2_status == "violated":
                monitors["prop_l2_violations"] += 1

    # monitor sweeps
    vol_prev = None
    for r in records:
        if not r.sandwich_ok:
            monitors["sandwich_violations"] += 1
        if vol_prev is not None and r.sup_H2 > 1e-20:
            if r.vol > vol_prev * (1.0 + 1e-12):
                monitors["volume_increase_events"] += 1
        vol_prev = r.vol
        if r.int_H2 > 0 and r.sup_grad_H > 0 and r.kappa_lower > 0:
            bound = sup_from_l2(r.sup_grad_H, r.int_H2, r.kappa_lower,
                                baseline.r0, baseline.n)
            r.supl2_bound = bound
            if math.sqrt(r.sup_H2) > bound * (1.0 + 1e-9):
                monitors["supl2_violations"] += 1
    # envelope containment for measured eigenvalues
    mu_at = np.interp(eh[:, 0], ts, mu) if len(records) else np.zeros(len(eh))
    for (te, l0, rh, l11), m in zip(eigen_history, mu_at):
        lo = baseline.lambda11_0 * math.exp(-3.0 * m)
        hi = baseline.lambda11_0 * math.exp(3.0 * m)
        if not (lo * (1 - 0.01) <= l11 <= hi * (1 + 0.01)):
            monitors["lambda11_envelope_ok"] = False

    if config.measure_kappa_final and records and state.time > 0:
        final_cache = geometry.build_cache(state, full=False)
        kappa_final = measure_kappa(final_cache, baseline.r0, config.kappa_samples)
        monitors["kappa_final_measured"] = kappa_final
        monitors["kappa_envelope_ok"] = bool(
            kappa_final >= records[-1].kappa_lower * 0.95
        )

    monitors["a_run"] = a
    monitors["t0"] = t0
    return RunResult(
        records=records, certificates=certificates, final_state=state,
        baseline=baseline, eigen_history=eigen_history, monitors=monitors,
        stopped=stopped,
    )
