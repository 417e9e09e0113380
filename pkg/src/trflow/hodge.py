"""Discrete exterior calculus on the torus with the evolving induced metric.

Forms are nodal coefficient fields differentiated with the same periodic
stencils as the immersion.  L^2 inner products are weighted by
sqrt(det g) times the grid cell volume.  Eigenvalues are computed
matrix-free by block inverse iteration with explicit deflation and an
FFT-preconditioned conjugate-gradient inner solve; the operator changes
every flow step, so nothing is ever assembled.

The d*-exact-sector eigenvalue rho_1 is computed as the smallest nonzero
eigenvalue of d d* acting on 2-forms, whose nonzero spectrum coincides
with that of d* d on the complement of ker(d) inside the 1-forms; the
single harmonic 2-form (the volume form) is deflated explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigError, SolverError
from .immersion import grid_diff


@dataclass
class ScalarField:
    values: np.ndarray


@dataclass
class OneFormField:
    components: np.ndarray  # (*res, nL)


@dataclass
class TwoFormField:
    """Antisymmetric by storage: only the independent component is kept."""

    components: np.ndarray  # (*res, 1) for nL = 2; (*res, 0) for nL = 1

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "TwoFormField":
        nL = mat.shape[-1]
        if nL == 1:
            return TwoFormField(np.zeros(mat.shape[:-2] + (0,)))
        return TwoFormField(mat[..., 0, 1][..., None])

    def to_matrix(self) -> np.ndarray:
        base = self.components.shape[:-1]
        if self.components.shape[-1] == 0:
            return np.zeros(base + (1, 1))
        q = self.components[..., 0]
        mat = np.zeros(base + (2, 2))
        mat[..., 0, 1] = q
        mat[..., 1, 0] = -q
        return mat


# ---------------------------------------------------------------------------
# Exterior derivative and codifferential


def d0(f: ScalarField, cache) -> OneFormField:
    grid = cache.grid
    comps = [grid_diff(grid, f.values, k) for k in range(grid.intrinsic_dim)]
    return OneFormField(np.stack(comps, axis=-1))


def d1(alpha: OneFormField, cache) -> TwoFormField:
    grid = cache.grid
    if grid.intrinsic_dim == 1:
        return TwoFormField(np.zeros(alpha.components.shape[:-1] + (0,)))
    q = grid_diff(grid, alpha.components[..., 1], 0) - grid_diff(
        grid, alpha.components[..., 0], 1
    )
    return TwoFormField(q[..., None])


def codifferential1(alpha: OneFormField, cache) -> ScalarField:
    """d* on 1-forms: -g^{ij} nabla_i alpha_j."""
    grid = cache.grid
    a = alpha.components
    da = np.stack([grid_diff(grid, a, k) for k in range(grid.intrinsic_dim)], axis=-2)
    nabla = da - np.einsum("...kij,...k->...ij", cache.gamma, a)
    return ScalarField(-np.einsum("...ij,...ij->...", cache.g_inv, nabla))


def codifferential2(omega2: TwoFormField, cache) -> OneFormField:
    """d* on 2-forms: (d* w)_i = -g^{kj} nabla_k w_{ji}."""
    grid = cache.grid
    if grid.intrinsic_dim == 1:
        return OneFormField(np.zeros(omega2.components.shape[:-1] + (1,)))
    W = omega2.to_matrix()
    dW = np.stack([grid_diff(grid, W, k) for k in range(grid.intrinsic_dim)], axis=-3)
    nabla = (
        dW
        - np.einsum("...mkj,...mi->...kji", cache.gamma, W)
        - np.einsum("...mki,...jm->...kji", cache.gamma, W)
    )
    return OneFormField(-np.einsum("...kj,...kji->...i", cache.g_inv, nabla))


def hodge_laplacian0(f: ScalarField, cache) -> ScalarField:
    return codifferential1(d0(f, cache), cache)


def hodge_laplacian1(alpha: OneFormField, cache) -> OneFormField:
    dd = d0(codifferential1(alpha, cache), cache)
    sd = codifferential2(d1(alpha, cache), cache)
    return OneFormField(dd.components + sd.components)


def hodge_laplacian2(omega2: TwoFormField, cache) -> TwoFormField:
    return d1(codifferential2(omega2, cache), cache)


# ---------------------------------------------------------------------------
# Mimetic complex used by the eigensolver.
#
# Centered stencils annihilate the grid Nyquist mode, so the composed
# operators above carry a spurious near-kernel of checkerboard modes and
# cannot be fed to a smallest-eigenvalue iteration.  The eigensolver
# therefore uses one-sided differences with their exact metric-weighted
# adjoints: d o d = 0 holds exactly, the Laplacians are exactly
# self-adjoint and positive semi-definite, and the harmonic space has the
# topological dimension.  Eigenvalues are second-order accurate.


def _dplus(f, axis, h):
    return (np.roll(f, -1, axis) - f) / h


def _dminus(f, axis, h):
    return (f - np.roll(f, 1, axis)) / h


def _m_d0(f: np.ndarray, cache) -> np.ndarray:
    grid = cache.grid
    return np.stack(
        [_dplus(f, k, grid.spacings[k]) for k in range(grid.intrinsic_dim)], axis=-1
    )


def _m_delta1(a: np.ndarray, cache) -> np.ndarray:
    """Exact adjoint of _m_d0 in the weighted inner products."""
    grid = cache.grid
    m0 = cache.sqrt_detg
    flux = np.einsum("...ij,...j->...i", cache.g_inv, a) * m0[..., None]
    out = np.zeros_like(m0)
    for k in range(grid.intrinsic_dim):
        out -= _dminus(flux[..., k], k, grid.spacings[k])
    return out / m0


def _m_d1(a: np.ndarray, cache) -> np.ndarray:
    grid = cache.grid
    return _dplus(a[..., 1], 0, grid.spacings[0]) - _dplus(a[..., 0], 1, grid.spacings[1])


def _m_delta2(q: np.ndarray, cache) -> np.ndarray:
    """Exact adjoint of _m_d1; returns a 1-form component array."""
    grid = cache.grid
    m2 = q / cache.sqrt_detg
    v1 = _dminus(m2, 1, grid.spacings[1])
    v2 = -_dminus(m2, 0, grid.spacings[0])
    vec = np.stack([v1, v2], axis=-1)
    return np.einsum("...ij,...j->...i", cache.g, vec) / cache.sqrt_detg[..., None]


def _m_laplacian0(f, cache):
    return _m_delta1(_m_d0(f, cache), cache)


def _m_laplacian1(a, cache):
    out = _m_d0(_m_delta1(a, cache), cache)
    if cache.grid.intrinsic_dim == 2:
        out = out + _m_delta2(_m_d1(a, cache), cache)
    return out


def _m_laplacian2(q, cache):
    return _m_d1(_m_delta2(q, cache), cache)


# ---------------------------------------------------------------------------
# L^2 structure


def l2_inner_scalar(f: ScalarField, g: ScalarField, cache) -> float:
    return float(np.sum(f.values * g.values * cache.sqrt_detg) * cache.grid.cell_volume)


def l2_inner_oneform(a: OneFormField, b: OneFormField, cache) -> float:
    dens = np.einsum("...ij,...i,...j->...", cache.g_inv, a.components, b.components)
    return float(np.sum(dens * cache.sqrt_detg) * cache.grid.cell_volume)


def l2_inner_twoform(a: TwoFormField, b: TwoFormField, cache) -> float:
    if a.components.shape[-1] == 0:
        return 0.0
    dens = a.components[..., 0] * b.components[..., 0] / cache.sqrt_detg
    return float(np.sum(dens) * cache.grid.cell_volume)


# ---------------------------------------------------------------------------
# Matrix-free eigensolver


@dataclass
class SpectrumResult:
    """First nonzero eigenvalues of the grid Hodge Laplacians."""

    lambda0: float
    rho1: float
    lambda11: float
    harmonic_dimension: int
    iterations: dict
    residual_norms: dict
    deflation_threshold: float
    lambda11_direct: float
    vectors: dict = field(default_factory=dict, repr=False)


class _FieldOperator:
    """Flattened view of a differential operator with its mass operator.

    The eigensolver works in symmetrized variables y = L^T x with
    M = L L^T; there A-hat = L^T Delta L^{-T} is exactly symmetric because
    the mimetic Laplacian is exactly M-self-adjoint.
    """

    def __init__(self, cache, kind: str):
        self.cache = cache
        grid = cache.grid
        self.kind = kind
        self.grid_shape = tuple(grid.resolution)
        self.nL = grid.intrinsic_dim
        cell = grid.cell_volume
        if kind == "scalar":
            self.field_shape = self.grid_shape
            self._mass_diag = cache.sqrt_detg * cell
        elif kind == "oneform":
            self.field_shape = self.grid_shape + (self.nL,)
            self._mass_block = cache.g_inv * (cache.sqrt_detg * cell)[..., None, None]
            self._chol = np.linalg.cholesky(self._mass_block)
            self._chol_inv = np.linalg.inv(self._chol)
        elif kind == "twoform":
            if self.nL != 2:
                raise ConfigError("2-form spectrum needs an intrinsic surface")
            self.field_shape = self.grid_shape + (1,)
            self._mass_diag = (cell / cache.sqrt_detg)[..., None]
        else:
            raise ValueError(kind)
        if kind != "oneform":
            self._mass_sqrt = np.sqrt(self._mass_diag)
        self.size = int(np.prod(self.field_shape))

    def _laplacian(self, f):
        c = self.cache
        if self.kind == "scalar":
            return _m_laplacian0(f, c)
        if self.kind == "oneform":
            return _m_laplacian1(f, c)
        return _m_laplacian2(f[..., 0], c)[..., None]

    def mass(self, x_flat: np.ndarray) -> np.ndarray:
        f = x_flat.reshape(self.field_shape)
        if self.kind == "oneform":
            out = np.einsum("...ij,...j->...i", self._mass_block, f)
        else:
            out = self._mass_diag * f
        return out.reshape(-1)

    def to_hat(self, x_flat: np.ndarray) -> np.ndarray:
        """y = L^T x."""
        f = x_flat.reshape(self.field_shape)
        if self.kind == "oneform":
            out = np.einsum("...ji,...j->...i", self._chol, f)
        else:
            out = self._mass_sqrt * f
        return out.reshape(-1)

    def from_hat(self, y_flat: np.ndarray) -> np.ndarray:
        """x = L^{-T} y."""
        f = y_flat.reshape(self.field_shape)
        if self.kind == "oneform":
            out = np.einsum("...ji,...j->...i", self._chol_inv, f)
        else:
            out = f / self._mass_sqrt
        return out.reshape(-1)

    def apply_hat(self, y_flat: np.ndarray) -> np.ndarray:
        """A-hat y = L^T Delta L^{-T} y; exactly symmetric."""
        x = self.from_hat(y_flat).reshape(self.field_shape)
        return self.to_hat(self._laplacian(x).reshape(-1))

    def apply(self, x_flat: np.ndarray) -> np.ndarray:
        return self._laplacian(x_flat.reshape(self.field_shape)).reshape(-1)

    def metric_scale(self) -> float:
        """Typical size of g^{-1}, used by the preconditioner and estimates."""
        gi = self.cache.g_inv
        return float(np.mean(np.trace(gi, axis1=-2, axis2=-1)) / self.nL)

    def flat_symbol(self) -> np.ndarray:
        """Symbol of the flat mimetic Laplacian on the grid, shape (*res,)."""
        grid = self.cache.grid
        sym = np.zeros(self.grid_shape)
        for ax in range(self.nL):
            nk = self.grid_shape[ax]
            h = grid.spacings[ax]
            theta = 2.0 * np.pi * np.fft.fftfreq(nk)
            s = (2.0 - 2.0 * np.cos(theta)) / h**2
            shape = [1] * self.nL
            shape[ax] = nk
            sym = sym + s.reshape(shape)
        return sym

    def eigen_scale(self) -> float:
        """Flat-metric estimate of the first nonzero scalar eigenvalue."""
        return self.metric_scale() * min(
            (2.0 * np.pi / p) ** 2 for p in self.cache.grid.periods
        )

    def preconditioner(self, shift: float):
        """FFT inverse of mean-mass * (scale * flat Laplacian + shift).

        The zero mode of the symbol is pinned to the typical first
        eigenvalue so that deflated null directions are not amplified.
        """
        scale = self.metric_scale()
        sym = scale * self.flat_symbol() + shift
        floor = max(self.eigen_scale(), 1e-12)
        sym = np.where(sym <= 0.5 * floor, floor, sym)
        denom = sym * 1.0
        axes = tuple(range(self.nL))

        def solve(r_flat):
            f = r_flat.reshape(self.field_shape)
            F = np.fft.fftn(f, axes=axes)
            if self.kind == "scalar":
                F = F / denom
            else:
                F = F / denom[..., None]
            return np.real(np.fft.ifftn(F, axes=axes)).reshape(-1)

        return solve


def _orthonormalize(X, against=None):
    """Modified Gram-Schmidt (Euclidean, hat space); drops null columns."""
    cols = []
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        if against is not None:
            for b in against:
                v -= b * float(b @ v)
        for u in cols:
            v -= u * float(u @ v)
        nrm = float(np.linalg.norm(v))
        if nrm > 1e-14:
            cols.append(v / nrm)
    return np.stack(cols, axis=1) if cols else X[:, :0]


def _pcg(apply_K, b, precond, project, tol, maxiter):
    x = np.zeros_like(b)
    r = project(b.copy())
    z = project(precond(r))
    p = z.copy()
    rz = float(r @ z)
    b_norm = float(np.sqrt(b @ b)) or 1.0
    for it in range(maxiter):
        Kp = project(apply_K(p))
        alpha_den = float(p @ Kp)
        if alpha_den <= 0:
            break
        alpha = rz / alpha_den
        x += alpha * p
        r -= alpha * Kp
        if np.sqrt(r @ r) <= tol * b_norm:
            return x, it + 1
        z = project(precond(r))
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


def _block_smallest(op: _FieldOperator, k_request: int, *, k_buffer: int = 4,
                    deflation=(), shift=0.0, seed=0, tol=1e-9, maxiter=150,
                    inner_tol=1e-10, inner_maxiter=400, initial=None):
    """Smallest eigenpairs of the operator in the L^2 inner product.

    Block inverse iteration in the symmetrized (hat) variables with
    Rayleigh-Ritz extraction.  The buffer columns absorb eigenvalue
    clusters (a torus first eigenvalue has multiplicity four) so the
    requested pairs keep a spectral gap to the block boundary.

    Convergence is declared on the subspace residual of the requested
    block; when a perturbation splits a cluster the individual Ritz
    vectors may keep rotating inside it, so stagnating eigenvalues with a
    modest subspace residual are also accepted.  Returns eigenvalues,
    eigenvectors (original variables), iteration counts and the requested
    pairs' relative residuals.
    """
    rng = np.random.default_rng(seed)
    k_solve = k_request + k_buffer
    basis = []
    for b in deflation:
        v = op.to_hat(np.asarray(b, dtype=float).reshape(-1))
        for u in basis:
            v -= u * float(u @ v)
        nrm = float(np.linalg.norm(v))
        if nrm > 0:
            basis.append(v / nrm)

    def project(y):
        for b in basis:
            y = y - b * float(b @ y)
        return y

    def apply_K(y):
        return op.apply_hat(y) + shift * y

    precond = op.preconditioner(shift)

    X = rng.standard_normal((op.size, k_solve))
    if initial is not None and initial.shape[0] == op.size:
        m = min(initial.shape[1], k_solve)
        X[:, :m] = np.stack([op.to_hat(initial[:, j]) for j in range(m)], axis=1)
    X = _orthonormalize(X, against=basis)
    while X.shape[1] < k_solve:
        extra = rng.standard_normal((op.size, k_solve - X.shape[1]))
        X = _orthonormalize(np.concatenate([X, extra], axis=1), against=basis)

    theta = np.zeros(k_solve)
    prev = np.full(k_request, np.inf)
    stagnant = 0
    total_inner = 0
    lam_scale = max(op.eigen_scale(), 1e-30)
    res_req = [np.inf] * k_request
    for outer in range(maxiter):
        Y = np.empty_like(X)
        for j in range(k_solve):
            y, used = _pcg(apply_K, project(X[:, j]), precond, project,
                           inner_tol, inner_maxiter)
            total_inner += used
            Y[:, j] = y
        X = _orthonormalize(Y, against=basis)
        while X.shape[1] < k_solve:
            extra = rng.standard_normal((op.size, k_solve - X.shape[1]))
            X = _orthonormalize(np.concatenate([X, extra], axis=1), against=basis)
        AX = np.stack([op.apply_hat(X[:, j]) for j in range(k_solve)], axis=1)
        small = X.T @ AX
        small = 0.5 * (small + small.T)
        theta, vecs = np.linalg.eigh(small)
        X = X @ vecs
        AX = AX @ vecs

        Xr, AXr = X[:, :k_request], AX[:, :k_request]
        Sr = Xr.T @ AXr
        block_res = AXr - Xr @ (0.5 * (Sr + Sr.T))
        denom = max(float(np.max(np.abs(theta[:k_request]))), lam_scale)
        sub_res = float(np.linalg.norm(block_res)) / denom
        res_req = [
            float(np.linalg.norm(AX[:, j] - theta[j] * X[:, j]))
            / max(abs(theta[j]), lam_scale)
            for j in range(k_request)
        ]
        value_move = float(np.max(np.abs(theta[:k_request] - prev))) / denom
        prev = theta[:k_request].copy()
        if sub_res < tol:
            break
        stagnant = stagnant + 1 if value_move < 1e-11 else 0
        if stagnant >= 5 and sub_res < 1e-3:
            break
    else:
        raise SolverError(
            f"eigensolver did not converge: subspace residual {sub_res:.3e} "
            f"after {maxiter} iterations"
        )
    vecs_x = np.stack([op.from_hat(X[:, j]) for j in range(k_solve)], axis=1)
    return theta, vecs_x, {"outer": outer + 1, "inner": total_inner}, res_req


def deflation_threshold(cache) -> float:
    """1e-8 times a grid-scale estimate of the first scalar eigenvalue."""
    return 1e-8 * _FieldOperator(cache, "scalar").eigen_scale()


def eigen_lambda0(cache, seed=0, tol=1e-9, initial=None):
    """Smallest nonzero eigenvalue of the scalar Laplacian (constants deflated)."""
    op = _FieldOperator(cache, "scalar")
    const = np.ones(op.size)
    theta, X, iters, res = _block_smallest(
        op, 1, k_buffer=6, deflation=[const], shift=0.0, seed=seed, tol=tol,
        initial=initial,
    )
    return float(theta[0]), X, iters, res


def eigen_rho1(cache, seed=0, tol=1e-9, initial=None):
    """Smallest nonzero eigenvalue on the d*-exact sector, via 2-forms.

    The nonzero spectrum of d d* on 2-forms equals that of d* d on the
    complement of ker(d) in the 1-forms; computing it here replaces the
    deflation of the (grid-sized) closed sector by deflation of the single
    harmonic 2-form, which the shifted solver separates by threshold.
    """
    if cache.grid.intrinsic_dim == 1:
        return np.inf, None, {"outer": 0, "inner": 0}, [0.0]
    op = _FieldOperator(cache, "twoform")
    shift = 0.5 * op.eigen_scale()
    theta, X, iters, res = _block_smallest(
        op, 2, k_buffer=7, deflation=[], shift=shift, seed=seed + 1, tol=tol,
        initial=initial,
    )
    thr = deflation_threshold(cache)
    above = theta[theta >= thr]
    rho1 = float(above[0]) if above.size else np.inf
    return rho1, X, iters, res


def spectrum(cache, seed=0, tol=1e-9, warm: SpectrumResult | None = None) -> SpectrumResult:
    """lambda_1^0, rho_1, lambda_1^1 = min of the two, and the harmonic count.

    The 1-form Laplacian is solved directly for its lowest block as a
    cross-check and to count harmonics; warm-starting from a previous
    result accelerates repeated calls along a flow.
    """
    thr = deflation_threshold(cache)
    w = warm.vectors if warm is not None else {}
    lam0, v0, it0, r0 = eigen_lambda0(cache, seed=seed, tol=tol, initial=w.get("scalar"))
    rho1, v2, it2, r2 = eigen_rho1(cache, seed=seed, tol=tol, initial=w.get("twoform"))

    # Request only the harmonic block (an exactly invariant subspace); the
    # first nonzero Ritz value serves as an informational cross-check of
    # min(lambda0, rho1) and sits inside a possibly split cluster.
    op1 = _FieldOperator(cache, "oneform")
    nL = cache.grid.intrinsic_dim
    shift = 0.5 * op1.eigen_scale()
    theta1, X1, it1, r1 = _block_smallest(
        op1, nL, k_buffer=6, deflation=[], shift=shift, seed=seed + 2, tol=tol,
        initial=w.get("oneform"),
    )
    harmonic_dim = int(np.sum(theta1 < thr))
    above = theta1[theta1 >= thr]
    lam11_direct = float(above[0]) if above.size else np.inf

    lam11 = min(lam0, rho1)
    vectors = {"scalar": v0, "oneform": X1}
    if v2 is not None:
        vectors["twoform"] = v2
    return SpectrumResult(
        lambda0=lam0,
        rho1=float(rho1),
        lambda11=float(lam11),
        harmonic_dimension=harmonic_dim,
        iterations={"scalar": it0, "twoform": it2, "oneform": it1},
        residual_norms={"scalar": r0, "twoform": r2, "oneform": r1},
        deflation_threshold=thr,
        lambda11_direct=lam11_direct,
        vectors=vectors,
    )
