"""Discretized immersions of a torus into the ambient space.

An immersion is stored as ambient chart coordinates on a uniform periodic
grid over the intrinsic torus, together with a winding matrix W describing
the linear (non-periodic) part: F(x + P_k e_k) = F(x) + W[:, k] P_k.  All
stencils act on the periodic remainder F - W x, so immersions that wrap
the ambient torus differentiate cleanly across the seam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
import numpy as np

from . import ambient as amb
from .errors import ConfigError, ImmersionDegenerate, SnapshotError

SNAPSHOT_FORMAT = "trflow-snapshot-1"


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid over the intrinsic torus."""

    intrinsic_dim: int
    resolution: tuple
    periods: tuple
    fd_order: int = 4

    def __post_init__(self):
        if self.intrinsic_dim not in (1, 2):
            raise ConfigError("intrinsic dimension must be 1 or 2")
        res = tuple(int(r) for r in self.resolution)
        per = tuple(float(p) for p in self.periods)
        if len(res) != self.intrinsic_dim or len(per) != self.intrinsic_dim:
            raise ConfigError("resolution/periods must have one entry per axis")
        if any(r < 8 for r in res):
            raise ConfigError("resolution must be >= 8 per axis")
        if any(p <= 0 for p in per):
            raise ConfigError("periods must be positive")
        if self.fd_order not in (2, 4):
            raise ConfigError("fd_order must be 2 or 4")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "periods", per)

    @property
    def spacings(self) -> tuple:
        return tuple(p / r for p, r in zip(self.periods, self.resolution))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    @property
    def node_count(self) -> int:
        return int(np.prod(self.resolution))

    def axis_coordinates(self, k: int) -> np.ndarray:
        return np.arange(self.resolution[k]) * self.spacings[k]

    def node_coordinates(self) -> np.ndarray:
        """Intrinsic coordinates of every node, shape (*resolution, n_L)."""
        return _node_coordinates_cached(self).copy()

    def to_dict(self) -> dict:
        return {
            "intrinsic_dim": self.intrinsic_dim,
            "resolution": list(self.resolution),
            "periods": list(self.periods),
            "fd_order": self.fd_order,
        }

    @staticmethod
    def from_dict(d: dict) -> "GridSpec":
        return GridSpec(
            intrinsic_dim=int(d["intrinsic_dim"]),
            resolution=tuple(d["resolution"]),
            periods=tuple(d["periods"]),
            fd_order=int(d.get("fd_order", 4)),
        )


@dataclass
class ImmersionState:
    """Grid of ambient points plus flow time."""

    grid: GridSpec
    model: amb.AmbientModel
    points: np.ndarray        # (*resolution, 2n)
    winding: np.ndarray       # (2n, n_L)
    time: float = 0.0

    def with_points(self, points, time=None) -> "ImmersionState":
        return ImmersionState(
            grid=self.grid,
            model=self.model,
            points=points,
            winding=self.winding,
            time=self.time if time is None else float(time),
        )

    def periodic_part(self) -> np.ndarray:
        return self.points - _linear_part_cached(self.grid, self.winding.tobytes())


@lru_cache(maxsize=64)
def _node_coordinates_cached(grid: GridSpec) -> np.ndarray:
    axes = [grid.axis_coordinates(k) for k in range(grid.intrinsic_dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.stack(mesh, axis=-1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _linear_part_cached(grid: GridSpec, winding_bytes: bytes) -> np.ndarray:
    winding = np.frombuffer(winding_bytes, dtype=float).reshape(-1, grid.intrinsic_dim)
    out = np.einsum("ak,...k->...a", winding, _node_coordinates_cached(grid))
    out.setflags(write=False)
    return out


def diff(field: np.ndarray, axis: int, spacing: float, order: int) -> np.ndarray:
    """Centered periodic first derivative along a grid axis."""
    if order == 2:
        return (np.roll(field, -1, axis) - np.roll(field, 1, axis)) / (2.0 * spacing)
    return (
        -np.roll(field, -2, axis)
        + 8.0 * np.roll(field, -1, axis)
        - 8.0 * np.roll(field, 1, axis)
        + np.roll(field, 2, axis)
    ) / (12.0 * spacing)


def diff2(field: np.ndarray, axis: int, spacing: float, order: int) -> np.ndarray:
    """Centered periodic second derivative along one grid axis."""
    if order == 2:
        return (np.roll(field, -1, axis) - 2.0 * field + np.roll(field, 1, axis)) / spacing**2
    return (
        -np.roll(field, -2, axis)
        + 16.0 * np.roll(field, -1, axis)
        - 30.0 * field
        + 16.0 * np.roll(field, 1, axis)
        - np.roll(field, 2, axis)
    ) / (12.0 * spacing**2)


def grid_diff(grid: GridSpec, field: np.ndarray, axis: int) -> np.ndarray:
    return diff(field, axis, grid.spacings[axis], grid.fd_order)


def partial_derivatives(state: ImmersionState) -> np.ndarray:
    """Pushforward vectors F_i, shape (*res, n_L, 2n)."""
    per = state.periodic_part()
    grid = state.grid
    out = np.stack(
        [diff(per, k, grid.spacings[k], grid.fd_order) for k in range(grid.intrinsic_dim)],
        axis=-2,
    )
    return out + state.winding.T

def second_derivatives(state: ImmersionState) -> np.ndarray:
    """Second derivatives F_ij, shape (*res, n_L, n_L, 2n).

    Mixed entries are computed once for i < j and mirrored, so the symmetry
    F_ij = F_ji holds exactly.
    """
    per = state.periodic_part()
    grid = state.grid
    nL = grid.intrinsic_dim
    shape = per.shape[:-1] + (nL, nL, per.shape[-1])
    out = np.empty(shape)
    firsts = [diff(per, k, grid.spacings[k], grid.fd_order) for k in range(nL)]
    for i in range(nL):
        out[..., i, i, :] = diff2(per, i, grid.spacings[i], grid.fd_order)
        for j in range(i + 1, nL):
            mixed = diff(firsts[i], j, grid.spacings[j], grid.fd_order)
            out[..., i, j, :] = mixed
            out[..., j, i, :] = mixed
    return out


def check_immersion(state: ImmersionState, raise_on_fail: bool = True) -> float:
    """Chart guard plus positive definiteness of the first fundamental form."""
    amb.check_chart(state.model, state.points)
    Fi = partial_derivatives(state)
    gbar = amb.metric_at(state.model, state.points)
    g = np.einsum("...ia,...ab,...jb->...ij", Fi, gbar, Fi)
    eigs = np.linalg.eigvalsh(g)
    min_eig = float(np.min(eigs))
    if raise_on_fail and min_eig <= 0.0:
        node = np.unravel_index(int(np.argmin(eigs[..., 0])), state.grid.resolution)
        raise ImmersionDegenerate(node, min_eig)
    return min_eig


# ---------------------------------------------------------------------------
# Presets


def flat_lagrangian_torus(
    resolution=(64, 64),
    periods=None,
    epsilon: float = 0.0,
    mode=None,
    fd_order: int = 4,
    intrinsic_dim: int = 2,
) -> ImmersionState:
    """Flat Lagrangian sub-torus of the flat ambient torus, optionally perturbed.

    The unperturbed immersion is u_k = x^k, v_k = 0.  A graph perturbation
    of amplitude epsilon adds eps * sin(2 pi m . x / P) to the last v
    coordinate, which is not Lagrangian for epsilon != 0.
    """
    nL = int(intrinsic_dim)
    if isinstance(resolution, int):
        resolution = (resolution,) * nL
    periods = tuple(periods) if periods is not None else (1.0,) * nL
    mode = tuple(mode) if mode is not None else (1,) + (0,) * (nL - 1)
    if len(mode) != nL:
        raise ConfigError("mode vector length must match intrinsic dimension")
    grid = GridSpec(nL, tuple(resolution), periods, fd_order)
    ambient_periods = []
    for k in range(nL):
        ambient_periods += [periods[k], 1.0]
    model = amb.flat_torus(nL, ambient_periods)
    x = grid.node_coordinates()
    pts = np.zeros(grid.resolution + (2 * nL,))
    winding = np.zeros((2 * nL, nL))
    for k in range(nL):
        pts[..., 2 * k] = x[..., k]
        winding[2 * k, k] = 1.0
    if epsilon != 0.0:
        phase = sum(2.0 * np.pi * mode[k] * x[..., k] / periods[k] for k in range(nL))
        pts[..., 2 * nL - 1] += epsilon * np.sin(phase)
    state = ImmersionState(grid=grid, model=model, points=pts, winding=winding)
    check_immersion(state)
    return state


def product_circles(
    r1: float = 1.0,
    r2: float = 1.0,
    resolution=(32, 32),
    fd_order: int = 4,
) -> ImmersionState:
    """Product of two round circles in flat C^2; Lagrangian, |H|^2 = 1/r1^2 + 1/r2^2."""
    if r1 <= 0 or r2 <= 0:
        raise ConfigError("circle radii must be positive")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    grid = GridSpec(2, tuple(resolution), (2.0 * np.pi, 2.0 * np.pi), fd_order)
    model = amb.flat_torus(2)
    x = grid.node_coordinates()
    pts = np.empty(grid.resolution + (4,))
    pts[..., 0] = r1 * np.cos(x[..., 0])
    pts[..., 1] = r1 * np.sin(x[..., 0])
    pts[..., 2] = r2 * np.cos(x[..., 1])
    pts[..., 3] = r2 * np.sin(x[..., 1])
    state = ImmersionState(grid=grid, model=model, points=pts, winding=np.zeros((4, 2)))
    check_immersion(state)
    return state


def clifford_cp2(
    resolution=(64, 64),
    epsilon: float = 0.0,
    epsilon_transverse: float = 0.0,
    fd_order: int = 4,
    chart_radius_max: float = 10.0,
) -> ImmersionState:
    """Clifford torus [1 : e^{i a} : e^{i b}] in one affine chart of CP^2.

    `epsilon` modulates both chart moduli by the diagonal mode sin(a + b):
    a Hamiltonian deformation direction whose potential sits above the
    neutral spectral level of the torus, so the flow pulls it back toward
    the minimal Lagrangian (it stays Lagrangian to round-off).
    `epsilon_transverse` adds a generic cross modulation that does break
    the Lagrangian condition; deformations of that kind contain
    bottom-of-spectrum components and need not return under the flow.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    grid = GridSpec(2, tuple(resolution), (2.0 * np.pi, 2.0 * np.pi), fd_order)
    model = amb.fubini_study(2, chart_radius_max)
    x = grid.node_coordinates()
    bump = 1.0 - epsilon * np.sin(x[..., 0] + x[..., 1])
    w = np.empty(grid.resolution + (2,), dtype=complex)
    w[..., 0] = (bump + epsilon_transverse * np.cos(x[..., 1])) * np.exp(1j * x[..., 0])
    w[..., 1] = (bump + epsilon_transverse * np.cos(x[..., 0])) * np.exp(1j * x[..., 1])
    pts = amb.point_from_complex(w)
    state = ImmersionState(grid=grid, model=model, points=pts, winding=np.zeros((4, 2)))
    check_immersion(state)
    return state


PRESETS = {
    "flat_lagrangian_torus": flat_lagrangian_torus,
    "product_circles": product_circles,
    "clifford_cp2": clifford_cp2,
}


def preset(name: str, **params) -> ImmersionState:
    """Build a named preset, or load one from disk with name='file'."""
    if name == "file":
        path = params.get("path")
        if path is None:
            raise ConfigError("file preset needs a 'path' parameter")
        return load_snapshot(path)
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)} or 'file'"
        ) from None
    return builder(**params)


# ---------------------------------------------------------------------------
# Snapshot persistence: one-line JSON header, then row-major little-endian f64.


def save_snapshot(state: ImmersionState, path) -> None:
    header = {
        "format": SNAPSHOT_FORMAT,
        "grid": state.grid.to_dict(),
        "winding": np.asarray(state.winding).tolist(),
        "ambient": state.model.to_dict(),
        "time": state.time,
    }
    payload = np.ascontiguousarray(state.points, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_snapshot(path) -> ImmersionState:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"malformed snapshot header: {exc}") from exc
    if header.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"unsupported snapshot format {header.get('format')!r}")
    grid = GridSpec.from_dict(header["grid"])
    model = amb.AmbientModel.from_dict(header["ambient"])
    expected = grid.node_count * model.real_dim * 8
    if len(payload) != expected:
        raise SnapshotError(
            f"payload size mismatch: expected {expected} bytes, found {len(payload)}"
        )
    points = np.frombuffer(payload, dtype="<f8").reshape(
        grid.resolution + (model.real_dim,)
    ).copy()
    winding = np.asarray(header["winding"], dtype=float)
    if winding.shape != (model.real_dim, grid.intrinsic_dim):
        raise SnapshotError("winding matrix shape mismatch")
    return ImmersionState(
        grid=grid, model=model, points=points, winding=winding,
        time=float(header["time"]),
    )
