import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trflow import immersion
from trflow.errors import ConfigError, SnapshotError
from conftest import random_trig_scalar


class TestDerivatives:
    def test_flat_torus_pushforwards_exact(self):
        state = immersion.flat_lagrangian_torus(resolution=(16, 16))
        Fi = immersion.partial_derivatives(state)
        assert np.array_equal(Fi[3, 5, 0], [1.0, 0.0, 0.0, 0.0])
        assert np.array_equal(Fi[3, 5, 1], [0.0, 0.0, 1.0, 0.0])
        assert np.all(immersion.second_derivatives(state) == 0.0)

    def test_graph_perturbation_symbolic_oracle(self):
        eps = 0.01
        state = immersion.flat_lagrangian_torus(resolution=(64, 64), epsilon=eps)
        Fi = immersion.partial_derivatives(state)
        # at u = (0, 0): F_1 = (1, 0, 0, 2 pi eps cos 0)
        expect = np.array([1.0, 0.0, 0.0, 2 * np.pi * eps])
        assert np.max(np.abs(Fi[0, 0, 0] - expect)) < 1e-6
        # at u_1 = 1/4: F_11 = (0, 0, 0, -4 pi^2 eps sin(pi/2))
        Fij = immersion.second_derivatives(state)
        node = (16, 0)  # u_1 = 16/64 = 1/4
        expect2 = np.array([0.0, 0.0, 0.0, -4 * np.pi**2 * eps])
        assert np.max(np.abs(Fij[node][0, 0] - expect2)) < 1e-5

    def test_refinement_order_four(self):
        errs = []
        for res in (32, 64, 128):
            state = immersion.flat_lagrangian_torus(resolution=(res, res), epsilon=0.01)
            Fi = immersion.partial_derivatives(state)
            x = state.grid.node_coordinates()
            exact = 2 * np.pi * 0.01 * np.cos(2 * np.pi * x[..., 0])
            errs.append(np.max(np.abs(Fi[..., 0, 3] - exact)))
        assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(16.0, rel=0.1)

    def test_mixed_partials_symmetric_exactly(self):
        state = immersion.flat_lagrangian_torus(
            resolution=(32, 32), epsilon=0.07, mode=(2, 1))
        Fij = immersion.second_derivatives(state)
        assert np.array_equal(Fij[..., 0, 1, :], Fij[..., 1, 0, :])

    def test_stencils_commute(self):
        state = immersion.flat_lagrangian_torus(resolution=(32, 32))
        f = random_trig_scalar(state.grid, seed=7)
        d12 = immersion.grid_diff(state.grid, immersion.grid_diff(state.grid, f, 0), 1)
        d21 = immersion.grid_diff(state.grid, immersion.grid_diff(state.grid, f, 1), 0)
        assert np.max(np.abs(d12 - d21)) < 1e-13 * max(1.0, np.max(np.abs(d12)))

    def test_periodicity_of_derivative_fields(self):
        # cyclically shifting the periodic part shifts every derivative field
        state = immersion.flat_lagrangian_torus(resolution=(32, 32), epsilon=0.03)
        Fi = immersion.partial_derivatives(state)
        per = state.periodic_part()
        linear = state.points - per
        state2 = state.with_points(np.roll(per, 5, axis=0) + linear)
        Fi2 = immersion.partial_derivatives(state2)
        assert np.allclose(np.roll(Fi, 5, axis=0), Fi2, atol=1e-12)

    @given(order=st.sampled_from([2, 4]), mode=st.integers(1, 3))
    @settings(max_examples=8, deadline=None)
    def test_measured_accuracy_meets_order(self, order, mode):
        errs = []
        for res in (32, 64):
            state = immersion.flat_lagrangian_torus(
                resolution=(res, res), epsilon=0.01, mode=(mode, 0), fd_order=order)
            Fi = immersion.partial_derivatives(state)
            x = state.grid.node_coordinates()
            exact = 2 * np.pi * mode * 0.01 * np.cos(2 * np.pi * mode * x[..., 0])
            errs.append(np.max(np.abs(Fi[..., 0, 3] - exact)))
        measured = np.log2(errs[0] / errs[1])
        assert measured >= order - 0.5


class TestPresets:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            immersion.preset("moebius_band")

    def test_degenerate_params(self):
        with pytest.raises(ConfigError):
            immersion.product_circles(0.0, 1.0)
        with pytest.raises(ConfigError):
            immersion.flat_lagrangian_torus(resolution=(4, 4))

    def test_preset_dispatch(self):
        state = immersion.preset("product_circles", r1=0.5, r2=1.5, resolution=(16, 16))
        assert state.grid.periods == (2 * np.pi, 2 * np.pi)

    def test_clifford_lives_at_unit_modulus(self):
        state = immersion.clifford_cp2(resolution=(16, 16))
        w = state.points[..., 0::2] + 1j * state.points[..., 1::2]
        assert np.allclose(np.abs(w), 1.0)

    def test_mode_length_validation(self):
        with pytest.raises(ConfigError):
            immersion.flat_lagrangian_torus(resolution=(16, 16), mode=(1, 2, 3))


class TestSnapshots:
    def test_roundtrip_bit_exact(self, tmp_path):
        state = immersion.flat_lagrangian_torus(resolution=(16, 16), epsilon=0.02)
        path = tmp_path / "state.snap"
        immersion.save_snapshot(state, path)
        loaded = immersion.load_snapshot(path)
        assert np.array_equal(loaded.points, state.points)
        assert loaded.grid == state.grid
        assert loaded.model == state.model
        assert loaded.time == state.time
        assert np.array_equal(loaded.winding, state.winding)

    def test_payload_size_arithmetic(self, tmp_path):
        state = immersion.flat_lagrangian_torus(resolution=(64, 64))
        path = tmp_path / "state.snap"
        immersion.save_snapshot(state, path)
        raw = path.read_bytes()
        header, _, payload = raw.partition(b"\n")
        assert len(payload) == 64 * 64 * 4 * 8

    def test_truncated_payload_rejected(self, tmp_path):
        state = immersion.flat_lagrangian_torus(resolution=(16, 16))
        path = tmp_path / "state.snap"
        immersion.save_snapshot(state, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(SnapshotError, match="size mismatch"):
            immersion.load_snapshot(path)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.snap"
        path.write_bytes(b"not json at all\n" + b"\x00" * 64)
        with pytest.raises(SnapshotError):
            immersion.load_snapshot(path)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_roundtrip_random_payload(self, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        state = immersion.flat_lagrangian_torus(resolution=(8, 8))
        state = state.with_points(state.points + 1e-3 * rng.standard_normal(state.points.shape))
        path = tmp_path_factory.mktemp("snap") / "s.snap"
        immersion.save_snapshot(state, path)
        assert np.array_equal(immersion.load_snapshot(path).points, state.points)
