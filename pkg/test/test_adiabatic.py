"""Unit tests for the instantaneous adiabatic analysis."""
from unittest.mock import patch

import numpy as np
import pytest

from peierlsmd.core.adiabatic import (
    AdiabaticitySettings,
    analyze_matrices,
    classify,
    couplings,
    criterion_ratios,
    eigensolve,
    project,
    representative_mass,
    snapshot,
    solve_generalized,
    track_states,
)
from peierlsmd.errors import DegeneratePairError, NumericalError
from peierlsmd.tools.oracles import fd_coupling, generalized_eigen_2x2


class TestSolveGeneralized:
    """Tests for solve_generalized and eigensolve."""

    def test_vectors_are_overlap_orthonormal(self, tables, triatomic):
        """Test Psi^+ S0 Psi = 1 on a nonorthogonal basis."""
        blocks = tables.field_free(triatomic.roster, triatomic.positions)
        energies, vectors = solve_generalized(blocks.h0, blocks.s0)
        np.testing.assert_allclose(vectors.T @ blocks.s0 @ vectors, np.eye(len(energies)), atol=1e-12)
        assert np.all(np.diff(energies) >= 0.0)

    def test_degenerate_atom(self, tables, atom_x):
        """Test the s level and the threefold p level of an isolated atom."""
        result = eigensolve(atom_x, tables)
        np.testing.assert_allclose(result.energies, [0.0, 0.1, 0.1, 0.1], atol=1e-14)
        np.testing.assert_allclose(result.vectors.T @ result.vectors, np.eye(4), atol=1e-12)

    def test_dimer_closed_form(self, tables, dimer):
        """Test the dimer levels against the 2x2 generalized eigenvalue formula."""
        blocks = tables.field_free(dimer.roster, dimer.positions)
        reference = generalized_eigen_2x2(blocks.h0[0, 0], blocks.h0[1, 1],
                                          blocks.h0[0, 1], blocks.s0[0, 1])
        energies, _ = solve_generalized(blocks.h0, blocks.s0)
        np.testing.assert_allclose(energies, reference.values, atol=1e-12)

    def test_orthonormality_residual_checked(self):
        """Test that vectors outside the S-orthonormality tolerance raise NumericalError."""
        skewed = (np.array([-1.0, 1.0]), np.array([[1.0, 0.3], [0.0, 1.0]]))
        with patch("peierlsmd.core.adiabatic.linalg.eigh", return_value=skewed):
            with pytest.raises(NumericalError) as exc_info:
                solve_generalized(np.diag([-1.0, 1.0]), np.eye(2))
        assert "not S-orthonormal" in str(exc_info.value)

    def test_orthonormality_tolerance_passed_through(self, tables, dimer):
        """Test that eigensolve applies the given tolerance."""
        skewed = (np.array([-1.0, 1.0]), np.array([[1.0, 0.3], [0.0, 1.0]]))
        with patch("peierlsmd.core.adiabatic.linalg.eigh", return_value=skewed):
            result = eigensolve(dimer, tables, orthonormality=0.5)
        assert result.energies.tolist() == [-1.0, 1.0]

    def test_eigenvalue_continuity_along_scan(self, tables, make_geometry):
        """Test that overlap tracking along a bond scan never jumps by more than the gap."""
        previous = None
        for bond in np.linspace(0.8, 3.5, 136):
            geometry = make_geometry(["A", "B"], [[0.0, 0.0, 0.0], [0.0, 0.0, bond]])
            blocks = tables.field_free(geometry.roster, geometry.positions)
            energies, vectors = solve_generalized(blocks.h0, blocks.s0)
            if previous is not None:
                last_energies, last_vectors = previous
                order = track_states(last_vectors, vectors, blocks.s0)
                np.testing.assert_array_equal(order, [0, 1])
                gap = energies[1] - energies[0]
                assert np.all(np.abs(energies[order] - last_energies) < gap)
            previous = energies, vectors


class TestCouplings:
    """Tests for nonadiabatic couplings."""

    def test_against_finite_differences(self, tables, hetero_dimer):
        """Test F_01 along the bond against differentiated eigenvectors."""
        def solve(z):
            geometry = hetero_dimer.with_positions([[0.0, 0.0, 0.0], [0.0, 0.0, z]])
            blocks = tables.field_free(geometry.roster, geometry.positions)
            energies, vectors = solve_generalized(blocks.h0, blocks.s0)
            return energies, vectors, blocks.s0

        values = couplings(eigensolve(hetero_dimer, tables), hetero_dimer, tables)
        assert values.shape == (2, 3, 2, 2)
        reference = fd_coupling(solve, 1.6, 0, 1)
        assert values[1, 2, 0, 1] == pytest.approx(reference.values[0], abs=1e-6)
        assert np.isnan(values[1, 2, 0, 0])

    def test_degenerate_pair_requested(self, tables, atom_x):
        """Test that asking for a coupling inside the p level raises DegeneratePairError."""
        with pytest.raises(DegeneratePairError) as exc_info:
            couplings(eigensolve(atom_x, tables), atom_x, tables, pairs=[(1, 2)])
        assert exc_info.value.pair == (1, 2)
        assert "degenerate" in str(exc_info.value)

    def test_translation_invariance(self, tables, hetero_dimer):
        """Test that couplings of the two atoms cancel along the bond."""
        values = couplings(eigensolve(hetero_dimer, tables), hetero_dimer, tables)
        assert values[0, 2, 0, 1] == pytest.approx(-values[1, 2, 0, 1], rel=1e-10)


class TestCriterion:
    """Tests for the adiabaticity criterion."""

    def test_landau_zener_crossing(self, landau_zener):
        """Test rho = v |F| / gap at and away from an avoided crossing."""
        velocity = np.array([1e-3])
        at_crossing = analyze_matrices(*landau_zener(0.0), velocities=velocity)
        assert at_crossing.ratios[0, 1] == pytest.approx(5.0, rel=1e-6)
        assert at_crossing.nonadiabatic == ((0, 1),)
        far = analyze_matrices(*landau_zener(0.2), velocities=velocity)
        assert far.nonadiabatic == ()
        assert classify(far) == {(0, 1): "adiabatic"}

    def test_ratio_grows_with_velocity(self, landau_zener):
        """Test that rho scales linearly with the nuclear speed."""
        slow = analyze_matrices(*landau_zener(0.05), velocities=np.array([1e-4]))
        fast = analyze_matrices(*landau_zener(0.05), velocities=np.array([1e-3]))
        assert fast.ratios[0, 1] == pytest.approx(10.0 * slow.ratios[0, 1], rel=1e-10)

    def test_zero_velocity_flags_only_degenerate_pairs(self):
        """Test that nuclei at rest are adiabatic except inside degenerate levels."""
        h = np.diag([0.0, 0.1, 0.1, 0.1])
        zeros = np.zeros((1, 4, 4))
        result = analyze_matrices(h, np.eye(4), zeros, zeros, velocities=np.zeros(1))
        assert result.nonadiabatic == ((1, 2), (1, 3), (2, 3))
        assert np.isinf(result.ratios[1, 2])
        assert result.ratios[0, 1] == 0.0

    def test_literal_needs_mass(self, landau_zener):
        """Test that the literal criterion needs a representative mass."""
        h, s, _, _ = landau_zener(0.0)
        energies, _ = solve_generalized(h, s)
        settings = AdiabaticitySettings(criterion="literal")
        with pytest.raises(ValueError) as exc_info:
            criterion_ratios(energies, np.ones((1, 2, 2)), np.array([1e-3]), settings)
        assert "representative mass" in str(exc_info.value)

    def test_literal_at_rest(self):
        """Test that the literal criterion is zero when nothing moves."""
        settings = AdiabaticitySettings(criterion="literal", representative_mass=918.0)
        rho = criterion_ratios(np.array([-0.5, 0.2]), np.ones((1, 2, 2)), np.zeros(1), settings)
        assert rho[0, 1] == 0.0

    def test_unknown_criterion(self):
        """Test that an unknown criterion raises ValueError."""
        with pytest.raises(ValueError) as exc_info:
            AdiabaticitySettings(criterion="fast")
        assert "Unsupported criterion" in str(exc_info.value)

    def test_literal_snapshot_derives_mass(self, tables, make_geometry):
        """Test that the snapshot fills in the reduced mass of the coupled pair."""
        moving = make_geometry(["A", "B"], [[0.0, 0.0, 0.0], [0.0, 0.0, 1.6]],
                               [[0.0, 0.0, -1e-3], [0.0, 0.0, 1e-3]])
        psi = np.array([[1.0], [0.0]], dtype=complex)
        result = snapshot(moving, tables, psi, AdiabaticitySettings(criterion="literal"))
        assert result.ratios[0, 1] > 0.0
        values = couplings(eigensolve(moving, tables), moving, tables)
        mass = representative_mass(moving, np.nan_to_num(values[:, :, 0, 1]))
        m_a, m_b = moving.masses
        assert mass == pytest.approx(m_a * m_b / (m_a + m_b))


class TestProjection:
    """Tests for project and track_states."""

    def test_complete_basis_recovers_norm(self, tables, triatomic):
        """Test that adiabatic populations add up to psi^+ S0 psi."""
        rng = np.random.default_rng(8)
        size = triatomic.roster.size
        psi = rng.normal(size=(size, 2)) + 1j * rng.normal(size=(size, 2))
        result = snapshot(triatomic, tables, psi)
        blocks = tables.field_free(triatomic.roster, triatomic.positions)
        norms = np.real(np.einsum("in,ij,jn->n", psi.conj(), blocks.s0, psi))
        np.testing.assert_allclose(result.populations.sum(axis=1), norms, rtol=1e-12)

    def test_dressing_removed(self, tables, dimer):
        """Test that a dressed eigenvector projects onto its own level."""
        blocks = tables.field_free(dimer.roster, dimer.positions)
        _, vectors = solve_generalized(blocks.h0, blocks.s0)
        dressing = np.exp(1j * np.array([0.3, -0.8]))
        psi = (dressing * vectors[:, 1])[:, None]
        amplitudes = project(psi, vectors, blocks.s0, dressing)
        np.testing.assert_allclose(np.abs(amplitudes[0]) ** 2, [0.0, 1.0], atol=1e-12)

    def test_track_states(self):
        """Test recovering a permutation of eigenvectors."""
        previous = np.eye(3)
        current = previous[:, [1, 2, 0]]
        np.testing.assert_array_equal(track_states(previous, current, np.eye(3)), [2, 0, 1])
