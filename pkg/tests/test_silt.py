"""Renormalized self-intersection estimators.

The frozen single-atom trajectory gives grid-exact closed forms for every
component, which pins the quadrature conventions; ensemble behavior
(residual decay, coupled studies) is exercised at small scale.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import quad

from flowsilt.engine import RecordedTrajectory, simulate_ensemble
from flowsilt.green import GreenFunction, MollifiedGreen, mollifier_radial
from flowsilt.model import CoefficientModel, InitialMeasureSpec
from flowsilt.silt import (
    EpsStudy,
    PairGrid,
    ResolutionError,
    SiltUsageError,
    decomposition_ensemble,
    double_point_term,
    epsilon_convergence_study,
    gamma_epsilon,
    isotropic_alpha,
    small_ball_lambda,
    tanaka_decomposition,
    write_components_csv,
    write_study_csv,
)

BM1 = CoefficientModel.constant(b=(1.0,), c=((1.0,),))   # a = 2
STILL = CoefficientModel.constant(b=(0.0,), c=((0.0,),))  # frozen paths

G_EPS_AT_ZERO = 0.46807919370435286  # a=2, lambda=1, eps=0.2 mollified kernel


def frozen_atom_trajectory(n=16, horizon=1.0, pos=0.0, weight=1.0):
    times = np.linspace(0.0, horizon, n + 1)
    atoms = np.full((1, 1), pos)
    return RecordedTrajectory(times=times, positions=[atoms] * (n + 1),
                              weight=weight, n=n, sub_steps=1, model=STILL)


def bm1_kernel(eps=0.2, lam=1.0, u=None):
    return MollifiedGreen(GreenFunction(BM1, lam, u), eps)


def test_mollified_kernel_at_zero_against_direct_convolution():
    kern = bm1_kernel()
    direct, _ = quad(
        lambda s: float(mollifier_radial(s, 0.2, 1))
        * math.exp(-abs(s)) / 2.0,
        -0.2, 0.2, epsabs=1e-13, epsrel=1e-12)
    assert float(kern.radial(0.0)) == pytest.approx(direct, abs=1e-10)
    assert float(kern.radial(0.0)) == pytest.approx(G_EPS_AT_ZERO, abs=1e-12)


def test_frozen_atom_component_closed_forms():
    """Single still atom: every pair radius is zero, so each component is
    a counting exercise: gamma = lam*G_eps(0)*dt^2*C(n,2) with rho = 0,
    double point = G_eps(0)*T. Frozen numerics guard the conventions."""
    traj = frozen_atom_trajectory()
    kern = bm1_kernel()
    gamma = gamma_epsilon(traj, kern, 1.0, 1.0)
    dp = double_point_term(traj, kern, 1.0)

    dt = 1.0 / 16.0
    pair_count = 16 * 15 / 2.0
    assert gamma == pytest.approx(G_EPS_AT_ZERO * dt * dt * pair_count,
                                  rel=1e-14)
    assert gamma == pytest.approx(0.21941212204891541, abs=1e-15)
    assert dp == pytest.approx(G_EPS_AT_ZERO, abs=1e-15)

    comp = tanaka_decomposition(traj, kern, 1.0, 1.0)
    assert comp.gamma == pytest.approx(gamma, rel=1e-13)
    assert comp.double_point == pytest.approx(dp, rel=1e-13)
    assert comp.stochastic_term == 0.0
    assert comp.ito_residual == 0.0
    assert comp.renormalized == comp.gamma - comp.double_point
    # rho = 0 collapses gamma to the lambda term
    assert comp.lambda_term == pytest.approx(gamma, rel=1e-14)
    assert comp.boundary_term == pytest.approx(dp, rel=1e-14)


def test_far_shift_kills_every_component():
    traj = frozen_atom_trajectory()
    kern = bm1_kernel(u=(50.0,))
    comp = tanaka_decomposition(traj, kern, 1.0, 1.0)
    for field in ("gamma", "double_point", "lambda_term", "boundary_term",
                  "stochastic_term", "renormalized"):
        assert abs(getattr(comp, field)) < 1e-10


def test_gamma_matches_manual_pair_sum_with_shift():
    """Nested-loop recomputation of the shifted pair sum, checking both
    the cell bookkeeping and the off-center kernel evaluation."""
    result = simulate_ensemble(BM1, InitialMeasureSpec.point((0.0,), 1.0),
                               n=16, horizon=0.5, seed=42, replicates=1,
                               record="full")
    traj = result.trajectory(0)
    u = 0.3
    kern = bm1_kernel(u=(u,))
    alpha = isotropic_alpha(BM1)
    upto = len(traj.times) - 1
    dt = traj.dt

    manual = 0.0
    for j in range(1, upto):
        for i in range(j):
            xi, xj = traj.positions[i], traj.positions[j]
            radii = np.abs(xi[:, None, 0] - xj[None, :, 0] - u)
            vals = kern.lambda_minus_l_radial(radii, sim_alpha=alpha)
            manual += traj.weight ** 2 * float(vals.sum())
    manual *= dt * dt

    assert gamma_epsilon(traj, kern, 1.0, 0.5) == pytest.approx(
        manual, rel=1e-12)


def test_kernel_lambda_mismatch_rejected():
    traj = frozen_atom_trajectory()
    with pytest.raises(SiltUsageError, match="lambda"):
        gamma_epsilon(traj, bm1_kernel(lam=1.0), 2.0, 1.0)


def test_coarse_grid_rejected():
    traj = frozen_atom_trajectory(n=4)
    with pytest.raises(ResolutionError, match="time points"):
        gamma_epsilon(traj, bm1_kernel(), 1.0, 1.0)


def test_anisotropic_simulation_model_rejected():
    aniso = CoefficientModel.constant(b=(1.0, 2.0), c=np.zeros((2, 1)))
    with pytest.raises(SiltUsageError, match="isotropic"):
        isotropic_alpha(aniso)


def test_residual_shrinks_when_substeps_double():
    rms = []
    for sub in (2, 4):
        result = simulate_ensemble(BM1, InitialMeasureSpec.point((0.0,), 1.0),
                                   n=8, horizon=0.5, seed=7, replicates=300,
                                   sub_steps=sub, record="full")
        comps = decomposition_ensemble(result, bm1_kernel(), 1.0, 0.5)
        rms.append(math.sqrt(
            np.mean([c.ito_residual ** 2 for c in comps])))
    assert rms[1] < 0.85 * rms[0]


def test_decomposition_ensemble_identity_is_bitwise():
    result = simulate_ensemble(BM1, InitialMeasureSpec.point((0.0,), 1.0),
                               n=16, horizon=0.5, seed=3, replicates=8,
                               record="full")
    for comp in decomposition_ensemble(result, bm1_kernel(), 1.0, 0.5):
        assert comp.renormalized == comp.gamma - comp.double_point


def test_eps_study_guards():
    init = InitialMeasureSpec.point((0.0,), 1.0)
    with pytest.raises(SiltUsageError, match="three"):
        epsilon_convergence_study(BM1, init, 16, 0.5, 1.0, (0.0,),
                                  (0.4, 0.2), 4, 1)
    with pytest.raises(SiltUsageError, match="positive"):
        epsilon_convergence_study(BM1, init, 16, 0.5, 1.0, (0.0,),
                                  (0.4, 0.2, -0.1), 4, 1)
    with pytest.raises(SiltUsageError, match="non-increasing"):
        epsilon_convergence_study(BM1, init, 16, 0.5, 1.0, (0.0,),
                                  (0.2, 0.4, 0.1), 4, 1)


def test_eps_study_degenerate_schedule_has_zero_distance():
    study = epsilon_convergence_study(
        BM1, InitialMeasureSpec.point((0.0,), 1.0), 16, 0.5, 1.0, (0.0,),
        (0.2, 0.2, 0.2), replicates=6, seed=11)
    for _, _, l2, se in study.distances:
        assert l2 == 0.0
        assert se == 0.0
    assert np.array_equal(study.renormalized[:, 0], study.renormalized[:, 2])
    # fewer than three distinct values: extrapolation falls back
    assert np.array_equal(study.extrapolated_limit(),
                          study.renormalized[:, -1])


def test_eps_study_columns_are_coupled_and_summarized():
    study = epsilon_convergence_study(
        BM1, InitialMeasureSpec.point((0.0,), 1.0), 32, 0.5, 1.0, (0.0,),
        (0.4, 0.2, 0.1), replicates=24, seed=5, include_small_ball=True)
    assert study.renormalized.shape == (24, 3)
    assert study.double_points.shape == (24, 3)
    assert len(study.distances) == 2
    assert study.variances.shape == (3,)
    assert np.all(np.isfinite(study.small_ball))
    assert study.extrapolated_limit().shape == (24,)
    # same paths, different kernels: distances far below the variance scale
    for _, _, l2, _ in study.distances:
        assert 0.0 < l2 < float(study.variances.max())


def test_extrapolated_limit_cancels_linear_and_quadratic_error():
    eps = (0.4, 0.2, 0.1, 0.05)
    rng = np.random.default_rng(0)
    truth = rng.normal(size=5)
    c1 = rng.normal(size=5)
    c2 = rng.normal(size=5)
    cols = np.stack([truth + c1 * e + c2 * e * e for e in eps], axis=1)
    study = EpsStudy(eps=eps, renormalized=cols, double_points=np.zeros_like(cols),
                     distances=[], variances=cols.var(axis=0))
    assert study.extrapolated_limit() == pytest.approx(truth, abs=1e-12)


def test_renormalized_variance_stays_banded_d1():
    """Shrinking eps sharpens the kernel but must not inflate the spread
    of the renormalized value in one dimension. A factor-2 band is the
    contract; the observed band is a couple of percent."""
    study = epsilon_convergence_study(
        BM1, InitialMeasureSpec.point((0.0,), 1.0), 48, 0.5, 1.0,
        np.zeros(1), (0.4, 0.2, 0.1, 0.05), replicates=80, seed=14,
        sub_steps=1)
    v = study.variances
    assert float(v.max()) <= 2.0 * float(v.min())


@pytest.mark.parametrize("dim", [2, 3])
def test_double_point_mean_grows_as_eps_shrinks(dim):
    b = 1.0 / math.sqrt(2.0)
    model = CoefficientModel.constant(b=(b,) * dim, c=b * np.eye(dim))
    study = epsilon_convergence_study(
        model, InitialMeasureSpec.point((0.0,) * dim, 1.0), 32, 0.25, 1.0,
        np.zeros(dim), (0.4, 0.2, 0.1, 0.05), replicates=60, seed=21,
        sub_steps=1)
    means = study.double_points.mean(axis=0)
    # the study reuses one path set per replicate across the schedule, so
    # the step noise is the paired spread, far below the raw spread
    steps = np.diff(study.double_points, axis=1)
    se = steps.std(axis=0, ddof=1) / math.sqrt(steps.shape[0])
    assert np.all(np.diff(means) > 5.0 * se)


def test_small_ball_is_one_dimensional_only():
    b = 1.0 / math.sqrt(2.0)
    model3 = CoefficientModel.constant(b=(b,) * 3, c=b * np.eye(3))
    result = simulate_ensemble(model3, InitialMeasureSpec.point((0.0,) * 3, 1.0),
                               n=8, horizon=0.5, seed=1, replicates=1,
                               record="full")
    traj = result.trajectory(0)
    grid = PairGrid(traj, np.zeros(3), len(traj.times) - 1)
    base = GreenFunction(model3, 1.0)
    with pytest.raises(SiltUsageError, match="one-dimensional"):
        small_ball_lambda(grid, base, traj.dt, 0.1)


def test_component_csv_round_trip(tmp_path):
    result = simulate_ensemble(BM1, InitialMeasureSpec.point((0.0,), 1.0),
                               n=16, horizon=0.5, seed=9, replicates=3,
                               record="full")
    comps = decomposition_ensemble(result, bm1_kernel(), 1.0, 0.5)
    path = tmp_path / "components.csv"
    write_components_csv(path, [(r, 0.2, c) for r, c in enumerate(comps)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ("replicate,eps,gamma,double_point,lambda_term,"
                        "boundary_term,stochastic_term,renormalized,"
                        "ito_residual")
    assert len(lines) == 4
    first = lines[1].split(",")
    assert float(first[2]) == comps[0].gamma


def test_study_csv_layout(tmp_path):
    study = epsilon_convergence_study(
        BM1, InitialMeasureSpec.point((0.0,), 1.0), 16, 0.5, 1.0, (0.0,),
        (0.4, 0.2, 0.1), replicates=4, seed=2)
    path = tmp_path / "study.csv"
    write_study_csv(path, study)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "eps_i,eps_j,L2_distance,stderr"
    assert len(lines) == 3
    assert [float(lines[1].split(",")[0])] == [0.4]
