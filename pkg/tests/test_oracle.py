"""Closed moment formulas against independently computed values.

The pinned constants below were produced by the coalescent-forest oracle in
oracles.py, which enumerates ranked genealogies and integrates Gaussian
functionals over ordered split times with its own quadrature. The evaluator
under test composes semigroup and branch operators instead; the two routes
share no code beyond numpy.
"""

from __future__ import annotations

import numpy as np
import pytest

from flowsilt.model import (
    CoefficientModel,
    ConstantOne,
    GaussianBump,
    InitialMeasureSpec,
)
from flowsilt.oracle import (
    MomentFormula,
    ModelKernels,
    OracleModelError,
    build_templates,
    dump_terms,
    mixed_moment,
    simplex_integrate,
)
from oracles import (
    coalescent_moment,
    heat_semigroup_bump,
    mass_moment,
    mixed_mass_moment,
)

BM1D = CoefficientModel.constant([1.0], [[1.0]])
DELTA0 = InitialMeasureSpec.point([0.0])
BUMP = GaussianBump([0.0], [[1.0]])


def evaluator(order, times, mu0=DELTA0, fns=None):
    fns = fns or [BUMP] * order
    return mixed_moment(BM1D, order, fns, times, mu0)


# values frozen from the coalescent-forest oracle (a=2, sigma=1, unit bump
# at the origin, delta initial mass at 0)
FROZEN = {
    (2, (0.5, 1.0)): 0.6319942322369408,
    (3, (0.3, 0.8, 1.0)): 0.8310883009884722,
    (3, (1.0, 1.0, 1.0)): 1.366011144024666,
    (4, (0.3, 0.6, 0.8, 1.0)): 1.3862333502395396,
    (4, (1.0, 1.0, 1.0, 1.0)): 3.2197401864030026,
}


@pytest.mark.parametrize("order,times", sorted(FROZEN))
def test_evaluator_matches_frozen_coalescent_values(order, times):
    assert evaluator(order, times) == pytest.approx(FROZEN[(order, times)], abs=1e-10)


def test_frozen_value_with_shifted_start():
    got = evaluator(3, (0.4, 0.7, 1.0), mu0=InitialMeasureSpec.point([0.4]))
    assert got == pytest.approx(0.8092085702038527, abs=1e-10)


def test_live_coalescent_comparison_order_two():
    times = (0.25, 0.9)
    ours = evaluator(2, times)
    theirs = coalescent_moment(times, a=2.0, sigma=1.0, nodes=32)
    assert ours == pytest.approx(theirs, abs=1e-9)


def test_order_one_is_the_heat_semigroup():
    for t in (0.1, 0.5, 1.0, 2.0):
        assert evaluator(1, (t,)) == pytest.approx((1 + 2 * t) ** -0.5, abs=1e-12)
    shifted = mixed_moment(BM1D, 1, [BUMP], [0.8],
                           InitialMeasureSpec.point([0.4]))
    assert shifted == pytest.approx(heat_semigroup_bump(0.8, 2.0, x=0.4), abs=1e-10)


def test_mass_moments_match_branching_recursion():
    one = ConstantOne(1)
    for order in (1, 2, 3, 4):
        got = mixed_moment(BM1D, order, [one] * order, [1.0] * order, DELTA0)
        assert got == pytest.approx(mass_moment(order, 1.0), abs=1e-12)
    assert mass_moment(3, 1.0) == pytest.approx(5.5)
    assert mass_moment(4, 1.0) == pytest.approx(19.0)


def test_mixed_time_mass_moments():
    one = ConstantOne(1)
    got = mixed_moment(BM1D, 3, [one] * 3, [0.5, 1.0, 1.0], DELTA0)
    assert got == pytest.approx(mixed_mass_moment((0.5, 1.0, 1.0)), abs=1e-12)
    assert mixed_mass_moment((0.5, 1.0, 1.0)) == pytest.approx(3.625)
    got4 = mixed_moment(BM1D, 4, [one] * 4, [0.5, 1.0, 1.0, 1.0], DELTA0)
    assert got4 == pytest.approx(mixed_mass_moment((0.5, 1.0, 1.0, 1.0)), abs=1e-12)


def test_initial_mass_scaling():
    # scaling the initial mass scales the q-th mass moment per the
    # branching recursion, not geometrically
    one = ConstantOne(1)
    heavy = InitialMeasureSpec.point([0.0], mass=2.0)
    got = mixed_moment(BM1D, 2, [one] * 2, [1.0, 1.0], heavy)
    assert got == pytest.approx(mass_moment(2, 1.0, m0=2.0), abs=1e-12)
    assert got == pytest.approx(6.0)


def test_term_counts_per_order():
    assert [MomentFormula(k).term_count for k in (1, 2, 3, 4)] == [1, 2, 5, 14]
    assert len(build_templates(3)) == 5


def test_dump_terms_sums_to_moment():
    times = (0.5, 1.0)
    rows = dump_terms(BM1D, 2, [BUMP] * 2, times, DELTA0)
    assert len(rows) == 2
    assert sum(v for _, v in rows) == pytest.approx(FROZEN[(2, times)], abs=1e-10)
    assert all(isinstance(name, str) and name for name, _ in rows)


def test_time_order_does_not_matter():
    a = evaluator(3, (1.0, 0.3, 0.8))
    b = evaluator(3, (0.3, 0.8, 1.0))
    assert a == pytest.approx(b, rel=1e-12)


def test_zero_time_collapses_to_initial_pairing():
    # at t=0 the moment is the initial integral of the bump, here phi(0)=1
    assert evaluator(1, (0.0,)) == pytest.approx(1.0, abs=1e-12)


def test_argument_validation():
    with pytest.raises(ValueError, match="order"):
        mixed_moment(BM1D, 5, [BUMP] * 5, [1.0] * 5, DELTA0)
    with pytest.raises(ValueError, match="per factor"):
        mixed_moment(BM1D, 2, [BUMP], [1.0, 2.0], DELTA0)
    with pytest.raises(ValueError, match="nonnegative"):
        mixed_moment(BM1D, 1, [BUMP], [-0.5], DELTA0)


def test_oracle_rejects_state_dependent_models():
    varying = CoefficientModel.from_callables(
        1, 1, b=lambda x: 1.0 + 0.1 * np.tanh(x), c=lambda x: np.ones((1, 1)))
    with pytest.raises(OracleModelError):
        ModelKernels(varying)


def test_oracle_rejects_plain_callables():
    from flowsilt.model import CallableFunction
    f = CallableFunction(lambda x: float(np.cos(x[0])), dim=1)
    with pytest.raises(OracleModelError, match="Gaussian"):
        mixed_moment(BM1D, 1, [f], [1.0], DELTA0)


def test_simplex_integrate_closed_forms():
    vol2 = simplex_integrate(lambda s: 1.0, upper=1.0, depth=2)
    vol3 = simplex_integrate(lambda s: 1.0, upper=1.0, depth=3)
    assert vol2 == pytest.approx(0.5, rel=1e-12)
    assert vol3 == pytest.approx(1.0 / 6.0, rel=1e-12)
    # int over 0<=s1<=s2<=1 of s1*s2 = 1/8
    prod = simplex_integrate(lambda s: s[0] * s[1], upper=1.0, depth=2)
    assert prod == pytest.approx(0.125, rel=1e-10)


def test_simplex_integrate_reports_error_estimate():
    val, err = simplex_integrate(np.prod, upper=2.0, depth=2, return_error=True)
    assert err < 1e-8
    assert val == pytest.approx(2.0, rel=1e-10)


def test_simplex_integrate_rejects_bad_domain():
    with pytest.raises(ValueError, match="depth"):
        simplex_integrate(lambda s: 1.0, upper=1.0, depth=4)
    with pytest.raises(ValueError, match="ordered"):
        simplex_integrate(lambda s: 1.0, upper=-1.0, depth=2)
