"""Closed-form mixed-moment evaluation for constant-coefficient models.

Moments of orders one through four decompose into a fixed list of terms.
Each term composes three kinds of stages, read here right to left (the
order in which they hit the test function):

  * a diffusion stage: convolve the currently diffusing trailing blocks
    with a centered Gaussian whose covariance is gap * A(m), where A(m)
    couples m particles through the shared flow;
  * an observation stage: freeze the leading diffusing block, which stops
    receiving noise and loses its flow coupling to the others;
  * a branch stage: identify two diffusing blocks (a common ancestor),
    dropping the arity by one.

A term's block count at each stage follows a ledger: observation lowers
the diffusing count by one reading left to right, branching raises it.
The finished function has arity equal to the term's initial-measure power
and is paired with that tensor power of the initial measure. Terms with
branch stages carry time integrals over the branch times, evaluated by
nested Gauss-Legendre rules over (products of) simplices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gaussian import (GaussianFunctional, convolve_params, merge_embedding,
                       pullback_params, value_params)
from .model import (CoefficientModel, ConstantOne, GaussianBump,
                    InitialMeasureSpec, TestFunction)

DEFAULT_NODES = 32


class ExpressionError(ValueError):
    """A stage composition violated the arity ledger."""


class OracleModelError(TypeError):
    """The analytic oracle handles constant-coefficient models only."""


# ---------------------------------------------------------------------------
# stage markers


@dataclass(frozen=True)
class FreezeLeading:
    """Stop the leading diffusing block (an observation time)."""

    def __repr__(self):
        return "pi_1"


@dataclass(frozen=True)
class MergeBlocks:
    """Identify diffusing blocks i and j, 1-based within the diffusing
    suffix (a branch time)."""

    i: int
    j: int

    def __post_init__(self):
        if not (1 <= self.i < self.j):
            raise ValueError("need 1 <= i < j")

    def __repr__(self):
        return f"Phi_{self.i}{self.j}"


@dataclass(frozen=True)
class GammaExpr:
    """ell0, alternating (gap, stage) steps, and the trailing gap."""

    ell0: int
    steps: tuple[tuple[float, object], ...]
    final_gap: float

    @property
    def ops(self) -> tuple:
        return tuple(op for _, op in self.steps)

    @property
    def gaps(self) -> tuple[float, ...]:
        return tuple(g for g, _ in self.steps) + (self.final_gap,)

    @classmethod
    def from_times(cls, ell0: int, ops: Sequence[object],
                   times: Sequence[float]) -> "GammaExpr":
        times = [float(t) for t in times]
        if len(times) != len(ops) + 1:
            raise ExpressionError(
                f"{len(ops)} stages need {len(ops) + 1} times, got {len(times)}"
            )
        prev = 0.0
        gaps = []
        for t in times:
            if t < prev - 1e-12:
                raise ExpressionError("times must be ordered")
            gaps.append(max(t - prev, 0.0))
            prev = t
        steps = tuple((gaps[p], ops[p]) for p in range(len(ops)))
        return cls(ell0=ell0, steps=steps, final_gap=gaps[-1])


def ledger_superscripts(ell0: int, ops: Sequence[object]) -> list[int]:
    """Diffusing-block counts for each stage boundary, left to right.

    Entry p is the count for the gap to the right of the first p stages;
    entry 0 is ell0 itself.
    """
    sup = [ell0]
    m = ell0
    for p, op in enumerate(ops):
        if isinstance(op, FreezeLeading):
            m -= 1
        elif isinstance(op, MergeBlocks):
            m += 1
        else:
            raise ExpressionError(f"unknown stage {op!r} at position {p}")
        if m < 1:
            raise ExpressionError(f"ledger drops below one at stage {p}")
        sup.append(m)
    return sup


# ---------------------------------------------------------------------------
# constant-model covariance kernels


class ModelKernels:
    """Per-particle and flow covariance blocks of a constant model."""

    def __init__(self, model: CoefficientModel):
        if not model.is_constant:
            raise OracleModelError(
                "analytic moments require a constant-coefficient model"
            )
        self.dim = model.dim
        self.driver = np.diag(model.b_vec.astype(float) ** 2)
        self.flow = model.c_mat @ model.c_mat.T
        self._joint: dict[int, np.ndarray] = {}

    def joint(self, m: int) -> np.ndarray:
        """Covariance rate of m particles moving together: block (p, q)
        is flow coupling, plus the independent driver on the diagonal."""
        if m not in self._joint:
            eye = np.eye(m)
            ones = np.ones((m, m))
            self._joint[m] = (np.kron(eye, self.driver)
                              + np.kron(ones, self.flow))
        return self._joint[m]


def _step_cov(kernels: ModelKernels, arity: int, moving: int,
              gaps: np.ndarray) -> np.ndarray:
    """Batched covariance for one diffusion stage: zeros on the frozen
    prefix, gap * A(moving) on the trailing diffusing blocks."""
    d = kernels.dim
    n = arity * d
    base = kernels.joint(moving)
    cov = np.zeros(gaps.shape + (n, n))
    z = (arity - moving) * d
    cov[..., z:, z:] = gaps[..., None, None] * base
    return cov


def evaluate_gamma_batch(kernels: ModelKernels, ell0: int,
                         ops: Sequence[object], gaps: np.ndarray,
                         phi: GaussianFunctional) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Push phi through the composition for a batch of gap vectors.

    gaps has shape (B, len(ops) + 1); returns batched (amp, mean, prec)
    of the finished arity-ell0 function.
    """
    sup = ledger_superscripts(ell0, ops)
    k = len(ops)
    n_freeze = sum(isinstance(op, FreezeLeading) for op in ops)
    arity = sup[-1] + n_freeze
    if phi.arity != arity:
        raise ExpressionError(
            f"composition expects input arity {arity}, got {phi.arity}"
        )
    d = phi.dim
    gaps = np.atleast_2d(np.asarray(gaps, dtype=float))
    if gaps.shape[1] != k + 1:
        raise ExpressionError(f"need {k + 1} gaps, got {gaps.shape[1]}")
    b = gaps.shape[0]

    amp = np.full(b, phi.amplitude)
    mean = np.broadcast_to(phi.mean, (b, arity * d)).copy()
    prec = np.broadcast_to(phi.precision, (b, arity * d, arity * d)).copy()
    frozen = n_freeze
    moving = sup[-1]

    def _convolve(gap_col, a, m):
        nonlocal amp, mean, prec
        cov = _step_cov(kernels, a, m, gap_col)
        amp, mean, prec = convolve_params(amp, mean, prec, cov)

    _convolve(gaps[:, k], arity, moving)
    for p in range(k - 1, -1, -1):
        op = ops[p]
        if isinstance(op, FreezeLeading):
            if frozen == 0:
                raise ExpressionError(f"nothing to release at stage {p}")
            frozen -= 1
            moving += 1
        else:
            if op.j > moving:
                raise ExpressionError(
                    f"merge ({op.i},{op.j}) exceeds {moving} diffusing blocks "
                    f"at stage {p}"
                )
            gi = frozen + op.i - 1
            gj = frozen + op.j - 1
            e = merge_embedding(arity, d, gi, gj)
            amp, mean, prec = pullback_params(amp, mean, prec, e)
            arity -= 1
            moving -= 1
        _convolve(gaps[:, p], arity, moving)
    if not (frozen == 0 and moving == ell0 == arity):
        raise ExpressionError("ledger did not close at the leading stage")
    return amp, mean, prec


# ---------------------------------------------------------------------------
# public operator surface


def semigroup_apply(model_or_kernels, f, t: float):
    """Evolve all diffusing blocks for time t (Gaussian convolution)."""
    kernels = (model_or_kernels if isinstance(model_or_kernels, ModelKernels)
               else ModelKernels(model_or_kernels))
    if t < 0:
        raise ValueError("time must be nonnegative")
    if isinstance(f, PartiallyFrozen):
        return f.semigroup_apply(kernels, t)
    if t == 0.0:
        return f
    cov = t * kernels.joint(f.arity)
    return f.convolve(cov)


def diagonal_restrict(f: GaussianFunctional, i: int, j: int) -> GaussianFunctional:
    """Identify argument blocks i and j (1-based), dropping arity by one."""
    if i == j:
        raise ValueError("blocks must be distinct")
    lo, hi = sorted((i, j))
    if not (1 <= lo and hi <= f.arity):
        raise ValueError(f"blocks ({i}, {j}) out of range for arity {f.arity}")
    return f.merge_blocks(lo - 1, hi - 1)


class PartiallyFrozen:
    """A functional whose leading blocks no longer diffuse."""

    def __init__(self, functional: GaussianFunctional, frozen: int):
        if not (1 <= frozen < functional.arity):
            raise ValueError("frozen count must leave at least one diffusing block")
        self.functional = functional
        self.frozen = frozen

    def semigroup_apply(self, model_or_kernels, t: float) -> "PartiallyFrozen":
        kernels = (model_or_kernels if isinstance(model_or_kernels, ModelKernels)
                   else ModelKernels(model_or_kernels))
        if t == 0.0:
            return self
        f = self.functional
        moving = f.arity - self.frozen
        cov = _step_cov(kernels, f.arity, moving, np.asarray(float(t)))
        amp, mean, prec = convolve_params(f.amplitude, f.mean, f.precision, cov)
        out = GaussianFunctional(f.arity, f.dim, float(amp), mean, prec)
        return PartiallyFrozen(out, self.frozen)

    def project_first(self) -> "PartiallyFrozen":
        return PartiallyFrozen(self.functional, self.frozen + 1)


def project_first(f) -> PartiallyFrozen:
    """Freeze the leading block; later evolution leaves it untouched."""
    if isinstance(f, PartiallyFrozen):
        return f.project_first()
    if f.arity < 2:
        raise ValueError("projection needs arity at least two")
    return PartiallyFrozen(f, 1)


def gamma_evaluate(model, expr: GammaExpr, f: GaussianFunctional,
                   times: Optional[Sequence[float]] = None) -> GaussianFunctional:
    """Evaluate one composition on a single gap vector."""
    kernels = model if isinstance(model, ModelKernels) else ModelKernels(model)
    if times is not None:
        expr = GammaExpr.from_times(expr.ell0, expr.ops, times)
    gaps = np.asarray(expr.gaps, dtype=float)[None, :]
    amp, mean, prec = evaluate_gamma_batch(kernels, expr.ell0, expr.ops, gaps, f)
    return GaussianFunctional(expr.ell0, f.dim, float(amp[0]), mean[0], prec[0])


# ---------------------------------------------------------------------------
# initial-measure pairing


def _atom_stacks(mu0: InitialMeasureSpec, power: int) -> tuple[np.ndarray, np.ndarray]:
    """All ordered atom tuples of the tensor power: positions (C, power*d)
    and mass products (C,)."""
    atoms = mu0.atoms
    pts = np.array([p for p, _ in atoms])
    ms = np.array([m for _, m in atoms])
    idx = np.array(list(itertools.product(range(len(atoms)), repeat=power)))
    pos = pts[idx].reshape(idx.shape[0], power * mu0.dim)
    w = ms[idx].prod(axis=1)
    return pos, w


def _density_stacks(mu0: InitialMeasureSpec, power: int,
                    nodes: int = 24) -> tuple[np.ndarray, np.ndarray]:
    if power * mu0.dim > 2:
        raise OracleModelError(
            "density initial measures are supported up to two effective "
            "dimensions in the pairing; use an atomic measure"
        )
    lo, hi = mu0.support_lo, mu0.support_hi
    x, w = np.polynomial.legendre.leggauss(nodes)
    axes = []
    wts = []
    for _ in range(power):
        for i in range(mu0.dim):
            axes.append(0.5 * (hi[i] - lo[i]) * (x + 1) + lo[i])
            wts.append(0.5 * (hi[i] - lo[i]) * w)
    mesh = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    wmesh = np.meshgrid(*wts, indexing="ij")
    wt = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=-1), axis=1)
    dens = np.empty(pos.shape[0])
    for r in range(pos.shape[0]):
        val = 1.0
        for blk in range(power):
            val *= mu0.density(pos[r, blk * mu0.dim:(blk + 1) * mu0.dim])
        dens[r] = val
    # the slice density integrates to the slice mass, not to one
    return pos, wt * dens


def pair_with_initial(amp: np.ndarray, mean: np.ndarray, prec: np.ndarray,
                      power: int, mu0: InitialMeasureSpec) -> np.ndarray:
    """<F, mu0^power> for batched function parameters."""
    if mu0.atoms is not None:
        pos, w = _atom_stacks(mu0, power)
    else:
        pos, w = _density_stacks(mu0, power)
    vals = value_params(amp[:, None], mean[:, None, :], prec[:, None, :, :],
                        pos[None, :, :])
    return vals @ w


# ---------------------------------------------------------------------------
# formula templates


_F = "F"


@dataclass(frozen=True)
class TermTemplate:
    """One displayed term: stage pattern, time-slot layout, and domain."""

    name: str
    ell0: int
    ops: tuple            # entries: "F", ("sum", m) or ("fixed", 1, 2)
    slots: tuple[str, ...]
    svars: tuple[tuple[str, tuple, tuple], ...]  # (name, lo, hi), outer first

    def describe(self) -> str:
        sup = []
        m = self.ell0
        sup.append(m)
        parts = []
        labels = []
        for op in self.ops:
            if op == _F:
                labels.append("pi_1")
                m -= 1
            elif op[0] == "sum":
                labels.append(f"Phi_ij[{op[1]}]")
                m += 1
            else:
                labels.append(f"Phi_{op[1]}{op[2]}")
                m += 1
            sup.append(m)
        gap_names = [self.slots[0]] + [
            f"{self.slots[q]}-{self.slots[q - 1]}" for q in range(1, len(self.slots))
        ]
        parts.append(f"Q^{sup[0]}_{{{gap_names[0]}}}")
        for p, lab in enumerate(labels):
            parts.append(lab)
            parts.append(f"Q^{sup[p + 1]}_{{{gap_names[p + 1]}}}")
        dom = " ".join(
            f"{nm} in ({_token_str(lo)},{_token_str(hi)})" for nm, lo, hi in self.svars
        )
        tail = f" | {dom}" if dom else ""
        return f"{' '.join(parts)} | <., mu0^{self.ell0}>{tail}"


def _token_str(tok) -> str:
    kind = tok[0]
    if kind == "zero":
        return "0"
    if kind == "t":
        return f"t{tok[1] + 1}"
    return str(tok[1])


def _t(i):
    return ("t", i)


_Z = ("zero",)


def _s(name):
    return ("s", name)


def build_templates(order: int) -> list[TermTemplate]:
    if order == 1:
        return [TermTemplate("1.1", 1, (), ("t1",), ())]
    if order == 2:
        return [
            TermTemplate("2.1", 2, (_F,), ("t1", "t2"), ()),
            TermTemplate("2.2", 1, (("fixed", 1, 2), _F), ("s1", "t1", "t2"),
                         (("s1", _Z, _t(0)),)),
        ]
    if order == 3:
        return [
            TermTemplate("3.1", 3, (_F, _F), ("t1", "t2", "t3"), ()),
            TermTemplate("3.2", 2, (("sum", 3), _F, _F), ("s1", "t1", "t2", "t3"),
                         (("s1", _Z, _t(0)),)),
            TermTemplate("3.3", 1, (("fixed", 1, 2), ("sum", 3), _F, _F),
                         ("s1", "s2", "t1", "t2", "t3"),
                         (("s2", _Z, _t(0)), ("s1", _Z, _s("s2")))),
            TermTemplate("3.4", 2, (_F, ("fixed", 1, 2), _F),
                         ("t1", "s1", "t2", "t3"),
                         (("s1", _t(0), _t(1)),)),
            TermTemplate("3.5", 1, (("fixed", 1, 2), _F, ("fixed", 1, 2), _F),
                         ("s1", "t1", "s2", "t2", "t3"),
                         (("s2", _t(0), _t(1)), ("s1", _Z, _t(0)))),
        ]
    if order == 4:
        return [
            TermTemplate("4.1", 4, (_F, _F, _F), ("t1", "t2", "t3", "t4"), ()),
            TermTemplate("4.2", 3, (("sum", 4), _F, _F, _F),
                         ("s1", "t1", "t2", "t3", "t4"),
                         (("s1", _Z, _t(0)),)),
            TermTemplate("4.3", 3, (_F, ("sum", 3), _F, _F),
                         ("t1", "s1", "t2", "t3", "t4"),
                         (("s1", _t(0), _t(1)),)),
            TermTemplate("4.4", 3, (_F, _F, ("fixed", 1, 2), _F),
                         ("t1", "t2", "s1", "t3", "t4"),
                         (("s1", _t(1), _t(2)),)),
            TermTemplate("4.5", 2, (("sum", 3), ("sum", 4), _F, _F, _F),
                         ("s1", "s2", "t1", "t2", "t3", "t4"),
                         (("s2", _Z, _t(0)), ("s1", _Z, _s("s2")))),
            TermTemplate("4.6", 2, (("sum", 3), _F, ("sum", 3), _F, _F),
                         ("s1", "t1", "s2", "t2", "t3", "t4"),
                         (("s2", _t(0), _t(1)), ("s1", _Z, _t(0)))),
            TermTemplate("4.7", 2, (_F, ("fixed", 1, 2), ("sum", 3), _F, _F),
                         ("t1", "s1", "s2", "t2", "t3", "t4"),
                         (("s2", _t(0), _t(1)), ("s1", _t(0), _s("s2")))),
            TermTemplate("4.8", 2, (("sum", 3), _F, _F, ("fixed", 1, 2), _F),
                         ("s1", "t1", "t2", "s2", "t3", "t4"),
                         (("s2", _t(1), _t(2)), ("s1", _Z, _t(0)))),
            TermTemplate("4.9", 2, (_F, ("fixed", 1, 2), _F, ("fixed", 1, 2), _F),
                         ("t1", "s1", "t2", "s2", "t3", "t4"),
                         (("s2", _t(1), _t(2)), ("s1", _t(0), _t(1)))),
            TermTemplate("4.10", 1,
                         (("fixed", 1, 2), ("sum", 3), ("sum", 4), _F, _F, _F),
                         ("s1", "s2", "s3", "t1", "t2", "t3", "t4"),
                         (("s3", _Z, _t(0)), ("s2", _Z, _s("s3")),
                          ("s1", _Z, _s("s2")))),
            TermTemplate("4.11", 1,
                         (("fixed", 1, 2), ("sum", 3), _F, ("sum", 3), _F, _F),
                         ("s1", "s2", "t1", "s3", "t2", "t3", "t4"),
                         (("s3", _t(0), _t(1)), ("s2", _Z, _t(0)),
                          ("s1", _Z, _s("s2")))),
            TermTemplate("4.12", 1,
                         (("fixed", 1, 2), _F, ("fixed", 1, 2), ("sum", 3), _F, _F),
                         ("s1", "t1", "s2", "s3", "t2", "t3", "t4"),
                         (("s3", _t(0), _t(1)), ("s2", _t(0), _s("s3")),
                          ("s1", _Z, _t(0)))),
            TermTemplate("4.13", 1,
                         (("fixed", 1, 2), ("sum", 3), _F, _F, ("fixed", 1, 2), _F),
                         ("s1", "s2", "t1", "t2", "s3", "t3", "t4"),
                         (("s3", _t(1), _t(2)), ("s2", _Z, _t(0)),
                          ("s1", _Z, _s("s2")))),
            TermTemplate("4.14", 1,
                         (("fixed", 1, 2), _F, ("fixed", 1, 2), _F,
                          ("fixed", 1, 2), _F),
                         ("s1", "t1", "s2", "t2", "s3", "t3", "t4"),
                         (("s3", _t(1), _t(2)), ("s2", _t(0), _t(1)),
                          ("s1", _Z, _t(0)))),
        ]
    raise ValueError(f"moment order {order} not supported (1..4)")


def _check_ledger(template: TermTemplate) -> None:
    """Template self-consistency: merge ranges must match the ledger."""
    m = template.ell0
    for op in template.ops:
        if op == _F:
            m -= 1
        else:
            m += 1
            expected = m
            if op[0] == "sum" and op[1] != expected:
                raise ExpressionError(
                    f"{template.name}: pair range {op[1]} != ledger {expected}"
                )
            if op[0] == "fixed" and expected != 2:
                raise ExpressionError(
                    f"{template.name}: fixed merge at diffusing count {expected}"
                )
        if m < 1:
            raise ExpressionError(f"{template.name}: ledger below one")
    if m != 1:
        raise ExpressionError(f"{template.name}: ledger ends at {m}, expected 1")


for _order in (1, 2, 3, 4):
    for _tpl in build_templates(_order):
        _check_ledger(_tpl)


@dataclass(frozen=True)
class MomentFormula:
    """The displayed term list for one moment order."""

    order: int

    @property
    def terms(self) -> list[TermTemplate]:
        return build_templates(self.order)

    @property
    def term_count(self) -> int:
        return len(self.terms)


# ---------------------------------------------------------------------------
# quadrature over the (product of) branch-time domains


def _bound_values(tok, ts: np.ndarray, assigned: dict[str, np.ndarray],
                  batch: int) -> np.ndarray:
    kind = tok[0]
    if kind == "zero":
        return np.zeros(batch)
    if kind == "t":
        return np.full(batch, ts[tok[1]])
    return assigned[tok[1]]


def _quadrature_grid(template: TermTemplate, ts: np.ndarray, nodes: int):
    """Enumerate quadrature nodes for the branch times, outer to inner.

    Returns (assignments, weights); empty domains get zero weight, which
    makes coincident observation times exact.
    """
    x, w = np.polynomial.legendre.leggauss(nodes)
    assigned: dict[str, np.ndarray] = {}
    weights = np.ones(1)
    batch = 1
    for name, lo_tok, hi_tok in template.svars:
        lo = _bound_values(lo_tok, ts, assigned, batch)
        hi = _bound_values(hi_tok, ts, assigned, batch)
        width = np.maximum(hi - lo, 0.0)
        vals = lo[:, None] + 0.5 * (x[None, :] + 1.0) * width[:, None]
        wts = 0.5 * width[:, None] * w[None, :]
        assigned = {k: np.repeat(v, nodes) for k, v in assigned.items()}
        assigned[name] = vals.reshape(-1)
        weights = (weights[:, None] * wts).reshape(-1)
        batch *= nodes
    return assigned, weights


def _term_value(kernels: ModelKernels, template: TermTemplate,
                phi: GaussianFunctional, ts: np.ndarray,
                mu0: InitialMeasureSpec, nodes: int) -> float:
    assigned, weights = _quadrature_grid(template, ts, nodes)
    batch = weights.shape[0]
    if batch == 0 or not np.any(weights != 0.0):
        return 0.0
    slot_vals = np.empty((batch, len(template.slots)))
    for col, slot in enumerate(template.slots):
        if slot.startswith("t"):
            slot_vals[:, col] = ts[int(slot[1:]) - 1]
        else:
            slot_vals[:, col] = assigned[slot]
    gaps = np.empty_like(slot_vals)
    gaps[:, 0] = slot_vals[:, 0]
    gaps[:, 1:] = np.diff(slot_vals, axis=1)
    gaps = np.maximum(gaps, 0.0)

    total = 0.0
    for concrete in _expand_ops(template.ops):
        amp, mean, prec = evaluate_gamma_batch(kernels, template.ell0,
                                               concrete, gaps, phi)
        paired = pair_with_initial(amp, mean, prec, template.ell0, mu0)
        total += float(paired @ weights)
    return total


def _expand_ops(ops: tuple) -> list[tuple]:
    """All concrete stage lists of a template (branch-pair choices)."""
    choices: list[list[object]] = []
    for op in ops:
        if op == _F:
            choices.append([FreezeLeading()])
        elif op[0] == "fixed":
            choices.append([MergeBlocks(op[1], op[2])])
        else:
            m = op[1]
            choices.append([MergeBlocks(i, j)
                            for i in range(1, m + 1) for j in range(i + 1, m + 1)])
    return [tuple(combo) for combo in itertools.product(*choices)]


# ---------------------------------------------------------------------------
# the public moment evaluator


def _as_functional(f: TestFunction, dim: int) -> GaussianFunctional:
    if isinstance(f, ConstantOne):
        return GaussianFunctional.constant_one(1, dim)
    if isinstance(f, GaussianBump):
        return GaussianFunctional(1, dim, f.amplitude, f.center, f.precision)
    raise OracleModelError(
        "the analytic oracle accepts Gaussian bumps and the constant one"
    )


def mixed_moment(model, order: int, test_functions: Sequence[TestFunction],
                 times: Sequence[float], mu0: InitialMeasureSpec,
                 nodes: int = DEFAULT_NODES) -> float:
    """E prod_p <f_p, mu_{t_p}> for a constant model, orders one to four."""
    if order not in (1, 2, 3, 4):
        raise ValueError(f"moment order {order} not supported (1..4)")
    if len(test_functions) != order or len(times) != order:
        raise ValueError("need one test function and one time per factor")
    kernels = model if isinstance(model, ModelKernels) else ModelKernels(model)
    pairs = sorted(zip([float(t) for t in times], range(order)))
    ts = np.array([t for t, _ in pairs])
    if ts[0] < 0:
        raise ValueError("times must be nonnegative")
    fs = [_as_functional(test_functions[orig], kernels.dim) for _, orig in pairs]
    phi = GaussianFunctional.product(fs)
    mu0.validate()
    total = 0.0
    for template in build_templates(order):
        total += _term_value(kernels, template, phi, ts, mu0, nodes)
    return total


def dump_terms(model, order: int, test_functions: Sequence[TestFunction],
               times: Sequence[float], mu0: InitialMeasureSpec,
               nodes: int = DEFAULT_NODES) -> list[tuple[str, float]]:
    """Per-term description and value; the debug view used by golden tests."""
    kernels = model if isinstance(model, ModelKernels) else ModelKernels(model)
    pairs = sorted(zip([float(t) for t in times], range(order)))
    ts = np.array([t for t, _ in pairs])
    fs = [_as_functional(test_functions[orig], kernels.dim) for _, orig in pairs]
    phi = GaussianFunctional.product(fs)
    out = []
    for template in build_templates(order):
        val = _term_value(kernels, template, phi, ts, mu0, nodes)
        out.append((template.describe(), val))
    return out


# ---------------------------------------------------------------------------
# standalone simplex quadrature


def simplex_integrate(f, upper: float, depth: int, nodes: int = DEFAULT_NODES,
                      lower: float = 0.0, return_error: bool = False):
    """Integrate f over the ordered region lower <= s_1 <= ... <= s_depth
    <= upper. f receives an array of shape (depth,) (or a scalar batch via
    vectorization below) and must be finite on the domain.
    """
    if depth not in (1, 2, 3):
        raise ValueError("depth must be 1, 2, or 3")
    if upper < lower:
        raise ValueError("bounds must be ordered")

    def _run(npts: int) -> float:
        x, w = np.polynomial.legendre.leggauss(npts)

        def rec(level: int, hi: float, prefix: list[float], wt: float) -> float:
            width = hi - lower
            if width <= 0:
                return 0.0
            ss = lower + 0.5 * (x + 1.0) * width
            ws = 0.5 * width * w
            acc = 0.0
            for sval, sw in zip(ss, ws):
                if level == 1:
                    point = np.array([sval] + prefix)
                    y = f(point)
                    if not np.isfinite(y):
                        raise ValueError(
                            f"integrand not finite at {point.tolist()}"
                        )
                    acc += sw * wt * float(y)
                else:
                    acc += rec(level - 1, sval, [sval] + prefix, sw * wt)
            return acc

        return rec(depth, upper, [], 1.0)

    coarse = _run(nodes)
    if not return_error:
        return coarse
    fine = _run(2 * nodes)
    return fine, abs(fine - coarse)
