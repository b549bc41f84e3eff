"""Resolvent kernels and their compactly supported mollifications.

For a constant-coefficient model the single-particle motion is a Gaussian
diffusion with covariance rate a = diag(b^2) + c c'. The resolvent kernel
at rate lambda is the exponentially weighted time integral of its
transition density. In one and three dimensions with isotropic a the
kernel is elementary; otherwise it is computed by whitening plus a
one-dimensional adaptive quadrature in time.

Mollification convolves the kernel with the standard bump supported on
the ball of radius eps; in two dimensions the base kernel enters through
its Bessel K0 form. The result is kept as a dense radial profile with a
cubic-spline reader, which is what the pair-sum estimators evaluate in
bulk.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.special import i0, k0

from .model import CoefficientModel, a_matrix

_SPHERE_AREA = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}
_BUMP_NORM: dict[int, float] = {}


class GreenUsageError(ValueError):
    pass


def _bump_constant(d: int) -> float:
    """Normalizer making the unit-ball bump integrate to one."""
    if d not in _BUMP_NORM:
        def shell(r):
            return r ** (d - 1) * math.exp(-1.0 / (1.0 - r * r))
        val, _ = quad(shell, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
        _BUMP_NORM[d] = 1.0 / (_SPHERE_AREA[d] * val)
    return _BUMP_NORM[d]


def mollifier_radial(r, eps: float, d: int):
    """The scaled bump psi_eps as a function of radius (vectorized)."""
    r = np.asarray(r, dtype=float)
    c = _bump_constant(d) / eps ** d
    s = np.abs(r) / eps
    out = np.zeros_like(s)
    inside = s < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        out[inside] = c * np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _unit_radial(r: float, d: int, lam: float) -> float:
    """Resolvent kernel of the unit-covariance diffusion at radius r."""
    kap = math.sqrt(2.0 * lam)
    if d == 1:
        return math.exp(-kap * r) / kap
    if d == 3:
        if r == 0.0:
            return math.inf
        return math.exp(-kap * r) / (2.0 * math.pi * r)
    if r == 0.0 and d >= 2:
        return math.inf
    # adaptive quadrature in v = sqrt(t); the integrand is smooth and the
    # truncation tail is below 1e-14 of the total
    v_max = math.sqrt(40.0 / lam + 4.0 * r / kap + 1.0)

    def integrand(v):
        return (2.0 * v * math.exp(-lam * v * v)
                * (2.0 * math.pi * v * v) ** (-0.5 * d)
                * math.exp(-r * r / (2.0 * v * v)))

    hint = max(min(r / kap ** 0.5, v_max * 0.9), 1e-3)
    val, _ = quad(integrand, 0.0, v_max, points=[hint],
                  epsabs=1e-13, epsrel=1e-11, limit=200)
    return val


class GreenFunction:
    """Resolvent kernel of a constant model, centered at the shift point."""

    def __init__(self, model: CoefficientModel, lam: float,
                 u: Optional[np.ndarray] = None):
        if not model.is_constant:
            raise GreenUsageError("resolvent kernels need a constant model")
        if lam <= 0:
            raise GreenUsageError("lambda must be positive")
        self.model = model
        self.lam = float(lam)
        self.dim = model.dim
        self.u = (np.zeros(self.dim) if u is None
                  else np.asarray(u, dtype=float).reshape(self.dim))
        zero = np.zeros(self.dim)
        self.a_full = a_matrix(model, zero, zero, same_particle=True)
        diag = np.diagonal(self.a_full)
        off = self.a_full - np.diag(diag)
        self.isotropic = (np.allclose(diag, diag[0], rtol=1e-12, atol=1e-14)
                          and np.allclose(off, 0.0, atol=1e-14)
                          and diag[0] > 0)
        self.alpha = float(diag[0]) if self.isotropic else None
        self.closed_form = self.isotropic and self.dim in (1, 3)
        if self.isotropic:
            self.kappa = math.sqrt(2.0 * self.lam / self.alpha)

    # -- radial access (isotropic only)

    def radial(self, r) -> np.ndarray:
        """Kernel value at radius r >= 0; +inf at r = 0 when d >= 2."""
        if not self.isotropic:
            raise GreenUsageError("radial form needs isotropic coefficients")
        r = np.abs(np.asarray(r, dtype=float))
        lam, a, kap = self.lam, self.alpha, self.kappa
        if self.dim == 1:
            return np.exp(-kap * r) / math.sqrt(2.0 * lam * a)
        if self.dim == 3:
            with np.errstate(divide="ignore"):
                out = np.exp(-kap * r) / (2.0 * math.pi * a * r)
            return np.where(r == 0.0, np.inf, out)
        scale = a ** (-0.5 * self.dim)
        flat = np.atleast_1d(r)
        vals = np.array([_unit_radial(x / math.sqrt(a), self.dim, lam)
                         for x in flat]) * scale
        return vals.reshape(r.shape) if r.shape else vals[0]

    def quadrature_radial(self, r) -> np.ndarray:
        """The time-quadrature route regardless of dimension (test hook)."""
        if not self.isotropic:
            raise GreenUsageError("radial form needs isotropic coefficients")
        a = self.alpha
        flat = np.atleast_1d(np.abs(np.asarray(r, dtype=float)))
        vals = np.array([_unit_radial(x / math.sqrt(a), self.dim, self.lam)
                         for x in flat]) * a ** (-0.5 * self.dim)
        r = np.asarray(r)
        return vals.reshape(r.shape) if r.shape else vals[0]

    # -- pointwise access (general constant model)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(self.dim)
        if self.isotropic:
            return float(self.radial(np.linalg.norm(x - self.u)))
        chol = np.linalg.cholesky(self.a_full)
        w = np.linalg.solve(chol, x - self.u)
        det_half = float(np.prod(np.diagonal(chol)))
        rw = float(np.linalg.norm(w))
        if rw == 0.0 and self.dim >= 2:
            return math.inf
        return _unit_radial(rw, self.dim, self.lam) / det_half

    def value_many(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        if self.isotropic:
            return self.radial(np.linalg.norm(xs - self.u, axis=1))
        return np.array([self.value(x) for x in xs])

    def l1_mass(self, tol: float = 1e-12) -> float:
        """Numeric total integral; equals 1/lambda up to quadrature error."""
        if not self.isotropic:
            raise GreenUsageError("mass check implemented for isotropic a")
        d = self.dim
        r_hi = self._far_radius()

        def shell(r):
            return _SPHERE_AREA[d] * r ** (d - 1) * float(self.radial(r))

        val, _ = quad(shell, 0.0, r_hi, epsabs=tol, epsrel=tol, limit=400)
        return val

    def _far_radius(self) -> float:
        """Radius beyond which the kernel is below 1e-16 of its scale."""
        return (40.0 + 8.0 * abs(math.log10(self.lam + 1.0))) / self.kappa


def resolvent_green(model: CoefficientModel, lam: float, u, x) -> float:
    """Kernel value at x for shift point u."""
    return GreenFunction(model, lam, u).value(x)


class MollifiedGreen:
    """The resolvent kernel convolved with the radius-eps bump.

    Exact panel quadrature fills a dense radial profile once; reads go
    through a clamped cubic spline. Supported for isotropic constant
    coefficients in dimensions one through three, where the base kernel
    reduces to an exponential (d=1, 3) or a Bessel K0 (d=2) and the
    spherical average over the bump support is elementary.
    """

    GRID_POINTS = 4096
    SUPPORT_CUT = 1e-12

    def __init__(self, base: GreenFunction, eps: float,
                 grid_points: int = GRID_POINTS):
        if eps <= 0:
            raise GreenUsageError("eps must be positive")
        if not base.isotropic or base.dim not in (1, 2, 3):
            raise GreenUsageError(
                "mollified kernels are built for isotropic constant "
                "coefficients in dimension 1, 2, or 3"
            )
        self.base = base
        self.eps = float(eps)
        self.dim = base.dim
        self.lam = base.lam
        self.u = base.u

        r_far = base._far_radius() + eps
        coarse = np.linspace(0.0, r_far, 512)
        vals = self.exact_radial(coarse)
        peak = vals.max()
        keep = np.nonzero(vals >= self.SUPPORT_CUT * peak)[0]
        cut = coarse[keep[-1]] + 2.0 * (coarse[1] - coarse[0])
        self.support_radius = float(min(cut, r_far))

        self._grid = np.linspace(0.0, self.support_radius, grid_points)
        self._profile = self.exact_radial(self._grid)
        self._spline = CubicSpline(self._grid, self._profile,
                                   bc_type=((1, 0.0), (2, 0.0)))

    # -- exact panel convolution (reference evaluator)

    def exact_radial(self, r) -> np.ndarray:
        r_arr = np.atleast_1d(np.abs(np.asarray(r, dtype=float)))
        out = np.array([self._exact_one(x) for x in r_arr])
        r = np.asarray(r)
        return out.reshape(r.shape) if r.shape else out[0]

    def _exact_one(self, r: float) -> float:
        eps = self.eps
        if self.dim == 1:
            # kink of the base kernel at s = r
            nodes, weights = _gl_cache(96)

            def panel(lo, hi):
                if hi <= lo:
                    return 0.0
                s = 0.5 * (hi - lo) * (nodes + 1.0) + lo
                w = 0.5 * (hi - lo) * weights
                vals = mollifier_radial(s, eps, 1) * self.base.radial(r - s)
                return float(vals @ w)

            if r < eps:
                return panel(-eps, r) + panel(r, eps)
            return panel(-eps, eps)

        if self.dim == 2:
            # circular average of K0 around a ring of radius s at
            # distance r collapses to K0(kap r>) I0(kap r<), leaving a
            # single radial quadrature with a derivative kink at s = r
            a, kap = self.base.alpha, self.base.kappa
            nodes, weights = _gl_cache(96)

            def ring(lo, hi):
                if hi <= lo:
                    return 0.0
                s = 0.5 * (hi - lo) * (nodes + 1.0) + lo
                w = 0.5 * (hi - lo) * weights
                bump = mollifier_radial(s, eps, 2)
                outer = k0(kap * np.maximum(s, r))
                inner = i0(kap * np.minimum(s, r))
                return float((s * bump * outer * inner) @ w)

            if r < 1e-9:
                def near(s):
                    return float(s * mollifier_radial(s, eps, 2)
                                 * k0(kap * s))
                val, _ = quad(near, 0.0, eps, epsabs=1e-14, epsrel=1e-12,
                              limit=200)
                return (2.0 / a) * val
            mid = min(r, eps)
            return (2.0 / a) * (ring(0.0, mid) + ring(mid, eps))

        # d = 3: radial chord formula with the exponential antiderivative
        a, kap = self.base.alpha, self.base.kappa
        nodes, weights = _gl_cache(96)

        def chord(lo, hi):
            if hi <= lo:
                return 0.0
            s = 0.5 * (hi - lo) * (nodes + 1.0) + lo
            w = 0.5 * (hi - lo) * weights
            bump = mollifier_radial(s, eps, 3)
            term = np.exp(-kap * np.abs(r - s)) - np.exp(-kap * (r + s))
            return float((s * bump * term) @ w)

        if r < 1e-9:
            def near(lo, hi):
                if hi <= lo:
                    return 0.0
                s = 0.5 * (hi - lo) * (nodes + 1.0) + lo
                w = 0.5 * (hi - lo) * weights
                vals = (s * mollifier_radial(s, eps, 3)
                        * np.exp(-kap * s))
                return float(vals @ w)
            return (2.0 / a) * near(0.0, eps)
        mid = min(r, eps)
        total = chord(0.0, mid) + chord(mid, eps)
        return total / (a * kap * r)

    # -- fast reads

    def radial(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        out = self._spline(np.clip(r, 0.0, self.support_radius))
        out = np.where(r > self.support_radius, 0.0, out)
        return np.maximum(out, 0.0)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(self.dim)
        return float(self.radial(np.linalg.norm(x - self.u)))

    def value_many(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        return self.radial(np.linalg.norm(xs - self.u, axis=1))

    def peak(self) -> float:
        return float(self._profile.max())

    # -- integral diagnostics

    def mass(self) -> float:
        """Total integral over space, computed from the exact evaluator."""
        d = self.dim

        def shell(r):
            return _SPHERE_AREA[d] * r ** (d - 1) * self._exact_one(r)

        val, _ = quad(shell, 0.0, self.support_radius,
                      points=[self.eps], epsabs=1e-11, epsrel=1e-11,
                      limit=400)
        return val

    def l1_distance_to_base(self) -> float:
        """Integral of |G_eps - G| over space."""
        d = self.dim

        def shell(r):
            if r == 0.0 and d >= 2:
                r = 1e-300
            diff = abs(self._exact_one(r) - float(self.base.radial(r)))
            return _SPHERE_AREA[d] * r ** (d - 1) * diff

        hi = self.support_radius
        val, _ = quad(shell, 0.0, hi, points=[self.eps, 2.0 * self.eps],
                      epsabs=1e-11, epsrel=1e-10, limit=400)
        return val

    def lambda_minus_l_radial(self, r, sim_alpha: Optional[float] = None):
        """Radial profile of (lambda - L) G_eps for an isotropic generator.

        The base kernel turns the operator into a two-term closed form:
        with rho = a_sim / a_kernel,

            (lambda - L_sim) G_eps = lambda (1 - rho) G_eps + rho psi_eps.

        rho defaults to 1 (generator of the kernel's own model), which
        collapses to the mollifier itself.
        """
        rho = 1.0 if sim_alpha is None else float(sim_alpha) / self.base.alpha
        out = rho * mollifier_radial(r, self.eps, self.dim)
        if rho != 1.0:
            out = out + self.lam * (1.0 - rho) * self.radial(r)
        return out


def mollify_green(base: GreenFunction, eps: float) -> MollifiedGreen:
    return MollifiedGreen(base, eps)


_GL_NODES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_cache(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_NODES:
        _GL_NODES[n] = np.polynomial.legendre.leggauss(n)
    return _GL_NODES[n]
