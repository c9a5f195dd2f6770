"""Truncated monotone operators and their resolvents.

The operator assembled here is

    A_M(t) u = -div[ A(x, t, grad u) + (1 - theta_M(x, t)) B(x, t, u) ]

with theta_M = T_M(b)/b the truncation weight, in weak form
< A_M(t) u, v > = inner_vec(flux(u), gradient(v)).  Because divergence is
the exact negative adjoint of gradient, the strong form -div(flux) realizes
the pairing identically and accretivity can be asserted at machine
precision instead of up to discretization error.

Resolvent equations (I + lam * A_M(t)) u = g are solved by damped Picard
iteration preconditioned with the constant-coefficient part
K = I + lam * gamma * (-Laplacian): strong monotonicity makes the
preconditioned map a contraction for a small enough damping factor, and K
itself is inverted by a one-shot sine transform inside a CG loop.  Newton
with matrix-free GMRES is available as an opt-in alternative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from . import grid
from .grid import (
    BoxDomain,
    ConvergenceError,
    GridFunction,
    VectorField,
    divergence,
    gradient,
    helmholtz_solve,
    inner,
    inner_vec,
    norm_l2,
)
from .models import ProblemData


@dataclass(frozen=True)
class ResolventConfig:
    """Settings for one resolvent solve (I + lam A)^{-1}."""

    lam: float = 1.0
    tol: float = 1e-10
    max_iter: int = 400
    method: str = "damped-picard"
    relaxation: float = 1.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be strictly positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")
        if self.method not in ("damped-picard", "newton"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")


@dataclass
class SolverDiagnostics:
    """Iteration record of a nonlinear solve, serializable to JSON."""

    method: str
    iterations: int = 0
    converged: bool = False
    residuals: list[float] = field(default_factory=list)
    relaxation: float | None = None

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "residuals": self.residuals,
            "relaxation": self.relaxation,
        }


def _to_faces(values: np.ndarray, axis: int) -> np.ndarray:
    """Average node values onto the staggered faces of one axis (zero ghosts)."""
    padded = np.concatenate(
        [
            np.zeros_like(np.take(values, [0], axis=axis)),
            values,
            np.zeros_like(np.take(values, [0], axis=axis)),
        ],
        axis=axis,
    )
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (padded[tuple(lo)] + padded[tuple(hi)])


def _pairwise_average(values: np.ndarray, axis: int) -> np.ndarray:
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (values[tuple(lo)] + values[tuple(hi)])


def _full_gradient_at_faces(grad: VectorField, axis: int) -> tuple[np.ndarray, ...]:
    """All gradient components co-located at the faces of `axis`.

    The native component is returned untouched; cross components are moved
    face -> node -> face by adjacent averaging, the usual staggered-grid
    reconstruction.  Componentwise fluxes never read the averaged entries,
    so the built-in models stay exact.
    """
    out = []
    for b, comp in enumerate(grad.components):
        if b == axis:
            out.append(comp)
        else:
            at_nodes = _pairwise_average(comp, b)
            out.append(_to_faces(at_nodes, axis))
    return tuple(out)


class TruncatedOperator:
    """Weak-form spatial operator at one time slice.

    drift_mode selects what the implicit flux contains:
      "remainder": A + (1 - theta_M) B, the truncated operator whose
                   accretivity margin is certified;
      "full":      A + B, used by the fully implicit time step and the
                   steady solver;
      "none":      A alone.
    """

    def __init__(
        self,
        data: ProblemData,
        t: float,
        level: float | None = None,
        drift_mode: str = "remainder",
    ):
        if drift_mode not in ("remainder", "full", "none"):
            raise ValueError(f"unknown drift_mode {drift_mode!r}")
        if drift_mode == "remainder" and data.has_drift and level is None:
            raise ValueError("remainder mode needs a truncation level")
        self.data = data
        self.domain: BoxDomain = data.domain
        self.t = float(t)
        self.level = level
        self.drift_mode = drift_mode
        self._face_bounds: dict[int, np.ndarray] = {}

    # -- flux assembly -----------------------------------------------------

    def _drift_weight(self, axis: int) -> np.ndarray | None:
        """Multiplier applied to B on the faces of one axis."""
        if not self.data.has_drift or self.drift_mode == "none":
            return None
        if self.drift_mode == "full":
            return np.ones(self.domain.face_shape(axis))
        b = self._face_bound(axis)
        M = float(self.level)
        rest = np.zeros_like(b)
        mask = b > M
        rest[mask] = 1.0 - M / b[mask]
        return rest

    def _face_bound(self, axis: int) -> np.ndarray:
        if axis not in self._face_bounds:
            coords = grid.face_coordinates(self.domain, axis)
            vals = self.data.drift.bound(coords, self.t)
            self._face_bounds[axis] = np.broadcast_to(
                vals, self.domain.face_shape(axis)
            ).copy()
        return self._face_bounds[axis]

    def flux(self, u: GridFunction) -> VectorField:
        g = gradient(u)
        comps = []
        for axis in range(self.domain.dim):
            coords = grid.face_coordinates(self.domain, axis)
            eta = _full_gradient_at_faces(g, axis)
            A = self.data.diffusion.evaluate(coords, self.t, eta)
            comp = np.array(
                np.broadcast_to(A[axis], self.domain.face_shape(axis)), dtype=float
            )
            weight = self._drift_weight(axis)
            if weight is not None:
                z = _to_faces(u.values, axis)
                B = self.data.drift.evaluate(coords, self.t, z)
                comp += weight * np.broadcast_to(B[axis], comp.shape)
            comps.append(comp)
        return VectorField(self.domain, tuple(comps))

    def apply(self, u: GridFunction) -> GridFunction:
        """Strong form: -div(flux(u)); consistent with `pairing` exactly."""
        return GridFunction(self.domain, -divergence(self.flux(u)).values)

    def pairing(self, u: GridFunction, v: GridFunction) -> float:
        """Weak pairing < A_M(t) u, v > = (flux(u), grad v)."""
        return inner_vec(self.flux(u), gradient(v))

    def accretivity_margin(self, u: GridFunction, v: GridFunction) -> float:
        """< A_M u - A_M v, u - v > minus the certified lower bound.

        Returns the pairing minus (alpha/2) |grad(u - v)|^2; under a
        certified truncation level this is nonnegative up to roundoff.
        """
        w = u - v
        pair = inner_vec(self.flux(u) - self.flux(v), gradient(w))
        gw = gradient(w)
        return pair - 0.5 * self.data.diffusion.alpha * inner_vec(gw, gw)

    # -- solver estimates ----------------------------------------------------

    def monotonicity_margin_estimate(self) -> float:
        """A priori monotonicity coefficient in front of |grad w|^2."""
        alpha = self.data.diffusion.alpha
        if not self.data.has_drift or self.drift_mode == "none":
            return alpha
        # Certified remainder eats at most alpha/2; the full mode gives the
        # same guarantee only after the zeroth-order Young absorption, which
        # the lam-dependent estimate below accounts for.
        return 0.5 * alpha

    def drift_face_max(self) -> float:
        if not self.data.has_drift or self.drift_mode == "none":
            return 0.0
        worst = 0.0
        for axis in range(self.domain.dim):
            b = self._face_bound(axis)
            if self.drift_mode == "remainder":
                b = np.minimum(b, float(self.level))
            worst = max(worst, float(np.max(b)) if b.size else 0.0)
        return worst

    def contraction_constants(self, lam: float) -> tuple[float, float]:
        """Monotonicity and Lipschitz constants of K^{-1}(I + lam A_M).

        Measured in the K = I + lam * gamma * (-Lap) geometry; they bound a
        guaranteed-safe damping factor m / M^2 from below.
        """
        alpha = self.data.diffusion.alpha
        beta = self.data.diffusion.beta
        mu = self.monotonicity_margin_estimate()
        b_eff = self.drift_face_max()
        m = min(1.0, mu)
        if self.drift_mode == "full" and b_eff > 0:
            # zeroth-order loss from absorbing the bounded drift part
            m = max(1e-6, min(1.0, mu) - lam * b_eff**2 / (2 * alpha))
        M = max(1.0, beta + (0.5 * alpha if self.data.has_drift else 0.0)) + b_eff * np.sqrt(lam)
        return m, M

    def precondition_scale(self) -> float:
        """Laplacian weight gamma of the preconditioner."""
        return 0.5 * (self.data.diffusion.alpha + self.data.diffusion.beta)

    # -- resolvent ----------------------------------------------------------

    def resolve(
        self, g: GridFunction, cfg: ResolventConfig, x0: GridFunction | None = None
    ) -> GridFunction:
        u, _ = self.resolve_detailed(g, cfg, x0=x0)
        return u

    def resolve_detailed(
        self, g: GridFunction, cfg: ResolventConfig, x0: GridFunction | None = None
    ) -> tuple[GridFunction, SolverDiagnostics]:
        """Solve u + lam * A_M(t) u = g to residual tol * (1 + |g|)."""
        if cfg.method == "newton":
            return self._newton(g, cfg, x0)
        return self._damped_picard(g, cfg, x0)

    def _kinv(self, lam: float, values: np.ndarray) -> np.ndarray:
        # K is constant-coefficient, so the sine transform inverts it exactly;
        # a CG loop around it would terminate after one application anyway.
        return helmholtz_solve(self.domain, values, 1.0, lam * self.precondition_scale())

    def _residual(self, u: GridFunction, lam: float, g: GridFunction) -> GridFunction:
        return GridFunction(
            self.domain, u.values + lam * self.apply(u).values - g.values
        )

    def _damped_picard(
        self, g: GridFunction, cfg: ResolventConfig, x0: GridFunction | None
    ) -> tuple[GridFunction, SolverDiagnostics]:
        lam = cfg.lam
        diag = SolverDiagnostics(method="damped-picard")
        scale = 1.0 + norm_l2(g)
        m, M = self.contraction_constants(lam)
        rho_floor = max(1e-4, 0.9 * m / M**2)
        rho = cfg.relaxation
        u = x0.copy() if x0 is not None else g.copy()
        r = self._residual(u, lam, g)
        rn = norm_l2(r)
        streak = 0
        for it in range(1, cfg.max_iter + 1):
            diag.residuals.append(rn)
            if rn <= cfg.tol * scale:
                diag.iterations = it - 1
                diag.converged = True
                diag.relaxation = rho
                return u, diag
            z = self._kinv(lam, r.values)
            accepted = False
            while True:
                trial = GridFunction(self.domain, u.values - rho * z)
                r_trial = self._residual(trial, lam, g)
                rn_trial = norm_l2(r_trial)
                if rn_trial < rn or rn_trial <= cfg.tol * scale:
                    accepted = True
                    break
                if rho <= rho_floor:
                    break
                rho = max(rho_floor, 0.5 * rho)
                streak = 0
            if not accepted:
                diag.iterations = it
                diag.relaxation = rho
                raise ConvergenceError(
                    f"damped Picard stalled at residual {rn:.3e} "
                    f"(tol {cfg.tol * scale:.3e}) after {it} iterations",
                    last=u,
                    history=diag.residuals,
                )
            u, r, rn = trial, r_trial, rn_trial
            streak += 1
            if streak >= 3 and rho < cfg.relaxation:
                rho = min(cfg.relaxation, 1.5 * rho)
                streak = 0
        diag.iterations = cfg.max_iter
        diag.relaxation = rho
        if rn <= cfg.tol * scale:
            diag.converged = True
            return u, diag
        raise ConvergenceError(
            f"damped Picard did not reach tol in {cfg.max_iter} iterations "
            f"(residual {rn:.3e})",
            last=u,
            history=diag.residuals,
        )

    def _newton(
        self, g: GridFunction, cfg: ResolventConfig, x0: GridFunction | None
    ) -> tuple[GridFunction, SolverDiagnostics]:
        lam = cfg.lam
        diag = SolverDiagnostics(method="newton")
        scale = 1.0 + norm_l2(g)
        gamma = self.precondition_scale()
        n = self.domain.interior_count
        shape = self.domain.interior_shape
        u = x0.copy() if x0 is not None else g.copy()
        r = self._residual(u, lam, g)
        rn = norm_l2(r)
        for it in range(1, cfg.max_iter + 1):
            diag.residuals.append(rn)
            if rn <= cfg.tol * scale:
                diag.iterations = it - 1
                diag.converged = True
                return u, diag
            unorm = float(np.linalg.norm(u.values))

            def jv(vec):
                v = vec.reshape(shape)
                vnorm = float(np.linalg.norm(v))
                if vnorm == 0.0:
                    return np.zeros(n)
                eps = 1e-7 * (1.0 + unorm) / vnorm
                bumped = GridFunction(self.domain, u.values + eps * v)
                r_b = self._residual(bumped, lam, g)
                return ((r_b.values - r.values) / eps).ravel()

            def minv(vec):
                return helmholtz_solve(
                    self.domain, vec.reshape(shape), 1.0, lam * gamma
                ).ravel()

            J = scipy.sparse.linalg.LinearOperator((n, n), matvec=jv)
            P = scipy.sparse.linalg.LinearOperator((n, n), matvec=minv)
            delta, info = scipy.sparse.linalg.lgmres(
                J, -r.values.ravel(), M=P, rtol=1e-6, atol=0.0, maxiter=200
            )
            if info != 0:
                raise ConvergenceError(
                    f"inner GMRES failed at Newton step {it}",
                    last=u,
                    history=diag.residuals,
                )
            step = 1.0
            while step >= 1e-4:
                trial = GridFunction(
                    self.domain, u.values + step * delta.reshape(shape)
                )
                r_trial = self._residual(trial, lam, g)
                rn_trial = norm_l2(r_trial)
                if rn_trial < rn:
                    break
                step *= 0.5
            else:
                raise ConvergenceError(
                    f"Newton line search failed at residual {rn:.3e}",
                    last=u,
                    history=diag.residuals,
                )
            u, r, rn = trial, r_trial, rn_trial
        diag.iterations = cfg.max_iter
        if rn <= cfg.tol * scale:
            diag.converged = True
            return u, diag
        raise ConvergenceError(
            f"Newton did not reach tol in {cfg.max_iter} iterations",
            last=u,
            history=diag.residuals,
        )


@dataclass
class StationaryDiagnostics:
    iterations: int
    converged: bool
    residuals: list[float]


def stationary_solve(
    op: TruncatedOperator,
    rhs: GridFunction,
    tol: float = 1e-11,
    max_iter: int = 500,
    x0: GridFunction | None = None,
) -> tuple[GridFunction, StationaryDiagnostics]:
    """Solve A(u) = rhs by preconditioned damped Picard in the energy norm.

    The residual is measured in the discrete dual norm
    sqrt(<r, (-Lap)^{-1} r>), the natural norm for a divergence-form
    residual; convergence is tol * (1 + dual norm of rhs).
    """
    dom = op.domain
    gamma = op.precondition_scale()

    def dual_norm(r: GridFunction) -> float:
        z = helmholtz_solve(dom, r.values, 0.0, 1.0)
        return float(np.sqrt(max(inner(GridFunction(dom, z), r), 0.0)))

    scale = 1.0 + dual_norm(rhs)
    alpha = op.data.diffusion.alpha
    beta = op.data.diffusion.beta
    m = op.monotonicity_margin_estimate() / gamma
    M = (beta + (0.5 * alpha if op.data.has_drift else 0.0)) / gamma + (
        op.drift_face_max() / gamma
    )
    rho_floor = max(1e-4, 0.9 * m / M**2)
    rho = 1.0
    u = x0.copy() if x0 is not None else grid.zeros(dom)
    r = GridFunction(dom, op.apply(u).values - rhs.values)
    rn = dual_norm(r)
    residuals = []
    streak = 0
    for it in range(1, max_iter + 1):
        residuals.append(rn)
        if rn <= tol * scale:
            return u, StationaryDiagnostics(it - 1, True, residuals)
        z = helmholtz_solve(dom, r.values, 0.0, gamma)
        while True:
            trial = GridFunction(dom, u.values - rho * z)
            r_trial = GridFunction(dom, op.apply(trial).values - rhs.values)
            rn_trial = dual_norm(r_trial)
            if rn_trial < rn or rn_trial <= tol * scale:
                break
            if rho <= rho_floor:
                raise ConvergenceError(
                    f"stationary solve stalled at dual residual {rn:.3e}",
                    last=u,
                    history=residuals,
                )
            rho = max(rho_floor, 0.5 * rho)
            streak = 0
        u, r, rn = trial, r_trial, rn_trial
        streak += 1
        if streak >= 3 and rho < 1.0:
            rho = min(1.0, 1.5 * rho)
            streak = 0
    if rn <= tol * scale:
        return u, StationaryDiagnostics(max_iter, True, residuals)
    raise ConvergenceError(
        f"stationary solve did not reach tol in {max_iter} iterations",
        last=u,
        history=residuals,
    )
