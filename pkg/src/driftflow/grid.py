"""Uniform tensor grids with node-centered unknowns and staggered fluxes.

Scalar unknowns live on the interior nodes of a box domain and carry a
homogeneous Dirichlet boundary (the boundary layer is never stored).  Flux
components live on the faces between consecutive nodes along each axis,
including the two half-faces touching the boundary.  With trapezoidal
quadrature weights this makes the discrete divergence the exact negative
adjoint of the discrete gradient,

    inner(divergence(q), v) == -inner_vec(q, gradient(v)),

so `-divergence(gradient(u))` is the standard (2d+1)-point Dirichlet
Laplacian and monotonicity arguments carry over to the grid verbatim.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache, reduce
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.sparse


class ConvergenceError(RuntimeError):
    """Iteration failed to reach tolerance.  Carries the last iterate."""

    def __init__(self, message, last=None, history=None):
        super().__init__(message)
        self.last = last
        self.history = list(history) if history is not None else []


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box (0, L_1) x ... x (0, L_N) split into uniform cells."""

    dim: int
    lengths: tuple[float, ...]
    cells: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        object.__setattr__(self, "cells", tuple(int(n) for n in self.cells))
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if len(self.lengths) != self.dim or len(self.cells) != self.dim:
            raise ValueError("lengths and cells must match dim")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("lengths must be positive")
        if any(n < 2 for n in self.cells):
            raise ValueError("need at least 2 cells per axis")

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.cells))

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.cells)

    @property
    def interior_count(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def node_weight(self) -> float:
        """Quadrature weight carried by every interior node."""
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def face_shape(self, axis: int) -> tuple[int, ...]:
        shape = list(self.interior_shape)
        shape[axis] = self.cells[axis]
        return tuple(shape)


@lru_cache(maxsize=64)
def node_coordinates(domain: BoxDomain) -> tuple[np.ndarray, ...]:
    """Open (broadcastable) meshgrid of interior node positions."""
    axes = [h * np.arange(1, n) for h, n in zip(domain.spacing, domain.cells)]
    return tuple(np.meshgrid(*axes, indexing="ij", sparse=True))


@lru_cache(maxsize=64)
def face_coordinates(domain: BoxDomain, axis: int) -> tuple[np.ndarray, ...]:
    """Open meshgrid of face positions for one flux component.

    Along `axis` the positions are the cell midpoints (k + 1/2) h; along
    every other axis they coincide with the interior nodes.
    """
    axes = []
    for a, (h, n) in enumerate(zip(domain.spacing, domain.cells)):
        if a == axis:
            axes.append(h * (np.arange(n) + 0.5))
        else:
            axes.append(h * np.arange(1, n))
    return tuple(np.meshgrid(*axes, indexing="ij", sparse=True))


@dataclass(frozen=True)
class GridFunction:
    """Real field on the interior nodes of a box, zero on the boundary."""

    domain: BoxDomain
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.domain.interior_shape:
            raise ValueError(
                f"values shape {vals.shape} does not match interior "
                f"shape {self.domain.interior_shape}"
            )
        object.__setattr__(self, "values", vals)

    def copy(self) -> "GridFunction":
        return GridFunction(self.domain, self.values.copy())

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _check_same_domain(self, other)
        return GridFunction(self.domain, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _check_same_domain(self, other)
        return GridFunction(self.domain, self.values - other.values)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.domain, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.domain, -self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass(frozen=True)
class VectorField:
    """Flux field with one staggered component per axis."""

    domain: BoxDomain
    components: tuple[np.ndarray, ...]

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(comps) != self.domain.dim:
            raise ValueError("component count must equal the dimension")
        for a, c in enumerate(comps):
            if c.shape != self.domain.face_shape(a):
                raise ValueError(
                    f"component {a} has shape {c.shape}, expected "
                    f"{self.domain.face_shape(a)}"
                )
        object.__setattr__(self, "components", comps)

    def __add__(self, other: "VectorField") -> "VectorField":
        if self.domain != other.domain:
            raise ValueError("domain mismatch")
        return VectorField(
            self.domain,
            tuple(a + b for a, b in zip(self.components, other.components)),
        )

    def __sub__(self, other: "VectorField") -> "VectorField":
        if self.domain != other.domain:
            raise ValueError("domain mismatch")
        return VectorField(
            self.domain,
            tuple(a - b for a, b in zip(self.components, other.components)),
        )

    def __mul__(self, c: float) -> "VectorField":
        return VectorField(self.domain, tuple(v * float(c) for v in self.components))

    __rmul__ = __mul__


def _check_same_domain(u: GridFunction, v: GridFunction) -> None:
    if u.domain != v.domain:
        raise ValueError("grid functions live on different domains")


def zeros(domain: BoxDomain) -> GridFunction:
    return GridFunction(domain, np.zeros(domain.interior_shape))


def sample(domain: BoxDomain, fn) -> GridFunction:
    """Sample `fn(coords)` at the interior nodes; coords is a meshgrid tuple."""
    vals = np.broadcast_to(fn(node_coordinates(domain)), domain.interior_shape)
    return GridFunction(domain, np.array(vals, dtype=float))


def gradient(u: GridFunction) -> VectorField:
    """Staggered first differences with zero boundary ghosts.

    Component a at face k+1/2 is (u_{k+1} - u_k)/h_a, second-order accurate
    at the face midpoint.
    """
    comps = []
    for a, h in enumerate(u.domain.spacing):
        comps.append(np.diff(u.values, axis=a, prepend=0.0, append=0.0) / h)
    return VectorField(u.domain, tuple(comps))


def divergence(q: VectorField) -> GridFunction:
    """Discrete divergence; exact negative adjoint of `gradient`."""
    out = np.zeros(q.domain.interior_shape)
    for a, h in enumerate(q.domain.spacing):
        out += np.diff(q.components[a], axis=a) / h
    return GridFunction(q.domain, out)


def inner(u: GridFunction, v: GridFunction) -> float:
    """Quadrature-weighted L2 pairing of two node fields."""
    _check_same_domain(u, v)
    return u.domain.node_weight * float(np.vdot(u.values, v.values))


def inner_vec(p: VectorField, q: VectorField) -> float:
    """L2 pairing of two flux fields (same face weights as `inner`)."""
    if p.domain != q.domain:
        raise ValueError("vector fields live on different domains")
    w = p.domain.node_weight
    return w * float(
        sum(np.vdot(a, b) for a, b in zip(p.components, q.components))
    )

def norm_l2(u: GridFunction) -> float:
    return float(np.sqrt(max(inner(u, u), 0.0)))


def norm_h1(u: GridFunction) -> float:
    """H1 seminorm: L2 norm of the staggered gradient."""
    g = gradient(u)
    return float(np.sqrt(max(inner_vec(g, g), 0.0)))


def laplacian(u: GridFunction) -> GridFunction:
    """Positive Dirichlet Laplacian, -div(grad u)."""
    g = gradient(u)
    return GridFunction(u.domain, -divergence(g).values)


def laplacian_matrix(domain: BoxDomain) -> scipy.sparse.csr_matrix:
    """Assembled sparse -Laplacian, row-major node ordering.

    Kept for cross-checks against the matrix-free operators; the solvers
    themselves never assemble it.
    """
    blocks = []
    for h, n in zip(domain.spacing, domain.cells):
        m = n - 1
        ones = np.ones(m)
        blocks.append(
            scipy.sparse.spdiags([-ones, 2 * ones, -ones], [-1, 0, 1], m, m) / h**2
        )
    eyes = [scipy.sparse.eye(n - 1, format="csr") for n in domain.cells]
    total = None
    for a, B in enumerate(blocks):
        factors = [B if i == a else eyes[i] for i in range(domain.dim)]
        term = reduce(scipy.sparse.kron, factors)
        total = term if total is None else total + term
    return total.tocsr()


@lru_cache(maxsize=64)
def laplacian_symbol(domain: BoxDomain) -> np.ndarray:
    """Eigenvalues of the discrete Dirichlet Laplacian on the sine basis."""
    axes = []
    for h, n in zip(domain.spacing, domain.cells):
        k = np.arange(1, n)
        axes.append((4.0 / h**2) * np.sin(k * np.pi / (2 * n)) ** 2)
    return reduce(np.add.outer, axes) if len(axes) > 1 else axes[0]


def smallest_eigenvalue_exact(domain: BoxDomain) -> float:
    """Closed-form smallest eigenvalue of the discrete Dirichlet Laplacian."""
    return float(
        sum(
            (4.0 / h**2) * np.sin(np.pi / (2 * n)) ** 2
            for h, n in zip(domain.spacing, domain.cells)
        )
    )


def helmholtz_solve(
    domain: BoxDomain, rhs: np.ndarray, shift: float, scale: float = 1.0
) -> np.ndarray:
    """Solve (shift*I + scale*(-Laplacian)) x = rhs by sine-transform diagonalization.

    Exact up to roundoff on the uniform grid; used directly for
    constant-coefficient solves and as the preconditioner everywhere else.
    """
    sym = shift + scale * laplacian_symbol(domain)
    hat = scipy.fft.dstn(rhs, type=1, norm="ortho")
    hat /= sym
    return scipy.fft.idstn(hat, type=1, norm="ortho")


def conjugate_gradient(
    apply_op,
    b: np.ndarray,
    *,
    tol: float = 1e-12,
    max_iter: int = 2000,
    precond=None,
    x0: np.ndarray | None = None,
):
    """Matrix-free preconditioned CG for an SPD operator on node arrays.

    Returns (x, iterations).  `apply_op` and `precond` map arrays to arrays;
    convergence is on the 2-norm of the residual relative to `b`.
    """
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_op(x)
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, max_iter + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it - 1
        Ap = apply_op(p)
        alpha = rz / float(np.vdot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        z = precond(r) if precond is not None else r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * bnorm:
        return x, max_iter
    raise ConvergenceError(
        f"CG did not reach tol={tol} in {max_iter} iterations",
        last=x,
        history=[float(np.linalg.norm(r))],
    )


def poincare_constant(domain: BoxDomain, tol: float = 1e-10, max_iter: int = 500) -> float:
    """Discrete Poincare constant 1/lambda_1 by inverse power iteration.

    lambda_1 is the smallest eigenvalue of -Laplacian with zero Dirichlet
    data; each inverse application solves a Poisson problem by CG with the
    sine-transform preconditioner.  Raises ConvergenceError (carrying the
    last iterate) if the Rayleigh quotient has not settled to relative
    tolerance `tol` within `max_iter` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    apply_lap = lambda x: laplacian(GridFunction(domain, x)).values
    precond = lambda r: helmholtz_solve(domain, r, 0.0, 1.0)
    v = np.ones(domain.interior_shape)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    history = []
    for _ in range(max_iter):
        y, _ = conjugate_gradient(apply_lap, v, tol=1e-13, precond=precond)
        y /= np.linalg.norm(y)
        gy = GridFunction(domain, y)
        lam = inner_vec(gradient(gy), gradient(gy)) / inner(gy, gy)
        history.append(lam)
        if abs(lam - lam_prev) <= tol * abs(lam):
            return 1.0 / lam
        lam_prev = lam
        v = y
    raise ConvergenceError(
        f"inverse power iteration did not converge in {max_iter} sweeps",
        last=1.0 / lam_prev,
        history=history,
    )


_BINARY_MAGIC = b"GFB1"


def save_grid_function(path, u: GridFunction, fmt: str | None = None) -> Path:
    """Write a grid function to disk.

    csv: a text header (dim, cells, lengths) followed by row-major values,
    one per line.  bin: the same header packed as int64/float64 followed by
    raw little-endian float64 values.
    """
    path = Path(path)
    if fmt is None:
        fmt = "bin" if path.suffix in (".bin", ".gfb") else "csv"
    d = u.domain
    if fmt == "csv":
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"dim,{d.dim}\n")
            f.write("cells," + ",".join(str(n) for n in d.cells) + "\n")
            f.write("lengths," + ",".join(repr(L) for L in d.lengths) + "\n")
            for x in u.values.ravel(order="C"):
                f.write(repr(float(x)) + "\n")
    elif fmt == "bin":
        with open(path, "wb") as f:
            f.write(_BINARY_MAGIC)
            f.write(struct.pack("<q", d.dim))
            f.write(struct.pack(f"<{d.dim}q", *d.cells))
            f.write(struct.pack(f"<{d.dim}d", *d.lengths))
            f.write(u.values.astype("<f8").tobytes(order="C"))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def load_grid_function(path) -> GridFunction:
    """Read a grid function written by `save_grid_function`."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == _BINARY_MAGIC:
        with open(path, "rb") as f:
            f.read(4)
            (dim,) = struct.unpack("<q", f.read(8))
            cells = struct.unpack(f"<{dim}q", f.read(8 * dim))
            lengths = struct.unpack(f"<{dim}d", f.read(8 * dim))
            domain = BoxDomain(dim, lengths, cells)
            count = domain.interior_count
            vals = np.frombuffer(f.read(8 * count), dtype="<f8", count=count)
        return GridFunction(domain, vals.reshape(domain.interior_shape))
    lines = path.read_text(encoding="utf-8").splitlines()
    header = {}
    for line in lines[:3]:
        key, _, rest = line.partition(",")
        header[key] = rest.split(",")
    dim = int(header["dim"][0])
    cells = tuple(int(x) for x in header["cells"])
    lengths = tuple(float(x) for x in header["lengths"])
    domain = BoxDomain(dim, lengths, cells)
    vals = np.array([float(x) for x in lines[3:] if x.strip()], dtype=float)
    return GridFunction(domain, vals.reshape(domain.interior_shape))
