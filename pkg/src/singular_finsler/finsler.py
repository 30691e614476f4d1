"""Finsler norms H on R^N, their derivatives, and the p-flux H^{p-1} grad H.

Three families are supported:

* ``euclidean``: H(xi) = |xi|
* ``ellipse``: H(xi) = sqrt(xi^T A xi) with A symmetric positive definite
* ``smoothed_q``: H(xi) = (sum_i (xi_i^2 + delta^2)^{q/2})^{1/q} - N^{1/q} delta

All array routines are vectorised over a leading axis: ``xi`` has shape
``(n, dim)`` (or ``(dim,)`` for a single vector).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = ("euclidean", "ellipse", "smoothed_q")


class SingularPointError(ValueError):
    """Raised when a derivative of H is requested at xi = 0."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so sampled constants are reproducible from (seed, n)."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class FinslerSpec:
    kind: str = "euclidean"
    dim: int = 2
    A: tuple[tuple[float, ...], ...] | None = None
    q: float = 2.0
    delta: float = 0.0
    _A: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if int(self.dim) < 1:
            raise ValueError("dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))
        if self.kind == "ellipse":
            if self.A is None:
                raise ValueError("ellipse norm needs a matrix A")
            A = np.array(self.A, dtype=float)
            if A.shape != (self.dim, self.dim):
                raise ValueError(f"A must be {self.dim}x{self.dim}, got {A.shape}")
            if not np.allclose(A, A.T, rtol=0, atol=1e-14 * np.abs(A).max()):
                raise ValueError("A must be symmetric")
            if np.linalg.eigvalsh(A).min() <= 0:
                raise ValueError("A must be positive definite")
            A.setflags(write=False)
            object.__setattr__(self, "A", tuple(tuple(float(v) for v in row) for row in A))
            object.__setattr__(self, "_A", A)
        if self.kind == "smoothed_q":
            if not self.q > 1:
                raise ValueError("q must be > 1")
            if self.delta < 0:
                raise ValueError("delta must be >= 0")

    # -- constructors -------------------------------------------------
    @classmethod
    def euclidean(cls, dim: int = 2) -> "FinslerSpec":
        return cls("euclidean", dim)

    @classmethod
    def ellipse(cls, A) -> "FinslerSpec":
        A = np.asarray(A, dtype=float)
        return cls("ellipse", A.shape[0], A=tuple(map(tuple, A)))

    @classmethod
    def smoothed_q(cls, q: float, delta: float = 0.0, dim: int = 2) -> "FinslerSpec":
        return cls("smoothed_q", dim, q=float(q), delta=float(delta))

    @property
    def approximate_homogeneous(self) -> bool:
        """True when H is only asymptotically 1-homogeneous (smoothed-q with delta > 0)."""
        return self.kind == "smoothed_q" and self.delta > 0

    @property
    def matrix(self) -> np.ndarray:
        if self.kind == "ellipse":
            return self._A
        return np.eye(self.dim)

    def bounds(self) -> tuple[float, float]:
        """Closed-form (alpha, beta) with alpha|xi| <= H(xi) <= beta|xi|."""
        if self.kind == "euclidean":
            return 1.0, 1.0
        if self.kind == "ellipse":
            ev = np.linalg.eigvalsh(self._A)
            return float(np.sqrt(ev[0])), float(np.sqrt(ev[-1]))
        # l^q bounds; for delta > 0 they hold only asymptotically
        c = self.dim ** (1.0 / self.q - 0.5)
        return (c, 1.0) if self.q >= 2 else (1.0, c)

    def grad_bound(self) -> float:
        """A constant K with |grad H| <= K away from the origin."""
        if self.kind == "euclidean":
            return 1.0
        if self.kind == "ellipse":
            return self.bounds()[1]
        # |grad H|_2 <= |grad H|_1 <= N^{1/q} for the l^q norm (dual norm is 1)
        return float(self.dim ** (1.0 - 1.0 / self.q)) if self.q < 2 else float(np.sqrt(self.dim))

    # -- serialisation ------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "dim": self.dim}
        if self.kind == "ellipse":
            d["A"] = [v for row in self.A for v in row]
        if self.kind == "smoothed_q":
            d["q"] = self.q
            d["delta"] = self.delta
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FinslerSpec":
        kind = d.get("kind", "euclidean")
        if kind == "ellipse":
            A = np.asarray(d["A"], dtype=float)
            dim = int(d.get("dim", A.shape[0] if A.ndim == 2 else round(np.sqrt(A.size))))
            if A.ndim == 1:
                A = A.reshape(dim, dim)
            return cls("ellipse", dim, A=tuple(map(tuple, A)))
        dim = int(d.get("dim", 2))
        if kind == "smoothed_q":
            return cls("smoothed_q", dim, q=float(d["q"]), delta=float(d.get("delta", 0.0)))
        return cls(kind, dim)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FinslerSpec":
        return cls.from_dict(json.loads(text))

    # -- vectorised kernels -------------------------------------------
    def _check(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of dimension {self.dim}, got shape {xi.shape}")
        return xi

    def value(self, xi) -> np.ndarray:
        xi = self._check(xi)
        if self.kind == "euclidean":
            return np.sqrt(np.einsum("...i,...i->...", xi, xi))
        if self.kind == "ellipse":
            quad = np.einsum("...i,ij,...j->...", xi, self._A, xi)
            return np.sqrt(np.maximum(quad, 0.0))
        q, dl = self.q, self.delta
        if dl == 0.0:
            ax = np.abs(xi)
            m = ax.max(axis=-1, keepdims=True)
            safe = np.where(m > 0, m, 1.0)
            return (m[..., 0]) * np.sum((ax / safe) ** q, axis=-1) ** (1.0 / q)
        s = xi * xi + dl * dl
        S = np.sum(s ** (q / 2.0), axis=-1)
        return np.maximum(S ** (1.0 / q) - self.dim ** (1.0 / q) * dl, 0.0)

    def grad(self, xi) -> np.ndarray:
        """grad H, with the value 0 at xi = 0 (callers handle the singular point)."""
        xi = self._check(xi)
        if self.kind in ("euclidean", "ellipse"):
            Axi = xi if self.kind == "euclidean" else xi @ self._A
            H = self.value(xi)
            safe = np.where(H > 0, H, 1.0)
            return np.where((H > 0)[..., None], Axi / safe[..., None], 0.0)
        q, dl = self.q, self.delta
        s = xi * xi + dl * dl
        S = np.sum(s ** (q / 2.0), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(s > 0, xi * s ** (q / 2.0 - 1.0), 0.0)
            Sp = np.where(S > 0, S ** (1.0 / q - 1.0), 0.0)
        out = g * Sp[..., None]
        zero = np.all(xi == 0, axis=-1)
        return np.where(zero[..., None], 0.0, out)

    def hessian(self, xi) -> np.ndarray:
        """Closed-form D^2 H (zero at xi = 0)."""
        xi = self._check(xi)
        n = self.dim
        if self.kind in ("euclidean", "ellipse"):
            A = np.eye(n) if self.kind == "euclidean" else self._A
            H = self.value(xi)
            safe = np.where(H > 0, H, 1.0)
            Axi = xi @ A
            # normalise first so tiny gradients do not underflow a cubed denominator
            nxi = Axi / safe[..., None]
            out = (A - np.einsum("...i,...j->...ij", nxi, nxi)) / safe[..., None, None]
            return np.where((H > 0)[..., None, None], out, 0.0)
        q, dl = self.q, self.delta
        s = xi * xi + dl * dl
        S = np.sum(s ** (q / 2.0), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            gS = np.where(s > 0, q * xi * s ** (q / 2.0 - 1.0), 0.0)
            dgS = np.where(s > 0, q * s ** (q / 2.0 - 2.0) * (s + (q - 2.0) * xi * xi), 0.0)
            c1 = np.where(S > 0, (1.0 / q) * (1.0 / q - 1.0) * S ** (1.0 / q - 2.0), 0.0)
            c2 = np.where(S > 0, (1.0 / q) * S ** (1.0 / q - 1.0), 0.0)
        out = c1[..., None, None] * np.einsum("...i,...j->...ij", gS, gS)
        out = out + c2[..., None, None] * (dgS[..., :, None] * np.eye(n))
        zero = np.all(xi == 0, axis=-1)
        return np.where(zero[..., None, None], 0.0, out)

    def flux(self, p: float, xi) -> np.ndarray:
        """a(xi) = H^{p-1}(xi) grad H(xi), extended by a(0) = 0."""
        if not p > 1:
            raise ValueError("p must be > 1")
        H = self.value(xi)
        return (H ** (p - 1.0))[..., None] * self.grad(xi)

    def flux_jacobian(self, p: float, xi, clamp: float = 1e-10) -> np.ndarray:
        """Da(xi) = (p-1) H^{p-2} gradH gradH^T + H^{p-1} D^2 H.

        For p < 2, vectors with |xi| < clamp are rescaled to length ``clamp`` so
        the coefficient stays bounded; a zero vector is replaced by clamp*e_1.
        """
        xi = np.array(self._check(xi), dtype=float, copy=True)
        if p < 2:
            nrm = np.linalg.norm(xi, axis=-1)
            small = nrm < clamp
            if np.any(small):
                e1 = np.zeros(self.dim)
                e1[0] = 1.0
                safe = np.where(nrm > 0, nrm, 1.0)
                rescaled = np.where((nrm > 0)[..., None], xi * (clamp / safe)[..., None], clamp * e1)
                xi = np.where(small[..., None], rescaled, xi)
        H = self.value(xi)
        g = self.grad(xi)
        D2 = self.hessian(xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = np.where(H > 0, (p - 1.0) * H ** (p - 2.0), 0.0)
        c2 = H ** (p - 1.0)
        return c1[..., None, None] * np.einsum("...i,...j->...ij", g, g) + c2[..., None, None] * D2


def evaluate(norm: FinslerSpec, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (norm.dim,):
        raise ValueError(f"xi must have shape ({norm.dim},), got {xi.shape}")
    return float(norm.value(xi))


def gradient(norm: FinslerSpec, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (norm.dim,):
        raise ValueError(f"xi must have shape ({norm.dim},), got {xi.shape}")
    if not np.any(xi):
        raise SingularPointError("grad H is undefined at xi = 0")
    return norm.grad(xi)


def flux(norm: FinslerSpec, p: float, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != norm.dim:
        raise ValueError(f"xi must have trailing dimension {norm.dim}")
    return norm.flux(p, xi)


def fd_hessian(norm: FinslerSpec, xi: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of H at a batch of points, step relative to |xi|."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    n, d = xi.shape
    hs = step * np.maximum(np.linalg.norm(xi, axis=1), 1e-300)
    out = np.empty((n, d, d))
    E = np.eye(d)
    H0 = norm.value(xi)
    for i in range(d):
        ei = hs[:, None] * E[i]
        out[:, i, i] = (norm.value(xi + ei) - 2 * H0 + norm.value(xi - ei)) / hs**2
        for j in range(i + 1, d):
            ej = hs[:, None] * E[j]
            v = (
                norm.value(xi + ei + ej)
                - norm.value(xi + ei - ej)
                - norm.value(xi - ei + ej)
                + norm.value(xi - ei - ej)
            ) / (4 * hs**2)
            out[:, i, j] = out[:, j, i] = v
    return out


@dataclass
class AssumptionReport:
    alpha_emp: float
    beta_emp: float
    min_tangential_hessian: float
    evenness_defect: float
    n_samples: int
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def sample_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def check_assumptions(norm: FinslerSpec, n_samples: int = 10_000, seed: int = 0) -> AssumptionReport:
    """Empirical constants for evenness, norm equivalence and uniform ellipticity.

    Samples are uniform on the Euclidean unit sphere.  The tangential Hessian is
    taken at the radial projection xi/H(xi) onto the unit sphere of H, where the
    uniform-ellipticity condition is stated, using central differences.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    xi = sample_sphere(make_rng(seed), n_samples, norm.dim)
    H = norm.value(xi)
    even = float(np.max(np.abs(H - norm.value(-xi))))
    on_ball = xi / H[:, None]
    D2 = fd_hessian(norm, on_ball, step=1e-5)
    g = norm.grad(on_ball)
    if norm.dim == 1:
        lam = math.inf
    else:
        # orthonormal basis of grad H^perp for each sample
        _, _, Vt = np.linalg.svd(g[:, None, :])
        Q = Vt[:, 1:, :]
        T = np.einsum("nai,nij,nbj->nab", Q, D2, Q)
        lam = float(np.min(np.linalg.eigvalsh(T)[:, 0]))
    return AssumptionReport(
        alpha_emp=float(H.min()),
        beta_emp=float(H.max()),
        min_tangential_hessian=lam,
        evenness_defect=even,
        n_samples=int(n_samples),
        seed=int(seed),
    )


@dataclass
class InequalityReport:
    p: float
    n_pairs: int
    seed: int
    c_mono: float
    c_lip: float
    c_conv: float
    min_mono_gap: float
    min_conv_gap: float
    skipped: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def sample_pairs(rng: np.random.Generator, n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Pairs with magnitudes spread log-uniformly over six decades; every 50th eta' is zero."""
    eta = rng.standard_normal((n, dim)) * 10.0 ** rng.uniform(-3, 3, (n, 1))
    etap = rng.standard_normal((n, dim)) * 10.0 ** rng.uniform(-3, 3, (n, 1))
    etap[::50] = 0.0
    return eta, etap


def verify_vector_inequalities(
    norm: FinslerSpec, p: float, n_pairs: int = 100_000, seed: int = 0
) -> InequalityReport:
    """Sampled ratios for the monotonicity, Lipschitz-type and convexity inequalities.

    c_mono = min [a(e)-a(e')].(e-e') / ((|e|+|e'|)^{p-2}|e-e'|^2)
    c_lip  = max |a(e)-a(e')| / ((|e|+|e'|)^{p-2}|e-e'|)
    c_conv = min gap / H^p(e-e')                        (p >= 2)
           = min gap / ([H(e)+H(e')]^{p-2} H^2(e-e'))    (p < 2)
    with gap = H^p(e) - H^p(e') - p H^{p-1}(e') gradH(e').(e-e').
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    eta, etap = sample_pairs(make_rng(seed), n_pairs, norm.dim)
    diff = eta - etap
    dn = np.linalg.norm(diff, axis=1)
    keep = dn > 0
    skipped = int(np.count_nonzero(~keep))
    eta, etap, diff, dn = eta[keep], etap[keep], diff[keep], dn[keep]

    a, ap = norm.flux(p, eta), norm.flux(p, etap)
    da = a - ap
    scale = (np.linalg.norm(eta, axis=1) + np.linalg.norm(etap, axis=1)) ** (p - 2.0)
    mono = np.einsum("ni,ni->n", da, diff)
    c_mono = mono / (scale * dn**2)
    c_lip = np.linalg.norm(da, axis=1) / (scale * dn)

    H, Hp, Hd = norm.value(eta), norm.value(etap), norm.value(diff)
    gap = H**p - Hp**p - p * np.einsum("ni,ni->n", ap, diff)
    if p >= 2:
        c_conv = gap / Hd**p
    else:
        c_conv = gap / ((H + Hp) ** (p - 2.0) * Hd**2)
    return InequalityReport(
        p=float(p),
        n_pairs=int(n_pairs),
        seed=int(seed),
        c_mono=float(c_mono.min()),
        c_lip=float(c_lip.max()),
        c_conv=float(c_conv.min()),
        min_mono_gap=float(mono.min()),
        min_conv_gap=float(gap.min()),
        skipped=skipped,
    )
