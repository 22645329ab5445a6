"""Fractional Calderon-Zygmund convolution kernels and smooth truncations.

Every kernel here is a function of the difference u = x - y, so the
truncated kernel is evaluated as ``kernel_of_difference(spec, trunc, u)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

FAMILIES = ("hilbert", "riesz", "fractional", "zero")


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str = "hilbert"
    alpha: float = 0.0
    dim: int = 1
    component: int = 0  # riesz direction j (0-based)
    transposed: bool = False  # K*(x, y) = K(y, x)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if not 0.0 <= self.alpha < self.dim:
            raise KernelError("need 0 <= alpha < n")
        if self.family == "hilbert" and self.dim != 1:
            raise KernelError("hilbert kernel is one-dimensional")
        if self.family == "riesz" and not 0 <= self.component < self.dim:
            raise KernelError("riesz component out of range")

    def adjoint(self) -> "KernelSpec":
        return KernelSpec(self.family, self.alpha, self.dim, self.component, not self.transposed)

    @property
    def odd(self) -> bool:
        return self.family in ("hilbert", "riesz")

    @property
    def ellipticity_direction(self) -> np.ndarray | None:
        if self.family == "zero":
            return None
        u = np.zeros(self.dim)
        u[self.component if self.family == "riesz" else 0] = 1.0
        return u

    @property
    def analytic_czc(self) -> dict[int, float]:
        """Plateau values of sup |grad^j K| |x-y|^{n+j-alpha} for j = 0, 1 (known cases)."""
        if self.family == "zero":
            return {0: 0.0, 1: 0.0}
        if self.family == "hilbert" and self.alpha == 0:
            return {0: 1.0, 1: 1.0, 2: 2.0}
        return {}

    def to_dict(self) -> dict:
        return {"family": self.family, "alpha": self.alpha, "dim": self.dim, "component": self.component,
                "transposed": self.transposed}


@dataclass(frozen=True)
class TruncationSpec:
    delta: float
    R: float
    kappa_s: int = 3

    def __post_init__(self):
        if not 0 < self.delta < self.R:
            raise KernelError("need 0 < delta < R")
        if self.kappa_s < 0:
            raise KernelError("smoothstep order must be >= 0")

    @classmethod
    def default(cls, grid, kappa: int = 2) -> "TruncationSpec":
        return cls(2.0 * grid.leaf_diameter, 2.0 * grid.root_diameter, kappa + 1)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "R": self.R, "kappa_s": self.kappa_s}


def smoothstep_coeffs(k: int) -> np.ndarray:
    """Power-basis coefficients of the degree 2k+1 smoothstep (ascending)."""
    c = np.zeros(2 * k + 2)
    for j in range(k + 1):
        c[k + 1 + j] = comb(k + j, j) * comb(2 * k + 1, k - j) * (-1) ** j
    return c


def smoothstep(x: np.ndarray, k: int) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return np.polynomial.polynomial.polyval(x, smoothstep_coeffs(k))


def eta(t: np.ndarray, trunc: TruncationSpec) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    d, R, k = trunc.delta, trunc.R, trunc.kappa_s
    return smoothstep((t - d) / d, k) * (1.0 - smoothstep((t - R) / R, k))


def raw_kernel(spec: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Untruncated K as a function of u = x - y, shape (..., dim). Zero at u = 0."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != spec.dim:
        raise KernelError("difference vectors have the wrong dimension")
    if spec.transposed:
        u = -u
    r = np.sqrt(np.sum(u * u, axis=-1))
    n, a = spec.dim, spec.alpha
    safe = np.where(r > 0, r, 1.0)
    if spec.family == "zero":
        return np.zeros(r.shape)
    if spec.family == "hilbert":
        # 1/(y - x) = -1/u, generalized to -sign(u) |u|^{alpha-1}
        val = -np.sign(u[..., 0]) * safe ** (a - 1.0)
    elif spec.family == "riesz":
        val = u[..., spec.component] * safe ** (a - n - 1.0)
    else:
        val = safe ** (a - n)
    return np.where(r > 0, val, 0.0)


def truncated_kernel(spec: KernelSpec, trunc: TruncationSpec, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    r = np.sqrt(np.sum(u * u, axis=-1))
    e = eta(r, trunc)
    out = np.zeros(r.shape)
    nz = e > 0
    if np.any(nz):
        out[nz] = e[nz] * raw_kernel(spec, u[nz])
    return out


def eval_truncated(spec: KernelSpec, trunc: TruncationSpec, x, y) -> float | np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if y.ndim == 0:
        y = y[None]
    val = truncated_kernel(spec, trunc, x - y)
    return float(val) if np.ndim(val) == 0 else val


def _directional_fd(func, x, y, j: int, h: float) -> np.ndarray:
    """All j-th order partials in x by nested central differences; returns flat array."""
    n = x.shape[-1]
    if j == 0:
        return np.atleast_1d(func(x, y))
    out = []
    for d in range(n):
        e = np.zeros(n)
        e[d] = h
        plus = _directional_fd(func, x + e, y, j - 1, h)
        minus = _directional_fd(func, x - e, y, j - 1, h)
        out.append((plus - minus) / (2 * h))
    return np.concatenate(out)


@dataclass
class CZEstimate:
    max_ratio: dict[int, float]
    plateau_ratio: dict[int, float]
    skipped: int
    n_pairs: int
    witness: dict[int, tuple] = field(default_factory=dict)


def verify_cz(spec: KernelSpec, trunc: TruncationSpec, pairs, j_max: int = 1, rel_step: float = 1e-3) -> CZEstimate:
    """Finite-difference estimate of sup |grad_x^j K_trunc| |x-y|^{n+j-alpha}.

    The j-th derivative tensor is measured in the Frobenius norm.  Pairs
    closer than 2*delta are skipped.  ``plateau_ratio`` only uses pairs with
    2 delta <= |x-y| <= R where the truncation is identically one.
    """
    n, a = spec.dim, spec.alpha
    f = lambda x, y: truncated_kernel(spec, trunc, (x - y)[None])[0]
    best = {j: 0.0 for j in range(j_max + 1)}
    plateau = {j: 0.0 for j in range(j_max + 1)}
    wit: dict[int, tuple] = {}
    skipped = 0
    pairs = list(pairs)
    for x, y in pairs:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        r = float(np.linalg.norm(x - y))
        if r < 2 * trunc.delta:
            skipped += 1
            continue
        h = rel_step * r
        on_plateau = r <= trunc.R
        for j in range(j_max + 1):
            g = _directional_fd(f, x, y, j, h)
            v = float(np.linalg.norm(g)) * r ** (n + j - a)
            if v > best[j]:
                best[j] = v
                wit[j] = (tuple(x), tuple(y))
            if on_plateau:
                plateau[j] = max(plateau[j], v)
    return CZEstimate(best, plateau, skipped, len(pairs), wit)


def ellipticity_constant(spec: KernelSpec, n_samples: int = 64, seed: int = 0) -> float:
    """min over sampled (x, t) of |K(x, x + t u0)| |t|^{n - alpha} (untruncated)."""
    u0 = spec.ellipticity_direction
    if u0 is None:
        return 0.0
    rng = np.random.default_rng(seed)
    t = rng.uniform(-2.0, 2.0, n_samples)
    t = t[np.abs(t) > 1e-3]
    u = -(t[:, None] * u0[None, :])  # x - y with y = x + t u0
    vals = np.abs(raw_kernel(spec, u)) * np.abs(t) ** (spec.dim - spec.alpha)
    return float(vals.min())


def kernel_from_dict(d: dict, dim: int) -> tuple[KernelSpec, dict | None]:
    extra = set(d) - {"family", "alpha", "component", "trunc"}
    if extra:
        raise KernelError(f"unknown kernel keys {sorted(extra)}")
    fam = d.get("family", "hilbert")
    comp = 0
    if fam.startswith("riesz"):
        suffix = fam[len("riesz"):].lstrip("_")
        comp = int(suffix) - 1 if suffix else int(d.get("component", 1)) - 1
        fam = "riesz"
    spec = KernelSpec(fam, float(d.get("alpha", 0.0)), dim, comp)
    return spec, d.get("trunc")
