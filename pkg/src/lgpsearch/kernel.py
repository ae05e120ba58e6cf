"""Radially decreasing correlation kernels.

Every kernel here has the form ``Phi(x, y) = phi(||Theta (x - y)||_2)`` with a
diagonal lengthscale map ``Theta`` and a strictly decreasing radial profile
``phi`` that has a closed-form inverse.  Only the power-exponential profile
``phi(u) = exp(-u**p)`` is built in; ``p = 2`` is the separable Gaussian
correlation ``exp(-sum_j (x_j - y_j)**2 / theta_j)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when point dimensions do not match the kernel."""


class DegenerateThreshold(ValueError):
    """Raised by :func:`profile_inverse` for ``v <= 0``.

    Callers building a search radius treat this as an infinite radius.
    """


@dataclass(frozen=True)
class KernelSpec:
    lengthscales: tuple[float, ...]
    scale: float = 1.0
    power: float = 2.0
    _theta_diag: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ls = tuple(float(t) for t in self.lengthscales)
        if not ls:
            raise ValueError("at least one lengthscale is required")
        if any(not np.isfinite(t) or t <= 0 for t in ls):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.power > 0:
            raise ValueError(f"power must be positive, got {self.power}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "power", float(self.power))
        diag = 1.0 / np.sqrt(np.asarray(ls))
        diag.setflags(write=False)
        object.__setattr__(self, "_theta_diag", diag)

    @classmethod
    def gaussian(cls, lengthscales: Sequence[float] | float, dims: int | None = None,
                 scale: float = 1.0) -> "KernelSpec":
        if np.isscalar(lengthscales):
            if dims is None:
                raise ValueError("dims is required with a scalar lengthscale")
            lengthscales = [float(lengthscales)] * dims
        return cls(tuple(lengthscales), scale=scale, power=2.0)

    @property
    def dims(self) -> int:
        return len(self.lengthscales)

    @property
    def theta_diag(self) -> np.ndarray:
        """Diagonal of Theta; ``1/sqrt(theta_j)`` so that p=2 reproduces the Gaussian."""
        return self._theta_diag

    def inflated(self, factor: float) -> "KernelSpec":
        """Same kernel with every lengthscale multiplied by ``factor``."""
        return KernelSpec(tuple(t * factor for t in self.lengthscales), self.scale, self.power)

    def with_scale(self, scale: float) -> "KernelSpec":
        return KernelSpec(self.lengthscales, scale, self.power)

    def to_dict(self) -> dict:
        return {"kernel": "gaussian" if self.power == 2.0 else "power",
                "theta": list(self.lengthscales), "sigma2": self.scale, "power": self.power}

    def fingerprint(self) -> bytes:
        """32-byte digest identifying the correlation (scale excluded)."""
        payload = json.dumps({"theta": [repr(t) for t in self.lengthscales],
                              "power": repr(self.power)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).digest()

    # -- vectorised helpers working on Theta-scaled coordinates --------------

    def scale_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.dims:
            raise DimensionError(f"expected dimension {self.dims}, got {pts.shape[-1]}")
        return pts * self._theta_diag

    def profile(self, u):
        u = np.asarray(u, dtype=float)
        if self.power == 2.0:
            return np.exp(-u * u)
        return np.exp(-u ** self.power)

    def profile_sq(self, u2):
        """``phi`` as a function of the squared distance."""
        u2 = np.asarray(u2, dtype=float)
        if self.power == 2.0:
            return np.exp(-u2)
        return np.exp(-u2 ** (self.power / 2.0))

    def cross_scaled(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Correlation matrix between rows of two Theta-scaled point arrays."""
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        # accumulate coordinate by coordinate: each entry then depends only on
        # its own pair of rows, never on the block shape
        d2 = np.zeros((a.shape[0], b.shape[0]))
        for c in range(a.shape[1]):
            diff = a[:, c, None] - b[None, :, c]
            d2 += diff * diff
        return self.profile_sq(d2)

    def cross(self, a, b) -> np.ndarray:
        return self.cross_scaled(self.scale_points(np.atleast_2d(a)),
                                 self.scale_points(np.atleast_2d(b)))


def _check_pair(spec: KernelSpec, x, y):
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape[0] != spec.dims or y.shape[0] != spec.dims:
        raise DimensionError(
            f"expected dimension {spec.dims}, got {x.shape[0]} and {y.shape[0]}")
    return x, y


def mahalanobis_distance(spec: KernelSpec, x, y) -> float:
    """``||Theta (x - y)||_2``."""
    x, y = _check_pair(spec, x, y)
    return float(np.sqrt((((x - y) * spec.theta_diag) ** 2).sum()))


def correlation(spec: KernelSpec, x, y) -> float:
    x, y = _check_pair(spec, x, y)
    d2 = (((x - y) * spec.theta_diag) ** 2).sum()
    return float(spec.profile_sq(d2))


def profile_inverse(spec: KernelSpec, v: float) -> float:
    """Distance ``u`` with ``phi(u) = v``, i.e. ``(-log v)**(1/p)``."""
    if not v > 0:
        raise DegenerateThreshold(f"profile inverse undefined for v={v}")
    if v > 1:
        raise ValueError(f"correlation value must be <= 1, got {v}")
    t = max(-np.log(v), 0.0)
    if spec.power == 2.0:
        return float(np.sqrt(t))
    return float(t ** (1.0 / spec.power))
