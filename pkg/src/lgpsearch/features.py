"""Nyström eigen-features, feature-space residuals and the cone test.

With ``U(t)`` the D-dimensional feature vector of ``t`` (so that
``U(s)'U(t)`` approximates ``Phi(s, t)``), the variance reduction of a
candidate ``u`` is approximately ``||C(x)||^2 cos^2(angle(C(x), C(u)))`` where
``C(t)`` is the part of ``U(t)`` orthogonal to the span of the sub-design's
features.  Candidates whose residual points too far away from ``C(x)`` cannot
reach a given reduction and are dropped by :func:`cone_filter`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernel import KernelSpec
from .localgp import Dataset

MAGIC = b"LGPF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQII32s")
RESIDUAL_TOL = 1e-10
INELIGIBLE_NORM2 = 1e-12  # squared residual norm; rounding noise sits far below
_BLOCK = 4096


class InsufficientRank(ValueError):
    """The landmark Gram matrix has fewer than D positive eigenvalues; reduce D."""


class KernelMismatch(ValueError):
    pass


@dataclass(eq=False)
class FeatureMap:
    spec: KernelSpec
    eigenvalues: np.ndarray        # (D,) landmark Gram eigenvalues, descending
    landmarks: np.ndarray          # (m,) dataset row indices
    landmark_vectors: np.ndarray   # (m, D) Gram eigenvectors
    landmark_scaled: np.ndarray    # (m, d) Theta-scaled landmark points
    features: np.ndarray           # (D, N) U(X_N)
    kernel_hash: bytes
    reconstruction_error: float = math.nan

    @property
    def n_features(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_points(self) -> int:
        return self.features.shape[1]

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[0]

    def check_kernel(self, spec: KernelSpec):
        if spec.fingerprint() != self.kernel_hash:
            raise KernelMismatch("feature map was built for a different kernel")

    def transform_scaled(self, scaled_points) -> np.ndarray:
        """``U(t)`` for Theta-scaled points, returned as a D x n matrix."""
        pts = np.atleast_2d(np.asarray(scaled_points, dtype=float))
        out = np.empty((self.n_features, pts.shape[0]))
        w = self.landmark_vectors / np.sqrt(self.eigenvalues)
        for s in range(0, pts.shape[0], _BLOCK):
            k = self.spec.cross_scaled(self.landmark_scaled, pts[s:s + _BLOCK])
            out[:, s:s + _BLOCK] = w.T @ k
        return out

    def transform(self, points) -> np.ndarray:
        return self.transform_scaled(self.spec.scale_points(np.atleast_2d(points)))

    def measure_error(self, data: Dataset, pairs: int = 1000, seed: int = 0) -> float:
        """Max-abs error of ``U(a)'U(b)`` against the kernel over sampled dataset pairs."""
        rng = np.random.default_rng(seed)
        n = data.n_rows
        a = rng.integers(0, n, pairs)
        b = rng.integers(0, n, pairs)
        approx = np.einsum("ij,ij->j", self.features[:, a], self.features[:, b])
        xs = self.spec.scale_points(data.inputs)
        exact = self.spec.profile_sq(((xs[a] - xs[b]) ** 2).sum(axis=1))
        return float(np.abs(approx - exact).max())

    # -- binary sidecar ------------------------------------------------------

    def save(self, path):
        """Write the little-endian ``LGPF`` sidecar.

        Layout: header, eigenvalues (f64 x D), features (f64, D x N row-major),
        then the landmark row indices (u64 x m) needed to featurise new points.
        """
        path = Path(path)
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, self.n_points, self.n_features,
                                  self.n_landmarks, self.kernel_hash))
            fh.write(self.eigenvalues.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
            fh.write(self.landmarks.astype("<u8").tobytes())

    @classmethod
    def load(cls, path, spec: KernelSpec, data: Dataset) -> "FeatureMap":
        raw = Path(path).read_bytes()
        magic, version, n, dfeat, m, khash = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a feature sidecar")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported sidecar version {version}")
        if khash != spec.fingerprint():
            raise KernelMismatch(f"{path}: built for a different kernel")
        if n != data.n_rows:
            raise ValueError(f"{path}: sidecar has {n} points, dataset has {data.n_rows}")
        off = _HEADER.size
        eig = np.frombuffer(raw, "<f8", dfeat, off).astype(float)
        off += 8 * dfeat
        feats = np.frombuffer(raw, "<f8", dfeat * n, off).astype(float).reshape(dfeat, n)
        off += 8 * dfeat * n
        lm = np.frombuffer(raw, "<u8", m, off).astype(int)
        xs = spec.scale_points(data.inputs)
        # U(landmarks) = sqrt(lambda) * V, so the eigenvectors come back from the features
        vecs = (feats[:, lm] / np.sqrt(eig)[:, None]).T
        fmap = cls(spec, eig, lm, vecs, xs[lm], feats, bytes(khash))
        return fmap


def nystrom_build(spec: KernelSpec, data: Dataset, n_features: int,
                  n_landmarks: int | None = None, seed: int = 0,
                  error_pairs: int = 1000) -> FeatureMap:
    """Rank-D Nyström feature map from ``m`` uniformly sampled landmarks.

    ``m`` defaults to ``min(N, ceil(1.2 D))``; ``m == N`` uses every row
    and gives the exact eigen-decomposition of the full Gram matrix.
    """
    n = data.n_rows
    if n_landmarks is None:
        n_landmarks = min(n, math.ceil(1.2 * n_features))
    if not 1 <= n_features <= n_landmarks <= n:
        raise ValueError(f"need 1 <= D ({n_features}) <= m ({n_landmarks}) <= N ({n})")
    if n_landmarks == n:
        lm = np.arange(n)
    else:
        lm = np.sort(np.random.default_rng(seed).choice(n, n_landmarks, replace=False))
    xs = spec.scale_points(data.inputs)
    lxs = xs[lm]
    gram = spec.cross_scaled(lxs, lxs)
    vals, vecs = np.linalg.eigh(gram)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    floor = vals[0] * n_landmarks * np.finfo(float).eps
    if vals[n_features - 1] <= floor:
        rank = int((vals > floor).sum())
        raise InsufficientRank(f"only {rank} positive landmark eigenvalues for D={n_features}")
    vals = vals[:n_features].copy()
    vecs = np.ascontiguousarray(vecs[:, :n_features])
    fmap = FeatureMap(spec, vals, lm, vecs, lxs, np.empty((n_features, 0)), spec.fingerprint())
    fmap.features = fmap.transform_scaled(xs)
    if error_pairs:
        fmap.reconstruction_error = fmap.measure_error(data, error_pairs, seed)
    return fmap


class ResidualProjector:
    """Orthonormal basis of span U(X_j), grown one Gram-Schmidt step at a time."""

    def __init__(self, n_features: int, kernel_hash: bytes = b""):
        self.basis = np.zeros((n_features, 0))
        self.stage = 0
        self.kernel_hash = kernel_hash

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def residual(self, t: np.ndarray) -> np.ndarray:
        """``C(t) = t - Q Q' t`` for a D-vector or a D x n block."""
        if self.rank == 0:
            return np.array(t, dtype=float)
        q = self.basis
        r = t - q @ (q.T @ t)
        return r - q @ (q.T @ r)

    def extend(self, new_point_features: np.ndarray) -> "ResidualProjector":
        u = np.asarray(new_point_features, dtype=float).reshape(-1)
        r = self.residual(u)
        nr = float(np.linalg.norm(r))
        if nr > RESIDUAL_TOL:
            self.basis = np.hstack([self.basis, (r / nr)[:, None]])
        self.stage += 1
        return self

    def project_matrix(self) -> np.ndarray:
        """Dense ``G = I - Q Q'`` (tests and LSH plane projection only)."""
        d = self.basis.shape[0]
        return np.eye(d) - self.basis @ self.basis.T


def residual_extend(proj: ResidualProjector, new_point_features) -> ResidualProjector:
    return proj.extend(new_point_features)


def approx_reduction(cx: np.ndarray, cu: np.ndarray) -> np.ndarray | float:
    """``(cx'cu)^2 / ||cu||^2`` per candidate column; ``nan`` when ``||cu||`` is ~0."""
    cu = np.asarray(cu, dtype=float)
    if cu.ndim == 1:
        n2 = float(cu @ cu)
        if not n2 > INELIGIBLE_NORM2:
            return math.nan
        return float((cx @ cu) ** 2 / n2)
    n2 = np.einsum("ij,ij->j", cu, cu)
    dots = cx @ cu
    out = np.full(n2.shape, np.nan)
    ok = n2 > INELIGIBLE_NORM2
    out[ok] = dots[ok] ** 2 / n2[ok]
    return out


def cone_filter(cx: np.ndarray, cu: np.ndarray, delta: float) -> np.ndarray:
    """Column positions of ``cu`` with ``cos^2(angle) >= delta / ||cx||^2``.

    Equivalent to approximate reduction ``>= delta``.  Returns an empty array
    when ``delta > ||cx||^2`` since no direction can then reach ``delta``.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    cu = np.atleast_2d(np.asarray(cu, dtype=float))
    if delta > float(cx @ cx):
        return np.zeros(0, dtype=int)
    red = approx_reduction(cx, cu)
    return np.flatnonzero(red >= delta)


def cone_half_angle(cx: np.ndarray, delta: float) -> float:
    """Half-angle of the cone ``cos^2 >= delta / ||cx||^2`` (pi/2 when delta is 0)."""
    c2 = float(cx @ cx)
    if c2 <= 0 or delta > c2:
        return 0.0
    return float(math.acos(math.sqrt(max(delta, 0.0) / c2)))


class LshIndex:
    """Random-hyperplane hash tables over projected features ``G_j U(y)``.

    Each of ``tables`` tables holds ``bits`` hyperplanes ``r``; a point's key
    is the bit pattern ``[r'G_j U(y) >= 0]``.  Queries accept stored keys
    within a Hamming radius derived from the query cone, across all tables.
    Keys were computed at stage :attr:`generation` and are only refreshed
    once they lag by more than ``staleness`` stages.
    """

    def __init__(self, fmap: FeatureMap, proj: ResidualProjector | None = None,
                 tables: int = 12, bits: int = 16, seed: int = 0, staleness: int = 5):
        if not 1 <= bits <= 63:
            raise ValueError("bits must be in 1..63")
        if proj is not None and proj.kernel_hash and proj.kernel_hash != fmap.kernel_hash:
            raise KernelMismatch("projector and feature map use different kernels")
        self.fmap = fmap
        self.tables = int(tables)
        self.bits = int(bits)
        self.seed = seed
        self.staleness = staleness
        self.kernel_hash = fmap.kernel_hash
        rng = np.random.default_rng(seed)
        self.planes = rng.standard_normal((self.tables * self.bits, fmap.n_features))
        self._weights = (1 << np.arange(self.bits, dtype=np.uint64)).astype(np.uint64)
        self.rehash(proj)

    def copy(self) -> "LshIndex":
        other = object.__new__(LshIndex)
        other.__dict__.update(self.__dict__)
        return other

    def _keys(self, projected: np.ndarray) -> np.ndarray:
        """Pack sign bits of an (L*b) x n projection into an L x n key array."""
        signs = (projected >= 0).reshape(self.tables, self.bits, -1).astype(np.uint64)
        return np.einsum("tbn,b->tn", signs, self._weights).astype(np.uint64)

    def rehash(self, proj: ResidualProjector | None):
        if proj is None or proj.rank == 0:
            self.proj_planes = self.planes
            self.generation = 0 if proj is None else proj.stage
        else:
            q = proj.basis
            self.proj_planes = self.planes - (self.planes @ q) @ q.T
            self.generation = proj.stage
        keys = self._keys(self.proj_planes @ self.fmap.features)
        self._bucket_keys, self._bucket_members = [], []
        for t in range(self.tables):
            order = np.argsort(keys[t], kind="stable")
            ks = keys[t][order]
            uniq, starts = np.unique(ks, return_index=True)
            self._bucket_keys.append(uniq)
            self._bucket_members.append((order, np.append(starts, ks.shape[0])))
        return self

    def refresh(self, proj: ResidualProjector) -> bool:
        if proj.stage - self.generation > self.staleness:
            self.rehash(proj)
            return True
        return False

    def allowed_mismatches(self, max_angle: float) -> int:
        return min(self.bits, int(math.ceil(self.bits * max_angle / math.pi)))

    def query(self, vec: np.ndarray, max_angle: float) -> np.ndarray:
        """Indexed points whose key is within the cone's Hamming budget in any table."""
        qkeys = self._keys(self.proj_planes @ np.asarray(vec, dtype=float).reshape(-1, 1))[:, 0]
        allow = self.allowed_mismatches(max_angle)
        hit = np.zeros(self.fmap.n_points, dtype=bool)
        for t in range(self.tables):
            uniq = self._bucket_keys[t]
            dist = np.bitwise_count(np.bitwise_xor(uniq, qkeys[t]))
            order, bounds = self._bucket_members[t]
            for b in np.flatnonzero(dist <= allow):
                hit[order[bounds[b]:bounds[b + 1]]] = True
        return np.flatnonzero(hit)


def lsh_build(fmap: FeatureMap, proj: ResidualProjector | None = None, tables: int = 12,
              bits: int = 16, seed: int = 0) -> LshIndex:
    return LshIndex(fmap, proj, tables, bits, seed)


def lsh_query(idx: LshIndex, query: np.ndarray, max_angle: float) -> np.ndarray:
    return idx.query(query, max_angle)
