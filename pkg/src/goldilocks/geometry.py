"""Random sparse projections, layer metric, charts and shell initializations.

A chart maps low-dimensional coordinates ``theta`` into the full parameter
space.  Two kinds exist:

* ``hyperplane``: ``x = P + eta * (M @ theta)``.
* ``sphere``: work in metric-normalized coordinates ``z = x / eta``; move along
  the hyperplane ``z0 + M theta`` and project back onto the sphere of radius
  ``|z0|``.  The result is a d-dimensional sphere through ``P``.

The metric ``eta`` is the per-element initialization scale of each layer
times ``sqrt(D)``, so a unit step along any (unit-norm, uniformly scattered)
column displaces every layer by about one layer shell radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .autodiff import NetworkArchitecture
from .errors import ConfigurationError, DegeneratePointError, InputError

CHART_KINDS = ("hyperplane", "sphere")
SCHEMES = ("xavier", "he")
DESCRIPTOR_VERSION = 1


# ---------------------------------------------------------------------------
# projections


@dataclass(frozen=True)
class NnzLaw:
    """How many nonzeros each projection column gets.

    ``kind="uniform_fraction"`` draws ``n`` uniformly from the integers in
    ``[ceil(D * low), ceil(D * high)]``; ``kind="fixed"`` always uses ``n``.
    """

    kind: str = "uniform_fraction"
    low: float = 1 / 200
    high: float = 1 / 20
    n: int = 1

    def bounds(self, D: int) -> tuple[int, int]:
        if self.kind == "fixed":
            lo = hi = int(self.n)
        elif self.kind == "uniform_fraction":
            if not 0 < self.low <= self.high:
                raise InputError(f"bad nnz fractions low={self.low} high={self.high}")
            lo, hi = math.ceil(D * self.low), math.ceil(D * self.high)
        else:
            raise InputError(f"unknown nnz law {self.kind!r}")
        if lo < 1:
            raise InputError("nnz law must give at least one nonzero per column")
        if hi > D:
            raise InputError(f"nnz law yields n={hi} > D={D}")
        return lo, hi

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "n": int(self.n)}
        return {"kind": self.kind, "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, data) -> "NnzLaw":
        if data is None:
            return cls()
        if isinstance(data, NnzLaw):
            return data
        return cls(**data)


@dataclass(frozen=True)
class ProjectionMatrix:
    """``D x d`` matrix of unit-norm columns stored in CSC form."""

    matrix: sp.csc_matrix = field(repr=False)
    nnz_per_column: tuple[int, ...]
    max_overlap: float
    seed: int | None = None

    @property
    def D(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_dense(cls, columns) -> "ProjectionMatrix":
        columns = np.asarray(columns, dtype=np.float64)
        if columns.ndim != 2:
            raise InputError("expected a D x d matrix")
        mat = sp.csc_matrix(columns)
        return cls(mat, tuple(int(k) for k in np.diff(mat.indptr)), _max_overlap(mat))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def gram(self) -> np.ndarray:
        return (self.matrix.T @ self.matrix).toarray()

    def __matmul__(self, theta):
        return self.matrix @ np.asarray(theta, dtype=np.float64)

    def rmatvec(self, g) -> np.ndarray:
        return self.matrix.T @ np.asarray(g, dtype=np.float64)


def _max_overlap(mat) -> float:
    if mat.shape[1] < 2:
        return 0.0
    gram = (mat.T @ mat).toarray()
    np.fill_diagonal(gram, 0.0)
    return float(np.abs(gram).max())


def build_projection(D: int, d: int, nnz_law: NnzLaw | dict | None = None, seed: int = 0,
                     overlap_bound: float | None = 0.1, max_attempts: int = 20) -> ProjectionMatrix:
    """Random sparse projection with entries ``+-1/sqrt(n_k)``.

    Columns are redrawn (deterministically, from the same seed) when the largest
    off-diagonal inner product exceeds ``overlap_bound``.
    """
    D, d = int(D), int(d)
    if D < 1 or d < 0:
        raise InputError(f"need D >= 1 and d >= 0, got D={D}, d={d}")
    if d > D:
        raise InputError(f"subspace dimension d={d} exceeds D={D}")
    law = NnzLaw.from_dict(nnz_law)
    lo, hi = law.bounds(D)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([int(seed), attempt])
        counts = rng.integers(lo, hi + 1, size=d)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        rows = np.empty(indptr[-1], dtype=np.int64)
        vals = np.empty(indptr[-1])
        for j, n in enumerate(counts):
            rows[indptr[j]:indptr[j + 1]] = np.sort(rng.choice(D, size=n, replace=False))
            signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
            vals[indptr[j]:indptr[j + 1]] = signs / math.sqrt(n)
        mat = sp.csc_matrix((vals, rows, indptr), shape=(D, d))
        overlap = _max_overlap(mat)
        if overlap_bound is None or overlap <= overlap_bound:
            return ProjectionMatrix(mat, tuple(int(c) for c in counts), overlap, int(seed))
    raise InputError(
        f"could not draw {d} columns in D={D} with overlap <= {overlap_bound} "
        f"after {max_attempts} attempts (last {overlap:.3g})"
    )


# ---------------------------------------------------------------------------
# initialization


@dataclass(frozen=True)
class InitScheme:
    kind: str
    arch: NetworkArchitecture

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigurationError(f"unknown init scheme {self.kind!r}")

    @cached_property
    def sigma_per_layer(self) -> np.ndarray:
        fan_in = np.array(self.arch.layer_sizes[:-1], dtype=np.float64)
        fan_out = np.array(self.arch.layer_sizes[1:], dtype=np.float64)
        if self.kind == "xavier":
            return np.sqrt(2.0 / (fan_in + fan_out))
        return np.sqrt(2.0 / fan_in)

    @property
    def weights_per_layer(self) -> np.ndarray:
        return np.array([a * b for a, b in zip(self.arch.layer_sizes[:-1], self.arch.layer_sizes[1:])])

    @property
    def shell_radius_per_layer(self) -> np.ndarray:
        """Mode of the per-layer weight radius, ``sigma_l * sqrt(N_l - 1)``."""
        return self.sigma_per_layer * np.sqrt(self.weights_per_layer - 1.0)

    def sample(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(int(seed))
        params = np.zeros(self.arch.n_params)
        for (w, _, _), sigma in zip(self.arch.blocks, self.sigma_per_layer):
            params[w] = rng.normal(0.0, sigma, size=w.stop - w.start)
        return params


def xavier_init(arch: NetworkArchitecture, seed: int) -> np.ndarray:
    return InitScheme("xavier", arch).sample(seed)


def he_init(arch: NetworkArchitecture, seed: int) -> np.ndarray:
    return InitScheme("he", arch).sample(seed)


def rescale_to_multiple(params, arch: NetworkArchitecture, rho: float) -> np.ndarray:
    """Multiply every weight by ``rho``; biases are left alone."""
    if not rho > 0:
        raise InputError(f"radius multiple must be positive, got {rho}")
    out = np.array(params, dtype=np.float64, copy=True)
    if rho != 1:
        out[arch.weight_mask] *= rho
    return out


def layer_radii(params, arch: NetworkArchitecture) -> np.ndarray:
    return np.array([np.linalg.norm(w) for w, _ in arch.unflatten(params)])


def normalized_radius(params, arch: NetworkArchitecture, scheme: str = "xavier") -> float:
    """Radius multiple of ``params`` relative to the scheme's shell.

    Equals ``rho`` (up to sampling noise) for ``rescale_to_multiple(init, rho)``.
    """
    s = InitScheme(scheme, arch)
    sq = sum(float(np.sum(w * w)) / sig ** 2 for (w, _), sig in zip(arch.unflatten(params), s.sigma_per_layer))
    return math.sqrt(sq / max(float(np.sum(s.weights_per_layer - 1.0)), 1.0))


def layer_metric(arch: NetworkArchitecture, scheme: str = "xavier", scale: float = 1.0) -> np.ndarray:
    """Per-index metric ``eta``; constant within each layer's weight block.

    Weights get ``scale * sigma_l * sqrt(D)``; biases get the mean of the
    weight-layer values.
    """
    sigmas = InitScheme(scheme, arch).sigma_per_layer * math.sqrt(arch.n_params) * scale
    eta = np.empty(arch.n_params)
    bias_scale = float(np.mean(sigmas))
    for (w, b, _), s in zip(arch.blocks, sigmas):
        eta[w] = s
        eta[b] = bias_scale
    eta.setflags(write=False)
    return eta


# ---------------------------------------------------------------------------
# charts


@dataclass(frozen=True)
class SubspaceChart:
    anchor: np.ndarray = field(repr=False)
    projection: ProjectionMatrix
    metric: np.ndarray = field(repr=False)
    kind: str = "hyperplane"
    radius_multiple: float = 1.0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        anchor = np.array(self.anchor, dtype=np.float64)
        anchor.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)
        metric = np.ones_like(anchor) if self.metric is None else np.asarray(self.metric, dtype=np.float64)
        if self.kind not in CHART_KINDS:
            raise ConfigurationError(f"chart kind must be one of {CHART_KINDS}")
        if metric.shape != anchor.shape or self.projection.D != anchor.size:
            raise ConfigurationError("anchor, metric and projection dimensions disagree")
        if not np.all(metric > 0) or not np.all(np.isfinite(metric)):
            raise ConfigurationError("metric entries must be positive and finite")
        object.__setattr__(self, "metric", metric)

    @property
    def D(self) -> int:
        return self.anchor.size

    @property
    def d(self) -> int:
        return self.projection.d

    @cached_property
    def _z0(self) -> np.ndarray:
        return self.anchor / self.metric

    @cached_property
    def sphere_radius(self) -> float:
        """Radius ``|z0|`` in metric-normalized coordinates."""
        return float(np.linalg.norm(self._z0))

    @cached_property
    def _plane_jacobian(self) -> np.ndarray:
        return self.projection.matrix.multiply(self.metric[:, None]).toarray()

    def _theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.d,):
            raise InputError(f"theta has shape {theta.shape}, expected ({self.d},)")
        if not np.all(np.isfinite(theta)):
            raise InputError("theta contains non-finite entries")
        return theta

    def _sphere_z(self, theta):
        z = self._z0 + self.projection @ theta
        norm = float(np.linalg.norm(z))
        if norm == 0.0:
            raise DegeneratePointError("sphere chart evaluated at the center of the sphere")
        return z, norm

    def embed(self, theta) -> np.ndarray:
        theta = self._theta(theta)
        if not theta.any():
            return self.anchor.copy()
        if self.kind == "hyperplane":
            return self.anchor + self.metric * (self.projection @ theta)
        z, norm = self._sphere_z(theta)
        return self.metric * (z * (self.sphere_radius / norm))

    def jacobian(self, theta) -> np.ndarray:
        """Dense ``D x d`` derivative of ``embed`` at ``theta``."""
        theta = self._theta(theta)
        if self.kind == "hyperplane":
            return self._plane_jacobian
        z, norm = self._sphere_z(theta)
        zhat = z / norm
        M = self.projection.dense()
        tangent = M - np.outer(zhat, zhat @ M)
        return tangent * (self.metric * (self.sphere_radius / norm))[:, None]

    def pullback(self, theta, gradient) -> np.ndarray:
        """Chain rule: gradient with respect to ``theta`` from the full-space gradient."""
        theta = self._theta(theta)
        g = np.asarray(gradient, dtype=np.float64)
        if g.shape != (self.D,):
            raise InputError(f"gradient has shape {g.shape}, expected ({self.D},)")
        gz = self.metric * g
        if self.kind == "hyperplane":
            return self.projection.rmatvec(gz)
        z, norm = self._sphere_z(theta)
        zhat = z / norm
        gz = (gz - zhat * float(zhat @ gz)) * (self.sphere_radius / norm)
        return self.projection.rmatvec(gz)

    def normalized_norm(self, x) -> float:
        return float(np.linalg.norm(np.asarray(x) / self.metric))

    def descriptor(self) -> dict:
        desc = {
            "version": DESCRIPTOR_VERSION,
            "kind": self.kind,
            "rho": self.radius_multiple,
            "D": self.D,
            "d": self.d,
            "projection_seed": self.projection.seed,
            "nnz_per_column": list(self.projection.nnz_per_column),
            "max_overlap": self.projection.max_overlap,
            "sphere_construction": "radial_projection_normalized",
        }
        desc.update(self.info)
        return desc

    @classmethod
    def from_descriptor(cls, desc: dict) -> "SubspaceChart":
        """Rebuild a chart produced by :func:`make_chart`."""
        if desc.get("version") != DESCRIPTOR_VERSION:
            raise ConfigurationError(f"unsupported chart descriptor version {desc.get('version')}")
        if "anchor_seed" not in desc:
            raise ConfigurationError("descriptor lacks anchor information; only make_chart charts are rebuildable")
        arch = NetworkArchitecture(tuple(desc["layer_sizes"]), desc["nonlinearity"])
        chart = make_chart(
            arch, rho=desc["rho"], d=desc["d"], kind=desc["kind"], anchor_seed=desc["anchor_seed"],
            projection_seed=desc["projection_seed"], scheme=desc["scheme"],
            nnz_law=desc["nnz_law"], metric_scale=desc["metric_scale"],
            overlap_bound=desc["overlap_bound"],
        )
        if list(chart.projection.nnz_per_column) != list(desc["nnz_per_column"]):
            raise ConfigurationError("rebuilt projection disagrees with the descriptor")
        return chart


def make_chart(arch: NetworkArchitecture, rho: float, d: int, kind: str = "hyperplane",
               anchor_seed: int = 0, projection_seed: int = 0, scheme: str = "xavier",
               nnz_law: NnzLaw | dict | None = None, metric_scale: float = 1.0,
               overlap_bound: float | None = 0.1, anchor=None) -> SubspaceChart:
    """Anchor at ``rho`` times a fresh ``scheme`` draw plus a random projection.

    ``anchor`` overrides the drawn anchor (its descriptor is then not rebuildable).
    """
    law = NnzLaw.from_dict(nnz_law)
    if anchor is None:
        anchor = rescale_to_multiple(InitScheme(scheme, arch).sample(anchor_seed), arch, rho)
        info = {"anchor_seed": int(anchor_seed)}
    else:
        info = {}
    proj = build_projection(arch.n_params, d, law, projection_seed, overlap_bound)
    info.update({
        "layer_sizes": list(arch.layer_sizes),
        "nonlinearity": arch.nonlinearity,
        "scheme": scheme,
        "nnz_law": law.to_dict(),
        "metric_scale": metric_scale,
        "overlap_bound": overlap_bound,
    })
    return SubspaceChart(anchor, proj, layer_metric(arch, scheme, metric_scale), kind, float(rho), info)


def radial_overlap(chart: SubspaceChart) -> float:
    """Norm of the projection of the anchor direction onto the chart's tangent span."""
    pn = chart.anchor / np.linalg.norm(chart.anchor)
    q, _ = np.linalg.qr(chart.jacobian(np.zeros(chart.d)))
    return float(np.linalg.norm(q.T @ pn))
