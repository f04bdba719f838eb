"""Restricted Hessians, their spectra, and random-direction curvature statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import default_hvp_eps
from .errors import InputError, NumericalError, NumericalRangeError
from .geometry import NnzLaw, ProjectionMatrix, SubspaceChart, build_projection


@dataclass
class RestrictedHessian:
    entries: np.ndarray
    hvp_eps: float
    asymmetry: float
    chart_descriptor: dict = field(default_factory=dict, repr=False)
    eval_batch_id: str | None = None

    @property
    def d(self) -> int:
        return self.entries.shape[0]


@dataclass
class EigenSpectrum:
    eigenvalues: np.ndarray
    sweeps: int = 0


@dataclass
class CurvatureStats:
    trace: float
    fro_norm: float
    frac_positive: float
    ratio: float
    d: int

    def as_row(self) -> dict:
        return {"trace": self.trace, "fro_norm": self.fro_norm,
                "frac_positive": self.frac_positive, "ratio": self.ratio}


@dataclass
class DirectionMoments:
    sample_mean: float
    sample_var: float
    n_samples: int
    predicted_mean: float
    predicted_var: float
    # finite-D variance for directions uniform on the sphere
    exact_var: float

    @property
    def mean_standard_error(self) -> float:
        return math.sqrt(self.sample_var / self.n_samples)


def restricted_hessian(field_, chart: SubspaceChart, theta=None, hvp_eps=None,
                       eval_batch_id=None) -> RestrictedHessian:
    """``J^T H J`` at ``chart.embed(theta)`` from ``d`` Hessian-vector products.

    ``field_`` is anything with ``hvp(x, v, eps)``, e.g. :class:`NetworkLoss`.
    """
    theta = np.zeros(chart.d) if theta is None else np.asarray(theta, dtype=np.float64)
    x = chart.embed(theta)
    eps = default_hvp_eps(x) if hvp_eps is None else float(hvp_eps)
    J = chart.jacobian(theta)
    d = chart.d
    HJ = np.empty_like(J)
    for j in range(d):
        HJ[:, j] = field_.hvp(x, J[:, j], eps)
    H = J.T @ HJ
    if not np.all(np.isfinite(H)):
        raise NumericalRangeError(
            f"non-finite Hessian entries at radius multiple {chart.radius_multiple}",
            radius=chart.radius_multiple,
        )
    norm = np.linalg.norm(H)
    asym = float(np.linalg.norm(H - H.T) / norm) if norm > 0 else 0.0
    return RestrictedHessian(0.5 * (H + H.T), eps, asym, chart.descriptor(), eval_batch_id)


def _round_robin(m):
    players = list(range(m))
    for _ in range(m - 1):
        yield [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        players = [players[0], players[-1]] + players[1:-1]


def jacobi_eigenvalues(A, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, int]:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every (p, q) pair once, in round-robin order so that the
    ``n/2`` rotations of one round act on disjoint index pairs and can be
    applied together.  Stops once the off-diagonal Frobenius norm drops below
    ``tol * |A|``.
    """
    a = np.array(A, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    n = a.shape[0]
    total = np.linalg.norm(a)
    if n <= 1 or total == 0.0:
        return np.diag(a).copy(), 0
    m = n + (n % 2)
    rounds = []
    for pairs in _round_robin(m):
        pq = np.array([(p, q) for p, q in pairs if p < n and q < n])
        rounds.append((pq[:, 0], pq[:, 1]))

    mask = ~np.eye(n, dtype=bool)

    def off_norm():
        return float(np.linalg.norm(a[mask]))

    for sweep in range(max_sweeps):
        if off_norm() < tol * total:
            return np.diag(a).copy(), sweep
        for p, q in rounds:
            apq = a[p, q]
            keep = np.abs(apq) > 1e-300
            if not keep.any():
                continue
            p, q, apq = p[keep], q[keep], apq[keep]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(tau) > 1e150
            tau_safe = np.where(big, 0.0, tau)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau_safe) + np.sqrt(tau_safe * tau_safe + 1.0))
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
    if off_norm() < tol * total:
        return np.diag(a).copy(), max_sweeps
    raise NumericalError(
        f"Jacobi did not converge in {max_sweeps} sweeps (n={n}, |A|={total:.3g}, "
        f"residual off-diagonal {off_norm():.3g}, diag range "
        f"[{np.diag(a).min():.3g}, {np.diag(a).max():.3g}])"
    )


def eigen_decompose(H: RestrictedHessian | np.ndarray) -> EigenSpectrum:
    entries = H.entries if isinstance(H, RestrictedHessian) else np.asarray(H, dtype=np.float64)
    if not np.allclose(entries, entries.T, rtol=0, atol=1e-12 * max(np.abs(entries).max(initial=0), 1e-300)):
        raise InputError("matrix is not symmetric")
    vals, sweeps = jacobi_eigenvalues(entries)
    return EigenSpectrum(np.sort(vals)[::-1], sweeps)


def curvature_stats(spectrum: EigenSpectrum | np.ndarray) -> CurvatureStats:
    lam = spectrum.eigenvalues if isinstance(spectrum, EigenSpectrum) else np.asarray(spectrum, dtype=np.float64)
    d = lam.size
    trace = float(lam.sum())
    fro = float(math.sqrt(float(np.sum(lam * lam))))
    frac = float(np.count_nonzero(lam > 0) / d) if d else 0.0
    ratio = trace / fro if fro > 0 else 0.0
    return CurvatureStats(trace, fro, frac, ratio, d)


def hessian_stats(field_, chart, theta=None, hvp_eps=None) -> tuple[CurvatureStats, RestrictedHessian]:
    H = restricted_hessian(field_, chart, theta, hvp_eps)
    return curvature_stats(eigen_decompose(H)), H


def random_direction_moments(hessian_oracle, D_eff: int, n_samples: int, seed: int = 0,
                             trace: float | None = None, fro_norm: float | None = None,
                             vectorized: bool = False, chunk: int = 2048) -> DirectionMoments:
    """Curvature ``v^T H v`` along uniform unit directions, against Wick predictions.

    The predictions need ``Tr(H)`` and ``|H|``.  Pass them if known; otherwise
    they are computed from the oracle applied to the basis vectors.  With
    ``vectorized=True`` the oracle receives ``D x k`` blocks.
    """
    D = int(D_eff)
    if n_samples < 2:
        raise InputError("need at least two samples")
    if trace is None or fro_norm is None:
        H = hessian_oracle(np.eye(D)) if vectorized else np.column_stack(
            [hessian_oracle(e) for e in np.eye(D)])
        trace = float(np.trace(H))
        fro_norm = float(np.linalg.norm(H))
    rng = np.random.default_rng(seed)
    values = np.empty(n_samples)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        V = rng.standard_normal((D, k))
        V /= np.linalg.norm(V, axis=0)
        HV = hessian_oracle(V) if vectorized else np.column_stack([hessian_oracle(v) for v in V.T])
        values[done:done + k] = np.einsum("ij,ij->j", V, HV)
        done += k
    if not np.all(np.isfinite(values)):
        raise NumericalError("Hessian oracle returned non-finite values")
    exact_var = 2.0 * (fro_norm ** 2 - trace ** 2 / D) / (D * (D + 2))
    return DirectionMoments(float(values.mean()), float(values.var(ddof=1)), n_samples,
                            trace / D, 2.0 * fro_norm ** 2 / D ** 2, exact_var)


def orthonormal_projection(D: int, d: int, seed: int = 0) -> ProjectionMatrix:
    """Dense Haar-random orthonormal columns (for analytic checks)."""
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((D, d)))
    return ProjectionMatrix.from_dense(q * np.sign(np.diag(r)))


def wick_scaling_probe(field_, point, d_list, seeds, metric=None, nnz_law: NnzLaw | None = None,
                       projection_factory=None, hvp_eps=None, overlap_bound: float | None = 0.1) -> list[dict]:
    """Restricted-Hessian statistics at one point for independent charts of each ``d``.

    Returns one row per ``(d, seed)``.  ``projection_factory(D, d, seed)``
    replaces the default sparse projection.
    """
    d_list = [int(d) for d in d_list]
    if d_list != sorted(d_list):
        raise InputError("d_list must be ascending")
    point = np.asarray(point, dtype=np.float64)
    D = point.size
    factory = projection_factory or (lambda D_, d_, s: build_projection(D_, d_, nnz_law, s, overlap_bound))
    rows = []
    for d in d_list:
        for seed in seeds:
            chart = SubspaceChart(point, factory(D, d, seed), metric)
            stats, _ = hessian_stats(field_, chart, hvp_eps=hvp_eps)
            rows.append({"d": d, "seed": seed, "trace": stats.trace,
                         "fro_norm": stats.fro_norm, "ratio": stats.ratio,
                         "frac_positive": stats.frac_positive})
    return rows


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least squares ``y = a x + b``; returns ``(a, b, R^2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


# ---------------------------------------------------------------------------
# Laplacian / sphere-average identity


def hutchinson_trace(hvp, D: int, probes: int, rng, scale=None) -> float:
    """Rademacher estimate of ``Tr(S H S)`` with ``S = diag(scale)``."""
    total = 0.0
    for _ in range(probes):
        w = rng.integers(0, 2, size=D) * 2.0 - 1.0
        if scale is not None:
            w = w * scale
        total += float(w @ hvp(w))
    return total / probes


def fd_weights(x0: float, grid, order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative at ``x0`` (Fornberg)."""
    grid = np.asarray(grid, dtype=np.float64)
    n = grid.size - 1
    c = np.zeros((n + 1, order + 1))
    c[0, 0] = 1.0
    c1, c4 = 1.0, grid[0] - x0
    for i in range(1, n + 1):
        mn = min(i, order)
        c2 = 1.0
        c5, c4 = c4, grid[i] - x0
        for j in range(i):
            c3 = grid[i] - grid[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def radial_laplacian(r_grid, mean_loss, D: int) -> np.ndarray:
    """Sphere-averaged Laplacian ``L'' + (D-1)/r L'`` from a mean-loss curve on a radius grid.

    Derivatives are taken in ``log r`` on three-point stencils (one-sided at the
    ends) of ``log L``, which makes any power law exact regardless of the grid
    spacing.  The loss must be positive.
    """
    r = np.asarray(r_grid, dtype=np.float64)
    L = np.asarray(mean_loss, dtype=np.float64)
    if r.size < 3 or np.any(r <= 0) or np.any(L <= 0):
        raise InputError("need three or more positive radii and a positive loss")
    u, f = np.log(r), np.log(L)
    out = np.empty(r.size)
    for i in range(r.size):
        lo = min(max(i - 1, 0), r.size - 3)
        g = u[lo:lo + 3]
        f1 = float(fd_weights(u[i], g, 1) @ f[lo:lo + 3])
        f2 = float(fd_weights(u[i], g, 2) @ f[lo:lo + 3])
        out[i] = L[i] / r[i] ** 2 * (f2 + f1 * f1 - f1 + (D - 1) * f1)
    return out


@dataclass
class StokesRow:
    r: float
    lhs: float
    rhs: float
    rel_err: float
    lhs_se: float
    mean_loss: float


def stokes_check(field_, D: int, r_grid, samples_per_r: int = 200, seed: int = 0,
                 metric=None, probes: int = 30, stencil: int = 5, hvp_eps=None,
                 rows: str = "centered") -> list[StokesRow]:
    """Compare the sphere-averaged Laplacian with radial derivatives of the mean loss.

    Points are ``x = metric * (r u)`` with ``u`` uniform on the unit sphere, and
    the Laplacian is taken in the normalized coordinates ``z = x / metric``.
    The same directions are reused at every radius.  Derivatives of the mean
    loss use finite-difference weights on a centred stencil of up to
    ``stencil`` grid points, which is exact for polynomials of degree
    ``stencil - 1``.  Fields exposing ``laplacian`` (and identity metric) use it
    exactly; others go through the Rademacher estimator with ``probes`` probes.
    """
    r_grid = np.asarray(r_grid, dtype=np.float64)
    if r_grid.size < 3:
        raise InputError("r_grid needs at least three radii")
    if np.any(r_grid <= 0):
        raise InputError("radii must be positive")
    if np.any(np.diff(r_grid) <= 0):
        raise InputError("r_grid must be strictly increasing")
    D = int(D)
    scale = None if metric is None else np.asarray(metric, dtype=np.float64)
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((samples_per_r, D))
    U /= np.linalg.norm(U, axis=1, keepdims=True)

    def embed(z):
        return z if scale is None else scale * z

    mean_loss = np.array([np.mean([field_.loss(embed(r * u)) for u in U]) for r in r_grid])
    if not np.all(np.isfinite(mean_loss)):
        raise NumericalRangeError("mean loss overflowed on the radius grid")

    width = min(stencil, r_grid.size if r_grid.size % 2 else r_grid.size - 1)
    half = width // 2
    exact = scale is None and hasattr(field_, "laplacian")
    probe_rng = np.random.default_rng([seed, 1])
    out = []
    for i, r in enumerate(r_grid):
        if rows == "centered" and not (half <= i < r_grid.size - half):
            continue
        lo = min(max(i - half, 0), r_grid.size - width)
        idx = slice(lo, lo + width)
        d1 = float(fd_weights(r, r_grid[idx], 1) @ mean_loss[idx])
        d2 = float(fd_weights(r, r_grid[idx], 2) @ mean_loss[idx])
        rhs = d2 + (D - 1) / r * d1
        laps = np.empty(samples_per_r)
        for k, u in enumerate(U):
            x = embed(r * u)
            if exact:
                laps[k] = field_.laplacian(x)
            else:
                eps = default_hvp_eps(x) if hvp_eps is None else hvp_eps
                laps[k] = hutchinson_trace(lambda w: field_.hvp(x, w, eps), D, probes, probe_rng, scale)
        lhs = float(laps.mean())
        se = float(laps.std(ddof=1) / math.sqrt(samples_per_r)) if samples_per_r > 1 else 0.0
        rel = abs(lhs - rhs) / abs(rhs) if rhs != 0 else (0.0 if lhs == 0 else math.inf)
        out.append(StokesRow(float(r), lhs, rhs, rel, se, float(mean_loss[i])))
    return out
