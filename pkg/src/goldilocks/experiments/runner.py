"""Experiment drivers.  Each ``run_*`` takes an :class:`ExperimentConfig`,
writes CSV/JSON results under ``config.out_dir`` and returns a summary dict."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from ..autodiff import NetworkArchitecture, NetworkLoss, QuadraticField, RadialPowerField
from ..curvature import (curvature_stats, eigen_decompose, hessian_stats, linear_fit,
                         orthonormal_projection, radial_laplacian, random_direction_moments, restricted_hessian,
                         stokes_check, wick_scaling_probe)
from ..datasets import Dataset, load_mnist_subset, synthetic_blobs
from ..errors import NumericalError
from ..geometry import (InitScheme, SubspaceChart, layer_metric, make_chart, rescale_to_multiple)
from ..training import train_fullspace, train_subspace
from .config import ExperimentConfig
from .records import ResultStore, TrialRecord, trial_key, write_manifest

log = logging.getLogger(__name__)

STAT_COLUMNS = ("trace", "fro_norm", "frac_positive", "ratio")


def derive_seed(base: int, *tags) -> int:
    """Independent 32-bit seed for a named sub-stream of ``base``."""
    words = [int(base) & 0xFFFFFFFF] + [zlib.crc32(repr(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    dc = cfg.dataset
    if dc.source == "synthetic":
        ds = synthetic_blobs(dc.n_classes, cfg.architecture.layer_sizes[0], dc.n_per_class,
                             dc.spread, dc.split_seed)
    else:
        ds = load_mnist_subset(dc.n_train, dc.n_eval, dc.split_seed, dc.data_dir,
                               dc.images_path, dc.labels_path)
    if dc.shuffle_labels:
        ds = ds.with_shuffled_labels(derive_seed(cfg.seed, "shuffle"))
    return ds


def hessian_field(cfg: ExperimentConfig, arch: NetworkArchitecture, ds: Dataset) -> NetworkLoss:
    n = cfg.hessian.eval_batch_size
    return NetworkLoss(arch, ds.eval_batch(n), cfg.hessian.freeze_pattern,
                       batch_id=f"{ds.provenance}:eval[:{n}]")


@dataclass(frozen=True)
class TrialSpec:
    index: int
    kind: str
    rho: float
    d: int
    seed: int

    def key(self, experiment) -> str:
        return trial_key(experiment, self.kind, self.rho, self.d, self.seed)


def run_trials(cfg: ExperimentConfig, store: ResultStore, specs, fn) -> list[TrialRecord]:
    """Run ``fn(spec) -> TrialRecord`` for every spec not already in ``store``."""
    todo = [s for s in specs if not store.done(s.key(cfg.experiment))]
    if len(todo) < len(specs):
        log.info("%s: resuming, %d of %d trials already done", cfg.experiment,
                 len(specs) - len(todo), len(specs))

    def work(spec):
        t0 = time.perf_counter()
        rec = fn(spec)
        rec.index = spec.index
        rec.wall_time = time.perf_counter() - t0
        store.append(rec)
        return rec

    if cfg.threads == 1:
        for s in todo:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(work, todo))
    return store.finalize()


def _record(cfg, spec, **fields) -> TrialRecord:
    return TrialRecord(cfg.experiment, float(spec.rho), int(spec.d), int(spec.seed), spec.kind, **fields)


def _chart(cfg, arch, spec, anchor_seed, projection_seed) -> SubspaceChart:
    c = cfg.chart
    return make_chart(arch, spec.rho, spec.d, spec.kind, anchor_seed, projection_seed,
                      c.scheme, c.nnz_law, c.metric_scale, c.overlap_bound)


def _measure(rec: TrialRecord, field_, chart, hvp_eps=None):
    """Fill the curvature columns of ``rec``; overflow becomes a reason-coded null."""
    try:
        H = restricted_hessian(field_, chart, hvp_eps=hvp_eps,
                               eval_batch_id=getattr(field_, "batch_id", None))
        st = curvature_stats(eigen_decompose(H))
    except NumericalError as exc:
        rec.set_null("overflow", *STAT_COLUMNS)
        rec.extra["error"] = str(exc)
        return None
    rec.trace, rec.fro_norm, rec.frac_positive, rec.ratio = st.trace, st.fro_norm, st.frac_positive, st.ratio
    rec.extra.update({"hvp_eps": H.hvp_eps, "asymmetry": H.asymmetry, "eval_batch": H.eval_batch_id})
    return st


def _anchor_eval(rec: TrialRecord, field_, x):
    if hasattr(field_, "evaluate"):
        ev = field_.evaluate(x)
        if math.isfinite(ev.loss):
            rec.init_loss, rec.init_acc = ev.loss, ev.accuracy
            return
        rec.set_null("overflow", "init_loss", "init_acc")
    else:
        rec.init_loss = field_.loss(x)
        rec.set_null("no_labels", "init_acc")


def _cells(records, group_cols, value_cols):
    """``{group tuple: {col: (mean, std, n)}}`` over non-null values."""
    groups: dict = {}
    for r in records:
        key = tuple(getattr(r, c) for c in group_cols)
        groups.setdefault(key, []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        cell = {}
        for c in value_cols:
            vals = np.array([getattr(r, c) for r in rs if getattr(r, c) is not None], dtype=float)
            if vals.size:
                cell[c] = (float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0, int(vals.size))
            else:
                cell[c] = (None, None, 0)
        out[key] = cell
    return out


def _cells_json(cells, group_cols):
    return [dict(zip(group_cols, k), **{c: {"mean": m, "std": s, "n": n} for c, (m, s, n) in v.items()})
            for k, v in cells.items()]


def _finish(cfg, records, summary, name=None) -> dict:
    out = Path(cfg.out_dir)
    summary = {"experiment": cfg.experiment, "config_hash": cfg.hash(), **summary}
    (out / f"{name or cfg.experiment}.summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))
    write_manifest(out, cfg, records, {"n_diverged": sum(r.diverged for r in records)})
    return summary


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


# ---------------------------------------------------------------------------
# radius sweeps of curvature


def variance_decomposition(values, anchors) -> dict:
    """Split the spread of a statistic into between-anchor and within-anchor parts."""
    values = np.asarray(values, dtype=float)
    anchors = np.asarray(anchors)
    groups = [values[anchors == a] for a in np.unique(anchors)]
    means = np.array([g.mean() for g in groups])
    within = [g.var(ddof=1) for g in groups if g.size > 1]
    return {
        "total_var": float(values.var(ddof=1)) if values.size > 1 else 0.0,
        "between_anchor_var": float(means.var(ddof=1)) if means.size > 1 else 0.0,
        "within_anchor_var": float(np.mean(within)) if within else None,
    }


def sweep_curvature(cfg: ExperimentConfig, field_=None, arch=None) -> dict:
    """Restricted-Hessian statistics over the (kind, rho, d, seed) grid.

    ``field_`` replaces the network loss (any object with ``loss``, ``gradient``
    and ``hvp``); ``arch`` then only fixes the parameter layout.
    """
    arch = arch or cfg.architecture.build()
    if field_ is None:
        field_ = hessian_field(cfg, arch, load_dataset(cfg))
    per = cfg.chart.charts_per_anchor
    specs, i = [], 0
    for kind in cfg.kinds:
        for rho in cfg.rho_grid:
            for d in cfg.d_grid:
                for s in range(cfg.seeds * per):
                    specs.append(TrialSpec(i, kind, float(rho), int(d), s))
                    i += 1

    def trial(spec):
        a = spec.seed // per
        chart = _chart(cfg, arch, spec, derive_seed(cfg.seed, "anchor", a),
                       derive_seed(cfg.seed, "projection", spec.kind, spec.rho, spec.d, spec.seed))
        rec = _record(cfg, spec, chart=chart.descriptor(), extra={"anchor": a, "chart": spec.seed % per})
        _anchor_eval(rec, field_, chart.anchor)
        _measure(rec, field_, chart, cfg.hessian.hvp_eps)
        rec.set_null("not_trained", "final_loss", "final_acc")
        return rec

    store = ResultStore(cfg.out_dir, cfg.experiment)
    records = run_trials(cfg, store, specs, trial)
    cells = _cells(records, ("kind", "rho", "d"), STAT_COLUMNS + ("init_loss",))
    decomposition = []
    groups: dict = {}
    for r in records:
        if r.ratio is not None:
            groups.setdefault((r.kind, r.rho, r.d), []).append(r)
    for (kind, rho, d), rs in sorted(groups.items()):
        row = {"kind": kind, "rho": rho, "d": d}
        for c in ("ratio", "frac_positive"):
            row[c] = variance_decomposition([getattr(r, c) for r in rs], [r.extra["anchor"] for r in rs])
        decomposition.append(row)
    return _finish(cfg, records, {"cells": _cells_json(cells, ("kind", "rho", "d")),
                                  "variance_decomposition": decomposition})


def cell_mean(summary: dict, column: str, **where) -> float | None:
    """Look up the mean of ``column`` in a summary's cell table."""
    for cell in summary["cells"]:
        if all(np.isclose(cell[k], v) if isinstance(v, float) else cell[k] == v for k, v in where.items()):
            return cell[column]["mean"]
    raise KeyError(f"no cell matching {where}")


# ---------------------------------------------------------------------------
# training on charts


def _steps(cfg, ds: Dataset) -> int:
    oc = cfg.optimizer
    if oc.epochs is not None:
        return oc.epochs * steps_per_epoch(ds, oc.batch_size)
    return oc.steps


def steps_per_epoch(ds: Dataset, batch_size: int) -> int:
    return max(1, ds.train_idx.size // batch_size)


def _adam(cfg) -> dict:
    oc = cfg.optimizer
    return {"lr": oc.lr, "beta1": oc.beta1, "beta2": oc.beta2, "eps_hat": oc.eps_hat}


def _train_fields(rec: TrialRecord, traj):
    first, last = traj.points[0], traj.points[-1]
    rec.init_loss, rec.init_acc = first.eval_loss, first.eval_accuracy
    rec.steps = last.step
    rec.diverged = traj.diverged
    if traj.diverged:
        rec.set_null("diverged", "final_loss", "final_acc")
        rec.extra["diverged_step"] = traj.diverged_step
    else:
        rec.final_loss, rec.final_acc = last.eval_loss, last.eval_accuracy
    rec.extra["trajectory"] = [[p.step, p.train_loss, p.eval_loss, p.eval_accuracy, p.rho]
                               for p in traj.points]


def sweep_accuracy_contours(cfg: ExperimentConfig) -> dict:
    """Train chart coordinates on every (kind, rho, d, seed) cell."""
    arch = cfg.architecture.build()
    ds = load_dataset(cfg)
    steps = _steps(cfg, ds)
    oc = cfg.optimizer
    traj_dir = Path(cfg.out_dir) / "trajectories" / cfg.experiment
    traj_dir.mkdir(parents=True, exist_ok=True)
    specs, i = [], 0
    for kind in cfg.kinds:
        for rho in cfg.rho_grid:
            for d in cfg.d_grid:
                for s in range(cfg.seeds):
                    specs.append(TrialSpec(i, kind, float(rho), int(d), s))
                    i += 1

    def trial(spec):
        chart = _chart(cfg, arch, spec, derive_seed(cfg.seed, "anchor", spec.seed),
                       derive_seed(cfg.seed, "projection", spec.kind, spec.rho, spec.d, spec.seed))
        rec = _record(cfg, spec, chart=chart.descriptor())
        path = traj_dir / f"trial{spec.index:05d}.csv"
        path.unlink(missing_ok=True)
        traj = train_subspace(arch, chart, ds, steps, oc.batch_size, oc.eval_every,
                              derive_seed(cfg.seed, "batches", spec.index),
                              eval_size=oc.eval_size, scheme=cfg.chart.scheme, csv_path=path, **_adam(cfg))
        _train_fields(rec, traj)
        rec.set_null("not_measured", *STAT_COLUMNS)
        return rec

    store = ResultStore(cfg.out_dir, cfg.experiment)
    records = run_trials(cfg, store, specs, trial)
    cells = _cells(records, ("kind", "rho", "d"), ("init_acc", "final_acc", "final_loss"))
    matrices = {}
    for kind in cfg.kinds:
        m = [[cells.get((kind, float(r), int(d)), {}).get("final_acc", (None,))[0] for d in cfg.d_grid]
             for r in cfg.rho_grid]
        matrices[kind] = {"rho": list(cfg.rho_grid), "d": list(cfg.d_grid), "accuracy": m}
    return _finish(cfg, records, {"cells": _cells_json(cells, ("kind", "rho", "d")),
                                  "accuracy_matrices": matrices, "steps": steps})


# ---------------------------------------------------------------------------
# radial loss scaling


def fit_loss_scaling(rho, loss, flat_max_rho: float, slope_decades: float) -> dict:
    """Flat level for ``rho <= flat_max_rho`` and log-log slope over the top decades."""
    rho = np.asarray(rho, dtype=float)
    loss = np.asarray(loss, dtype=float)
    ok = np.isfinite(loss) & (loss > 0)
    rho, loss = rho[ok], loss[ok]
    flat = loss[rho <= flat_max_rho]
    top = rho >= rho.max() / 10 ** slope_decades
    slope, intercept, r2 = linear_fit(np.log10(rho[top]), np.log10(loss[top])) if top.sum() >= 2 \
        else (math.nan, math.nan, math.nan)
    return {"flat_level": float(flat.mean()) if flat.size else None, "slope": slope,
            "intercept": intercept, "r2": r2, "n_fit": int(top.sum())}


def sweep_loss_scaling(cfg: ExperimentConfig) -> dict:
    """Mean eval loss at random anchors against the radius multiple."""
    ds = load_dataset(cfg)
    nonlins = cfg.params.get("nonlinearities", ["relu", "tanh"])
    eval_batch = ds.eval_batch(cfg.optimizer.eval_size)
    archs = {nl: NetworkArchitecture(tuple(cfg.architecture.layer_sizes), nl) for nl in nonlins}
    specs, i = [], 0
    for nl in nonlins:
        for rho in cfg.rho_grid:
            for s in range(cfg.seeds):
                specs.append(TrialSpec(i, f"anchor-{nl}", float(rho), 0, s))
                i += 1

    def trial(spec):
        nl = spec.kind.split("-", 1)[1]
        arch = archs[nl]
        a_seed = derive_seed(cfg.seed, "anchor", spec.seed)
        x = rescale_to_multiple(InitScheme(cfg.chart.scheme, arch).sample(a_seed), arch, spec.rho)
        rec = _record(cfg, spec, chart={"anchor_seed": a_seed, "layer_sizes": list(arch.layer_sizes),
                                        "nonlinearity": nl, "scheme": cfg.chart.scheme, "rho": spec.rho})
        _anchor_eval(rec, NetworkLoss(arch, eval_batch), x)
        rec.set_null("not_measured", *STAT_COLUMNS)
        rec.set_null("not_trained", "final_loss", "final_acc")
        return rec

    store = ResultStore(cfg.out_dir, cfg.experiment)
    records = run_trials(cfg, store, specs, trial)
    cells = _cells(records, ("kind", "rho"), ("init_loss", "init_acc"))
    fits = {}
    for nl in nonlins:
        rows = [(k[1], v["init_loss"][0]) for k, v in cells.items() if k[0] == f"anchor-{nl}" and v["init_loss"][0]]
        r, l = zip(*rows) if rows else ((), ())
        fits[nl] = fit_loss_scaling(r, l, cfg.params.get("flat_max_rho", 0.3), cfg.params.get("slope_decades", 1.0))
    return _finish(cfg, records, {"cells": _cells_json(cells, ("kind", "rho")), "fits": fits,
                                  "n_layers": archs[nonlins[0]].n_layers, "ln_classes": math.log(ds.n_classes)})


# ---------------------------------------------------------------------------
# trace and norm against radius


def crossings(x, a, b) -> list[float]:
    """Points where ``a - b`` changes sign, interpolated linearly in ``log x``."""
    x = np.asarray(x, dtype=float)
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    out = []
    for i in range(len(x) - 1):
        if diff[i] == 0:
            out.append(float(x[i]))
        elif diff[i] * diff[i + 1] < 0:
            t = diff[i] / (diff[i] - diff[i + 1])
            out.append(float(10 ** (np.log10(x[i]) + t * (np.log10(x[i + 1]) - np.log10(x[i])))))
    return out


def shell_radius_unit(arch: NetworkArchitecture, scheme: str = "xavier") -> float:
    """Normalized-coordinate radius of the ``rho = 1`` shell, ``sqrt(sum(N_l - 1) / D)``."""
    return math.sqrt(float(np.sum(InitScheme(scheme, arch).weights_per_layer - 1)) / arch.n_params)


def _flat_slope(rho, y, decades):
    ok = np.isfinite(y) & (y > 0)
    if not ok.any():
        return None
    top = ok & (rho >= rho[ok].max() / 10 ** decades)
    return linear_fit(np.log10(rho[top]), np.log10(y[top]))[0] if top.sum() >= 2 else None


def sweep_tr_vs_norm(cfg: ExperimentConfig, field_=None, arch=None) -> dict:
    """Curvature sweep plus Tr/rho and |H|/rho curves, their crossings and large-rho flatness.

    Besides the pointwise restricted-Hessian trace, each curve carries the
    sphere-averaged trace implied by the mean anchor loss, ``d/D`` times the
    radial Laplacian (scaled by ``metric_scale**2``).  At large radii the two
    differ for ReLU nets: once the softmax saturates the pointwise Hessian is
    nearly traceless, and the sphere average is carried by activation kinks.
    """
    base = sweep_curvature(cfg, field_, arch)
    arch = arch or cfg.architecture.build()
    decades = cfg.params.get("flat_decades", 1.0)
    implied = None
    if field_ is None and len(cfg.rho_grid) >= 3:
        loss = {}
        for c in base["cells"]:
            if c["init_loss"]["mean"] is not None:
                loss.setdefault(c["rho"], []).append(c["init_loss"]["mean"])
        rr = np.array(sorted(loss))
        if rr.size >= 3:
            lap = radial_laplacian(rr * shell_radius_unit(arch, cfg.chart.scheme),
                                   [np.mean(loss[r]) for r in rr], arch.n_params)
            implied = dict(zip(rr.tolist(), (lap * cfg.chart.metric_scale ** 2 / arch.n_params).tolist()))
    curves = []
    for kind in cfg.kinds:
        for d in cfg.d_grid:
            rows = sorted((c for c in base["cells"] if c["kind"] == kind and c["d"] == d), key=lambda c: c["rho"])
            rho = np.array([c["rho"] for c in rows])
            mean = lambda col: np.array([c[col]["mean"] if c[col]["mean"] is not None else np.nan for c in rows])
            tr, fro, ratio = mean("trace"), mean("fro_norm"), mean("ratio")
            ok = np.isfinite(tr) & np.isfinite(fro)
            curve = {
                "kind": kind, "d": d, "rho": rho.tolist(),
                "trace_over_rho": (tr / rho).tolist(), "norm_over_rho": (fro / rho).tolist(),
                "crossings": crossings(rho[ok], tr[ok], fro[ok]),
                "ratio_peak_rho": float(rho[ok][np.nanargmax(ratio[ok])]) if ok.any() else None,
                "large_rho_loglog_slope": _flat_slope(rho, tr / rho, decades),
            }
            if implied is not None:
                sph = np.array([d * implied.get(r, np.nan) for r in rho.tolist()])
                curve["sphere_trace_over_rho"] = (sph / rho).tolist()
                curve["sphere_large_rho_loglog_slope"] = _flat_slope(rho, sph / rho, decades)
            curves.append(curve)
    base["curves"] = curves
    Path(cfg.out_dir, f"{cfg.experiment}.summary.json").write_text(
        json.dumps(base, indent=2, sort_keys=True, default=_jsonable))
    return base


# ---------------------------------------------------------------------------
# initialization selection


MEASURES = ("init_loss", "frac_positive", "trace", "ratio")


def _correlate(records, n_epochs) -> dict:
    ok = [r for r in records if not r.diverged and all(getattr(r, m) is not None for m in MEASURES)]
    out = {"n": len(ok), "n_excluded": len(records) - len(ok), "vs_accuracy": {}, "pairwise": {}}
    if len(ok) < 3:
        return out
    acc = np.array([r.extra["epoch_accuracy"] for r in ok])
    for m in MEASURES:
        x = np.array([getattr(r, m) for r in ok])
        rows = []
        for e in range(n_epochs):
            rho_s, p = sps.spearmanr(x, acc[:, e])
            slope = linear_fit(x, acc[:, e])[0] if np.ptp(x) > 0 else 0.0
            rows.append({"epoch": e + 1, "spearman": float(rho_s), "p": float(p), "slope": slope})
        out["vs_accuracy"][m] = rows
    for i, a in enumerate(MEASURES):
        for b in MEASURES[i + 1:]:
            rho_s, p = sps.spearmanr([getattr(r, a) for r in ok], [getattr(r, b) for r in ok])
            out["pairwise"][f"{a}~{b}"] = {"spearman": float(rho_s), "p": float(p)}
    return out


def run_init_selection(cfg: ExperimentConfig) -> dict:
    """Per seed: chart curvature and loss at a Xavier draw, then full-space training.

    The mini-batch order is shared by every seed so that only the starting
    point varies.  With ``params.control`` a shuffled-label copy of the data
    is run alongside as ``kind = fullspace-shuffled``.
    """
    arch = cfg.architecture.build()
    ds = load_dataset(cfg)
    sets = {"fullspace": ds}
    if cfg.params.get("control", True):
        sets["fullspace-shuffled"] = ds.with_shuffled_labels(derive_seed(cfg.seed, "control"))
    fields = {k: hessian_field(cfg, arch, v) for k, v in sets.items()}
    oc = cfg.optimizer
    n_epochs = oc.epochs or 1
    spe = steps_per_epoch(ds, oc.batch_size)
    d = int(cfg.d_grid[0])
    rho = float(cfg.rho_grid[0])
    batch_seed = derive_seed(cfg.seed, "batches")
    specs = [TrialSpec(i * cfg.seeds + s, kind, rho, d, s)
             for i, kind in enumerate(sets) for s in range(cfg.seeds)]

    def trial(spec):
        data = sets[spec.kind]
        chart = make_chart(arch, spec.rho, spec.d, "hyperplane", derive_seed(cfg.seed, "anchor", spec.seed),
                           derive_seed(cfg.seed, "projection", spec.seed), cfg.chart.scheme,
                           cfg.chart.nnz_law, cfg.chart.metric_scale, cfg.chart.overlap_bound)
        rec = _record(cfg, spec, chart=chart.descriptor())
        _measure(rec, fields[spec.kind], chart, cfg.hessian.hvp_eps)
        traj = train_fullspace(arch, chart.anchor, data, n_epochs * spe, oc.batch_size, spe, batch_seed,
                               eval_size=oc.eval_size, scheme=cfg.chart.scheme, **_adam(cfg))
        _train_fields(rec, traj)
        rec.extra["epoch_accuracy"] = [p.eval_accuracy for p in traj.points[1:]]
        rec.extra["steps_per_epoch"] = spe
        return rec

    store = ResultStore(cfg.out_dir, cfg.experiment)
    records = run_trials(cfg, store, specs, trial)
    summary = {}
    for kind in sets:
        summary[kind] = _correlate([r for r in records if r.kind == kind], n_epochs)
    summary["null_band"] = 2.0 / math.sqrt(cfg.seeds)
    return _finish(cfg, records, {"correlations": summary, "steps_per_epoch": spe})


# ---------------------------------------------------------------------------
# radius drift under full-space training


def run_radius_drift(cfg: ExperimentConfig) -> dict:
    """Full-space Adam from anchors at ``rho_grid[0]``; logs the normalized radius per epoch."""
    arch = cfg.architecture.build()
    ds = load_dataset(cfg)
    oc = cfg.optimizer
    spe = steps_per_epoch(ds, oc.batch_size)
    steps = _steps(cfg, ds)
    rho0 = float(cfg.rho_grid[0])
    specs = [TrialSpec(s, "fullspace", rho0, 0, s) for s in range(cfg.seeds)]

    def trial(spec):
        a_seed = derive_seed(cfg.seed, "anchor", spec.seed)
        x = rescale_to_multiple(InitScheme(cfg.chart.scheme, arch).sample(a_seed), arch, rho0)
        rec = _record(cfg, spec, chart={"anchor_seed": a_seed, "layer_sizes": list(arch.layer_sizes),
                                        "nonlinearity": arch.nonlinearity, "scheme": cfg.chart.scheme,
                                        "rho": rho0})
        traj = train_fullspace(arch, x, ds, steps, oc.batch_size, oc.eval_every if oc.epochs is None else spe,
                               derive_seed(cfg.seed, "batches", spec.seed), eval_size=oc.eval_size,
                               scheme=cfg.chart.scheme, **_adam(cfg))
        _train_fields(rec, traj)
        rec.extra["rho_trajectory"] = [p.rho for p in traj.points]
        rec.set_null("not_measured", *STAT_COLUMNS)
        return rec

    store = ResultStore(cfg.out_dir, cfg.experiment)
    records = run_trials(cfg, store, specs, trial)
    ok = [r for r in records if not r.diverged]
    traj = np.array([r.extra["rho_trajectory"] for r in ok]) if ok else np.zeros((0, 0))
    mean = traj.mean(0) if ok else np.array([])
    return _finish(cfg, records, {
        "steps": steps, "rho_start": rho0,
        "mean_rho_trajectory": mean.tolist(),
        "final_rho": traj[:, -1].tolist() if ok else [],
        "mean_increments_nonnegative": bool(np.all(np.diff(mean) >= 0)) if ok else False,
    })


# ---------------------------------------------------------------------------
# Wick moments and d-scaling


def _check(name, value, passed, **info) -> dict:
    return {"check": name, "value": value, "pass": bool(passed), **info}


def run_wick_check(cfg: ExperimentConfig) -> dict:
    """Random-direction moments and d-scaling on analytic fields and one live network point."""
    p = cfg.params
    D = int(p.get("D", 1000))
    n = int(cfg.hessian.wick_samples)
    rng = np.random.default_rng(derive_seed(cfg.seed, "wick"))
    checks = []

    # identity Hessian: every curvature is exactly one
    ident = random_direction_moments(lambda V: V, D, 1000, derive_seed(cfg.seed, "ident"), vectorized=True)
    checks.append(_check("identity_mean", ident.sample_mean, abs(ident.sample_mean - 1) < 1e-12))

    # diagonal Hessian with uniform entries
    h = rng.uniform(-1, 1, D)
    mom = random_direction_moments(lambda V: h[:, None] * V, D, n, derive_seed(cfg.seed, "diag"),
                                   trace=float(h.sum()), fro_norm=float(np.linalg.norm(h)), vectorized=True)
    z = abs(mom.sample_mean - mom.predicted_mean) / mom.mean_standard_error
    checks.append(_check("diag_mean_se", z, z <= p.get("mean_se", 3.0),
                         sample=mom.sample_mean, predicted=mom.predicted_mean))
    rel = abs(mom.sample_var - mom.predicted_var) / mom.predicted_var
    checks.append(_check("diag_var_rel", rel, rel <= p.get("var_rel_tol", 0.1),
                         sample=mom.sample_var, predicted=mom.predicted_var, exact=mom.exact_var))

    # d-scaling of Tr(H_d) on a quadratic with a known spectrum
    Dq = int(p.get("quad_D", 500))
    spec = rng.uniform(-0.5, 1.5, Dq)
    q, _ = np.linalg.qr(rng.standard_normal((Dq, Dq)))
    quad = QuadraticField((q * spec) @ q.T)
    d_list = [int(d) for d in cfg.d_grid]
    rows = wick_scaling_probe(quad, np.zeros(Dq), d_list, range(cfg.seeds),
                              projection_factory=lambda D_, d_, s: orthonormal_projection(
                                  D_, d_, derive_seed(cfg.seed, "quad-proj", d_, s)), hvp_eps=1.0)
    tr_mean = [np.mean([r["trace"] for r in rows if r["d"] == d]) for d in d_list]
    slope, _, r2 = linear_fit(d_list, tr_mean)
    expect = float(spec.sum()) / Dq
    checks.append(_check("quad_trace_r2", r2, r2 > p.get("r2_min", 0.99)))
    checks.append(_check("quad_trace_slope_rel", abs(slope - expect) / abs(expect),
                         abs(slope - expect) <= 0.1 * abs(expect), slope=slope, expected=expect))

    # live network at rho
    live = {}
    if p.get("live", True):
        arch = cfg.architecture.build()
        field_ = hessian_field(cfg, arch, load_dataset(cfg))
        scheme = InitScheme(cfg.chart.scheme, arch)
        rho = float(cfg.rho_grid[0])
        point = rescale_to_multiple(scheme.sample(derive_seed(cfg.seed, "anchor", 0)), arch, rho)
        metric = layer_metric(arch, cfg.chart.scheme, cfg.chart.metric_scale)
        live_rows = wick_scaling_probe(field_, point, d_list, [derive_seed(cfg.seed, "live", s) for s in range(cfg.seeds)],
                                       metric=metric, nnz_law=cfg.chart.nnz_law, hvp_eps=cfg.hessian.hvp_eps,
                                       overlap_bound=cfg.chart.overlap_bound)
        ratios = {d: float(np.mean([r["ratio"] for r in live_rows if r["d"] == d])) for d in d_list}
        live = {"rows": live_rows, "mean_ratio": ratios}
        if len(d_list) >= 2:
            a, b = ratios[d_list[-2]], ratios[d_list[-1]]
            rel = abs(a - b) / max(abs(a), abs(b))
            checks.append(_check("live_ratio_stability", rel, rel <= p.get("ratio_rel_tol", 0.25),
                                 d=[d_list[-2], d_list[-1]], ratios=[a, b]))
        # moments of random directions inside the largest restricted Hessian
        d_max = d_list[-1]
        chart = make_chart(arch, rho, d_max, anchor_seed=0, projection_seed=derive_seed(cfg.seed, "live-moments"),
                           scheme=cfg.chart.scheme, nnz_law=cfg.chart.nnz_law,
                           metric_scale=cfg.chart.metric_scale, overlap_bound=cfg.chart.overlap_bound,
                           anchor=point)
        Hd = restricted_hessian(field_, chart, hvp_eps=cfg.hessian.hvp_eps).entries
        st = curvature_stats(eigen_decompose(Hd))
        lm = random_direction_moments(lambda V: Hd @ V, d_max, int(p.get("live_samples", 20000)),
                                      derive_seed(cfg.seed, "live-dirs"), trace=st.trace,
                                      fro_norm=st.fro_norm, vectorized=True)
        z = abs(lm.sample_mean - lm.predicted_mean) / lm.mean_standard_error
        checks.append(_check("live_mean_se", z, z <= p.get("mean_se", 3.0), d=d_max))
        rel = abs(lm.sample_var - lm.predicted_var) / lm.predicted_var
        checks.append(_check("live_var_rel", rel, rel <= p.get("live_var_rel_tol", 0.1), d=d_max,
                             sample=lm.sample_var, predicted=lm.predicted_var, exact=lm.exact_var))
    return _finish(cfg, [], {"checks": checks, "live": live,
                             "all_pass": all(c["pass"] for c in checks)})


# ---------------------------------------------------------------------------
# Laplacian identity on spheres


def run_stokes_check(cfg: ExperimentConfig) -> dict:
    """Sphere-average identity on ``|x|^2``, ``|x|^4`` and on a live network shell."""
    p = cfg.params
    D = int(p.get("D", 200))
    tol = p.get("analytic_tol", 1e-9)
    r_grid = np.asarray(cfg.rho_grid, dtype=float)
    checks, tables = [], {}
    for power in (2, 4):
        rows = stokes_check(RadialPowerField(D, power), D, r_grid, samples_per_r=20,
                            seed=derive_seed(cfg.seed, "analytic", power))
        worst = max(r.rel_err for r in rows)
        tables[f"radial{power}"] = [vars(r) for r in rows]
        checks.append(_check(f"radial{power}_rel_err", worst, worst <= tol))
    if p.get("live", True):
        arch = cfg.architecture.build()
        field_ = hessian_field(cfg, arch, load_dataset(cfg))
        metric = layer_metric(arch, cfg.chart.scheme, cfg.chart.metric_scale)
        # rho = 1 corresponds to the shell of the scheme in normalized coordinates
        r1 = shell_radius_unit(arch, cfg.chart.scheme)
        rows = stokes_check(field_, arch.n_params, r_grid * r1, cfg.hessian.samples_per_r,
                            derive_seed(cfg.seed, "live"), metric=metric, probes=cfg.hessian.probes,
                            hvp_eps=cfg.hessian.hvp_eps)
        table = [dict(vars(r), rho=r.r / r1) for r in rows]
        tables["live"] = table
        centre = min(table, key=lambda r: abs(r["rho"] - 1.0))
        checks.append(_check("live_rel_err", centre["rel_err"], centre["rel_err"] < p.get("rel_tol", 0.1),
                             rho=centre["rho"], lhs=centre["lhs"], rhs=centre["rhs"], lhs_se=centre["lhs_se"]))
    return _finish(cfg, [], {"checks": checks, "tables": tables,
                             "all_pass": all(c["pass"] for c in checks)})


RUNNERS = {
    "curvature-sweep": sweep_curvature,
    "contours": sweep_accuracy_contours,
    "loss-scaling": sweep_loss_scaling,
    "tr-vs-norm": sweep_tr_vs_norm,
    "init-select": run_init_selection,
    "radius-drift": run_radius_drift,
    "wick": run_wick_check,
    "stokes": run_stokes_check,
}


def run(cfg: ExperimentConfig) -> dict:
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    Path(cfg.out_dir, f"{cfg.experiment}.config.json").write_text(cfg.to_json())
    return RUNNERS[cfg.experiment](cfg)
