"""Trial records, the CSV schema, resumable result stores and run manifests."""

from __future__ import annotations

import csv
import io
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from ..errors import FormatError

CSV_COLUMNS = ("experiment", "rho", "d", "seed", "kind", "trace", "fro_norm", "frac_positive",
               "ratio", "init_loss", "init_acc", "final_loss", "final_acc", "steps", "diverged")
CSV_HEADER = ",".join(CSV_COLUMNS)
NULL_PREFIX = "null:"

_FLOATS = ("rho", "trace", "fro_norm", "frac_positive", "ratio", "init_loss", "init_acc",
           "final_loss", "final_acc")


def trial_key(experiment, kind, rho, d, seed) -> str:
    return f"{experiment}|{kind}|{float(rho)!r}|{int(d)}|{int(seed)}"


@dataclass
class TrialRecord:
    experiment: str
    rho: float
    d: int
    seed: int
    kind: str
    trace: float | None = None
    fro_norm: float | None = None
    frac_positive: float | None = None
    ratio: float | None = None
    init_loss: float | None = None
    init_acc: float | None = None
    final_loss: float | None = None
    final_acc: float | None = None
    steps: int = 0
    diverged: bool = False
    wall_time: float = 0.0
    index: int = -1
    chart: dict = field(default_factory=dict)
    # column -> reason code for every null field
    reasons: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return trial_key(self.experiment, self.kind, self.rho, self.d, self.seed)

    def set_null(self, reason: str, *columns):
        for c in columns:
            setattr(self, c, None)
            self.reasons[c] = reason

    def check_complete(self):
        for c in _FLOATS:
            if getattr(self, c) is None and c not in self.reasons:
                raise FormatError(f"field {c!r} is null without a reason code")

    def csv_row(self) -> list[str]:
        self.check_complete()
        out = []
        for c in CSV_COLUMNS:
            v = getattr(self, c)
            if v is None:
                out.append(NULL_PREFIX + self.reasons[c])
            elif isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_csv_row(cls, row: dict) -> "TrialRecord":
        missing = [c for c in CSV_COLUMNS if c not in row]
        if missing:
            raise FormatError(f"CSV row lacks columns {missing}")
        kwargs, reasons = {}, {}
        for c in CSV_COLUMNS:
            raw = row[c]
            if raw.startswith(NULL_PREFIX):
                kwargs[c] = None
                reasons[c] = raw[len(NULL_PREFIX):]
            elif c in _FLOATS:
                kwargs[c] = float(raw)
            elif c in ("d", "seed", "steps"):
                kwargs[c] = int(raw)
            elif c == "diverged":
                kwargs[c] = raw == "1"
            else:
                kwargs[c] = raw
        return cls(**kwargs, reasons=reasons)

    def sidecar(self) -> dict:
        return {"key": self.key, "index": self.index, "wall_time": self.wall_time,
                "chart": self.chart, "reasons": self.reasons, "extra": self.extra}


def write_csv(path, records) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.csv_row())
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        return [TrialRecord.from_csv_row(row) for row in reader]


def _finite_or_none(v):
    return v if v is None or math.isfinite(v) else None


class ResultStore:
    """Append-only trial log with skip-on-resume and sorted finalization.

    ``trials.csv`` holds the fixed schema; ``trials.jsonl`` carries each row's
    chart descriptor and experiment-specific extras keyed by trial key.
    """

    def __init__(self, out_dir, name: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.dir / f"{name}.csv"
        self.side_path = self.dir / f"{name}.jsonl"
        self._lock = threading.Lock()
        self.records: dict[str, TrialRecord] = {}
        if self.csv_path.exists() and self.csv_path.stat().st_size:
            side = {}
            if self.side_path.exists():
                for line in self.side_path.read_text().splitlines():
                    if line.strip():
                        item = json.loads(line)
                        side[item["key"]] = item
            for rec in read_csv(self.csv_path):
                item = side.get(rec.key)
                if item is None:
                    # row without sidecar: partial write, redo the trial
                    continue
                rec.index, rec.wall_time = item["index"], item["wall_time"]
                rec.chart, rec.extra = item["chart"], item["extra"]
                rec.reasons.update(item["reasons"])
                self.records[rec.key] = rec
        self._rewrite()

    def done(self, key: str) -> bool:
        return key in self.records

    def _rewrite(self):
        ordered = sorted(self.records.values(), key=lambda r: r.index)
        write_csv(self.csv_path, ordered)
        self.side_path.write_text("".join(json.dumps(r.sidecar(), sort_keys=True) + "\n" for r in ordered))

    def append(self, rec: TrialRecord):
        with self._lock:
            self.records[rec.key] = rec
            with open(self.side_path, "a") as fh:
                fh.write(json.dumps(rec.sidecar(), sort_keys=True) + "\n")
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(rec.csv_row())

    def finalize(self) -> list[TrialRecord]:
        with self._lock:
            self._rewrite()
            return sorted(self.records.values(), key=lambda r: r.index)


def write_manifest(out_dir, config, records, extra=None) -> Path:
    path = Path(out_dir) / f"{config.experiment}.manifest.json"
    manifest = {
        "config_hash": config.hash(),
        "build_version": __version__,
        "config": config.to_dict(),
        "written": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "trials": {str(r.index): ("diverged" if r.diverged else "done") for r in records},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
