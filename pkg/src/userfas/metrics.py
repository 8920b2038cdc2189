"""Presentation-attack metrics (APCER / NPCER / ACER, FAR / FRR, F1) and reports.

"Accept" means classified live. Rates over an empty class are ``None``
(serialised as ``null`` in JSON and ``undefined`` in CSV), never 0 or NaN.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

LABELS = ("live", "spoof")
SCORE_FIELDS = ("subject", "video", "frame", "true_label", "p_spoof", "decision")


@dataclass(frozen=True)
class ScoreRecord:
    subject_id: str
    video: str
    frame: int
    true_label: str
    p_spoof: float
    decision: str

    def __post_init__(self):
        if self.true_label not in LABELS or self.decision not in LABELS:
            raise ContractError(f"labels must be live/spoof, got {self.true_label!r}/{self.decision!r}")
        if not 0.0 <= self.p_spoof <= 1.0:
            raise ContractError(f"p_spoof {self.p_spoof} outside [0, 1]")


def decide(p_spoof: float, threshold: float = 0.5) -> str:
    return "spoof" if p_spoof >= threshold else "live"


@dataclass(frozen=True)
class ConfusionCounts:
    tp_live: int = 0   # live accepted
    fn_live: int = 0   # live rejected
    tn_spoof: int = 0  # spoof rejected
    fp_spoof: int = 0  # spoof accepted

    @property
    def total(self) -> int:
        return self.tp_live + self.fn_live + self.tn_spoof + self.fp_spoof


def confusion(records: Sequence[ScoreRecord], threshold: float = 0.5) -> ConfusionCounts:
    """Re-decide every record at ``threshold`` (spoof iff p_spoof >= threshold) and tally."""
    if not records:
        raise ContractError("confusion() needs at least one score record")
    if threshold < 0 or math.isnan(threshold):
        raise ContractError("threshold must be >= 0")
    tp = fn = tn = fp = 0
    for r in records:
        spoof = r.p_spoof >= threshold
        if r.true_label == "live":
            fn += spoof
            tp += not spoof
        else:
            tn += spoof
            fp += not spoof
    return ConfusionCounts(tp, fn, tn, fp)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class BoxplotSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float


@dataclass
class MetricsReport:
    accuracy: float | None
    far: float | None
    frr: float | None
    f1: float | None
    apcer: float | None
    npcer: float | None
    acer: float | None
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    threshold: float = 0.5
    per_subject: dict[str, float] = field(default_factory=dict)
    boxplot: BoxplotSummary | None = None
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["counts"] = asdict(self.counts)
        obj["boxplot"] = asdict(self.boxplot) if self.boxplot else None
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        obj = dict(obj)
        obj["counts"] = ConfusionCounts(**obj["counts"])
        obj["boxplot"] = BoxplotSummary(**obj["boxplot"]) if obj.get("boxplot") else None
        return cls(**obj)

    def rounded(self, places: int = 6) -> "MetricsReport":
        return MetricsReport.from_json(_round_floats(self.to_json(), places))


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    apcer = _ratio(counts.fp_spoof, counts.fp_spoof + counts.tn_spoof)
    npcer = _ratio(counts.fn_live, counts.fn_live + counts.tp_live)
    acer = (apcer + npcer) / 2 if apcer is not None and npcer is not None else None
    accuracy = _ratio(counts.tp_live + counts.tn_spoof, counts.total)
    f1 = _ratio(2 * counts.tp_live, 2 * counts.tp_live + counts.fp_spoof + counts.fn_live)
    return MetricsReport(
        accuracy=accuracy, far=apcer, frr=npcer, f1=f1, apcer=apcer, npcer=npcer, acer=acer, counts=counts
    )


def per_subject_accuracy(records: Sequence[ScoreRecord]) -> dict[str, float]:
    correct: dict[str, int] = {}
    total: dict[str, int] = {}
    for r in records:
        total[r.subject_id] = total.get(r.subject_id, 0) + 1
        correct[r.subject_id] = correct.get(r.subject_id, 0) + (r.decision == r.true_label)
    return {s: correct[s] / total[s] for s in sorted(total)}


def boxplot_summary(values: Iterable[float]) -> BoxplotSummary:
    """Five-number summary; quartiles by linear interpolation between order statistics.

    The p-th quantile sits at rank ``p * (n - 1)`` of the sorted values
    (the "inclusive" method, numpy's default ``linear``).
    """
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ContractError("boxplot_summary needs at least one value")

    def q(p):
        pos = p * (v.size - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, v.size - 1)
        return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))

    return BoxplotSummary(float(v[0]), q(0.25), q(0.5), q(0.75), float(v[-1]))


def evaluate(records: Sequence[ScoreRecord], threshold: float = 0.5) -> MetricsReport:
    """Full report: pooled rates at ``threshold`` plus per-subject accuracy and its boxplot."""
    decided = [
        ScoreRecord(r.subject_id, r.video, r.frame, r.true_label, r.p_spoof, decide(r.p_spoof, threshold))
        for r in records
    ]
    report = compute_metrics(confusion(decided, threshold))
    report.threshold = threshold
    report.per_subject = per_subject_accuracy(decided)
    report.boxplot = boxplot_summary(report.per_subject.values())
    return report


def threshold_sweep(records: Sequence[ScoreRecord], thresholds: Iterable[float]) -> list[dict]:
    rows = []
    for t in thresholds:
        m = compute_metrics(confusion(records, t))
        rows.append({"threshold": t, "apcer": m.apcer, "npcer": m.npcer, "acer": m.acer})
    return rows


# --- serialisation ----------------------------------------------------------


def _round_floats(obj, places):
    if isinstance(obj, float):
        return round(obj, places)
    if isinstance(obj, dict):
        return {k: _round_floats(v, places) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, places) for v in obj]
    return obj


def _dump(obj, indent=0) -> str:
    """JSON with sorted keys and every float written with exactly 6 decimals."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_dump(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _dump(v, indent + 1) for v in obj) + f"\n{pad}]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ContractError("non-finite value in report")
        return f"{obj:.6f}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.6f}"


def emit_report(report: MetricsReport, out, fmt: str = "json", plot=None) -> list[Path]:
    """Write the report as JSON (full) or CSV (per-subject ``subject,accuracy`` table)."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        out.write_text(_dump(report.to_json()) + "\n")
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "accuracy"])
        for s in sorted(report.per_subject):
            w.writerow([s, _fmt(report.per_subject[s])])
        out.write_text(buf.getvalue())
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    written = [out]
    if plot is not None and report.boxplot is not None:
        written.append(plot_boxplot(report.boxplot, plot))
    return written


def load_report(path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text()))


def plot_boxplot(summary: BoxplotSummary | dict[str, BoxplotSummary], path, title="Per-subject accuracy") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = summary if isinstance(summary, dict) else {"model": summary}
    stats = [
        {"label": name, "whislo": b.min, "q1": b.q1, "med": b.median, "q3": b.q3, "whishi": b.max, "fliers": []}
        for name, b in groups.items()
    ]
    fig, ax = plt.subplots(figsize=(3 + len(stats), 4))
    ax.bxp(stats, showfliers=False)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_scores(records: Sequence[ScoreRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow([r.subject_id, r.video, r.frame, r.true_label, f"{r.p_spoof:.6f}", r.decision])
    return path


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise ContractError(f"{path}: score header must be {','.join(SCORE_FIELDS)}")
        return [
            ScoreRecord(row["subject"], row["video"], int(row["frame"]), row["true_label"],
                        float(row["p_spoof"]), row["decision"])
            for row in reader
        ]
