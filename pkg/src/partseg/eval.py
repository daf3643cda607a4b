"""mIoU evaluation, multi-run aggregation and result tables."""
import contextlib
import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import EmissionError, EvalError, LabelRangeError
from .inference import segment, segment_patched

# column order of the published result tables (foreground parts, then background)
TABLE_COLUMNS = {
    "car": ["Body", "Light", "Plate", "Wheel", "Window", "Background"],
    "horse": ["Head", "Leg", "Neck+Torso", "Tail", "Background"],
    "face": ["Cloth", "Eyebrow", "Ear", "Eye", "Hair", "Mouth", "Neck", "Nose", "Face", "Background"],
}


def _check_labels(pred, gt, num_classes):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvalError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for a in (pred, gt):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise LabelRangeError(f"labels outside [0, {num_classes - 1}]")
    return pred.reshape(-1).astype(np.int64), gt.reshape(-1).astype(np.int64)


def confusion_counts(pred, gt, num_classes):
    """Per-class (intersection, union) pixel counts."""
    p, g = _check_labels(pred, gt, num_classes)
    inter = np.bincount(p[p == g], minlength=num_classes)
    area_p = np.bincount(p, minlength=num_classes)
    area_g = np.bincount(g, minlength=num_classes)
    return inter, area_p + area_g - inter


def iou(pred, gt, num_classes):
    """Per-class IoU; NaN for classes absent from both masks."""
    inter, union = confusion_counts(pred, gt, num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


class IoUAccumulator:
    """Dataset-level IoU: intersections and unions summed over images before dividing.

    ``mode="image"`` instead averages per-image IoUs (kept for sensitivity checks).
    """

    def __init__(self, num_classes, mode="dataset"):
        if mode not in ("dataset", "image"):
            raise ValueError(f"unknown IoU mode {mode!r}")
        self.num_classes = num_classes
        self.mode = mode
        self.intersection = np.zeros(num_classes, np.int64)
        self.union = np.zeros(num_classes, np.int64)
        self._per_image = []

    def update(self, pred, gt):
        inter, union = confusion_counts(pred, gt, self.num_classes)
        self.intersection += inter
        self.union += union
        if self.mode == "image":
            with np.errstate(invalid="ignore", divide="ignore"):
                self._per_image.append(np.where(union > 0, inter / np.maximum(union, 1), np.nan))

    def per_class(self):
        if self.mode == "image":
            if not self._per_image:
                return np.full(self.num_classes, np.nan)
            with _quiet():
                return np.nanmean(np.stack(self._per_image), axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    def mean_iou(self):
        pc = self.per_class()
        if np.all(np.isnan(pc)):
            return float("nan")
        return float(np.nanmean(pc))


@contextlib.contextmanager
def _quiet():
    # all-NaN columns (classes absent everywhere) are expected
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@dataclass
class EvalReport:
    name: str
    class_names: List[str]
    runs: List[dict] = field(default_factory=list)  # {"label", "per_class", "average"}
    mode: str = "dataset"
    manifests: List[dict] = field(default_factory=list)

    def _matrix(self):
        return np.array([r["per_class"] for r in self.runs], dtype=np.float64)

    @property
    def per_class_mean(self):
        with _quiet():
            return np.nanmean(self._matrix(), axis=0)

    @property
    def per_class_std(self) -> Optional[np.ndarray]:
        if len(self.runs) < 2:
            return None
        with _quiet():
            return np.nanstd(self._matrix(), axis=0)

    @property
    def averages(self):
        return np.array([r["average"] for r in self.runs], dtype=np.float64)

    @property
    def average_mean(self):
        return float(np.mean(self.averages))

    @property
    def average_std(self):
        return float(np.std(self.averages)) if len(self.runs) >= 2 else None

    def to_dict(self):
        def clean(v):
            return None if v is None or (isinstance(v, float) and np.isnan(v)) else v

        return {
            "name": self.name,
            "class_names": list(self.class_names),
            "mode": self.mode,
            "runs": [{"label": r["label"], "average": clean(r["average"]),
                      "per_class": [clean(float(v)) for v in r["per_class"]]} for r in self.runs],
            "summary": {
                "per_class_mean": [clean(float(v)) for v in self.per_class_mean],
                "per_class_std": None if self.per_class_std is None
                else [clean(float(v)) for v in self.per_class_std],
                "average_mean": self.average_mean,
                "average_std": self.average_std,
            },
            "manifests": self.manifests,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        runs = [{"label": r["label"], "average": r["average"],
                 "per_class": [np.nan if v is None else v for v in r["per_class"]]} for r in d["runs"]]
        return cls(d["name"], list(d["class_names"]), runs, d.get("mode", "dataset"), d.get("manifests", []))


def run_entry(label, accumulator):
    pc = accumulator.per_class()
    return {"label": str(label), "per_class": [float(v) for v in pc], "average": accumulator.mean_iou()}


def evaluate(emb, test_samples, backbone, seeds=(0,), name="run", t_test=100, gate=0.2, use_was=True,
             target=(64, 64), patch=None, mode="dataset", cross_layers=None, self_layers=None):
    """Segment every test sample once per inference seed and accumulate IoU per seed."""
    if not test_samples:
        raise EvalError("empty test set")
    report = EvalReport(name, list(emb.class_names), mode=mode)
    for seed in seeds:
        acc = IoUAccumulator(emb.num_classes, mode)
        for s in test_samples:
            kw = dict(t_test=t_test, gate=gate, use_was=use_was, seed=seed, target=target,
                      cross_layers=cross_layers, self_layers=self_layers)
            if patch:
                res = segment_patched(s.image, emb, backbone, patch=patch["size"],
                                      layout=patch.get("layout", 4), image_size=patch["image_size"], **kw)
            else:
                res = segment(s.image, emb, backbone, **kw)
            acc.update(res.labels, s.mask)
        report.runs.append(run_entry(f"seed={seed}", acc))
    return report


def combine_reports(reports, name):
    """Pool the runs of several reports (e.g. separately optimized checkpoints) into one."""
    if not reports:
        raise EmissionError("no reports to combine")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise EmissionError("reports disagree on class schema")
    out = EvalReport(name, list(names), mode=reports[0].mode)
    for r in reports:
        out.runs.extend(r.runs)
        out.manifests.extend(r.manifests)
    return out


def _fmt(mean, std, decimals):
    if mean is None or np.isnan(mean):
        return "-"
    cell = f"{mean:.{decimals}f}"
    if std is not None and not np.isnan(std):
        cell += f" ± {std:.{decimals}f}"
    return cell


def table_rows(reports, columns=None, scale=100.0, decimals=1):
    if not reports:
        raise EmissionError("no reports to tabulate")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise EmissionError("reports disagree on class schema")
    columns = list(columns) if columns else list(names[1:]) + [names[0]]
    lower = [n.lower() for n in names]
    try:
        idx = [lower.index(c.lower()) for c in columns]
    except ValueError as e:
        raise EmissionError(f"table column not in class schema: {e}") from None
    header = ["Method"] + columns + ["Average"]
    rows = []
    for r in reports:
        mean, std = r.per_class_mean, r.per_class_std
        cells = [_fmt(mean[i] * scale, None if std is None else std[i] * scale, decimals) for i in idx]
        avg_std = r.average_std
        cells.append(_fmt(r.average_mean * scale, None if avg_std is None else avg_std * scale, decimals))
        rows.append([r.name] + cells)
    return header, rows


def emit_table(reports, fmt="markdown", columns=None, scale=100.0, decimals=1):
    """Render reports as a csv or markdown table, one row per report, "mean ± std" cells."""
    header, rows = table_rows(reports, columns, scale, decimals)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise EmissionError(f"unknown table format {fmt!r}")


def parse_cell(cell):
    if cell.strip() == "-":
        return None, None
    if "±" in cell:
        m, s = cell.split("±")
        return float(m), float(s)
    return float(cell), None


def parse_table_csv(text):
    """Inverse of ``emit_table(fmt="csv")``: [{"Method": name, column: (mean, std)}, ...]."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    out = []
    for row in reader:
        entry = {"Method": row[0]}
        for col, cell in zip(header[1:], row[1:]):
            entry[col] = parse_cell(cell)
        out.append(entry)
    return out
