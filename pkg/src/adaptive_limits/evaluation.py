"""Scoring decisions against labels.

The positive class is ``non_normal``. Ratios with a zero denominator are
reported as 0 and named in ``degenerate`` so that sweeps over many
policies never abort on an all-negative classifier.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidParameter, LengthMismatch, SingleClassInput
from .occ import NON_NORMAL, NORMAL, SUSPICIOUS, HpdDecision, binarize_labels, random_oversample
from .profiles import Label

TABLE_COLUMNS = ("policy", "g_mean", "f1", "precision", "sensitivity", "specificity",
                 "balanced_accuracy", "overall_accuracy", "accuracy_ci_lo", "accuracy_ci_hi",
                 "tp", "fp", "tn", "fn", "roc_auc", "pr_auc", "degenerate")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if v < 0 or int(v) != v:
                raise InvalidParameter(f"{name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def scaled(self, factor: int) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp * factor, self.fp * factor, self.tn * factor, self.fn * factor)


def _is_positive_label(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    if label in (NORMAL, NON_NORMAL):
        return label == NON_NORMAL
    return binarize_labels(label) == NON_NORMAL


def _is_flagged(decision) -> bool:
    if isinstance(decision, HpdDecision):
        return decision.suspicious
    if isinstance(decision, (bool, np.bool_)):
        return bool(decision)
    if decision in (SUSPICIOUS, NORMAL):
        return decision == SUSPICIOUS
    raise InvalidParameter(f"cannot read a flag from {decision!r}")


def score(decisions: Sequence, labels: Sequence | None = None) -> ConfusionMatrix:
    """Count (flag, label) pairs.

    ``decisions`` are :class:`HpdDecision` objects, booleans or flag
    strings. Labels default to the ones carried by the decisions.
    """
    if labels is None:
        labels = [d.label for d in decisions]
    if len(decisions) != len(labels):
        raise LengthMismatch(f"{len(decisions)} decisions but {len(labels)} labels")
    tp = fp = tn = fn = 0
    for d, lab in zip(decisions, labels):
        flag, pos = _is_flagged(d), _is_positive_label(lab)
        if flag and pos:
            tp += 1
        elif flag:
            fp += 1
        elif pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval for ``k`` successes in ``n`` trials."""
    if n <= 0:
        return 0.0, 1.0
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


@dataclass(frozen=True)
class Metrics:
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    g_mean: float
    balanced_accuracy: float
    overall_accuracy: float
    accuracy_ci: tuple[float, float]
    degenerate: tuple[str, ...] = ()


def _ratio(num: float, den: float, name: str, degenerate: list[str]) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> Metrics:
    deg: list[str] = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", deg)
    sensitivity = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", deg)
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", deg)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, "f1", deg)
    accuracy = _ratio(cm.tp + cm.tn, cm.total, "overall_accuracy", deg)
    return Metrics(
        precision=precision,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        g_mean=math.sqrt(sensitivity * specificity),
        balanced_accuracy=(sensitivity + specificity) / 2.0,
        overall_accuracy=accuracy,
        accuracy_ci=clopper_pearson(cm.tp + cm.tn, cm.total),
        degenerate=tuple(deg),
    )


def metrics_from_rates(sensitivity: float, specificity: float) -> tuple[float, float]:
    """(G-mean, balanced accuracy) from a published sensitivity/specificity pair."""
    return math.sqrt(sensitivity * specificity), (sensitivity + specificity) / 2.0


# ---------------------------------------------------------------------------
# curves

@dataclass(frozen=True)
class Curve:
    points: np.ndarray          # (m, 2): (FPR, TPR) or (recall, precision)
    thresholds: np.ndarray      # score threshold for each point after the first
    auc: float


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.array([_is_positive_label(v) for v in labels], dtype=bool)
    if s.size != y.size:
        raise LengthMismatch(f"{s.size} scores but {y.size} labels")
    if y.all() or not y.any():
        raise SingleClassInput("curves need both classes among the labels")
    return s, y


def _cumulative_counts(s: np.ndarray, y: np.ndarray):
    """True/false positive counts when flagging every score >= each distinct threshold."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    return s[last], tps, fps


def roc_curve(scores, labels) -> Curve:
    s, y = _prepare(scores, labels)
    thr, tps, fps = _cumulative_counts(s, y)
    fpr = np.r_[0.0, fps / (~y).sum()]
    tpr = np.r_[0.0, tps / y.sum()]
    return Curve(np.column_stack([fpr, tpr]), thr, float(np.trapezoid(tpr, fpr)))


def pr_curve(scores, labels) -> Curve:
    s, y = _prepare(scores, labels)
    thr, tps, fps = _cumulative_counts(s, y)
    recall = tps / y.sum()
    precision = tps / (tps + fps)
    recall = np.r_[0.0, recall]
    precision = np.r_[precision[0], precision]
    return Curve(np.column_stack([recall, precision]), thr, float(np.trapezoid(precision, recall)))


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class EvalReport:
    policy: str
    cm: ConfusionMatrix
    metrics: Metrics
    roc: Curve | None = None
    pr: Curve | None = None

    def row(self) -> dict:
        m = self.metrics
        return {
            "policy": self.policy,
            "g_mean": m.g_mean,
            "f1": m.f1,
            "precision": m.precision,
            "sensitivity": m.sensitivity,
            "specificity": m.specificity,
            "balanced_accuracy": m.balanced_accuracy,
            "overall_accuracy": m.overall_accuracy,
            "accuracy_ci_lo": m.accuracy_ci[0],
            "accuracy_ci_hi": m.accuracy_ci[1],
            "tp": self.cm.tp,
            "fp": self.cm.fp,
            "tn": self.cm.tn,
            "fn": self.cm.fn,
            "roc_auc": self.roc.auc if self.roc else None,
            "pr_auc": self.pr.auc if self.pr else None,
            "degenerate": ";".join(m.degenerate),
        }


def evaluate(decisions: Sequence[HpdDecision], policy: str, labels: Sequence | None = None,
             curves: bool = True) -> EvalReport:
    if labels is None:
        labels = [d.label for d in decisions]
    cm = score(decisions, labels)
    roc = pr = None
    if curves:
        pos = [_is_positive_label(v) for v in labels]
        if any(pos) and not all(pos):
            scores = [d.score for d in decisions]
            roc, pr = roc_curve(scores, labels), pr_curve(scores, labels)
    return EvalReport(policy, cm, metrics(cm), roc, pr)


def evaluate_oversampled(decisions: Sequence[HpdDecision], policy: str, rng: np.random.Generator,
                         labels: Sequence | None = None) -> EvalReport:
    """Score after replicating minority-class decisions up to class balance."""
    if labels is None:
        labels = [d.label for d in decisions]
    binary = [NON_NORMAL if _is_positive_label(v) else NORMAL for v in labels]
    bal = random_oversample(list(decisions), binary, rng)
    return evaluate(bal.items, policy, bal.labels)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_report_csv(reports: Iterable[EvalReport], stream=None, comment: str | None = None) -> str:
    out = io.StringIO()
    if comment:
        for line in comment.splitlines():
            out.write(f"# {line}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def read_report_csv(text: str) -> list[dict]:
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_curve_csv(curve: Curve, kind: str, stream=None, comment: str | None = None) -> str:
    if kind not in ("roc", "pr"):
        raise InvalidParameter("kind must be 'roc' or 'pr'")
    out = io.StringIO()
    if comment:
        for line in comment.splitlines():
            out.write(f"# {line}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["fpr", "tpr"] if kind == "roc" else ["recall", "precision"])
    for x, y in curve.points:
        w.writerow([repr(float(x)), repr(float(y))])
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# ---------------------------------------------------------------------------
# SVG rendering (decorative)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _svg_frame(title: str, xlabel: str, ylabel: str, w: int, h: int, pad: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="black"/>',
        f'<text x="{w / 2:.1f}" y="{pad / 2 + 4:.1f}" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{w / 2:.1f}" y="{h - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="12" y="{h / 2:.1f}" text-anchor="middle" transform="rotate(-90 12 {h / 2:.1f})">{ylabel}</text>',
    ]


def curves_svg(curves: Sequence[tuple[str, Curve]], kind: str, w: int = 420, h: int = 420) -> str:
    """ROC or PR curves for several policies on one unit square."""
    pad = 40
    sx = lambda x: pad + x * (w - 2 * pad)
    sy = lambda y: h - pad - y * (h - 2 * pad)
    xlabel, ylabel = ("False positive rate", "True positive rate") if kind == "roc" \
        else ("Recall", "Precision")
    parts = _svg_frame("ROC" if kind == "roc" else "Precision-Recall", xlabel, ylabel, w, h, pad)
    if kind == "roc":
        parts.append(f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" stroke="#999" stroke-dasharray="4"/>')
    for i, (name, c) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in c.points)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{w - pad - 4}" y="{pad + 14 * (i + 1)}" text-anchor="end" fill="{color}">'
                     f'{name} (AUC {c.auc:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def limits_svg(decisions: Sequence[HpdDecision], marker_index: int = 0, values: Sequence[float] | None = None,
               w: int = 560, h: int = 320) -> str:
    """Observed series with its sample-by-sample limit band (log scale)."""
    pad = 40
    lo = np.array([d.lower[marker_index] for d in decisions], dtype=float)
    hi = np.array([d.upper[marker_index] for d in decisions], dtype=float)
    vals = np.asarray(values, dtype=float) if values is not None else None
    finite = np.concatenate([x[np.isfinite(x)] for x in (lo, hi) + ((vals,) if vals is not None else ())])
    ymin, ymax = float(finite.min()), float(finite.max())
    span = ymax - ymin or 1.0
    n = len(decisions)
    sx = lambda i: pad + (i + 0.5) * (w - 2 * pad) / max(n, 1)
    sy = lambda y: h - pad - (np.clip(y, ymin, ymax) - ymin) / span * (h - 2 * pad)
    marker = decisions[0].markers[marker_index].label if decisions else ""
    parts = _svg_frame(f"{marker} limits", "sample", f"log {marker}", w, h, pad)
    for arr, dash in ((hi, "4"), (lo, "4")):
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(arr) if np.isfinite(v))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-dasharray="{dash}"/>')
    if vals is not None:
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4"/>')
        for i, (v, d) in enumerate(zip(vals, decisions)):
            fill = "#ffbf00" if d.suspicious else "#1f77b4"
            parts.append(f'<circle cx="{sx(i):.2f}" cy="{sy(v):.2f}" r="3" fill="{fill}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
