"""Accuracy, macro-F1, per-cell accuracy and feature-geometry diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .heads import HeadPair
from .linalg import row_space_basis, svd_compact


class UndefinedMetricError(ValueError):
    pass


def top1_accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    if truth.size == 0:
        raise UndefinedMetricError("accuracy of an empty set is undefined")
    return float(np.mean(pred == truth))


def confusion_matrix(pred, truth, K: int) -> np.ndarray:
    """K x K counts, rows = truth, columns = prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    out = np.zeros((K, K), dtype=np.int64)
    np.add.at(out, (truth, pred), 1)
    return out


def macro_f1(pred, truth, K: int) -> float:
    """Unweighted mean F1 over the classes that occur in ``truth``."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    if truth.size == 0:
        raise UndefinedMetricError("F1 of an empty set is undefined")
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= K:
        raise ValueError("labels out of range")
    cm = confusion_matrix(pred, truth, K)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    # F1 = 2 tp / (2 tp + fp + fn), zero when the denominator is zero
    denom = support + predicted
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return float(f1[present].mean())


def per_cell_accuracy(pred, truth_y, truth_e, E: int, K: int) -> np.ndarray:
    """E x K accuracy per (domain, class) cell; -1 where a cell has no samples."""
    pred = np.asarray(pred)
    truth_y = np.asarray(truth_y, dtype=np.int64)
    truth_e = np.asarray(truth_e, dtype=np.int64)
    counts = np.zeros((E, K))
    hits = np.zeros((E, K))
    np.add.at(counts, (truth_e, truth_y), 1)
    np.add.at(hits, (truth_e, truth_y), (pred == truth_y).astype(np.float64))
    return np.where(counts > 0, hits / np.maximum(counts, 1), -1.0)


def cell_counts(truth_y, truth_e, E: int, K: int) -> np.ndarray:
    counts = np.zeros((E, K), dtype=np.int64)
    np.add.at(counts, (np.asarray(truth_e, dtype=np.int64), np.asarray(truth_y, dtype=np.int64)), 1)
    return counts


def worst_domain_accuracy(pred, truth_y, truth_e) -> float:
    """Lowest per-domain accuracy among domains that have samples."""
    pred = np.asarray(pred)
    truth_y = np.asarray(truth_y)
    truth_e = np.asarray(truth_e)
    if truth_y.size == 0:
        raise UndefinedMetricError("no samples")
    return float(min(np.mean(pred[truth_e == d] == truth_y[truth_e == d]) for d in np.unique(truth_e)))


@dataclass
class FeatureDiagnostics:
    class_energy: float
    domain_energy: float
    residual_energy: float
    alignment: list  # cosine per class, nan for classes without samples
    within_cell_variance: float
    ortho_norm: float

    def to_json(self) -> dict:
        out = asdict(self)
        out["alignment"] = [None if not np.isfinite(v) else float(v) for v in self.alignment]
        return out


def feature_diagnostics(z: np.ndarray, y, e, heads: HeadPair) -> FeatureDiagnostics:
    """Subspace energies, class-mean alignment, within-cell spread, head orthogonality.

    Energies: ``class`` is the share in span(w1 rows); ``domain`` is what the
    w2 rows add on top of that; ``residual`` is the rest. They sum to one and
    reduce to the plain per-subspace shares when the heads are orthogonal.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    e = np.asarray(e, dtype=np.int64)
    total = float(np.sum(z * z))
    b1 = row_space_basis(heads.w1)
    in_class = float(np.sum((z @ b1) ** 2))
    both = np.vstack([heads.w1, heads.w2]) if heads.E else heads.w1
    in_both = float(np.sum((z @ row_space_basis(both)) ** 2))
    class_energy = in_class / total
    domain_energy = (in_both - in_class) / total
    residual = 1.0 - class_energy - domain_energy

    align = []
    for k in range(heads.K):
        sel = y == k
        if not sel.any():
            align.append(float("nan"))
            continue
        m = b1 @ (b1.T @ z[sel].mean(axis=0))
        w = heads.w1[k]
        denom = np.linalg.norm(m) * np.linalg.norm(w)
        align.append(float(m @ w / denom) if denom > 0 else float("nan"))

    var_sum, n_cells = 0.0, 0
    for key in np.unique(e * heads.K + y):
        cell = z[(e * heads.K + y) == key]
        var_sum += float(np.mean(np.sum((cell - cell.mean(axis=0)) ** 2, axis=1)))
        n_cells += 1
    ortho = float(np.linalg.norm(heads.w1 @ heads.w2.T)) if heads.E else 0.0
    return FeatureDiagnostics(class_energy, domain_energy, residual, align,
                              var_sum / max(n_cells, 1), ortho)


@dataclass
class SplitMetrics:
    n: int
    acc: float
    f1: float
    per_cell_acc: list
    worst_domain_acc: float

    def to_json(self) -> dict:
        return asdict(self)


def split_metrics(pred, truth_y, truth_e, E: int, K: int) -> SplitMetrics:
    pred = np.asarray(pred)
    if pred.size == 0:
        nan = float("nan")
        return SplitMetrics(0, nan, nan, (-np.ones((E, K))).tolist(), nan)
    return SplitMetrics(
        n=int(pred.size),
        acc=top1_accuracy(pred, truth_y),
        f1=macro_f1(pred, truth_y, K),
        per_cell_acc=per_cell_accuracy(pred, truth_y, truth_e, E, K).tolist(),
        worst_domain_acc=worst_domain_accuracy(pred, truth_y, truth_e),
    )


@dataclass
class MetricsReport:
    id_acc: float
    ood_acc: float
    id_f1: float
    ood_f1: float
    per_cell_acc: list  # E x K over the whole evaluated set, -1 for empty cells
    splits: dict = field(default_factory=dict)  # split name -> SplitMetrics json
    diag: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(json_safe(self.to_json()), sort_keys=True, indent=2) + "\n"


def json_safe(obj):
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return json_safe(obj.item())
    return obj


def evaluate(encoder, heads: HeadPair, ds, manifest, id_split: str = "id_val", ood_split: str = "ood_test",
             meta: dict | None = None) -> MetricsReport:
    """Score a trained encoder/head pair on every split of ``manifest``."""
    splits = {}
    preds = np.zeros(len(ds), dtype=np.int64)
    for name in manifest.SPLITS:
        idx = getattr(manifest, name)
        pred = heads.predict(encoder.forward(ds.inputs[idx])) if idx.size else np.zeros(0, dtype=np.int64)
        preds[idx] = pred
        splits[name] = split_metrics(pred, ds.class_labels[idx], ds.domain_labels[idx], ds.E, ds.K).to_json()
    eval_idx = np.concatenate([getattr(manifest, s) for s in manifest.SPLITS if s != "train"])
    cells = per_cell_accuracy(preds[eval_idx], ds.class_labels[eval_idx], ds.domain_labels[eval_idx], ds.E, ds.K)
    z_eval = encoder.forward(ds.inputs[eval_idx])
    diag = feature_diagnostics(z_eval, ds.class_labels[eval_idx], ds.domain_labels[eval_idx], heads) \
        if heads.E else {}
    return MetricsReport(
        id_acc=splits[id_split]["acc"],
        ood_acc=splits[ood_split]["acc"],
        id_f1=splits[id_split]["f1"],
        ood_f1=splits[ood_split]["f1"],
        per_cell_acc=cells.tolist(),
        splits=splits,
        diag=diag.to_json() if diag else {},
        meta=dict(meta or {}),
    )


def projection_coordinates(z: np.ndarray, heads: HeadPair) -> np.ndarray:
    """N x 2 coordinates: features projected into the head row spaces, then onto their top-2 principal axes."""
    z = np.asarray(z, dtype=np.float64)
    both = np.vstack([heads.w1, heads.w2]) if heads.E else heads.w1
    proj = z @ row_space_basis(both)
    centred = proj - proj.mean(axis=0)
    _, _, v = svd_compact(centred) if np.any(centred) else (None, None, np.eye(proj.shape[1]))
    axes = v[:, :2]
    coords = centred @ axes
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def write_visualization_csv(path, coords: np.ndarray, y, e, split_names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "class", "domain", "split"])
        for (cx, cy), yi, ei, s in zip(coords, y, e, split_names):
            writer.writerow([repr(float(cx)), repr(float(cy)), int(yi), int(ei), s])
