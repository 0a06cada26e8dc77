"""ID/OOD combination masks and stratified train/val/test splits.

Rows of a mask index domains, columns index classes. A cell holding 1 is an
in-distribution (ID) domain-class combination; the OOD mask is always derived
as ``1 - id_cells``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import LabeledDataset
from .errors import CurationError


@dataclass
class CombinationMask:
    id_cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.id_cells)
        if cells.ndim != 2:
            raise ValueError("id_cells must be a 2-D E x K array")
        if not np.isin(cells, (0, 1)).all():
            raise ValueError("id_cells must be binary")
        self.id_cells = cells.astype(np.int64)

    @property
    def E(self) -> int:
        return self.id_cells.shape[0]

    @property
    def K(self) -> int:
        return self.id_cells.shape[1]

    @property
    def ood_cells(self) -> np.ndarray:
        return 1 - self.id_cells

    def is_id(self, domains, classes) -> np.ndarray:
        return self.id_cells[np.asarray(domains), np.asarray(classes)].astype(bool)

    def to_json(self) -> dict:
        return {"E": self.E, "K": self.K, "id_cells": self.id_cells.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "CombinationMask":
        mask = cls(np.asarray(obj["id_cells"]))
        if (mask.E, mask.K) != (obj["E"], obj["K"]):
            raise ValueError("E/K fields disagree with id_cells shape")
        return mask


def one_ood_cell_per_class(E: int, K: int) -> CombinationMask:
    """Mask with class ``k`` unseen in domain ``k mod E``."""
    cells = np.ones((E, K), dtype=np.int64)
    for k in range(K):
        cells[k % E, k] = 0
    return CombinationMask(cells)


class Violation(NamedTuple):
    axis: str  # "row" (domain) or "column" (class)
    index: int
    missing: str  # "id" or "ood"

    def __str__(self) -> str:
        return f"{self.axis} {self.index} has no {self.missing.upper()} cell"


def validate_mask(mask: CombinationMask, require_ood_per_line: bool = False) -> list[Violation]:
    """List every row/column lacking an ID cell (and, optionally, an OOD cell).

    An empty list means the mask is valid.
    """
    cells = mask.id_cells
    out: list[Violation] = []
    for axis, lines in (("row", cells), ("column", cells.T)):
        for i, line in enumerate(lines):
            if not line.any():
                out.append(Violation(axis, i, "id"))
            if require_ood_per_line and line.all():
                out.append(Violation(axis, i, "ood"))
    return out


def lowest_score_cells(scores, ood_fraction: float) -> CombinationMask:
    """Mark the ``floor(ood_fraction * E * K)`` lowest-scoring cells as OOD.

    Ties are broken by (row, column) lexicographic order.
    """
    if not 0.0 < ood_fraction < 1.0:
        raise ValueError("ood_fraction must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    e, k = scores.shape
    n_ood = math.floor(ood_fraction * e * k + 1e-9)
    flat = scores.ravel()
    # lexsort sorts by the last key first: score, then flat index (= row-major position)
    order = np.lexsort((np.arange(flat.size), flat))
    cells = np.ones(flat.size, dtype=np.int64)
    cells[order[:n_ood]] = 0
    return CombinationMask(cells.reshape(e, k))


def repair_mask(mask: CombinationMask, scores) -> tuple[CombinationMask, list[tuple[int, int]]]:
    """Flip the fewest OOD cells back to ID so every row and column has an ID cell.

    Rows and columns without an ID cell are first paired up through their
    intersection cells (one flip fixes both), highest score first; leftover
    lines each get their highest-scoring OOD cell flipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cells = mask.id_cells.copy()
    flipped: list[tuple[int, int]] = []

    def flip(r, c):
        cells[r, c] = 1
        flipped.append((int(r), int(c)))

    def best(candidates):
        # highest score; ties go to the lexicographically smallest cell
        return min(candidates, key=lambda rc: (-scores[rc], rc))

    while True:
        empty_rows = np.flatnonzero(cells.sum(axis=1) == 0)
        empty_cols = np.flatnonzero(cells.sum(axis=0) == 0)
        if empty_rows.size and empty_cols.size:
            flip(*best([(r, c) for r in empty_rows for c in empty_cols]))
        elif empty_rows.size:
            r = empty_rows[0]
            flip(*best([(r, c) for c in range(cells.shape[1])]))
        elif empty_cols.size:
            c = empty_cols[0]
            flip(*best([(r, c) for r in range(cells.shape[0])]))
        else:
            break
    return CombinationMask(cells), flipped


def curate_from_scores(scores, ood_fraction: float = 0.2) -> CombinationMask:
    """Lowest-scoring cells become OOD, then :func:`repair_mask` restores coverage."""
    repaired, _ = repair_mask(lowest_score_cells(scores, ood_fraction), scores)
    return repaired


def nearest_class_mean_scores(ds: LabeledDataset) -> np.ndarray:
    """Per-cell accuracy of a nearest class-mean classifier on raw inputs.

    Cheap stand-in for zero-shot accuracy when curating a mask. Cells with no
    samples score -1 so they sort first.
    """
    means = np.stack(
        [ds.inputs[ds.class_labels == k].mean(axis=0) if np.any(ds.class_labels == k) else np.full(ds.n_features, np.inf)
         for k in range(ds.K)]
    )
    d2 = ((ds.inputs[:, None, :] - means[None]) ** 2).sum(axis=-1)
    correct = np.argmin(d2, axis=1) == ds.class_labels
    scores = -np.ones((ds.E, ds.K))
    for e in range(ds.E):
        for k in range(ds.K):
            sel = (ds.domain_labels == e) & (ds.class_labels == k)
            if sel.any():
                scores[e, k] = correct[sel].mean()
    return scores


@dataclass
class SplitManifest:
    train: np.ndarray
    id_val: np.ndarray
    ood_val: np.ndarray
    ood_test: np.ndarray

    SPLITS = ("train", "id_val", "ood_val", "ood_test")

    def __post_init__(self):
        for name in self.SPLITS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def to_json(self) -> dict:
        return {name: getattr(self, name).tolist() for name in self.SPLITS}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        return cls(*(obj[name] for name in cls.SPLITS))

    def check(self, ds: LabeledDataset, mask: CombinationMask) -> None:
        """Raise ``CurationError`` if the manifest breaks any split invariant."""
        every = np.concatenate([getattr(self, s) for s in self.SPLITS])
        if every.size != len(ds) or not np.array_equal(np.sort(every), np.arange(len(ds))):
            raise CurationError("splits must partition the dataset exactly")
        for name in ("train", "id_val"):
            idx = getattr(self, name)
            if idx.size and not mask.is_id(ds.domain_labels[idx], ds.class_labels[idx]).all():
                raise CurationError(f"{name} contains an OOD combination")
        for name in ("ood_val", "ood_test"):
            idx = getattr(self, name)
            if idx.size and mask.is_id(ds.domain_labels[idx], ds.class_labels[idx]).any():
                raise CurationError(f"{name} contains an ID combination")


def split_dataset(
    ds: LabeledDataset,
    mask: CombinationMask,
    id_val_ratio: float = 0.1,
    rng: np.random.Generator | None = None,
) -> SplitManifest:
    """Per-cell stratified split.

    ID cells go (1 - id_val_ratio) : id_val_ratio to train : id_val, with
    train taking the ceiling. OOD cells are halved into ood_val / ood_test
    (odd remainder to ood_test).
    """
    if not 0.0 < id_val_ratio < 1.0:
        raise ValueError("id_val_ratio must lie in (0, 1)")
    if (mask.E, mask.K) != (ds.E, ds.K):
        raise ValueError("mask shape does not match dataset")
    if rng is None:
        raise ValueError("rng is required")
    parts = {name: [] for name in SplitManifest.SPLITS}
    for e in range(ds.E):
        for k in range(ds.K):
            idx = np.flatnonzero((ds.domain_labels == e) & (ds.class_labels == k))
            if idx.size == 0:
                continue
            idx = idx[rng.permutation(idx.size)]
            if mask.id_cells[e, k]:
                n_val = math.floor(idx.size * id_val_ratio + 1e-9)
                parts["train"].append(idx[: idx.size - n_val])
                parts["id_val"].append(idx[idx.size - n_val :])
            else:
                half = idx.size // 2
                parts["ood_val"].append(idx[:half])
                parts["ood_test"].append(idx[half:])
    manifest = SplitManifest(
        *(np.sort(np.concatenate(parts[name])) if parts[name] else np.zeros(0, dtype=np.int64)
          for name in SplitManifest.SPLITS)
    )
    train_y = np.unique(ds.class_labels[manifest.train])
    train_e = np.unique(ds.domain_labels[manifest.train])
    missing_y = sorted(set(range(ds.K)) - set(train_y.tolist()))
    missing_e = sorted(set(range(ds.E)) - set(train_e.tolist()))
    if missing_y or missing_e:
        raise CurationError(f"no training data for classes {missing_y} / domains {missing_e}")
    return manifest


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def load_mask(path) -> CombinationMask:
    return CombinationMask.from_json(json.loads(Path(path).read_text()))


def load_manifest(path) -> SplitManifest:
    return SplitManifest.from_json(json.loads(Path(path).read_text()))
