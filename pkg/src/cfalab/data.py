"""Synthetic datasets with a known compositional feature structure.

Two generators live here:

* :func:`gen_structured_features` draws features directly as
  ``R @ [z_class; z_domain; z_noise]`` so the class and domain subspaces are
  orthogonal by construction.
* :func:`gen_pixel_toy` renders small colored pattern images, where the class
  is the pattern and the domain is the hue. A learned encoder is needed to
  get at the structure.
"""

from __future__ import annotations

import colorsys
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CurationError
from .linalg import random_orthonormal, sym_psd_sqrt_factor


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    domain_label_present: np.ndarray
    K: int
    E: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.domain_labels = np.asarray(self.domain_labels, dtype=np.int64)
        self.domain_label_present = np.asarray(self.domain_label_present, dtype=bool)
        n = self.inputs.shape[0]
        for name in ("class_labels", "domain_labels", "domain_label_present"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if n:
            if self.class_labels.min() < 0 or self.class_labels.max() >= self.K:
                raise ValueError("class label out of range")
            if self.domain_labels.min() < 0 or self.domain_labels.max() >= self.E:
                raise ValueError("domain label out of range")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.inputs[idx],
            self.class_labels[idx],
            self.domain_labels[idx],
            self.domain_label_present[idx],
            self.K,
            self.E,
        )

    def with_inputs(self, inputs: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            inputs, self.class_labels, self.domain_labels, self.domain_label_present, self.K, self.E
        )


@dataclass
class SyntheticSpec:
    """Parameters of the Gaussian compositional feature generator."""

    K: int
    E: int
    d1: int
    d2: int
    d: int
    class_means: np.ndarray  # K x d1
    class_covs: np.ndarray  # K x d1 x d1
    domain_means: np.ndarray  # E x d2
    domain_covs: np.ndarray  # E x d2 x d2
    noise_scale: float
    rotation: np.ndarray  # d x d
    _class_factors: np.ndarray = field(init=False, repr=False)
    _domain_factors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.d < self.d1 + self.d2:
            raise ValueError("d must be at least d1 + d2")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        self.class_means = np.asarray(self.class_means, dtype=np.float64).reshape(self.K, self.d1)
        self.domain_means = np.asarray(self.domain_means, dtype=np.float64).reshape(self.E, self.d2)
        self.class_covs = np.asarray(self.class_covs, dtype=np.float64).reshape(self.K, self.d1, self.d1)
        self.domain_covs = np.asarray(self.domain_covs, dtype=np.float64).reshape(self.E, self.d2, self.d2)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.rotation.shape != (self.d, self.d):
            raise ValueError("rotation must be d x d")
        if np.linalg.norm(self.rotation @ self.rotation.T - np.eye(self.d)) > 1e-10:
            raise ValueError("rotation must be orthonormal")
        # raises on non-symmetric or indefinite covariances
        self._class_factors = np.stack([sym_psd_sqrt_factor(c) for c in self.class_covs])
        self._domain_factors = np.stack([sym_psd_sqrt_factor(c) for c in self.domain_covs])

    @property
    def d_noise(self) -> int:
        return self.d - self.d1 - self.d2


def simplex_vertices(n: int, dim: int) -> np.ndarray:
    """``n`` unit vectors in R^dim forming a regular simplex centred at the origin."""
    if n == 1:
        out = np.zeros((1, dim))
        out[0, 0] = 1.0
        return out
    if dim < n - 1:
        raise ValueError(f"need dim >= {n - 1} for a {n}-point simplex")
    centred = np.eye(n) - 1.0 / n
    # coordinates in an orthonormal basis of the (n-1)-dim subspace orthogonal to 1
    basis = np.linalg.svd(centred)[2][: n - 1]
    coords = centred @ basis.T
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    out = np.zeros((n, dim))
    out[:, : n - 1] = coords
    return out


def default_spec(
    K: int,
    E: int,
    d1: int | None = None,
    d2: int | None = None,
    d: int | None = None,
    sigma: float = 0.1,
    noise_scale: float = 0.1,
    rotate: bool = True,
    rng: np.random.Generator | None = None,
) -> SyntheticSpec:
    """Simplex-vertex means of norm 1, isotropic ``sigma^2 I`` covariances."""
    d1 = max(K - 1, 1) if d1 is None else d1
    d2 = max(E - 1, 1) if d2 is None else d2
    d = d1 + d2 + 2 if d is None else d
    if rotate:
        if rng is None:
            raise ValueError("rng required when rotate=True")
        rotation = random_orthonormal(d, rng)
    else:
        rotation = np.eye(d)
    return SyntheticSpec(
        K=K,
        E=E,
        d1=d1,
        d2=d2,
        d=d,
        class_means=simplex_vertices(K, d1),
        class_covs=np.stack([sigma**2 * np.eye(d1)] * K),
        domain_means=simplex_vertices(E, d2),
        domain_covs=np.stack([sigma**2 * np.eye(d2)] * E),
        noise_scale=noise_scale,
        rotation=rotation,
    )


def _check_mask_coverage(id_cells: np.ndarray) -> None:
    empty_rows = np.flatnonzero(id_cells.sum(axis=1) == 0)
    empty_cols = np.flatnonzero(id_cells.sum(axis=0) == 0)
    if empty_rows.size or empty_cols.size:
        raise CurationError(
            f"mask leaves domains {empty_rows.tolist()} / classes {empty_cols.tolist()} without data"
        )


def gen_structured_features(spec: SyntheticSpec, mask, n_per_cell: int, rng: np.random.Generator) -> LabeledDataset:
    """Draw ``n_per_cell`` samples for every ID cell of ``mask``.

    Cells are visited domain-major. Features are not normalized.
    """
    id_cells = np.asarray(getattr(mask, "id_cells", mask), dtype=np.int64)
    if id_cells.shape != (spec.E, spec.K):
        raise ValueError(f"mask must be {spec.E} x {spec.K}")
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")
    _check_mask_coverage(id_cells)

    blocks, ys, es = [], [], []
    for e in range(spec.E):
        for k in range(spec.K):
            if not id_cells[e, k]:
                continue
            z1 = spec.class_means[k] + rng.standard_normal((n_per_cell, spec.d1)) @ spec._class_factors[k].T
            z2 = spec.domain_means[e] + rng.standard_normal((n_per_cell, spec.d2)) @ spec._domain_factors[e].T
            zn = spec.noise_scale * rng.standard_normal((n_per_cell, spec.d_noise))
            blocks.append(np.hstack([z1, z2, zn]))
            ys.append(np.full(n_per_cell, k))
            es.append(np.full(n_per_cell, e))
    latent = np.vstack(blocks)
    n = latent.shape[0]
    return LabeledDataset(
        inputs=latent @ spec.rotation.T,
        class_labels=np.concatenate(ys),
        domain_labels=np.concatenate(es),
        domain_label_present=np.ones(n, dtype=bool),
        K=spec.K,
        E=spec.E,
    )


# -- pixel toy -------------------------------------------------------------

_PATTERNS = (
    lambda i, j, s: i % 2 == 0,  # horizontal stripes
    lambda i, j, s: j % 2 == 0,  # vertical stripes
    lambda i, j, s: (i + j) % 2 == 0,  # checkerboard
    lambda i, j, s: (i + j) % 4 < 2,  # diagonal bands
    lambda i, j, s: (i - j) % 4 < 2,  # anti-diagonal bands
    lambda i, j, s: (i >= s // 4) & (i < s - s // 4) & (j >= s // 4) & (j < s - s // 4),  # centre block
    lambda i, j, s: (i == 0) | (j == 0) | (i == s - 1) | (j == s - 1),  # frame
    lambda i, j, s: j < s // 2,  # left half
)
MAX_PIXEL_CLASSES = len(_PATTERNS)
MAX_PIXEL_DOMAINS = 6


def pixel_patterns(K: int, img_side: int) -> np.ndarray:
    """K x side x side binary class patterns."""
    if not 1 <= K <= MAX_PIXEL_CLASSES:
        raise ValueError(f"pixel toy supports 1..{MAX_PIXEL_CLASSES} classes, got {K}")
    if img_side < 4:
        raise ValueError("img_side must be >= 4")
    i, j = np.meshgrid(np.arange(img_side), np.arange(img_side), indexing="ij")
    return np.stack([np.asarray(p(i, j, img_side), dtype=np.float64) for p in _PATTERNS[:K]])


def domain_colors(E: int, saturation: float = 1.0) -> np.ndarray:
    """E x 3 RGB colours at evenly spaced hues, each scaled to channel mean 0.5.

    Below full saturation every channel stays positive, so each pattern shows
    up (tinted) in all three channels.
    """
    if not 1 <= E <= MAX_PIXEL_DOMAINS:
        raise ValueError(f"pixel toy supports 1..{MAX_PIXEL_DOMAINS} domains, got {E}")
    if not 0.0 < saturation <= 1.0:
        raise ValueError("saturation must lie in (0, 1]")
    rgb = np.array([colorsys.hsv_to_rgb(e / E, saturation, 1.0) for e in range(E)])
    return 0.5 * rgb / rgb.mean(axis=1, keepdims=True)


def gen_pixel_toy(
    K: int,
    E: int,
    img_side: int,
    n_per_cell: int,
    mask,
    pixel_noise: float,
    rng: np.random.Generator,
    saturation: float = 1.0,
    render: str = "tint",
) -> LabeledDataset:
    """Colored pattern images, flattened channel-first to ``3 * img_side**2`` inputs.

    ``render="multiply"`` paints the pattern in the domain colour
    (pixel = colour * pattern). ``render="tint"`` lays a translucent domain
    colour over a grey pattern (pixel = pattern + colour - 0.5), so class and
    domain enter the pixels additively.
    """
    id_cells = np.asarray(getattr(mask, "id_cells", mask), dtype=np.int64)
    if id_cells.shape != (E, K):
        raise ValueError(f"mask must be {E} x {K}")
    if pixel_noise < 0:
        raise ValueError("pixel_noise must be >= 0")
    patterns = pixel_patterns(K, img_side)
    colors = domain_colors(E, saturation)
    _check_mask_coverage(id_cells)

    images, ys, es = [], [], []
    for e in range(E):
        for k in range(K):
            if not id_cells[e, k]:
                continue
            if render == "multiply":
                clean = (colors[e][:, None, None] * patterns[k][None]).ravel()
            elif render == "tint":
                clean = (patterns[k][None] + (colors[e] - 0.5)[:, None, None]).ravel()
            else:
                raise ValueError(f"unknown render mode {render!r}")
            noise = pixel_noise * rng.standard_normal((n_per_cell, clean.size))
            images.append(clean + noise)
            ys.append(np.full(n_per_cell, k))
            es.append(np.full(n_per_cell, e))
    x = np.vstack(images)
    return LabeledDataset(
        inputs=x,
        class_labels=np.concatenate(ys),
        domain_labels=np.concatenate(es),
        domain_label_present=np.ones(x.shape[0], dtype=bool),
        K=K,
        E=E,
    )


def subsample_domain_labels(ds: LabeledDataset, ratio: float, rng: np.random.Generator) -> LabeledDataset:
    """Keep domain labels for ``ceil(ratio * N)`` random samples.

    When ``ratio > 0`` every domain keeps at least one label; missing domains
    are patched by swapping a flag away from the best-covered domain, so the
    total count stays exact whenever it is at least the number of domains.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n = len(ds)
    count = min(n, math.ceil(ratio * n - 1e-9))
    present = np.zeros(n, dtype=bool)
    present[rng.permutation(n)[:count]] = True
    if ratio > 0:
        for e in np.unique(ds.domain_labels):
            members = np.flatnonzero(ds.domain_labels == e)
            if present[members].any():
                continue
            present[rng.choice(members)] = True
            flagged_domains = ds.domain_labels[present]
            counts = np.bincount(flagged_domains, minlength=ds.E)
            donor = int(np.argmax(counts))
            if counts[donor] > 1:
                donor_idx = np.flatnonzero(present & (ds.domain_labels == donor))
                present[rng.choice(donor_idx)] = False
    out = ds.subset(np.arange(n))
    out.domain_label_present = present
    return out


# -- CFD1 container --------------------------------------------------------

DATASET_MAGIC = b"CFD1"


def save_dataset(ds: LabeledDataset, path) -> None:
    n, p = ds.inputs.shape
    header = {
        "N": n,
        "p": p,
        "K": ds.K,
        "E": ds.E,
        "fields": [
            {"name": "inputs", "dtype": "<f8", "shape": [n, p]},
            {"name": "class_labels", "dtype": "<i4", "shape": [n]},
            {"name": "domain_labels", "dtype": "<i4", "shape": [n]},
            {"name": "domain_label_present", "dtype": "<i4", "shape": [n]},
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(ds.inputs.astype("<f8").tobytes())
        fh.write(ds.class_labels.astype("<i4").tobytes())
        fh.write(ds.domain_labels.astype("<i4").tobytes())
        fh.write(ds.domain_label_present.astype("<i4").tobytes())


def load_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a CFD1 dataset")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    arrays = {}
    for fld in header["fields"]:
        dt = np.dtype(fld["dtype"])
        count = int(np.prod(fld["shape"]))
        arrays[fld["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(fld["shape"])
        offset += count * dt.itemsize
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return LabeledDataset(
        inputs=arrays["inputs"].astype(np.float64),
        class_labels=arrays["class_labels"].astype(np.int64),
        domain_labels=arrays["domain_labels"].astype(np.int64),
        domain_label_present=arrays["domain_label_present"].astype(bool),
        K=header["K"],
        E=header["E"],
    )
