"""Training loops: orthogonal two-head probing, frozen-head finetuning, and baselines.

Every routine is a pure function of its inputs, config and seed. Gradients are
reduced in fixed index order, so two runs with the same seed give
bit-identical parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .encoder import MLPEncoder
from .errors import ConvergenceError
from .heads import (
    HEAD_MODES,
    NORMALIZED,
    HeadPair,
    cfa_loss,
    class_mean_rows,
    ortho_penalty,
    retract_heads,
)
from .linalg import batch_cross_entropy, l2_normalize_rows, make_rng

log = logging.getLogger(__name__)

REWEIGHT_MODES = ("none", "by_domain", "by_domain_class", "by_class")

# RNG stream ids derived from the run seed
STREAM_INIT, STREAM_PRETRAIN, STREAM_PROBE, STREAM_FINETUNE, STREAM_HEADS = range(5)


@dataclass
class TrainConfig:
    lam: float = 1.0  # domain-loss coefficient for joint probing
    stage2_lam: float = 0.0
    lambda_ortho: float = 100.0
    beta1: float = 20.0
    beta2: float = 20.0
    lr: float = 1e-3
    probe_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    reweight: str = "none"
    freeze_heads: bool = True
    head_mode: str = NORMALIZED
    ortho_mode: str = "penalty"
    weight_decay: float = 0.01
    stage1_iters: int = 6000
    stage1_schedule: str = "two_step"
    ortho_threshold: float = 1e-3
    project_cleanup: bool = True
    pretrain_epochs: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("lam", "stage2_lam", "lambda_ortho", "lr", "probe_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.stage1_iters < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and stage1_iters >= 1 required")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("logit scales must be positive")
        if self.reweight not in REWEIGHT_MODES:
            raise ValueError(f"reweight must be one of {REWEIGHT_MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.ortho_mode not in ("penalty", "projection"):
            raise ValueError("ortho_mode must be 'penalty' or 'projection'")
        if self.stage1_schedule not in ("two_step", "joint"):
            raise ValueError("stage1_schedule must be 'two_step' or 'joint'")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- optimizer -------------------------------------------------------------


def cosine_lr(base_lr: float, step_index: int, total_steps: int) -> float:
    """``base_lr * (1 + cos(pi t / T)) / 2``; zero at ``t = T``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step_index / total_steps))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_cosine_step(
    state: AdamWState,
    params: dict,
    grads: dict,
    step_index: int,
    total_steps: int,
    cfg: TrainConfig,
    base_lr: float | None = None,
) -> dict:
    """One AdamW update under a cosine-annealed learning rate.

    Moments in ``state`` are updated in place; a new parameter dict is
    returned. Parameters without a gradient entry are passed through.
    """
    if step_index > total_steps:
        raise ValueError("step_index beyond schedule")
    lr = cosine_lr(cfg.lr if base_lr is None else base_lr, step_index, total_steps)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = step_index + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new = p * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else p
        out[name] = new - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return out


# -- sampling --------------------------------------------------------------


class GroupSampler:
    """Draw sample indices by first picking a group uniformly, then a member uniformly.

    With a single group this is plain uniform sampling with replacement, so
    every mode produces the same stream for single-group data.
    """

    def __init__(self, indices: np.ndarray, groups: np.ndarray, rng: np.random.Generator):
        indices = np.asarray(indices, dtype=np.int64)
        groups = np.asarray(groups)
        keys = np.unique(groups)
        self.members = []
        for key in keys:
            mem = indices[groups == key]
            if mem.size == 0:
                log.warning("group %s is empty; skipped", key)
                continue
            self.members.append(mem)
        if not self.members:
            raise ValueError("sampler needs at least one nonempty group")
        self.sizes = np.array([m.size for m in self.members])
        self.n = int(indices.size)
        self.rng = rng

    @property
    def n_groups(self) -> int:
        return len(self.members)

    def draw(self, count: int) -> np.ndarray:
        u = self.rng.random((2, count))
        g = np.minimum((u[0] * self.n_groups).astype(np.int64), self.n_groups - 1)
        pos = np.minimum((u[1] * self.sizes[g]).astype(np.int64), self.sizes[g] - 1)
        return np.array([self.members[gi][pi] for gi, pi in zip(g, pos)], dtype=np.int64)

    def epoch(self, batch_size: int) -> list[np.ndarray]:
        """``N`` draws cut into consecutive batches."""
        idx = self.draw(self.n)
        return [idx[i : i + batch_size] for i in range(0, self.n, batch_size)]


def group_keys(ds: LabeledDataset, indices: np.ndarray, mode: str) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if mode == "none":
        return np.zeros(indices.size, dtype=np.int64)
    if mode == "by_domain":
        return ds.domain_labels[indices]
    if mode == "by_class":
        return ds.class_labels[indices]
    if mode == "by_domain_class":
        return ds.domain_labels[indices] * ds.K + ds.class_labels[indices]
    raise ValueError(f"unknown reweight mode {mode!r}")


def make_sampler(ds: LabeledDataset, indices, mode: str, rng: np.random.Generator) -> GroupSampler:
    indices = np.asarray(indices, dtype=np.int64)
    return GroupSampler(indices, group_keys(ds, indices, mode), rng)


def balanced_weights(groups: np.ndarray) -> np.ndarray:
    """Per-sample weights giving every group equal total mass (the sampler's expectation)."""
    groups = np.asarray(groups)
    keys, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    return 1.0 / (keys.size * counts[inverse])


# -- stage 1: orthogonal two-head probing ----------------------------------


@dataclass
class ProbeTrace:
    domain_loss: list = field(default_factory=list)
    class_loss: list = field(default_factory=list)
    ortho_norm: list = field(default_factory=list)  # ||w1 w2^T||_F after each step of the class phase

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _plateaued(trace: list[float], rel_tol: float = 1e-3) -> bool:
    if not trace or not all(np.isfinite(trace)):
        return False
    tail = trace[int(0.9 * (len(trace) - 1))]
    return abs(trace[-1] - tail) <= rel_tol * max(1.0, abs(trace[-1]))


def init_heads(features: np.ndarray, y, e, present, K: int, E: int, cfg: TrainConfig) -> HeadPair:
    """Class-mean rows for both heads (domain means use labelled samples only)."""
    present = np.asarray(present, dtype=bool)
    w1 = class_mean_rows(features, y, K)
    w2 = class_mean_rows(features[present], np.asarray(e)[present], E)
    return HeadPair(w1=w1, w2=w2, beta1=cfg.beta1, beta2=cfg.beta2, mode=cfg.head_mode)


def stage1_linear_probe(features, y, e, present, cfg: TrainConfig, K: int | None = None,
                        E: int | None = None, heads: HeadPair | None = None):
    """Fit orthogonal class/domain heads on frozen, unit-norm features.

    Two-step schedule (default): the domain head is fit alone on
    domain-balanced cross-entropy, then the class head is fit on
    cell-balanced cross-entropy plus ``lambda_ortho * ||w1 w2^T||_F^2`` with
    the domain head fixed. The joint schedule minimizes the full two-head
    objective over both heads at once. Returns ``(heads, trace)``.
    """
    z = l2_normalize_rows(np.asarray(features, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    e = np.asarray(e, dtype=np.int64)
    present = np.ones(len(y), dtype=bool) if present is None else np.asarray(present, dtype=bool)
    K = int(y.max()) + 1 if K is None else K
    E = int(e.max()) + 1 if E is None else E
    if z.shape[1] < K + E:
        raise ValueError("feature dimension must be at least K + E")
    if cfg.head_mode != NORMALIZED:
        raise ValueError("orthogonal probing requires normalized heads")
    if heads is None:
        heads = init_heads(z, y, e, present, K, E, cfg)
    trace = ProbeTrace()
    dom_w = np.zeros(len(y))
    dom_w[present] = balanced_weights(e[present])
    cell_w = balanced_weights(e * K + y)
    T = cfg.stage1_iters
    rng = make_rng(cfg.seed, STREAM_HEADS)

    def retract(h):
        return retract_heads(h, cfg.ortho_mode, rng=rng)

    if cfg.stage1_schedule == "two_step":
        # (i) domain head only
        state = AdamWState()
        zp, ep, wp = z[present], e[present], dom_w[present]
        for t in range(T):
            loss, grad_w2 = _weighted_domain_ce(heads, zp, ep, wp)
            trace.domain_loss.append(loss)
            new = adamw_cosine_step(state, {"w2": heads.w2}, {"w2": grad_w2}, t, T, cfg, cfg.probe_lr)
            heads = retract_heads(dataclasses.replace(heads, w2=new["w2"]), "penalty")
        if not _plateaued(trace.domain_loss):
            raise ConvergenceError("domain head did not converge", trace.domain_loss)
        # (ii) class head with orthogonality penalty, domain head frozen
        state = AdamWState()
        for t in range(T):
            loss, grads, parts = cfa_loss(heads, z, y, e, present, 0.0, class_weights=cell_w)
            pen, pen_grad = ortho_penalty(heads.w1, heads.w2)
            trace.class_loss.append(parts["class"])
            g = grads["w1"] + cfg.lambda_ortho * pen_grad
            new = adamw_cosine_step(state, {"w1": heads.w1}, {"w1": g}, t, T, cfg, cfg.probe_lr)
            heads = retract(dataclasses.replace(heads, w1=new["w1"]))
            trace.ortho_norm.append(float(np.linalg.norm(heads.w1 @ heads.w2.T)))
    else:
        state = AdamWState()
        for t in range(T):
            loss, grads, parts = cfa_loss(heads, z, y, e, present, cfg.lam,
                                          class_weights=cell_w, domain_weights=dom_w)
            pen, pen_grad = ortho_penalty(heads.w1, heads.w2)
            trace.class_loss.append(parts["class"])
            trace.domain_loss.append(parts["domain"])
            g = {
                "w1": grads["w1"] + cfg.lambda_ortho * pen_grad,
                "w2": grads["w2"] + cfg.lambda_ortho * 2.0 * (heads.w1 @ heads.w2.T).T @ heads.w1,
            }
            new = adamw_cosine_step(state, {"w1": heads.w1, "w2": heads.w2}, g, t, T, cfg, cfg.probe_lr)
            heads = retract(dataclasses.replace(heads, w1=new["w1"], w2=new["w2"]))
            trace.ortho_norm.append(float(np.linalg.norm(heads.w1 @ heads.w2.T)))

    if cfg.project_cleanup:
        heads = retract_heads(heads, "projection", rng=rng)
    final = float(np.linalg.norm(heads.w1 @ heads.w2.T))
    if final > cfg.ortho_threshold:
        raise ConvergenceError(f"heads not orthogonal: ||w1 w2^T||_F = {final:.3g}", trace.ortho_norm)
    return heads, trace


def _weighted_domain_ce(heads: HeadPair, z, e, weights) -> tuple[float, np.ndarray]:
    ce, g = batch_cross_entropy(heads.domain_logits(z), e)
    c = weights / weights.sum()
    return float(c @ ce), heads.beta2 * (c[:, None] * g).T @ z


# -- checkpoints -----------------------------------------------------------


@dataclass
class CheckpointBundle:
    encoder: MLPEncoder
    heads: HeadPair
    config: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"heads.{k}": v for k, v in self.heads.params().items()})
        return out

    def copy(self) -> "CheckpointBundle":
        return CheckpointBundle(self.encoder.copy(), self.heads.copy(), json.loads(json.dumps(self.config)),
                                json.loads(json.dumps(self.trace)))

    def with_tensors(self, tensors: dict) -> "CheckpointBundle":
        enc = self.encoder.copy()
        enc.set_params({k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")})
        heads = self.heads.with_params({k[len("heads."):]: v for k, v in tensors.items() if k.startswith("heads.")})
        return CheckpointBundle(enc, heads, dict(self.config), dict(self.trace))


CHECKPOINT_MAGIC = b"CFA1"


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    tensors = bundle.tensors()
    header = {
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in tensors.items()],
        "encoder": {
            "layer_dims": bundle.encoder.layer_dims,
            "activation": bundle.encoder.activation,
            "output_normalize": bundle.encoder.output_normalize,
        },
        "heads": {"beta1": bundle.heads.beta1, "beta2": bundle.heads.beta2, "mode": bundle.heads.mode},
        "config": bundle.config,
        "trace": bundle.trace,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CFA1 checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    enc_meta = header["encoder"]
    enc = MLPEncoder(
        enc_meta["layer_dims"], enc_meta["activation"], enc_meta["output_normalize"],
        params={k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")},
    )
    head_params = {k[len("heads."):]: v for k, v in tensors.items() if k.startswith("heads.")}
    heads = HeadPair(beta1=header["heads"]["beta1"], beta2=header["heads"]["beta2"],
                     mode=header["heads"]["mode"], **head_params)
    return CheckpointBundle(enc, heads, header["config"], header["trace"])


METRIC_COLUMNS = ("epoch", "split", "loss_class", "loss_domain", "loss_ortho", "acc")


def append_metrics_csv(path, rows) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


# -- stage 2 and baselines: encoder training loops -------------------------


def _finetune(
    enc: MLPEncoder,
    heads: HeadPair,
    ds: LabeledDataset,
    indices: np.ndarray,
    cfg: TrainConfig,
    lam: float,
    train_heads: bool,
    sampler_mode: str,
    stream: int,
    epochs: int,
) -> CheckpointBundle:
    """Shared minibatch loop: encoder (and optionally heads) on the two-head loss."""
    enc = enc.copy()
    heads = heads.copy()
    rng = make_rng(cfg.seed, stream)
    sampler = make_sampler(ds, indices, sampler_mode, rng)
    n_batches = math.ceil(len(indices) / cfg.batch_size)
    total = epochs * n_batches
    state = AdamWState()
    rows = []
    step = 0
    for epoch in range(epochs):
        sums = np.zeros(4)
        seen = 0
        for batch in sampler.epoch(cfg.batch_size):
            x = ds.inputs[batch]
            z, cache = enc.forward(x, return_cache=True)
            loss, grads, parts = cfa_loss(
                heads, z, ds.class_labels[batch], ds.domain_labels[batch],
                ds.domain_label_present[batch], lam,
            )
            enc_grads = enc.backward(cache, grads["z"])
            params = {f"enc.{k}": v for k, v in enc.params().items()}
            all_grads = {f"enc.{k}": v for k, v in enc_grads.items()}
            if train_heads:
                params.update({f"head.{k}": v for k, v in heads.params().items()})
                all_grads.update({f"head.{k}": grads[k] for k in heads.params()})
            new = adamw_cosine_step(state, params, all_grads, step, total, cfg)
            enc.set_params({k[4:]: v for k, v in new.items() if k.startswith("enc.")})
            if train_heads:
                heads = heads.with_params({k[5:]: v for k, v in new.items() if k.startswith("head.")})
                if heads.mode == NORMALIZED:
                    heads = retract_heads(heads, "penalty")
            step += 1
            acc = float(np.mean(heads.predict(z) == ds.class_labels[batch]))
            pen = float(np.sum((heads.w1 @ heads.w2.T) ** 2)) if heads.E else 0.0
            sums += len(batch) * np.array([parts["class"], parts["domain"], pen, acc])
            seen += len(batch)
        means = sums / max(seen, 1)
        rows.append({"epoch": epoch, "split": "train", "loss_class": means[0], "loss_domain": means[1],
                     "loss_ortho": means[2], "acc": means[3]})
    trace = {"epochs": [{k: (float(v) if k not in ("epoch", "split") else v) for k, v in r.items()} for r in rows]}
    return CheckpointBundle(enc, heads, {"train": cfg.to_dict()}, trace)


def pretrain_encoder(ds: LabeledDataset, indices, layer_dims, cfg: TrainConfig,
                     activation: str = "tanh", domain_head: bool = True) -> MLPEncoder:
    """Stand-in for a pretrained backbone: a few epochs of supervised training on ID data.

    By default the encoder is trained against a class head and an auxiliary
    domain head (domain term only where the label is present), so its
    features carry both kinds of information. With ``domain_head=False`` it
    sees class labels only, which largely erases the domain signal.
    """
    indices = np.asarray(indices, dtype=np.int64)
    enc = MLPEncoder(layer_dims, activation=activation, rng=make_rng(cfg.seed, STREAM_INIT))
    heads = _class_head(enc, ds, indices, cfg)
    lam = 0.0
    if domain_head:
        z = enc.forward(ds.inputs[indices])
        present = ds.domain_label_present[indices]
        w2 = class_mean_rows(z[present], ds.domain_labels[indices][present], ds.E)
        heads = dataclasses.replace(heads, w2=w2) if heads.mode == NORMALIZED else HeadPair(
            w1=heads.w1, w2=w2, beta1=heads.beta1, beta2=heads.beta2, mode=heads.mode)
        lam = 1.0
    bundle = _finetune(enc, heads, ds, indices, cfg, lam, True, "none", STREAM_PRETRAIN, cfg.pretrain_epochs)
    return bundle.encoder


def _class_head(enc: MLPEncoder, ds: LabeledDataset, indices, cfg: TrainConfig) -> HeadPair:
    """Class-only head initialized at normalized class-mean features (domain head empty)."""
    indices = np.asarray(indices, dtype=np.int64)
    z = enc.forward(ds.inputs[indices])
    w1 = class_mean_rows(z, ds.class_labels[indices], ds.K)
    return HeadPair(w1=w1, w2=np.zeros((0, enc.output_dim)), beta1=cfg.beta1, beta2=cfg.beta2, mode=cfg.head_mode)


def stage2_finetune(enc: MLPEncoder, heads: HeadPair, ds: LabeledDataset, split, cfg: TrainConfig) -> CheckpointBundle:
    """Finetune the encoder end to end against heads from :func:`stage1_linear_probe`.

    With ``cfg.freeze_heads`` (the CFA recipe) the heads come back
    bit-identical; otherwise they train too (frozen vs trainable ablation).
    """
    before = heads.digest()
    bundle = _finetune(enc, heads, ds, split.train, cfg, cfg.stage2_lam, not cfg.freeze_heads,
                       cfg.reweight, STREAM_FINETUNE, cfg.epochs)
    if cfg.freeze_heads:
        assert bundle.heads.digest() == before, "frozen heads were modified"
    return bundle


def probe_features(enc: MLPEncoder, ds: LabeledDataset, indices) -> np.ndarray:
    return enc.forward(ds.inputs[np.asarray(indices, dtype=np.int64)])


def train_cfa(enc: MLPEncoder, ds: LabeledDataset, split, cfg: TrainConfig) -> tuple[CheckpointBundle, CheckpointBundle]:
    """Stage 1 on frozen features, then stage 2. Returns ``(probe_bundle, final_bundle)``."""
    idx = split.train
    z = probe_features(enc, ds, idx)
    heads, trace = stage1_linear_probe(z, ds.class_labels[idx], ds.domain_labels[idx],
                                       ds.domain_label_present[idx], cfg, K=ds.K, E=ds.E)
    probe = CheckpointBundle(enc.copy(), heads, {"train": cfg.to_dict()}, {"probe": trace.to_dict()})
    final = stage2_finetune(enc, heads, ds, split, cfg)
    final.trace["probe"] = trace.to_dict()
    return probe, final


def baseline_full_finetune(enc: MLPEncoder, ds: LabeledDataset, split, cfg: TrainConfig,
                           heads: HeadPair | None = None) -> CheckpointBundle:
    """Encoder and class head trained jointly on class cross-entropy.

    ``cfg.reweight`` selects the sampler, which gives the Reweight-E
    (``by_domain``) and Reweight-YxE (``by_domain_class``) baselines.
    ``cfg.freeze_heads`` keeps the class head fixed at its initialization.
    """
    if heads is None:
        heads = _class_head(enc, ds, split.train, cfg)
    return _finetune(enc, heads, ds, split.train, cfg, 0.0, not cfg.freeze_heads, cfg.reweight,
                     STREAM_FINETUNE, cfg.epochs)


def linear_probe_class_head(z: np.ndarray, y, K: int, cfg: TrainConfig, heads: HeadPair | None = None) -> HeadPair:
    """Class-balanced full-batch probing of a single class head on frozen features."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if heads is None:
        heads = HeadPair(w1=class_mean_rows(z, y, K), w2=np.zeros((0, z.shape[1])),
                         beta1=cfg.beta1, beta2=cfg.beta2, mode=cfg.head_mode)
    weights = balanced_weights(y)
    empty = np.zeros(len(y), dtype=np.int64)
    state = AdamWState()
    T = cfg.stage1_iters
    for t in range(T):
        _, grads, _ = cfa_loss(heads, z, y, empty, None, 0.0, class_weights=weights)
        names = list(heads.params())
        new = adamw_cosine_step(state, heads.params(), {k: grads[k] for k in names if k in ("w1", "b1")}, t, T, cfg,
                                cfg.probe_lr)
        heads = heads.with_params(new)
        if heads.mode == NORMALIZED:
            heads = retract_heads(heads, "penalty")
    return heads


def baseline_lp_ft(enc: MLPEncoder, ds: LabeledDataset, split, cfg: TrainConfig) -> tuple[CheckpointBundle, CheckpointBundle]:
    """Linear probe (class-reweighted) then full finetuning. Returns ``(probe_bundle, final_bundle)``."""
    z = probe_features(enc, ds, split.train)
    heads = linear_probe_class_head(z, ds.class_labels[split.train], ds.K, cfg)
    probe = CheckpointBundle(enc.copy(), heads, {"train": cfg.to_dict()}, {"stage": "probe"})
    log.info("lp_ft: probe finished, starting finetuning")
    final = baseline_full_finetune(enc, ds, split, cfg.replace(freeze_heads=False), heads=heads)
    final.trace["stage_boundary"] = "probe->finetune"
    return probe, final
