"""Run configuration and the per-seed experiment pipeline.

A run is described by a TOML file with four sections::

    method = "cfa"            # cfa | ft | lp_ft | reweight_e | reweight_yxe
    seeds = [0, 1, 2]
    out = "runs/demo"
    wise_alpha = 0.5          # optional

    [data]      # generator or source file, mask, split
    [encoder]   # backbone shape and pretraining
    [train]     # any TrainConfig field

Every output carries the config hash (sha256 of the resolved config without
``out`` and ``seeds``) and the seed, and contains nothing run-dependent beyond
that, so re-running a seed rewrites identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .data import LabeledDataset, default_spec, gen_pixel_toy, gen_structured_features, load_dataset, \
    subsample_domain_labels
from .encoder import MLPEncoder, wise_interpolate
from .errors import CFALabError, ConfigError, CurationError
from .linalg import make_rng
from .metrics import MetricsReport, evaluate, json_safe
from .split import CombinationMask, SplitManifest, curate_from_scores, load_mask, nearest_class_mean_scores, \
    one_ood_cell_per_class, split_dataset, validate_mask
from .train import (
    CheckpointBundle,
    TrainConfig,
    _class_head,
    baseline_full_finetune,
    baseline_lp_ft,
    pretrain_encoder,
    save_checkpoint,
    train_cfa,
)

log = logging.getLogger(__name__)

METHODS = ("cfa", "ft", "lp_ft", "reweight_e", "reweight_yxe")
_METHOD_REWEIGHT = {"ft": "none", "lp_ft": "none", "reweight_e": "by_domain", "reweight_yxe": "by_domain_class"}

# data-side rng streams, keyed off data.seed
_STREAM_DATA, _STREAM_SPLIT, _STREAM_LABELS, _STREAM_SPEC = range(4)


@dataclass
class DataConfig:
    kind: str = "pixel"  # pixel | structured
    source: str = ""  # CFD1 file; overrides generation when set
    K: int = 4
    E: int = 3
    n_per_cell: int = 500
    img_side: int = 8
    pixel_noise: float = 1.0
    saturation: float = 1.0
    render: str = "tint"
    d1: int = 0  # 0 = generator default
    d2: int = 0
    d: int = 0
    sigma: float = 0.1
    noise_scale: float = 0.1
    seed: int = 100
    mask: str = "one_per_class"  # one_per_class | curate | path to mask JSON
    ood_fraction: float = 0.2
    id_val_ratio: float = 0.1
    domain_label_ratio: float = 1.0


@dataclass
class EncoderConfig:
    hidden: list = field(default_factory=lambda: [64])
    out_dim: int = 16
    activation: str = "tanh"
    pretrain_domain_head: bool = True
    seed: int = 0  # the backbone is shared by all run seeds


@dataclass
class RunConfig:
    method: str = "cfa"
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    wise_alpha: float | None = None
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["wise_alpha"] is None:
            del out["wise_alpha"]
        return out

    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("out")
        body.pop("seeds")
        body["train"].pop("seed")
        blob = json.dumps(body, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def echo(self) -> str:
        """Fully resolved config as TOML, defaults included."""
        return f"# config_hash = {self.config_hash()}\n" + tomli_w.dumps(self.to_dict())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def benchmark_config(**changes) -> RunConfig:
    """The compositional-generalization benchmark used for the CFA vs FT comparison.

    Pixel toy with K=4 patterns, E=3 hues, 500 samples per cell, one unseen
    domain per class, a shared pretrained backbone and a short finetuning
    schedule (10 epochs, 2000 probing steps per phase) so five seeds of two
    methods fit in well under five minutes.
    """
    cfg = RunConfig(seeds=[0, 1, 2, 3, 4], out="runs/cg_benchmark",
                    train=TrainConfig(epochs=10, stage1_iters=2000))
    return cfg.replace(**changes) if changes else cfg


# -- config parsing ----------------------------------------------------------


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """1-based line of ``key = ...`` inside ``[section]`` (top level when None)."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if section is not None and current == section and key is None:
                return n
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return n
    return None


def _section_line(text: str, section: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if re.match(rf"^\[\s*{re.escape(section)}\s*\]", line.strip()):
            return n
    return None


def _type_ok(value, default, annotation: str) -> bool:
    if "float" in annotation:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _build(cls, values: dict, text: str, section: str | None, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        line = _key_line(text, section, key)
        loc = f"{where}:{line}" if line else where
        label = f"[{section}] {key}" if section else key
        if key not in fields:
            raise ConfigError(f"{loc}: unknown key {label!r}")
        if not _type_ok(value, getattr(defaults, key), str(fields[key].type)):
            raise ConfigError(f"{loc}: {label} has the wrong type ({type(value).__name__})")
        if "float" in str(fields[key].type) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        line = _section_line(text, section) if section else None
        loc = f"{where}:{line}" if line else where
        raise ConfigError(f"{loc}: {exc}") from None


def parse_run_config(text: str, where: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"{where}:{line}: {getattr(exc, 'msg', exc)}" if line else f"{where}: {exc}") from None
    sections = {}
    for name in ("data", "encoder", "train"):
        value = raw.pop(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"{where}:{_key_line(text, None, name) or '?'}: {name} must be a table")
        sections[name] = value
    for key in list(raw):
        if isinstance(raw[key], dict):
            raise ConfigError(f"{where}:{_section_line(text, key) or '?'}: unknown section [{key}]")
    top = _build(_TopLevel, raw, text, None, where)
    data = _build(DataConfig, sections["data"], text, "data", where)
    enc = _build(EncoderConfig, sections["encoder"], text, "encoder", where)
    train = _build(TrainConfig, sections["train"], text, "train", where)
    cfg = RunConfig(method=top.method, seeds=list(top.seeds), out=top.out, wise_alpha=top.wise_alpha,
                    data=data, encoder=enc, train=train)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    validate_run_config(cfg, text, where)
    return cfg


@dataclass
class _TopLevel:
    method: str = "cfa"
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    wise_alpha: float | None = None


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    data = cfg.data
    changes = {}
    if data.source and not Path(data.source).is_absolute():
        changes["source"] = str(base / data.source)
    if data.mask not in ("one_per_class", "curate") and not Path(data.mask).is_absolute():
        changes["mask"] = str(base / data.mask)
    if changes:
        cfg = cfg.replace(data=dataclasses.replace(data, **changes))
    return cfg


def validate_run_config(cfg: RunConfig, text: str = "", where: str = "<config>") -> None:
    def fail(section, key, msg):
        line = _key_line(text, section, key) if text else None
        raise ConfigError(f"{where}:{line}: {msg}" if line else f"{where}: {msg}")

    if cfg.method not in METHODS:
        fail(None, "method", f"method must be one of {METHODS}, got {cfg.method!r}")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        fail(None, "seeds", "seeds must be a nonempty list of non-negative integers")
    if cfg.wise_alpha is not None and not 0.0 <= cfg.wise_alpha <= 1.0:
        fail(None, "wise_alpha", "wise_alpha must lie in [0, 1]")
    d = cfg.data
    if d.kind not in ("pixel", "structured"):
        fail("data", "kind", "data.kind must be 'pixel' or 'structured'")
    if d.render not in ("tint", "multiply"):
        fail("data", "render", "data.render must be 'tint' or 'multiply'")
    for key in ("K", "E", "n_per_cell", "img_side"):
        if getattr(d, key) < 1:
            fail("data", key, f"data.{key} must be >= 1")
    if d.K < 2 or d.E < 1:
        fail("data", "K", "need K >= 2 and E >= 1")
    if d.source and not Path(d.source).exists():
        fail("data", "source", f"data.source {d.source!r} does not exist")
    if d.mask not in ("one_per_class", "curate") and not Path(d.mask).exists():
        fail("data", "mask", f"data.mask {d.mask!r} is neither a keyword nor an existing file")
    if not 0.0 < d.ood_fraction < 1.0:
        fail("data", "ood_fraction", "data.ood_fraction must lie in (0, 1)")
    if not 0.0 < d.id_val_ratio < 1.0:
        fail("data", "id_val_ratio", "data.id_val_ratio must lie in (0, 1)")
    if not 0.0 <= d.domain_label_ratio <= 1.0:
        fail("data", "domain_label_ratio", "data.domain_label_ratio must lie in [0, 1]")
    e = cfg.encoder
    if e.out_dim < d.K + d.E:
        fail("encoder", "out_dim", f"encoder.out_dim must be >= K + E = {d.K + d.E}")
    if not all(isinstance(h, int) and h >= 1 for h in e.hidden):
        fail("encoder", "hidden", "encoder.hidden must list positive layer widths")
    if e.activation not in ("tanh", "relu"):
        fail("encoder", "activation", "encoder.activation must be 'tanh' or 'relu'")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_run_config(text, str(path), path.parent)


# -- pipeline pieces -----------------------------------------------------------


def build_dataset(data: DataConfig) -> LabeledDataset:
    """Full E x K grid of samples (the combination mask is applied at split time)."""
    if data.source:
        ds = load_dataset(data.source)
    elif data.kind == "pixel":
        ds = gen_pixel_toy(data.K, data.E, data.img_side, data.n_per_cell, np.ones((data.E, data.K), dtype=np.int64),
                           data.pixel_noise, make_rng(data.seed, _STREAM_DATA), saturation=data.saturation,
                           render=data.render)
    else:
        spec = default_spec(data.K, data.E, d1=data.d1 or None, d2=data.d2 or None, d=data.d or None,
                            sigma=data.sigma, noise_scale=data.noise_scale, rng=make_rng(data.seed, _STREAM_SPEC))
        ds = gen_structured_features(spec, np.ones((data.E, data.K), dtype=np.int64), data.n_per_cell,
                                     make_rng(data.seed, _STREAM_DATA))
    if data.domain_label_ratio < 1.0:
        ds = subsample_domain_labels(ds, data.domain_label_ratio, make_rng(data.seed, _STREAM_LABELS))
    return ds


def build_mask(data: DataConfig, ds: LabeledDataset) -> CombinationMask:
    if data.mask == "one_per_class":
        mask = one_ood_cell_per_class(ds.E, ds.K)
    elif data.mask == "curate":
        mask = curate_from_scores(nearest_class_mean_scores(ds), data.ood_fraction)
    else:
        mask = load_mask(data.mask)
    problems = validate_mask(mask)
    if problems:
        raise CurationError("; ".join(str(p) for p in problems))
    return mask


def build_split(data: DataConfig, ds: LabeledDataset, mask: CombinationMask) -> SplitManifest:
    return split_dataset(ds, mask, data.id_val_ratio, make_rng(data.seed, _STREAM_SPLIT))


def build_encoder(cfg: RunConfig, ds: LabeledDataset, manifest: SplitManifest) -> MLPEncoder:
    """Pretrained backbone; identical for every run seed of a config."""
    dims = [ds.n_features, *cfg.encoder.hidden, cfg.encoder.out_dim]
    pre_cfg = cfg.train.replace(seed=cfg.encoder.seed)
    return pretrain_encoder(ds, manifest.train, dims, pre_cfg, activation=cfg.encoder.activation,
                            domain_head=cfg.encoder.pretrain_domain_head)


def method_train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    tc = cfg.train.replace(seed=seed)
    if cfg.method in _METHOD_REWEIGHT:
        tc = tc.replace(reweight=_METHOD_REWEIGHT[cfg.method], freeze_heads=False)
    return tc


def train_method(method: str, enc: MLPEncoder, ds: LabeledDataset, manifest: SplitManifest,
                 tc: TrainConfig) -> tuple[CheckpointBundle, CheckpointBundle]:
    """Returns ``(start, final)``: the interpolation anchor and the trained model."""
    if method == "cfa":
        return train_cfa(enc, ds, manifest, tc)
    if method == "lp_ft":
        return baseline_lp_ft(enc, ds, manifest, tc)
    if method in ("ft", "reweight_e", "reweight_yxe"):
        heads = _class_head(enc, ds, manifest.train, tc)
        start = CheckpointBundle(enc.copy(), heads, {"train": tc.to_dict()}, {})
        return start, baseline_full_finetune(enc, ds, manifest, tc, heads=heads)
    raise ConfigError(f"unknown method {method!r}")


def wise_bundle(start: CheckpointBundle, final: CheckpointBundle, alpha: float) -> CheckpointBundle:
    tensors = wise_interpolate(start.tensors(), final.tensors(), alpha)
    out = final.with_tensors(tensors)
    out.config = dict(final.config, wise_alpha=alpha)
    return out


@dataclass
class SeedResult:
    seed: int
    ok: bool
    error: str = ""
    error_kind: str = ""
    report: dict = field(default_factory=dict)
    wise_report: dict = field(default_factory=dict)


def run_seed(cfg: RunConfig, seed: int, ds=None, mask=None, manifest=None, enc=None,
             write: bool = True) -> SeedResult:
    """Train and evaluate one seed; errors are caught and returned, not raised."""
    chash = cfg.config_hash()
    try:
        if ds is None:
            ds = build_dataset(cfg.data)
        if mask is None:
            mask = build_mask(cfg.data, ds)
        if manifest is None:
            manifest = build_split(cfg.data, ds, mask)
        if enc is None:
            enc = build_encoder(cfg, ds, manifest)
        tc = method_train_config(cfg, seed)
        start, final = train_method(cfg.method, enc, ds, manifest, tc)
        meta = {"config_hash": chash, "seed": seed, "method": cfg.method}
        final.config.update(meta)
        report = evaluate(final.encoder, final.heads, ds, manifest, meta=meta)
        wise_rep = None
        if cfg.wise_alpha is not None:
            wb = wise_bundle(start, final, cfg.wise_alpha)
            wise_rep = evaluate(wb.encoder, wb.heads, ds, manifest, meta=dict(meta, wise_alpha=cfg.wise_alpha))
        if write:
            _write_seed_outputs(cfg, seed, final, report, wise_rep)
        return SeedResult(seed, True, report=report.to_json(), wise_report=wise_rep.to_json() if wise_rep else {})
    except (CFALabError, ValueError, OSError) as exc:
        log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
        return SeedResult(seed, False, error=str(exc), error_kind=type(exc).__name__)


def method_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / cfg.method


def _write_seed_outputs(cfg: RunConfig, seed: int, final: CheckpointBundle, report: MetricsReport,
                        wise_rep: MetricsReport | None) -> None:
    out = method_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    body = {"config_hash": cfg.config_hash(), "seed": seed, "method": cfg.method, "metrics": report.to_json()}
    if wise_rep is not None:
        body["wise"] = wise_rep.to_json()
    (out / f"seed_{seed}.json").write_text(dumps_json(body))
    save_checkpoint(final, out / f"seed_{seed}.cfa")
    rows = list(final.trace.get("epochs", []))
    last = rows[-1]["epoch"] if rows else 0
    for name, sm in report.splits.items():
        rows.append({"epoch": last, "split": name, "acc": sm["acc"]})
    write_metrics_csv(out / f"seed_{seed}.metrics.csv", rows, cfg.config_hash(), seed)


def dumps_json(obj) -> str:
    return json.dumps(json_safe(obj), sort_keys=True, indent=2) + "\n"


TRACE_COLUMNS = ("epoch", "split", "loss_class", "loss_domain", "loss_ortho", "acc", "config_hash", "seed")


def write_metrics_csv(path, rows, config_hash: str, seed: int) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        full = {k: row.get(k, "") for k in TRACE_COLUMNS}
        for k in ("loss_class", "loss_domain", "loss_ortho", "acc"):
            if full[k] != "":
                full[k] = repr(float(full[k]))
        full["config_hash"] = config_hash
        full["seed"] = seed
        writer.writerow(full)
    Path(path).write_text(buf.getvalue())


AGGREGATE_KEYS = ("id_acc", "ood_acc", "id_f1", "ood_f1")


def aggregate(results: list[SeedResult], cfg: RunConfig) -> list[dict]:
    rows = []
    for model in ("final", "wise"):
        reports = [r.report if model == "final" else r.wise_report for r in results if r.ok]
        reports = [r for r in reports if r]
        if not reports:
            continue
        row = {"method": cfg.method, "model": model, "n_seeds": len(reports), "config_hash": cfg.config_hash(),
               "seeds": ";".join(str(r.seed) for r in results if r.ok)}
        for key in AGGREGATE_KEYS:
            row[f"{key}_mean"] = float(np.mean([rep[key] for rep in reports]))
        row["ood_worst_domain_mean"] = float(np.mean([rep["splits"]["ood_test"]["worst_domain_acc"]
                                                      for rep in reports]))
        rows.append(row)
    return rows


def write_aggregate_csv(path, rows) -> None:
    if not rows:
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    Path(path).write_text(buf.getvalue())


def _worker(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def worker_count() -> int:
    raw = os.environ.get("CFA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CFA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CFA_THREADS must be a positive integer, got {raw!r}")
    return n


def run_experiment(cfg: RunConfig, write: bool = True) -> list[SeedResult]:
    """All seeds of one config; a failing seed is logged and skipped."""
    validate_run_config(cfg)
    workers = min(worker_count(), len(cfg.seeds))
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(cfg.echo())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, [(cfg, s) for s in cfg.seeds]))
    else:
        # shared pieces are seed-independent; build them once
        shared = {}
        try:
            ds = build_dataset(cfg.data)
            mask = build_mask(cfg.data, ds)
            manifest = build_split(cfg.data, ds, mask)
            shared = dict(ds=ds, mask=mask, manifest=manifest, enc=build_encoder(cfg, ds, manifest))
        except (CFALabError, ValueError, OSError) as exc:
            log.error("setup failed: %s: %s", type(exc).__name__, exc)
            return [SeedResult(s, False, error=str(exc), error_kind=type(exc).__name__) for s in cfg.seeds]
        results = [run_seed(cfg, s, write=write, **shared) for s in cfg.seeds]
    if write:
        write_aggregate_csv(method_dir(cfg) / "aggregate.csv", aggregate(results, cfg))
    return results
