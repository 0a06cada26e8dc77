"""Command-line entry point: ``cfalab <subcommand> [flags]``.

Exit codes: 0 success, 2 config error, 3 numerical non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as exp
from .data import load_dataset, save_dataset
from .errors import CFALabError, ConfigError, ConvergenceError, CurationError
from .heads import HeadPair, symmetric_heads
from .linalg import make_rng
from .metrics import evaluate, projection_coordinates, write_visualization_csv
from .split import curate_from_scores, load_manifest, load_mask, nearest_class_mean_scores, \
    one_ood_cell_per_class, save_json, split_dataset, validate_mask
from .train import CheckpointBundle, load_checkpoint, save_checkpoint, stage1_linear_probe, stage2_finetune
from .ufm import UFMProblem, balanced_labels, solve_ufm, verify_lemma_alignment, verify_theorem1

log = logging.getLogger("cfalab")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4


class InputError(CFALabError):
    """An input file is missing, unreadable or malformed."""


def _read(loader, path):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _config(args) -> exp.RunConfig:
    cfg = exp.load_run_config(args.config) if args.config else exp.RunConfig()
    changes = {}
    if getattr(args, "out", None) and args.command in ("run", "sweep"):
        changes["out"] = str(args.out)
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "wise_alpha", None) is not None:
        changes["wise_alpha"] = args.wise_alpha
    cfg = cfg.replace(**changes) if changes else cfg
    exp.validate_run_config(cfg)
    return cfg


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    data = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    ds = exp.build_dataset(dataclasses.replace(data, source=""))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.K} classes x {ds.E} domains) to {args.out}")
    return EXIT_OK


def cmd_curate(args) -> int:
    ds = _read(load_dataset, args.data)
    if args.one_per_class:
        mask = one_ood_cell_per_class(ds.E, ds.K)
    else:
        if args.scores:
            scores = np.asarray(_read(lambda p: json.loads(Path(p).read_text()), args.scores), dtype=np.float64)
        else:
            scores = nearest_class_mean_scores(ds)
        mask = curate_from_scores(scores, args.ood_fraction)
    problems = validate_mask(mask)
    if problems:
        raise CurationError("; ".join(map(str, problems)))
    save_json(mask.to_json(), args.out)
    print(f"{int(mask.ood_cells.sum())} OOD cells of {mask.E * mask.K}; mask written to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = _read(load_dataset, args.data)
    mask = _read(load_mask, args.mask)
    manifest = split_dataset(ds, mask, args.id_val_ratio, make_rng(args.seed or 0))
    manifest.check(ds, mask)
    save_json(manifest.to_json(), args.out)
    print(" ".join(f"{name}={getattr(manifest, name).size}" for name in manifest.SPLITS))
    return EXIT_OK


def _load_inputs(args, cfg):
    ds = _read(load_dataset, args.data)
    manifest = _read(load_manifest, args.manifest)
    return ds, manifest


def _encoder_for(args, cfg, ds, manifest):
    if getattr(args, "init", None):
        return _read(load_checkpoint, args.init)
    return None


def cmd_lp(args) -> int:
    cfg = _config(args)
    ds, manifest = _load_inputs(args, cfg)
    seed = cfg.seeds[0]
    tc = cfg.train.replace(seed=seed)
    init = _encoder_for(args, cfg, ds, manifest)
    enc = init.encoder if init else exp.build_encoder(cfg, ds, manifest)
    z = enc.forward(ds.inputs[manifest.train])
    idx = manifest.train
    heads, trace = stage1_linear_probe(z, ds.class_labels[idx], ds.domain_labels[idx],
                                       ds.domain_label_present[idx], tc, K=ds.K, E=ds.E)
    meta = {"config_hash": cfg.config_hash(), "seed": seed, "stage": "probe", "train": tc.to_dict()}
    save_checkpoint(CheckpointBundle(enc, heads, meta, {"probe": trace.to_dict()}), args.out)
    print(f"probe heads written to {args.out}; ||w1 w2^T||_F = {np.linalg.norm(heads.w1 @ heads.w2.T):.3g}")
    return EXIT_OK


def cmd_ft(args) -> int:
    cfg = _config(args)
    ds, manifest = _load_inputs(args, cfg)
    seed = cfg.seeds[0]
    tc = exp.method_train_config(cfg, seed)
    init = _encoder_for(args, cfg, ds, manifest)
    if cfg.method == "cfa" and init is not None and init.heads.E:
        start = init
        final = stage2_finetune(init.encoder, init.heads, ds, manifest, tc)
    else:
        enc = init.encoder if init else exp.build_encoder(cfg, ds, manifest)
        start, final = exp.train_method(cfg.method, enc, ds, manifest, tc)
    meta = {"config_hash": cfg.config_hash(), "seed": seed, "method": cfg.method}
    final.config.update(meta)
    if cfg.wise_alpha is not None:
        final = exp.wise_bundle(start, final, cfg.wise_alpha)
    save_checkpoint(final, args.out)
    rows = list(final.trace.get("epochs", []))
    exp.write_metrics_csv(Path(str(args.out) + ".metrics.csv"), rows, cfg.config_hash(), seed)
    print(f"{cfg.method} checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read(load_dataset, args.data)
    manifest = _read(load_manifest, args.manifest)
    bundle = _read(load_checkpoint, args.ckpt)
    meta = {k: bundle.config[k] for k in ("config_hash", "seed", "method") if k in bundle.config}
    report = evaluate(bundle.encoder, bundle.heads, ds, manifest, meta=meta)
    text = report.dumps()
    if args.out:
        _write_text(args.out, text)
    print(f"id_acc={report.id_acc:.4f} ood_acc={report.ood_acc:.4f} id_f1={report.id_f1:.4f} "
          f"ood_f1={report.ood_f1:.4f}")
    if args.viz:
        names = np.empty(len(ds), dtype=object)
        for s in manifest.SPLITS:
            names[getattr(manifest, s)] = s
        coords = projection_coordinates(bundle.encoder.forward(ds.inputs), bundle.heads)
        write_visualization_csv(args.viz, coords, ds.class_labels, ds.domain_labels, names)
    return EXIT_OK


def cmd_wise(args) -> int:
    alpha = args.alpha if args.alpha is not None else args.wise_alpha
    if alpha is None:
        raise ConfigError("wise needs --alpha")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("--alpha must lie in [0, 1]")
    a = _read(load_checkpoint, args.theta_a)
    b = _read(load_checkpoint, args.theta_b)
    if alpha == 0.0:
        out = a.with_tensors(a.tensors())
    elif alpha == 1.0:
        out = b.with_tensors(b.tensors())
    else:
        out = exp.wise_bundle(a, b, alpha)
    try:
        save_checkpoint(out, args.out)
    except OSError as exc:
        raise InputError(f"{args.out}: {exc}") from None
    print(f"alpha={alpha} checkpoint written to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    results = exp.run_experiment(cfg)
    for r in results:
        if r.ok:
            print(f"seed {r.seed}: id_acc={r.report['id_acc']:.4f} ood_acc={r.report['ood_acc']:.4f}")
        else:
            print(f"seed {r.seed}: FAILED ({r.error_kind}: {r.error})")
    failed = [r for r in results if not r.ok]
    if not failed:
        return EXIT_OK
    kinds = {r.error_kind for r in failed}
    if "ConvergenceError" in kinds:
        return EXIT_CONVERGENCE
    if kinds & {"ConfigError", "CurationError"}:
        return EXIT_CONFIG
    return EXIT_IO


SWEEP_AXES = (("lambda_ortho", "lambda_ortho"), ("lam", "lam"), ("stage1_iters", "stage1_iters"))


def _sweep_features(cfg):
    ds = exp.build_dataset(cfg.data)
    mask = exp.build_mask(cfg.data, ds)
    manifest = exp.build_split(cfg.data, ds, mask)
    if cfg.data.kind == "structured":
        z_all = ds.inputs
    else:
        z_all = exp.build_encoder(cfg, ds, manifest).forward(ds.inputs)
    return ds, manifest, z_all


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grids = {}
    if args.lambda_ortho:
        grids["lambda_ortho"] = _parse_floats(args.lambda_ortho)
    if args.lam:
        grids["lam"] = _parse_floats(args.lam)
    if args.stage1_iters:
        grids["stage1_iters"] = [int(v) for v in _parse_floats(args.stage1_iters)]
    if not grids:
        raise ConfigError("sweep needs at least one of --lambda-ortho, --lambda, --stage1-iters")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, manifest, z_all = _sweep_features(cfg)
    idx = manifest.train
    chash = cfg.config_hash()
    seed = cfg.seeds[0]
    # traces are recorded before the projection cleanup and without the threshold check
    base = cfg.train.replace(seed=seed, project_cleanup=False, ortho_threshold=float("inf"))
    summary = []
    for axis, values in grids.items():
        traces = {}
        for v in values:
            tc = base.replace(**{axis: v})
            if axis == "lam":
                tc = tc.replace(stage1_schedule="joint")
            status = "ok"
            try:
                heads, trace = stage1_linear_probe(z_all[idx], ds.class_labels[idx], ds.domain_labels[idx],
                                                   ds.domain_label_present[idx], tc, K=ds.K, E=ds.E)
                ortho = trace.ortho_norm
                acc = {s: float(np.mean(heads.predict(z_all[getattr(manifest, s)]) ==
                                        ds.class_labels[getattr(manifest, s)]))
                       for s in ("id_val", "ood_test")}
            except ConvergenceError as exc:
                status, ortho, acc = f"not converged: {exc}", [], {}
            traces[v] = ortho
            summary.append({"axis": axis, "value": v, "status": status,
                            "final_ortho": repr(float(ortho[-1])) if ortho else "",
                            "probe_id_acc": repr(acc["id_val"]) if acc else "",
                            "probe_ood_acc": repr(acc["ood_test"]) if acc else "",
                            "config_hash": chash, "seed": seed})
        _write_trace_csv(out / f"sweep_{axis}.csv", axis, traces, chash, seed)
        print(f"{axis}: {len(values)} runs, traces in {out / f'sweep_{axis}.csv'}")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(summary[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(summary)
    (out / "sweep_summary.csv").write_text(buf.getvalue())
    return EXIT_OK if all(r["status"] == "ok" for r in summary) else EXIT_CONVERGENCE


def _fmt_value(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _write_trace_csv(path, axis: str, traces: dict, chash: str, seed: int) -> None:
    """One row per step, one ``||w1 w2^T||_F`` column per swept value."""
    keys = list(traces)
    length = max((len(t) for t in traces.values()), default=0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step"] + [f"{axis}={_fmt_value(k)}" for k in keys] + ["config_hash", "seed"])
    for t in range(length):
        row = [t] + [repr(float(traces[k][t])) if t < len(traces[k]) else "" for k in keys]
        writer.writerow(row + [chash, seed])
    Path(path).write_text(buf.getvalue())


def cmd_ufm_solve(args) -> int:
    rng = make_rng(args.seed or 0)
    heads = symmetric_heads(args.K, args.E, args.d, rng, class_geometry=args.class_geometry,
                            domain_geometry=args.domain_geometry, beta1=args.beta, beta2=args.beta)
    y, e = balanced_labels(args.K, args.E, args.N)
    problem = UFMProblem(heads, y, e, args.lam)
    z = solve_ufm(problem, steps=args.steps, rng=rng)
    body = {
        "seed": args.seed or 0, "K": args.K, "E": args.E, "d": args.d, "N": args.N, "lam": args.lam,
        "beta1": heads.beta1, "beta2": heads.beta2, "w1": heads.w1.tolist(), "w2": heads.w2.tolist(),
        "y": y.tolist(), "e": e.tolist(), "z": z.tolist(), "objective": problem.objective(z),
    }
    _write_text(args.out, json.dumps(body, sort_keys=True) + "\n")
    print(f"objective={body['objective']:.6g}; Z* written to {args.out}")
    return EXIT_OK


def _load_ufm(path):
    body = json.loads(Path(path).read_text())
    heads = HeadPair(w1=np.array(body["w1"]), w2=np.array(body["w2"]), beta1=body["beta1"], beta2=body["beta2"])
    return body, heads, np.array(body["z"]), np.array(body["y"]), np.array(body["e"])


def cmd_ufm_verify(args) -> int:
    body, heads, z, y, e = _read(_load_ufm, args.input)
    report = verify_theorem1(z, heads, y, e)
    out = report.to_json()
    gamma, rel = verify_lemma_alignment(z, heads, y)
    out["alignment_gamma_hat"] = gamma
    out["alignment_rel_residual"] = rel
    if args.out:
        _write_text(args.out, json.dumps(out, sort_keys=True, indent=2) + "\n")
    print(f"residual_fraction={report.residual_fraction:.3e} within_class_spread={report.within_class_spread:.3e} "
          f"within_domain_spread={report.within_domain_spread:.3e} gamma1_hat={report.gamma1_hat:.6g}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config (TOML)")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", type=Path, help="output file or directory")
    common.add_argument("--method", choices=exp.METHODS, help="training method")
    common.add_argument("--wise-alpha", type=float, dest="wise_alpha", help="weight-space interpolation coefficient")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cfalab", description="Compositional feature alignment experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a dataset")
    p.set_defaults(func=cmd_gen, needs_out=True)

    p = sub.add_parser("curate", parents=[common], help="build an ID/OOD mask")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scores", type=Path, help="E x K JSON score matrix (default: nearest class mean)")
    p.add_argument("--ood-fraction", type=float, default=0.2)
    p.add_argument("--one-per-class", action="store_true")
    p.set_defaults(func=cmd_curate, needs_out=True)

    p = sub.add_parser("split", parents=[common], help="stratified train/val/test manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--id-val-ratio", type=float, default=0.1)
    p.set_defaults(func=cmd_split, needs_out=True)

    for name, func, helptext in (("lp", cmd_lp, "stage-1 orthogonal probing only"),
                                 ("ft", cmd_ft, "stage-2 finetuning or a baseline")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--init", type=Path, help="checkpoint to start from")
        p.set_defaults(func=func, needs_out=True)

    p = sub.add_parser("ufm", help="unconstrained feature model oracle")
    usub = p.add_subparsers(dest="ufm_command", required=True)
    q = usub.add_parser("solve", parents=[common])
    q.add_argument("--K", type=int, default=3)
    q.add_argument("--E", type=int, default=2)
    q.add_argument("--d", type=int, default=8)
    q.add_argument("--N", type=int, default=60)
    q.add_argument("--lam", "--lambda", type=float, default=1.0, dest="lam")
    q.add_argument("--beta", type=float, default=20.0)
    q.add_argument("--steps", type=int, default=20000)
    q.add_argument("--class-geometry", choices=("orthonormal", "etf"), default="orthonormal")
    q.add_argument("--domain-geometry", choices=("orthonormal", "etf"), default="orthonormal")
    q.set_defaults(func=cmd_ufm_solve, needs_out=True, command="ufm")
    q = usub.add_parser("verify", parents=[common])
    q.add_argument("--in", type=Path, required=True, dest="input")
    q.set_defaults(func=cmd_ufm_verify, needs_out=False, command="ufm")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--viz", type=Path, help="write 2-D projection coordinates (CSV)")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("wise", parents=[common], help="interpolate two checkpoints")
    p.add_argument("--theta-a", type=Path, required=True)
    p.add_argument("--theta-b", type=Path, required=True)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_wise, needs_out=True)

    p = sub.add_parser("sweep", parents=[common], help="stage-1 grid over lambda, lambda_ortho, stage1_iters")
    p.add_argument("--lambda-ortho", dest="lambda_ortho")
    p.add_argument("--lambda", dest="lam")
    p.add_argument("--stage1-iters", dest="stage1_iters")
    p.set_defaults(func=cmd_sweep, needs_out=False)

    p = sub.add_parser("run", parents=[common], help="full experiment over all configured seeds")
    p.set_defaults(func=cmd_run, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and args.out is None:
        parser.error(f"{args.command} requires --out")
    try:
        exp.worker_count()
        return args.func(args)
    except (ConfigError, CurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        tail = ", ".join(f"{v:.4g}" for v in exc.trace[-5:])
        print(f"not converged: {exc} (last values: {tail})", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InputError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
