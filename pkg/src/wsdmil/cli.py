"""Command-line entry point: ``wsdmil <command> [options]``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
Settings come from an optional ``--config`` JSON file (sections ``synth``,
``train``, ``model``); command-line flags override it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bagio import BagDataError, BagFormatError, DatasetManifest, read_manifest, write_bag, write_manifest
from .bagio import Bag
from .estimator import WSDMILClassifier
from .gradcheck import check_model, randomize, random_bag
from .model import CheckpointError, ConfigError, WsdConfig, WsdModel, load_checkpoint, save_checkpoint
from .sampler import ClusterSampler
from .synth import SynthSpec, write_dataset
from .trainer import FoldReport, TrainConfig, bench_memory, evaluate, run_cv

logger = logging.getLogger("wsdmil")

USAGE_ERRORS = (ConfigError, ValueError, KeyError, TypeError, FileNotFoundError, BagFormatError,
                BagDataError, CheckpointError, json.JSONDecodeError)

MODEL_KEYS = ("heads", "window_base", "landmarks", "pinv_iters", "serg_grid", "serg_reduction",
              "attn_hidden", "aggregator", "disable_wsda", "fixed_window_grid", "disable_serg")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    payload = json.loads(p.read_text())
    if not isinstance(payload, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return payload


def _section(cfg: dict, name: str, flat_keys=()) -> dict:
    """A named section, or the top level keys that belong to it for flat files."""
    if name in cfg:
        return dict(cfg[name])
    return {k: v for k, v in cfg.items() if k in flat_keys}


def _model_params(args, cfg: dict) -> dict:
    params = _section(cfg, "model", MODEL_KEYS)
    unknown = set(params) - set(MODEL_KEYS)
    if unknown:
        raise UsageError(f"unknown model keys: {sorted(unknown)}")
    if args.disable_wsda:
        params["disable_wsda"] = True
    if args.disable_serg:
        params["disable_serg"] = True
    if args.fixed_window_grid is not None:
        params["fixed_window_grid"] = args.fixed_window_grid
    if args.aggregator is not None:
        params["aggregator"] = args.aggregator
    # validate the combination up front so a bad ablation exits before any work
    WsdConfig(feature_dim=max(8, params.get("heads", 8)), **params)
    return params


def _train_config(args, cfg: dict) -> TrainConfig:
    payload = _section(cfg, "train", {f for f in TrainConfig.__dataclass_fields__})
    for flag, key in (("seed", "seed"), ("alpha", "alpha"), ("clusters", "n_clusters"),
                      ("folds", "folds"), ("lr", "lr"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            payload[key] = value
    return TrainConfig.from_dict(payload)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    payload = _section(cfg, "synth", SynthSpec.__dataclass_fields__)
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.num_bags is not None:
        payload["num_bags"] = args.num_bags
    spec = SynthSpec.from_dict(payload)
    out = _out_dir(args, "dataset")
    manifest = write_dataset(spec, out)
    print(f"wrote {spec.num_bags} bags to {manifest} (seed {spec.seed})")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(args, cfg)
    manifest = read_manifest(args.manifest)
    bags = manifest.load_bags()
    seqs = ClusterSampler(tc.alpha, tc.n_clusters, 4, tc.seed).fit(bags).transform(bags)
    out = _out_dir(args, "sampled")
    (out / "bags").mkdir(exist_ok=True)
    entries, stats = [], []
    for bag, seq in zip(bags, seqs):
        keep = seq.kept_indices
        kept = Bag(bag.id, bag.embeddings[keep], bag.coords[keep], bag.label)
        rel = f"bags/{bag.id}.wsdb"
        write_bag(kept, out / rel)
        entries.append({"path": rel, "label": bag.label})
        stats.append({"bag_id": bag.id, "n": bag.n, "kept": int(keep.size),
                      "padded_length": seq.padded_length})
    write_manifest(DatasetManifest(manifest.num_classes, manifest.feature_dim, entries, out),
                   out / "manifest.json")
    _write_json(out / "sampling.json", {"seed": tc.seed, "alpha": tc.alpha,
                                        "n_clusters": tc.n_clusters, "bags": stats})
    print(f"sampled {len(bags)} bags at alpha={tc.alpha} into {out} (seed {tc.seed})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(args, cfg)
    params = _model_params(args, cfg)
    bags = read_manifest(args.manifest).load_bags()
    jobs = args.jobs or 1
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    report, models = run_cv(bags, tc, jobs=jobs, return_models=True, **params)
    out = _out_dir(args, "run")
    report.metadata["manifest"] = str(args.manifest)
    (out / "report.json").write_text(report.to_json())
    for i, est in enumerate(models):
        save_checkpoint(est.model_, out / f"fold{i}.wsdc",
                        {"seed": tc.seed, "fold": i, "train_config": tc.to_dict()})
    print(f"auc {report.mean['auc']:.4f} +- {report.std['auc']:.4f}  "
          f"acc {report.mean['acc']:.4f}  f1 {report.mean['f1']:.4f}  (seed {tc.seed})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(args, cfg)
    model, meta = load_checkpoint(args.checkpoint)
    bags = read_manifest(args.manifest).load_bags()
    seqs = ClusterSampler(tc.alpha, tc.n_clusters, model.config.window_base, tc.seed).transform(bags)
    est = WSDMILClassifier.from_model(model)
    res = evaluate(est, seqs)
    report = FoldReport.from_folds([res], {"seed": tc.seed, "alpha": tc.alpha,
                                           "checkpoint": str(args.checkpoint),
                                           "checkpoint_metadata": meta})
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _parse_alphas(text: str) -> list[float]:
    parts = [p for p in (text or "").split(",") if p.strip()]
    if not parts:
        raise UsageError("--alphas needs at least one value")
    return [float(p) for p in parts]


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(args, cfg)
    params = _model_params(args, cfg)
    alphas = _parse_alphas(args.alphas)
    bags = read_manifest(args.manifest).load_bags()
    rows = bench_memory(bags, alphas, seed=tc.seed, n_clusters=tc.n_clusters, **params)
    ratios = [r["ratio"] for r in rows]
    monotone = all(a >= b for a, b in zip(ratios, ratios[1:]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "peak_bytes", "ratio"])
    for r in rows:
        w.writerow([f"{r['alpha']:g}", r["peak_bytes"], f"{r['ratio']:.6f}"])
    buf.write(f"# seed={tc.seed} clusters={tc.n_clusters}\n")
    buf.write(f"# ratios non-increasing: {'yes' if monotone else 'NO'}\n")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0 if monotone else 1


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    params = _model_params(args, cfg)
    seed = 0 if args.seed is None else args.seed
    config = WsdConfig(feature_dim=args.feature_dim, **params)
    model = randomize(WsdModel(config, seed=seed), seed + 1)
    if args.corrupt_grad is not None and args.corrupt_grad not in model.params:
        raise UsageError(f"--corrupt-grad: no parameter named {args.corrupt_grad!r}")

    def corrupt(name, g):
        return g * 1.5 + 1e-3 if name == args.corrupt_grad else g

    features, mask = random_bag(args.instances, config.feature_dim, seed + 2)
    report = check_model(model, features, mask, entries=args.entries, seed=seed + 3,
                         corrupt=corrupt if args.corrupt_grad else None)
    for name, err in sorted(report.errors.items()):
        print(f"{name:24s} {err:.3e}  {'ok' if err < report.tolerance else 'FAIL'}")
    name, err = report.worst
    print(f"worst: {name} rel_err={err:.3e} tolerance={report.tolerance:g} seed={seed}")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# ---------------------------------------------------------------- parser


def _add_common(p, model_flags=False):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    if model_flags:
        g = p.add_argument_group("model ablations")
        g.add_argument("--disable-wsda", action="store_true")
        g.add_argument("--disable-serg", action="store_true")
        g.add_argument("--fixed-window-grid", type=int)
        g.add_argument("--aggregator", choices=("attention", "mean", "max"))


def _add_sampling(p):
    p.add_argument("--alpha", type=float, help="percent of instances kept (0, 100]")
    p.add_argument("--clusters", type=int, help="k-means clusters per bag")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsdmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--num-bags", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", help="cluster-sample every bag of a manifest")
    p.add_argument("manifest")
    _add_common(p)
    _add_sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("manifest")
    _add_common(p, model_flags=True)
    _add_sampling(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int, help="folds trained in parallel")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    _add_common(p)
    _add_sampling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="peak activation bytes across sampling ratios")
    p.add_argument("manifest")
    _add_common(p, model_flags=True)
    p.add_argument("--alphas", default="100,60,20")
    p.add_argument("--clusters", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    _add_common(p, model_flags=True)
    p.add_argument("--instances", type=int, default=64)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--entries", type=int, default=8, help="sampled entries per parameter")
    p.add_argument("--corrupt-grad", metavar="PARAM", help="debug: perturb one analytic gradient")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wsdmil {args.command}: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"wsdmil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
