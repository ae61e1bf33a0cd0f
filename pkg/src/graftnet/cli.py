"""Command line: pretrain, branch, mine, eval, serve, synth, graft."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import branch as branch_mod
from . import metrics, mining, pretrain, registry, server
from .backbone import graft
from .data import SynthConfig, generate_synthetic, load_manifest, load_subdataset, write_manifest
from .weights_io import load_branch, load_composite, load_trunk, save_branch, save_composite, save_trunk


def _load_subdatasets(manifest_dir):
    paths = sorted(Path(manifest_dir).glob("*.manifest.json"))
    if not paths:
        raise FileNotFoundError(f"no *.manifest.json files under {manifest_dir}")
    return [load_subdataset(load_manifest(p)) for p in paths]


def cmd_pretrain(args):
    subdatasets = _load_subdatasets(args.manifests)
    config = pretrain.PretrainConfig.from_json(args.config) if args.config else pretrain.PretrainConfig()
    trunk, log = pretrain.pretrain(subdatasets, config)
    save_trunk(args.out, trunk)
    if args.log:
        pretrain.write_log_jsonl(log, args.log)
    summary = {a: round(v["train_acc"], 4) for a, v in log["per_attribute"].items()}
    print(json.dumps({"trunk": str(args.out), "fingerprint": trunk.fingerprint, "train_acc": summary}))
    return 0


def cmd_branch(args):
    trunk = load_trunk(args.trunk)
    dataset = load_subdataset(load_manifest(args.manifest))
    attribute = args.attribute or dataset.attribute
    end_block = args.end_block if args.end_block is not None else trunk.config.block_count
    spec = branch_mod.BranchSpec(
        attribute=attribute,
        graft_point=args.graft_point,
        end_block=end_block,
        pooling=args.pooling,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        init=args.init,
    )
    result, log = branch_mod.train_branch(trunk, dataset, spec)
    out = args.out or f"branch_{attribute}.grft"
    save_branch(out, result)
    if args.log:
        branch_mod.write_branch_log(log, args.log)
    print(json.dumps({"branch": str(out), "attribute": attribute, "final": log["epochs"][-1]}))
    return 0


def cmd_mine(args):
    trunk = load_trunk(args.trunk)
    manifest = load_manifest(args.manifest)
    dataset = load_subdataset(manifest)
    pos_mask = dataset.y_train == args.positive_class
    if not pos_mask.any() or pos_mask.all():
        raise ValueError(
            f"mining needs both positives and negatives; class {args.positive_class} covers {int(pos_mask.sum())}"
            f" of {len(pos_mask)} train samples"
        )
    feats = mining.extract_features(trunk, dataset.x_train)
    pos_idx = np.flatnonzero(pos_mask)
    neg_idx = np.flatnonzero(~pos_mask)
    params = mining.MiningParams(
        k=args.k, signature_size=args.signature_size, keep_fraction=args.keep,
        far_retain_rate=args.retain, seed=args.seed,
    )
    kept, report = mining.mine(feats.rows[pos_idx], feats.rows[neg_idx], params)
    keep_train = sorted(set(pos_idx) | {int(neg_idx[i]) for i in kept})
    pruned = type(manifest)(
        attribute=manifest.attribute,
        classes=manifest.classes,
        train=[manifest.train[i] for i in keep_train],
        test=manifest.test,
        notes={**manifest.notes, "mining": {"k": params.k, "keep_fraction": params.keep_fraction,
                                            "far_retain_rate": params.far_retain_rate, "seed": params.seed,
                                            "kept_negatives": len(kept), "total_negatives": len(neg_idx)}},
        root=manifest.root,
    )
    write_manifest(pruned, args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")
    print(json.dumps({"pruned_manifest": str(args.out), "kept_negatives": len(kept),
                      "total_negatives": len(neg_idx)}))
    return 0


def cmd_eval(args):
    model = load_composite(args.model)
    dataset = load_subdataset(load_manifest(args.manifest))
    report = metrics.evaluate_model(model, [dataset], criterion=args.criterion)
    if not report.rows:
        raise ValueError(
            f"composite has no branch for attribute {dataset.attribute!r}; available: {model.attributes}"
        )
    if args.out:
        metrics.write_report_json(report, args.out)
    if args.table:
        with open(args.table, "w") as f:
            f.write(metrics.render_table(report))
    if args.roc:
        names = list(report.rows)
        for name in names:
            path = args.roc if len(names) == 1 else _suffixed(args.roc, name)
            metrics.write_roc_csv(report.rows[name]["roc"], path)
    print(json.dumps({name: round(row["auc"], 6) for name, row in report.rows.items()}))
    return 0


def _suffixed(path, name):
    p = Path(path)
    safe = name.replace(":", "_")
    return p.with_name(f"{p.stem}_{safe}{p.suffix}")


def cmd_serve(args):
    reg = registry.load_registry(args.trunk, args.branches)
    srv = server.InferenceServer(reg, host=args.host, port=args.port)
    srv.start()
    host, port = srv.address
    print(json.dumps({"serving": {"host": host, "port": port}, "attributes": reg.attributes}), flush=True)
    try:
        srv._thread.join()
    except KeyboardInterrupt:
        srv.stop()
    return 0


def cmd_synth(args):
    config = SynthConfig.from_json(args.config)
    manifests = generate_synthetic(config, args.out)
    print(json.dumps({"out": str(args.out), "attributes": [m.attribute for m in manifests]}))
    return 0


def cmd_graft(args):
    trunk = load_trunk(args.trunk)
    branches = [load_branch(p) for p in sorted(Path(args.branches).glob("*.grft"))]
    model = graft(trunk, branches, allow_fingerprint_mismatch=args.allow_fingerprint_mismatch)
    save_composite(args.out, model)
    print(json.dumps({"composite": str(args.out), "attributes": model.attributes}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="graftnet", description="Shared-trunk multi-attribute CNN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the shared trunk on interleaved sub-datasets")
    p.add_argument("--manifests", required=True, help="directory of *.manifest.json files")
    p.add_argument("--config", help="JSON file of pretraining settings")
    p.add_argument("--out", required=True, help="output trunk .grft path")
    p.add_argument("--log", help="JSONL step log path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("branch", help="fine-tune one attribute's branch from a trunk")
    p.add_argument("--trunk", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--attribute", help="defaults to the manifest's attribute")
    p.add_argument("--graft-point", type=int, required=True, dest="graft_point")
    p.add_argument("--end-block", type=int, dest="end_block", help="defaults to the full block count")
    p.add_argument("--pooling", choices=("gap", "bilinear"), default="gap")
    p.add_argument("--init", choices=("trunk", "random"), default="trunk")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output branch .grft path (default branch_<attr>.grft)")
    p.add_argument("--log", help="JSON training log path")
    p.set_defaults(func=cmd_branch)

    p = sub.add_parser("mine", help="prune easy negatives from a manifest via trunk-feature mining")
    p.add_argument("--trunk", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--signature-size", type=int, default=8, dest="signature_size")
    p.add_argument("--keep", type=float, default=0.5)
    p.add_argument("--retain", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-class", type=int, default=1, dest="positive_class")
    p.add_argument("--out", required=True, help="pruned manifest path")
    p.add_argument("--report", help="per-cluster JSON report path")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("eval", help="ROC/AUC and threshold metrics for a composite model")
    p.add_argument("--model", required=True, help="composite .grft file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--criterion", choices=metrics.CRITERIA, default="youden")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--table", help="text table path")
    p.add_argument("--roc", help="ROC CSV path (fpr,tpr,threshold)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve shared-trunk inference over TCP")
    p.add_argument("--trunk", required=True)
    p.add_argument("--branches", help="directory of branch .grft files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7077)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("synth", help="generate the synthetic dataset suite")
    p.add_argument("--config", required=True, help="JSON synthesis config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("graft", help="bundle a trunk and branches into one composite file")
    p.add_argument("--trunk", required=True)
    p.add_argument("--branches", required=True, help="directory of branch .grft files")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graft)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
