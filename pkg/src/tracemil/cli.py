"""``tracemil`` command line.

Subcommands: synth, train, attribute, prune-retrain, audit-labels, report.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``command.json`` naming its inputs by content hash.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import config as cfgmod
from .container import file_hash
from .influence import MODES, VARIANTS, InfluenceError, influence_table, singletons, write_ranking_tsv
from .metrics import DetectionCurve, recall_at_fraction
from .prune import (PruneError, instance_sort_key, build_targets, compare_report, count_instances, evaluate, find_misclassified,
                    flag_removals, format_removal, retrain_without, simulate_dual_reader_audit)
from .synth import make_dataset, load_dataset, save_dataset
from .train import TrainingDiverged, load_run, save_run, train

log = logging.getLogger("tracemil")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _load_config(args) -> cfgmod.ExperimentConfig:
    overrides = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        config = cfgmod.load(path, args.seed)
    else:
        if args.seed is None:
            raise UsageError("a seed is required: pass --config with a seed or --seed")
        config = cfgmod.from_dict({}, args.seed)
    infl = {}
    if getattr(args, "variant", None):
        infl["variant"] = args.variant
    if getattr(args, "checkpoint_mode", None):
        infl["checkpoint_mode"] = args.checkpoint_mode
    if infl:
        overrides["influence"] = infl
    if getattr(args, "k", None) is not None:
        overrides["prune"] = {"k": args.k, "ks": []}
    return config.with_overrides(**overrides) if overrides else config


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    return p


def _dir_hash(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.iterdir() if p.is_file() and p.name != "command.json"):
        h.update(f.name.encode())
        h.update(bytes.fromhex(file_hash(f)))
    return h.hexdigest()


def _write_command(out: Path, command: str, config: Optional[cfgmod.ExperimentConfig],
                   inputs: Dict[str, str], extra: Optional[dict] = None) -> None:
    outputs = {p.name: file_hash(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "command.json"}
    doc = {"command": command, "inputs": inputs, "outputs": outputs}
    if config is not None:
        doc["config"] = config.to_dict()
        doc["config_hash"] = config.hash()
    if extra:
        doc.update(extra)
    (out / "command.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _read_command(path: Path) -> dict:
    f = path / "command.json"
    return json.loads(f.read_text()) if f.exists() else {}


def _write_curve(path: Path, curve: DetectionCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["fraction_inspected", "fraction_found"])
        for x, y in zip(curve.fractions, curve.recall):
            w.writerow([repr(float(x)), repr(float(y))])


def read_curve(path) -> DetectionCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))[1:]
    return DetectionCurve([float(r[0]) for r in rows], [float(r[1]) for r in rows])


def _read_flagged(path: Path) -> List[str]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["instance_id"]:
            raise UsageError(f"{path}: expected a single 'instance_id' column")
        return [r[0] for r in reader if r]


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    ds = make_dataset(config.synth)
    fp = save_dataset(ds, out)
    (out / "config.yaml").write_text(cfgmod.dump(config))
    _write_command(out, "synth", config, {}, {"fingerprint": fp})
    print(f"dataset fingerprint {fp}")
    print(f"bags: train {len(ds.train)}, val {len(ds.val)}, test {len(ds.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    data = _require_dir(args.data, "dataset")
    ds = load_dataset(data)
    fp = ds.fingerprint()
    manifest, archive = train(config.train, ds.train, ds.val, config.model_config(), fp)
    out = Path(args.out)
    manifest = save_run(out, manifest, archive)
    _write_command(out, "train", config, {"dataset": fp})
    best = manifest.best_metrics() or {}
    auc = best.get("val_micro_auc")
    print(f"best checkpoint {manifest.best_checkpoint} (epoch {best.get('epoch')}) "
          f"val micro-AUC {auc:.4f}" if auc is not None else "best checkpoint has no validation AUC")
    return EXIT_OK


def _load_run_and_data(args):
    run = _require_dir(args.archive, "archive")
    data = _require_dir(args.data, "dataset")
    manifest, archive = load_run(run)
    ds = load_dataset(data)
    if manifest.dataset_fingerprint and manifest.dataset_fingerprint != ds.fingerprint():
        raise UsageError("dataset fingerprint does not match the one recorded in the run manifest")
    return run, manifest, archive, ds


def cmd_attribute(args) -> int:
    config = _load_config(args)
    run, manifest, archive, ds = _load_run_and_data(args)
    pc = config.prune_config()
    params = archive.best().params
    if args.targets in (None, "misclassified"):
        mis = find_misclassified(params, ds.val)
    else:
        tpath = Path(args.targets)
        if not tpath.exists():
            raise UsageError(f"targets file {tpath} not found")
        mis = [int(line.split()[0]) for line in tpath.read_text().splitlines() if line.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = count_instances(ds.train)
    flagged: set = set()
    if mis:
        targets = build_targets(params, mis, ds.val)
        candidates = singletons(ds.train)
        table = influence_table(archive, targets, candidates, pc.variant, pc.checkpoint_mode)
        table.write_tsv(out / "influence.tsv")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            flagged = flag_removals(table, pc.k, pc.ranking, pc.orientation)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    else:
        print("no misclassified validation bags: nothing to prune", file=sys.stderr)
    with open(out / "flagged.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["instance_id"])
        for key in sorted(flagged, key=instance_sort_key):
            w.writerow([key])
    (out / "targets.tsv").write_text("".join(f"{i}\n" for i in mis))
    _write_command(out, "attribute", config, {"archive": _dir_hash(run), "dataset": ds.fingerprint()},
                   {"k": pc.k, "variant": pc.variant, "checkpoint_mode": pc.checkpoint_mode,
                    "targets": len(mis), "flagged": len(flagged), "total_instances": total})
    print(f"targets: {len(mis)}; variant {pc.variant}; k {pc.k}")
    print(f"flagged {format_removal(len(flagged), total)}")
    return EXIT_OK


def _report_files(out: Path, report) -> None:
    (out / "report.txt").write_text(report.render_table())
    (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    with open(out / "report.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["label", "k", "removed", "total", "removal", "reader", "kappa", "micro_auc"])
        for row in report.rows:
            for reader, m in row.metrics.items():
                w.writerow([row.label, "" if row.k is None else row.k, row.removed, row.total, row.removal,
                            reader, repr(m.kappa), repr(m.auc)])


def cmd_prune_retrain(args) -> int:
    config = _load_config(args)
    run, manifest, archive, ds = _load_run_and_data(args)
    flagged_path = Path(args.flagged)
    if flagged_path.is_dir():
        flagged_path = flagged_path / "flagged.tsv"
    if not flagged_path.exists():
        raise UsageError(f"flagged set {flagged_path} not found")
    flagged = _read_flagged(flagged_path)
    train_keys = {f"{b.id}:{i}" for b in ds.train for i in range(b.n)}
    unknown = [k for k in flagged if k not in train_keys]
    if unknown:
        raise UsageError(f"flagged ids not in the training split: {unknown[:5]}")
    meta = _read_command(flagged_path.parent)
    k = meta.get("k")
    pc = config.prune_config()
    total = count_instances(ds.train)
    base_metrics = evaluate(archive.best().params, ds.test)
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        new_manifest, new_archive = retrain_without(ds.train, ds.val, flagged, archive.config, archive.model_config,
                                                    pc.seed_policy, ds.fingerprint())
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_run(out, new_manifest, new_archive)
    metrics = evaluate(new_archive.best().params, ds.test)
    rows = [(k if k is not None else len(flagged), len(flagged), metrics)] if flagged else []
    report = compare_report(base_metrics, rows, total, args.encoder,
                            variant=meta.get("variant", ""), checkpoint_mode=meta.get("checkpoint_mode", ""))
    if not flagged:
        report.rows[0].label = "Baseline (nothing flagged)"
    _report_files(out, report)
    _write_command(out, "prune-retrain", config,
                   {"archive": _dir_hash(run), "dataset": ds.fingerprint(), "flagged": file_hash(flagged_path)},
                   {"k": k})
    print(report.render_table(), end="")
    return EXIT_OK


def cmd_audit_labels(args) -> int:
    config = _load_config(args)
    run, manifest, archive, ds = _load_run_and_data(args)
    subset = args.subset if args.subset is not None else config.audit.subset_size
    variant = args.variant or config.audit.variant
    result = simulate_dual_reader_audit(ds, archive, variant, subset, config.seed,
                                        config.influence.checkpoint_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ranking_tsv(out / "ranking.tsv", result.scores, variant)
    _write_curve(out / "curve.tsv", result.curve)
    frac = config.metrics.recall_fraction
    recall = recall_at_fraction(result.curve, frac)
    n_flag = sum(1 for b in ds.train if b.id in set(result.subset) and b.reader1 != b.reader2)
    summary = {"subset_size": len(result.subset), "disagreements": n_flag, "variant": variant,
               "recall_fraction": frac, "recall": recall, "curve_area": result.curve.area(),
               "ranked": result.ranked}
    (out / "audit.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_command(out, "audit-labels", config, {"archive": _dir_hash(run), "dataset": ds.fingerprint()})
    print(f"audited {len(result.subset)} bags, {n_flag} with reader disagreement")
    print(f"recall@{frac:.2f} = {recall:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plotting

    data = _require_dir(args.data, "dataset")
    ds = load_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"dataset": ds.fingerprint()}
    lines = []
    if args.baseline:
        base_dir = _require_dir(args.baseline, "baseline run")
        inputs["baseline"] = _dir_hash(base_dir)
        _, base_archive = load_run(base_dir)
        base = evaluate(base_archive.best().params, ds.test)
        total = count_instances(ds.train)
        rows = []
        for pdir in args.pruned or []:
            pdir = _require_dir(pdir, "pruned run")
            inputs[f"pruned:{pdir.name}"] = _dir_hash(pdir)
            pman, parc = load_run(pdir)
            k = _read_command(pdir).get("k")
            rows.append((k if k is not None else len(pman.removed_instances), len(pman.removed_instances),
                         evaluate(parc.best().params, ds.test)))
        rows.sort(key=lambda r: r[0])
        report = compare_report(base, rows, total, args.encoder)
        _report_files(out, report)
        lines.append(report.render_table())
        for reader in base:
            mats = {"Baseline": base[reader].confusion}
            for k, _, m in rows:
                if reader in m:
                    mats[f"Top {k} removed"] = m[reader].confusion
            plotting.plot_confusion_matrices(mats, out / f"confusion_{reader}.png", title=reader.replace("reader", "Reader "))
        if rows:
            plotting.plot_metric_vs_k([r[0] for r in rows],
                                      {r: [m[r].auc for _, _, m in rows if r in m] for r in base},
                                      {r: base[r].auc for r in base}, out / "auc_vs_k.png")
    if args.audit:
        adir = _require_dir(args.audit, "audit")
        inputs["audit"] = _dir_hash(adir)
        curve = read_curve(adir / "curve.tsv")
        frac = json.loads((adir / "audit.json").read_text()).get("recall_fraction", 0.30)
        plotting.plot_detection_curve(curve, out / "detection_curve.png", frac)
        lines.append(f"recall@{frac:.2f} = {curve.recall_at(frac):.3f}; curve area {curve.area():.3f}\n")
    if not lines:
        raise UsageError("nothing to report: pass --baseline and/or --audit")
    _write_command(out, "report", None, inputs)
    print("".join(lines), end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--variant", choices=VARIANTS, help="influence formula variant")
    common.add_argument("--k", type=int, help="instances flagged per target")
    common.add_argument("--checkpoint-mode", choices=MODES, dest="checkpoint_mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tracemil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic bag dataset")

    p = sub.add_parser("train", parents=[common], help="train a baseline and store its checkpoint archive")
    p.add_argument("--data", required=True)

    p = sub.add_parser("attribute", parents=[common], help="score training instances against targets")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", default="misclassified",
                   help="'misclassified' (default) or a file of validation bag ids")

    p = sub.add_parser("prune-retrain", parents=[common], help="retrain without a flagged instance set")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--flagged", required=True, help="flagged.tsv or the attribute output directory")
    p.add_argument("--encoder", default="mlp", help="encoder tag for the report table")

    p = sub.add_parser("audit-labels", parents=[common], help="self-influence audit of reader disagreement")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", type=int, help="number of doubly read bags to audit")

    p = sub.add_parser("report", parents=[common], help="render tables and figures from finished runs")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline")
    p.add_argument("--pruned", nargs="*")
    p.add_argument("--audit")
    p.add_argument("--encoder", default="mlp")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "prune-retrain": cmd_prune_retrain,
    "audit-labels": cmd_audit_labels,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"tracemil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"tracemil {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PruneError, InfluenceError, ValueError) as exc:
        print(f"tracemil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
