"""Command-line entry point: ``antkit <subcommand> ...``.

Exit codes: 0 success, 2 usage or incompatible inputs, 3 data errors,
4 compute errors.  Progress goes to stderr; artifacts only to disk.
"""
from __future__ import annotations

import os

_threads = os.environ.get("ANT_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from . import attacks as A  # noqa: E402
from . import evaluation as E  # noqa: E402
from .errors import AntError, ComputeError, DataError, IncompatibleError  # noqa: E402
from .features import Encoding, Kind, encode_many, fit_norm_stats, samples_for  # noqa: E402
from .ingest import (DatasetManifest, SplitDataset, balance_subset, load_labeled_flows,  # noqa: E402
                     read_bundle, split, write_bundle)
from .nn import TrainConfig, cnn_spec, evaluate, load_model, sae_spec, save_model, train  # noqa: E402

log = logging.getLogger("antkit")

EXIT_USAGE, EXIT_DATA, EXIT_COMPUTE = 2, 3, 4


class UsageError(AntError):
    pass


def sub_seed(seed: int, purpose: str) -> int:
    """Named sub-seed so each consumer of randomness gets its own stream."""
    return E.job_seed(seed, purpose) % (2 ** 32)


def _write_config(out_dir: Path, args: argparse.Namespace, **resolved) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "quiet")}
    cfg.update(resolved)
    cfg["version"] = __version__
    (out_dir / "config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _numbers(text: str) -> tuple:
    out = []
    for t in text.split(","):
        t = t.strip()
        if not t:
            continue
        try:
            out.append(int(t))
        except ValueError:
            try:
                out.append(float(t))
            except ValueError:
                raise argparse.ArgumentTypeError(f"not a number: {t!r}")
    return tuple(out)


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    from .synth import generate_flows, write_corpus
    flows = generate_flows(args.flows_per_class, seed=sub_seed(args.seed, "synth"))
    manifest = write_corpus(args.out, flows)
    _write_config(Path(args.out), args)
    log.info("wrote %d flows, manifest %s", len(flows), manifest)
    return 0


# ----------------------------------------------------------------- ingest

def cmd_ingest(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    timeout_us = int(round(args.timeout_s * 1_000_000))
    flows, skipped = load_labeled_flows(manifest, timeout_us)
    if not flows:
        raise DataError(f"{args.manifest}: no flows assembled")
    labels = [f.label for f in flows]
    ds = split(flows, labels, seed=sub_seed(args.seed, "split"),
               class_labels=manifest.class_labels)
    train_before = {c: len(ds.train.of_class(c)) for c in range(len(manifest.class_labels))}
    balanced = balance_subset(ds.train, args.balance_target, sub_seed(args.seed, "balance"))
    ds = SplitDataset(balanced, ds.validation, ds.test, ds.split_fractions, ds.seed,
                      ds.class_labels)
    out = Path(args.out)
    write_bundle(out, ds, timeout_us, {"skipped": dict(sorted(skipped.items()))})
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "total", "train", "train_balanced", "validation", "test"])
        for c, name in enumerate(manifest.class_labels):
            total = sum(1 for y in labels if y == c)
            w.writerow([name, total, train_before[c], len(ds.train.of_class(c)),
                        len(ds.validation.of_class(c)), len(ds.test.of_class(c))])
    _write_config(out, args, timeout_us=timeout_us)
    log.info("bundle %s: %d flows, %d classes", out, len(flows), len(manifest.class_labels))
    return 0


# ------------------------------------------------------------------ train

DEFAULT_EPOCHS = {"PC": 10, "FCC": 10, "FTSC": 25}


def _dataset_xy(enc, subset, stats):
    items, y = samples_for(enc, subset.items, subset.labels)
    if not items:
        raise DataError(f"no samples for {enc.kind.name}")
    return encode_many(items, enc, stats), y


def cmd_train(args) -> int:
    ds = read_bundle(args.bundle)
    kind = Kind[args.encoding]
    enc = Encoding(kind, n=args.n, m=args.m, max_pkt_size=args.max_pkt_size)
    stats = fit_norm_stats(ds.train.items) if kind.category == "FTSC" else None
    epochs = args.epochs if args.epochs is not None else DEFAULT_EPOCHS[kind.category]
    cfg = TrainConfig(epochs=epochs, batch_size=args.batch, learning_rate=args.lr,
                      seed=sub_seed(args.seed, "train"), patience=args.patience)
    k = len(ds.class_labels)
    spec = (sae_spec if args.arch == "sae" else cnn_spec)(enc.length, k)
    train_xy = _dataset_xy(enc, ds.train, stats)
    val_xy = _dataset_xy(enc, ds.validation, stats)
    log.info("training %s %s on %d samples", args.arch, kind.name, len(train_xy[1]))
    model = train(spec, train_xy, val_xy, cfg, encoding=enc, norm_stats=stats,
                  labels=list(ds.class_labels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.antm")
    metrics = evaluate(model, *_dataset_xy(enc, ds.test, stats))
    E.write_clean_csv(E.clean_block(metrics), ds.class_labels, out / "metrics.csv")
    _write_config(out, args, epochs=epochs, model_id=model.model_id(),
                  train_seed=cfg.seed, encoding_resolved=enc.to_dict())
    log.info("test accuracy %.2f%%", 100 * metrics.accuracy)
    return 0


# ----------------------------------------------------------------- attack

def _plan_from_args(args, model) -> E.ExperimentPlan:
    if args.plan:
        plan = E.ExperimentPlan.load(args.plan)
        if args.attack and args.attack != plan.attack:
            raise UsageError(f"--attack {args.attack} contradicts plan attack {plan.attack}")
        return plan
    if not args.attack:
        raise UsageError("--attack or --plan is required")
    placement = {"advpad": args.loc, "advpay": args.dummy_index,
                 "advburst": args.selected_burst}[args.attack]
    if placement is not None and args.attack == "advburst" and placement.lstrip("-").isdigit():
        placement = int(placement)
    if placement is not None and args.attack == "advpay" and placement.isdigit():
        placement = int(placement)
    return E.ExperimentPlan(
        attack=args.attack, strengths=args.grid, variants=args.variants or E.VARIANTS,
        target_classes=args.classes, iterations=args.iters, batch_size=args.batch,
        eps=args.eps, runs=args.runs, seed=sub_seed(args.seed, "attack"),
        placement=placement, regenerate_port=args.regenerate_port,
        model_ids=(model.model_id(),))


def _check_pair(attack: str, model) -> None:
    kinds = A.VALID_PAIRS[attack]
    if model.encoding is None or model.encoding.kind not in kinds:
        pairs = ", ".join(f"{a}:{'/'.join(k.name for k in ks)}" for a, ks in A.VALID_PAIRS.items())
        got = model.encoding.kind.name if model.encoding else "none"
        raise IncompatibleError(f"{attack} cannot target a {got} model; valid pairs: {pairs}")


def uap_name(attack: str, cls: int, strength) -> str:
    return f"{attack}_c{cls}_s{strength}.antu"


def _progress(msg: str) -> None:
    log.info("%s", msg)


def cmd_attack(args) -> int:
    model = load_model(args.model)
    ds = read_bundle(args.bundle)
    plan = _plan_from_args(args, model)
    _check_pair(plan.attack, model)
    out = Path(args.out)
    (out / "uaps").mkdir(parents=True, exist_ok=True)

    def keep(cls, strength, uap):
        A.save_uap(uap, out / "uaps" / uap_name(plan.attack, cls, strength))

    report = E.run_experiment(plan, model, ds, on_uap=keep, progress=_progress)
    E.write_report(report, out)
    plan.save(out / "plan.json")
    E.write_run_log(report, out / "run_log.jsonl")
    _write_config(out, args, plan=plan.to_dict())
    return 0


def _load_uaps(uap_dir: Path, plan: E.ExperimentPlan, n_classes: int) -> dict:
    classes = plan.target_classes if plan.target_classes is not None else range(n_classes)
    uaps = {}
    for c in classes:
        for s in plan.strengths:
            if s == 0:
                continue
            path = uap_dir / "uaps" / uap_name(plan.attack, c, s)
            if not path.exists():
                raise DataError(f"missing UAP for class {c}, strength {s}: {path}")
            uaps[(c, s)] = A.load_uap(path)
    return uaps


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc = model.encoding
    metrics = evaluate(model, *_dataset_xy(enc, ds.test, model.norm_stats))
    E.write_clean_csv(E.clean_block(metrics), ds.class_labels, out / "clean_metrics.csv")
    if args.uap_dir:
        uap_dir = Path(args.uap_dir)
        plan = E.ExperimentPlan.load(uap_dir / "plan.json")
        _check_pair(plan.attack, model)
        uaps = _load_uaps(uap_dir, plan, len(ds.class_labels))
        report = E.run_experiment(plan, model, ds, uaps=uaps, progress=_progress)
        E.write_report(report, out)
        E.write_run_log(report, out / "run_log.jsonl")
    _write_config(out, args)
    log.info("test accuracy %.2f%%", 100 * metrics.accuracy)
    return 0


def cmd_transfer(args) -> int:
    source = load_model(args.source)
    target = load_model(args.target)
    E.check_compatible(source, target)
    ds = read_bundle(args.bundle)
    uap_dir = Path(args.uap_dir)
    plan = E.ExperimentPlan.load(uap_dir / "plan.json")
    _check_pair(plan.attack, source)
    uaps = _load_uaps(uap_dir, plan, len(ds.class_labels))
    report = E.run_transfer(source, target, plan, ds, uaps=uaps, progress=_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_transfer_csv(report, out / "transfer.csv")
    E.write_report(report, out)
    E.write_run_log(report, out / "run_log.jsonl")
    _write_config(out, args, plan=plan.to_dict())
    return 0


def cmd_report(args) -> int:
    """Stack the per-class curve CSVs of one or more attack runs into one table."""
    rows = []
    for d in args.inputs:
        d = Path(d)
        paths = sorted(p for p in d.glob("*.csv")
                       if p.name not in ("clean_metrics.csv", "summary.csv", "transfer.csv",
                                         "metrics.csv"))
        if not paths:
            raise DataError(f"{d}: no report CSVs")
        for p in paths:
            for r in E.read_report_csv(p):
                rows.append([d.name, p.stem, r.strength] + [r.values[v] for v in E.VARIANTS])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "curve", "strength"] + list(E.VARIANTS))
        for r in rows:
            w.writerow([E._fmt(v) for v in r])
    log.info("wrote %d rows to %s", len(rows), out)
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="silence progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic pcap corpus and its manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--flows-per-class", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="pcaps + manifest -> split dataset bundle")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--timeout-s", type=float, default=180.0)
    s.add_argument("--balance-target", type=int, default=None,
                   help="per-class training count (default: median class size)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a classifier on a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--encoding", required=True, choices=[k.name for k in Kind])
    s.add_argument("--arch", choices=("cnn", "sae"), default="cnn")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--n", type=int, default=10, help="packets per FCC window")
    s.add_argument("--m", type=int, default=100, help="packets per FTSC series")
    s.add_argument("--max-pkt-size", type=int, default=1500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="generate UAPs and score them over a strength grid")
    s.add_argument("--model", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--attack", choices=sorted(E.STRENGTH_PARAM))
    s.add_argument("--plan", help="experiment plan JSON (overrides grid/hyperparameter flags)")
    s.add_argument("--loc", choices=(A.START, A.END), default=None)
    s.add_argument("--dummy-index", default=None)
    s.add_argument("--selected-burst", default=None)
    s.add_argument("--grid", type=_numbers, default=None)
    s.add_argument("--classes", type=_ints, default=None)
    s.add_argument("--variants", type=lambda t: tuple(v for v in t.split(",") if v), default=None)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--runs", type=int, default=50)
    s.add_argument("--regenerate-port", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("eval", help="clean metrics, and optionally re-score saved UAPs")
    s.add_argument("--model", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--uap-dir", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("transfer", help="score source-model UAPs on a target model")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--uap-dir", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("report", help="merge per-class report CSVs into one table")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if args.quiet else logging.INFO, force=True)
    threads = os.environ.get("ANT_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        log.error("ANT_THREADS must be a positive integer, got %r", threads)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, IncompatibleError) as e:
        log.error("error: %s", e)
        return EXIT_USAGE
    except ComputeError as e:
        log.error("compute error: %s", e)
        return EXIT_COMPUTE
    except (DataError, OSError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except AntError as e:
        log.error("error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
