"""Robustness experiments: strength sweeps, recall curves, transfer tables.

A sweep generates one UAP per (class, strength) on validation data of that
class and scores it on the test data of the same class.  Recall values are
kept as percentages rounded to two decimals, which is also what the report
CSVs hold, so a written report parses back to identical values.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import attacks as A
from .errors import AntError, DataError, IncompatibleError
from .features import Encoding, encode, encode_many, samples_for
from .ingest import SplitDataset
from .nn import Metrics, Model, metrics_from_predictions

VARIANTS = ("no_attack", "adv", "rand", "adv_port", "rand_port", "port")
CSV_HEADER = ("strength",) + VARIANTS
TRANSFER_HEADER_PREFIX = ("attack", "parameter", "overall_accuracy")

STRENGTH_PARAM = {"advpad": "overhead_pct", "advpay": "size", "advburst": "dummy_count"}
PLACEMENT_PARAM = {"advpad": "loc", "advpay": "dummy_index", "advburst": "selected_burst"}
RAND_OF = {"advpad": "randpad", "advpay": "randpay", "advburst": "randburst"}

DEFAULT_GRIDS = {
    "advpad": (0, 10, 20, 30, 40, 50),
    "advpay": (10, 100, 300, 500, 750, 1000, 1200, 1400),
    "advburst": (1, 3, 5, 7, 10, 12, 15, 17, 20),
}
DEFAULT_HYPER = {
    "advpad": {"iterations": 1000, "batch_size": 128, "eps": 0.01},
    "advpay": {"iterations": 1000, "batch_size": 64, "eps": 0.001},
    "advburst": {"iterations": 2000, "batch_size": 64, "eps": 0.01},
}


def job_seed(master_seed: int, *parts) -> int:
    """Seed for one grid job, independent of execution order."""
    text = json.dumps([int(master_seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass
class ExperimentPlan:
    attack: str
    strengths: Optional[tuple] = None
    variants: tuple = VARIANTS
    target_classes: Optional[tuple] = None
    iterations: Optional[int] = None
    batch_size: Optional[int] = None
    eps: Optional[float] = None
    runs: int = 50
    seed: int = 0
    placement: Optional[str] = None
    regenerate_port: bool = False
    model_ids: tuple = ()

    def __post_init__(self):
        if self.attack not in STRENGTH_PARAM:
            raise IncompatibleError(f"unknown attack {self.attack!r}; choose from {sorted(STRENGTH_PARAM)}")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise DataError(f"unknown variants {sorted(bad)}")
        if self.runs < 1:
            raise DataError("runs must be >= 1")
        self.variants = tuple(v for v in VARIANTS if v in self.variants)
        if self.strengths is None:
            self.strengths = DEFAULT_GRIDS[self.attack]
        self.strengths = tuple(self.strengths)
        if self.target_classes is not None:
            self.target_classes = tuple(int(c) for c in self.target_classes)
        self.model_ids = tuple(self.model_ids)

    def hyper(self) -> dict:
        out = dict(DEFAULT_HYPER[self.attack])
        for k in out:
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("strengths", "variants", "target_classes", "model_ids"):
            d[k] = list(d[k]) if d[k] is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown plan fields {sorted(extra)}")
        d = dict(d)
        for k in ("strengths", "variants", "target_classes", "model_ids"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not a JSON plan ({e})") from e


@dataclass
class ReportRow:
    strength: object
    values: dict  # variant -> recall % (2 decimals) or None

    def __eq__(self, other):
        return (isinstance(other, ReportRow) and self.strength == other.strength
                and all(self.values.get(v) == other.values.get(v) for v in VARIANTS))


@dataclass
class AttackReport:
    attack: str
    encoding: Encoding
    class_names: list
    curves: dict            # class index -> list[ReportRow]
    clean: dict             # precision/recall/fscore lists + accuracy
    support: dict           # class index -> number of scored test samples
    log: list = field(default_factory=list, repr=False)

    def recall(self, cls: int, strength, variant: str):
        for row in self.curves[cls]:
            if row.strength == strength:
                return row.values.get(variant)
        raise KeyError((cls, strength))

    def overall_accuracy(self, strength, variant: str) -> Optional[float]:
        """Count-weighted accuracy over the attacked classes, in percent."""
        num = den = 0.0
        for c, rows in self.curves.items():
            r = self.recall(c, strength, variant)
            if r is None:
                return None
            num += r * self.support[c]
            den += self.support[c]
        return round(num / den, 2) if den else None


def pct(fraction: float) -> float:
    return round(100.0 * float(fraction), 2)


def clean_block(metrics: Metrics) -> dict:
    return {"precision": [pct(v) for v in metrics.precision],
            "recall": [pct(v) for v in metrics.recall],
            "fscore": [pct(v) for v in metrics.fscore],
            "accuracy": pct(metrics.accuracy)}


def sample_id(item) -> str:
    """Content identity of a packet or flow, used for split-hygiene checks."""
    h = hashlib.sha256()
    pkts = item.packets if hasattr(item, "packets") else [item]
    for p in pkts:
        h.update(p.tuple.to_bytes())
        h.update(int(p.timestamp_us).to_bytes(8, "little", signed=True))
        h.update(p.tl_header)
        h.update(p.payload)
    return h.hexdigest()


def assert_disjoint(gen_items: Sequence, score_items: Sequence) -> None:
    shared = {sample_id(i) for i in gen_items} & {sample_id(i) for i in score_items}
    if shared:
        raise DataError(f"{len(shared)} samples are used both to generate and to score a UAP")


def _with_context(err: AntError, cls: int, strength) -> AntError:
    msg = f"class {cls}, strength {strength}: {err}"
    try:
        new = type(err)(msg)
    except TypeError:
        new = DataError(msg)
    new.__cause__ = err
    return new


def _generate(attack, model, items, cls, strength, placement, hyper, seed):
    kw = dict(hyper, seed=seed)
    kw[STRENGTH_PARAM[attack]] = strength
    if placement is not None:
        kw[PLACEMENT_PARAM[attack]] = placement
    gen = {"advpad": A.gen_advpad, "advpay": A.gen_advpay, "advburst": A.gen_advburst}[attack]
    return gen(items, cls, model, **kw)


def _port_items(items, kind, seed):
    rng = np.random.default_rng(seed)
    return [A.port_attack(i, kind, seed=rng) for i in items]


def run_experiment(plan: ExperimentPlan, model: Model, dataset: SplitDataset,
                   scorer: Optional[Model] = None, uaps: Optional[dict] = None,
                   on_uap: Optional[Callable] = None,
                   progress: Optional[Callable[[str], None]] = None) -> AttackReport:
    """Sweep ``plan`` against ``model``.

    ``scorer`` (default ``model``) is the classifier whose recall is reported;
    UAPs always come from ``model`` or from the precomputed ``uaps`` mapping
    ``(class, strength) -> Uap``.  ``on_uap(cls, strength, uap)`` sees every
    adversarial UAP used by the Adv variant.
    """
    scorer = scorer or model
    enc = model.encoding
    stats = model.norm_stats
    kind = enc.kind
    if kind not in A.VALID_PAIRS[plan.attack]:
        raise IncompatibleError(
            f"{plan.attack} needs {[k.name for k in A.VALID_PAIRS[plan.attack]]}, model is {kind.name}")
    hyper = plan.hyper()
    n_classes = len(model.labels) if model.labels else model.spec.n_classes
    classes = plan.target_classes if plan.target_classes is not None else tuple(range(n_classes))
    port_ok = kind.with_header

    test_items, test_y = samples_for(enc, dataset.test.items, dataset.test.labels)
    clean_pred = scorer.predict(encode_many(test_items, enc, stats))
    clean_metrics = metrics_from_predictions(test_y, clean_pred, n_classes)
    clean = clean_block(clean_metrics)

    curves, support, log = {}, {}, []

    def score(X, cls):
        return float(np.mean(scorer.predict(X) == cls))

    for cls in classes:
        val_items = samples_for(enc, dataset.validation.of_class(cls))[0]
        test_c = samples_for(enc, dataset.test.of_class(cls))[0]
        if not test_c:
            raise DataError(f"class {cls} has no test samples")
        assert_disjoint(val_items, test_c)
        support[cls] = len(test_c)
        if len(test_c) != int(np.sum(test_y == cls)):
            raise DataError(f"class {cls}: scored samples differ from the clean test set")
        clean_recall = clean["recall"][cls]

        port_recall = None
        port_test = port_val = None
        if port_ok and {"port", "adv_port", "rand_port"} & set(plan.variants):
            port_test = _port_items(test_c, kind, job_seed(plan.seed, cls, "port", "test"))
            X_port = np.stack([encode(i, enc, stats) for i in port_test])
            port_recall = pct(score(X_port, cls))
            if plan.regenerate_port:
                port_val = _port_items(val_items, kind, job_seed(plan.seed, cls, "port", "val"))

        rows = []
        for strength in plan.strengths:
            t0 = time.perf_counter()
            vals = {v: None for v in VARIANTS}
            entry = {"class": cls, "strength": strength, "seeds": {}}
            if "no_attack" in plan.variants:
                vals["no_attack"] = clean_recall
            if "port" in plan.variants:
                vals["port"] = port_recall
            try:
                identity = strength == 0
                if "adv" in plan.variants or "adv_port" in plan.variants:
                    if identity:
                        uap = None
                    elif uaps is not None:
                        uap = uaps.get((cls, strength))
                        if uap is None:
                            raise DataError(f"no UAP for class {cls}, strength {strength}")
                    else:
                        seed = job_seed(plan.seed, cls, strength, "adv")
                        entry["seeds"]["adv"] = seed
                        uap = _generate(plan.attack, model, val_items, cls, strength,
                                        plan.placement, hyper, seed)
                    if uap is not None and on_uap is not None:
                        on_uap(cls, strength, uap)
                    if "adv" in plan.variants:
                        vals["adv"] = clean_recall if identity else pct(
                            score(A.apply_many(test_c, uap, stats)[0], cls))
                    if "adv_port" in plan.variants and port_test is not None:
                        puap = uap
                        if not identity and plan.regenerate_port:
                            seed = job_seed(plan.seed, cls, strength, "adv_port")
                            entry["seeds"]["adv_port"] = seed
                            puap = _generate(plan.attack, model, port_val, cls, strength,
                                             plan.placement, hyper, seed)
                        vals["adv_port"] = port_recall if identity else pct(
                            score(A.apply_many(port_test, puap, stats)[0], cls))
                want_rand = [v for v in ("rand", "rand_port") if v in plan.variants
                             and (v == "rand" or port_test is not None)]
                if want_rand:
                    if identity:
                        if "rand" in want_rand:
                            vals["rand"] = clean_recall
                        if "rand_port" in want_rand:
                            vals["rand_port"] = port_recall
                    else:
                        seed = job_seed(plan.seed, cls, strength, "rand")
                        entry["seeds"]["rand"] = seed
                        params = {STRENGTH_PARAM[plan.attack]: strength}
                        if plan.placement is not None:
                            params[PLACEMENT_PARAM[plan.attack]] = plan.placement
                        elif plan.attack == "advpad":
                            params["loc"] = A.START
                        elif plan.attack == "advpay":
                            params["dummy_index"] = A.AFTER_FIRST_FORWARD
                        runs = A.rand_baseline(RAND_OF[plan.attack], enc, cls, params,
                                               plan.runs, seed, stats)
                        for v, items in (("rand", test_c), ("rand_port", port_test)):
                            if v not in want_rand:
                                continue
                            per_run = [score(A.apply_many(items, u, stats)[0], cls) for u in runs]
                            vals[v] = pct(np.mean(per_run))
                            entry[f"{v}_runs"] = per_run
            except AntError as e:
                raise _with_context(e, cls, strength) from e
            entry["recall"] = dict(vals)
            entry["seconds"] = round(time.perf_counter() - t0, 3)
            log.append(entry)
            rows.append(ReportRow(strength, vals))
            if progress:
                progress(f"class {cls} strength {strength}: "
                         + " ".join(f"{k}={v}" for k, v in vals.items() if v is not None))
        curves[cls] = rows

    names = list(model.labels) if model.labels else [str(i) for i in range(n_classes)]
    return AttackReport(plan.attack, enc, names, curves, clean, support, log)


def check_compatible(source: Model, target: Model) -> None:
    if source.encoding is None or target.encoding is None:
        raise IncompatibleError("both models need an encoding")
    if source.encoding != target.encoding:
        raise IncompatibleError(
            f"encoding mismatch: {source.encoding.to_dict()} vs {target.encoding.to_dict()}")
    if list(source.labels or []) != list(target.labels or []):
        raise IncompatibleError(f"label sets differ: {source.labels} vs {target.labels}")


def run_transfer(source: Model, target: Model, plan: ExperimentPlan, dataset: SplitDataset,
                 uaps: Optional[dict] = None, **kw) -> AttackReport:
    """UAPs from ``source`` (or ``uaps``) scored on ``target``; target gradients are never used."""
    check_compatible(source, target)
    return run_experiment(plan, source, dataset, scorer=target, uaps=uaps, **kw)


def transfer_rows(report: AttackReport) -> list:
    """Rows of (attack, parameter, overall accuracy, per-class recall...)."""
    rows = []
    label = {"no_attack": "NoAttack", "adv": report.attack, "rand": RAND_OF[report.attack],
             "adv_port": report.attack + "+port", "rand_port": RAND_OF[report.attack] + "+port",
             "port": "port"}
    classes = sorted(report.curves)
    strengths = [r.strength for r in report.curves[classes[0]]]
    for variant in VARIANTS:
        # NoAttack and Port do not depend on strength: one row each
        grid = strengths[:1] if variant in ("no_attack", "port") else strengths
        for strength in grid:
            recalls = [report.recall(c, strength, variant) for c in classes]
            if any(r is None for r in recalls):
                continue
            param = "" if variant in ("no_attack", "port") else strength
            rows.append([label[variant], param, report.overall_accuracy(strength, variant)]
                        + recalls)
    return rows


# ------------------------------------------------------------------ CSV

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _parse_num(text: str):
    if text == "":
        return None
    if any(ch in text for ch in ".eE"):
        return float(text)
    return int(text)


def write_report_csv(rows: Sequence[ReportRow], path) -> Path:
    """One class's curve: ``strength,no_attack,adv,rand,adv_port,rand_port,port``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([_fmt(row.strength)] + [_fmt(row.values.get(v)) for v in VARIANTS])
    return path


def read_report_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != CSV_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        rows = []
        for line in r:
            if len(line) != len(CSV_HEADER):
                raise DataError(f"{path}: malformed row {line}")
            vals = {v: (None if t == "" else float(t)) for v, t in zip(VARIANTS, line[1:])}
            rows.append(ReportRow(_parse_num(line[0]), vals))
    return rows


def report_paths(report: AttackReport, out_dir) -> dict:
    out_dir = Path(out_dir)
    return {c: out_dir / f"{report.attack}_{c}_{report.class_names[c]}.csv" for c in report.curves}


def write_report(report: AttackReport, out_dir) -> list:
    """Per-class curve CSVs plus ``clean_metrics.csv``; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_report_csv(report.curves[c], p) for c, p in report_paths(report, out_dir).items()]
    paths.append(write_clean_csv(report.clean, report.class_names, out_dir / "clean_metrics.csv"))
    return paths


def write_clean_csv(clean: dict, class_names: Sequence[str], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "fscore"])
        for i, name in enumerate(class_names):
            w.writerow([name, _fmt(clean["precision"][i]), _fmt(clean["recall"][i]),
                        _fmt(clean["fscore"][i])])
        w.writerow(["overall", "", _fmt(clean["accuracy"]), ""])
    return path


def write_transfer_csv(report: AttackReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TRANSFER_HEADER_PREFIX) + [report.class_names[c] for c in sorted(report.curves)])
        for row in transfer_rows(report):
            w.writerow([_fmt(v) for v in row])
    return path


def write_run_log(report: AttackReport, path) -> Path:
    """JSON lines, one record per grid point (timings included, so not byte-stable)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in report.log:
            fh.write(json.dumps(entry, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o).__name__)
