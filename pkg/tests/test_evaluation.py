import csv

import numpy as np
import pytest

from antkit import evaluation as E
from antkit.errors import DataError, IncompatibleError
from antkit.features import Encoding, Kind, encode_many, fit_norm_stats, samples_for
from antkit.ingest import SplitDataset
from antkit.nn import TrainConfig, cnn_spec, evaluate, sae_spec, train

FAST = dict(iterations=3, batch_size=16, eps=0.01, runs=2, seed=11)


def fit(ds, enc, spec_fn=cnn_spec, epochs=3):
    stats = fit_norm_stats(ds.train.items) if enc.kind.category == "FTSC" else None

    def xy(sub):
        items, y = samples_for(enc, sub.items, sub.labels)
        return encode_many(items, enc, stats), y

    return train(spec_fn(enc.length, 4), xy(ds.train), xy(ds.validation),
                 TrainConfig(epochs=epochs, seed=0), encoding=enc, norm_stats=stats,
                 labels=list(ds.class_labels))


@pytest.fixture(scope="module")
def pc_model(small_split):
    return fit(small_split, Encoding(Kind.PC_HP, max_pkt_size=64))


@pytest.fixture(scope="module")
def pad_report(pc_model, small_split):
    plan = E.ExperimentPlan("advpad", strengths=(0, 20, 40), target_classes=(0, 3), **FAST)
    return E.run_experiment(plan, pc_model, small_split)


def test_plan_round_trip(tmp_path):
    plan = E.ExperimentPlan("advburst", strengths=(1, 5), variants=("adv", "rand"),
                            target_classes=(2,), iterations=7, placement="first_backward",
                            model_ids=("abc",))
    plan.save(tmp_path / "p.json")
    assert E.ExperimentPlan.load(tmp_path / "p.json") == plan


def test_plan_defaults_and_errors():
    plan = E.ExperimentPlan("advpay")
    assert plan.strengths == (10, 100, 300, 500, 750, 1000, 1200, 1400)
    assert plan.hyper() == {"iterations": 1000, "batch_size": 64, "eps": 0.001}
    assert plan.runs == 50
    assert E.ExperimentPlan("advpad").hyper() == {"iterations": 1000, "batch_size": 128, "eps": 0.01}
    assert E.ExperimentPlan("advburst").hyper()["iterations"] == 2000
    with pytest.raises(IncompatibleError):
        E.ExperimentPlan("fgsm")
    with pytest.raises(DataError):
        E.ExperimentPlan.from_dict({"attack": "advpad", "colour": 1})
    with pytest.raises(DataError):
        E.ExperimentPlan("advpad", variants=("adv", "nope"))


def test_job_seed_stable_and_distinct():
    assert E.job_seed(1, 0, 20, "adv") == E.job_seed(1, 0, 20, "adv")
    assert E.job_seed(1, 0, 20, "adv") != E.job_seed(1, 0, 20, "rand")
    assert E.job_seed(1, 0, 20, "adv") != E.job_seed(2, 0, 20, "adv")


def test_csv_round_trip(tmp_path):
    rows = [E.ReportRow(0, {"no_attack": 97.5, "adv": 97.5, "rand": 97.5, "port": 80.0}),
            E.ReportRow(10, {"no_attack": 97.5, "adv": 3.33, "rand": 91.27, "port": 80.0,
                             "adv_port": 0.0, "rand_port": 66.67})]
    E.write_report_csv(rows, tmp_path / "r.csv")
    assert E.read_report_csv(tmp_path / "r.csv") == rows
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == "strength,no_attack,adv,rand,adv_port,rand_port,port"
    assert text[1] == "0,97.50,97.50,97.50,,,80.00"


def test_csv_only_no_attack(tmp_path):
    E.write_report_csv([E.ReportRow(5, {"no_attack": 50.0})], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "5,50.00,,,,,"


def test_csv_bad_header(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        E.read_report_csv(tmp_path / "r.csv")


def test_no_attack_matches_evaluate(pad_report, pc_model, small_split):
    enc = pc_model.encoding
    items, y = samples_for(enc, small_split.test.items, small_split.test.labels)
    met = evaluate(pc_model, encode_many(items, enc), y)
    for c in (0, 3):
        assert {r.values["no_attack"] for r in pad_report.curves[c]} == {E.pct(met.recall[c])}
    assert pad_report.clean["accuracy"] == E.pct(met.accuracy)


def test_port_row_strength_independent(pad_report):
    for rows in pad_report.curves.values():
        assert len({r.values["port"] for r in rows}) == 1


def test_strength_zero_is_identity(pad_report):
    for rows in pad_report.curves.values():
        r0 = rows[0]
        assert r0.strength == 0
        assert r0.values["adv"] == r0.values["rand"] == r0.values["no_attack"]
        assert r0.values["adv_port"] == r0.values["rand_port"] == r0.values["port"]


def test_rand_average_matches_run_log(pad_report):
    for entry in pad_report.log:
        if "rand_runs" in entry:
            assert entry["recall"]["rand"] == E.pct(np.mean(entry["rand_runs"]))
            assert len(entry["rand_runs"]) == FAST["runs"]


def test_recalls_in_range(pad_report):
    for rows in pad_report.curves.values():
        for r in rows:
            assert all(0 <= v <= 100 for v in r.values.values() if v is not None)


def test_rand_runs_reproducible(pc_model, small_split):
    plan = E.ExperimentPlan("advpad", strengths=(30,), variants=("rand",), target_classes=(1,),
                            runs=1, seed=4)
    a = E.run_experiment(plan, pc_model, small_split)
    b = E.run_experiment(plan, pc_model, small_split)
    assert a.curves == b.curves and a.log[0]["rand_runs"] == b.log[0]["rand_runs"]


def test_port_variants_absent_for_payload_encodings(small_split):
    m = fit(small_split, Encoding(Kind.PC_P, max_pkt_size=64), epochs=1)
    plan = E.ExperimentPlan("advpad", strengths=(20,), target_classes=(0,), **FAST)
    row = E.run_experiment(plan, m, small_split).curves[0][0]
    assert row.values["port"] is None and row.values["adv_port"] is None
    assert row.values["adv"] is not None


def test_split_hygiene_violation(pc_model, small_split):
    leaky = SplitDataset(small_split.train, small_split.test, small_split.test,
                         class_labels=small_split.class_labels)
    plan = E.ExperimentPlan("advpad", strengths=(20,), target_classes=(0,), **FAST)
    with pytest.raises(DataError, match="both to generate and to score"):
        E.run_experiment(plan, pc_model, leaky)


def test_incompatible_attack(pc_model, small_split):
    with pytest.raises(IncompatibleError):
        E.run_experiment(E.ExperimentPlan("advburst", strengths=(1,)), pc_model, small_split)


def test_transfer_to_self_matches(pc_model, small_split, pad_report):
    plan = E.ExperimentPlan("advpad", strengths=(0, 20, 40), target_classes=(0, 3), **FAST)
    uaps = {}
    E.run_experiment(plan, pc_model, small_split, on_uap=lambda c, s, u: uaps.update({(c, s): u}))
    rep = E.run_transfer(pc_model, pc_model, plan, small_split, uaps=uaps)
    assert rep.curves == pad_report.curves


def test_transfer_mismatch(pc_model, small_split):
    other = fit(small_split, Encoding(Kind.PC_P, max_pkt_size=64), epochs=1)
    with pytest.raises(IncompatibleError):
        E.run_transfer(pc_model, other, E.ExperimentPlan("advpad"), small_split)


def test_missing_uap_named(pc_model, small_split):
    plan = E.ExperimentPlan("advpad", strengths=(20,), target_classes=(2,), **FAST)
    with pytest.raises(DataError, match="class 2, strength 20"):
        E.run_experiment(plan, pc_model, small_split, uaps={})


def test_transfer_csv_shape(tmp_path, small_split, pc_model):
    sae = fit(small_split, Encoding(Kind.PC_HP, max_pkt_size=64), sae_spec, epochs=1)
    plan = E.ExperimentPlan("advpad", strengths=(10, 20), target_classes=(0, 1, 2, 3), **FAST)
    rep = E.run_transfer(pc_model, sae, plan, small_split)
    E.write_transfer_csv(rep, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["attack", "parameter", "overall_accuracy", "chat", "file_transfer",
                       "streaming", "voip"]
    names = [r[0] for r in rows[1:]]
    assert names.count("NoAttack") == 1 and names.count("port") == 1
    assert names.count("advpad") == 2 and names.count("randpad+port") == 2


def test_write_report_files(tmp_path, pad_report):
    paths = E.write_report(pad_report, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["advpad_0_chat.csv", "advpad_3_voip.csv", "clean_metrics.csv"]
    assert E.read_report_csv(tmp_path / "advpad_0_chat.csv") == pad_report.curves[0]
    lines = (tmp_path / "clean_metrics.csv").read_text().splitlines()
    assert lines[0] == "class,precision,recall,fscore" and lines[-1].startswith("overall,")
