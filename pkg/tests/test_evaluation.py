import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import latentcov.evaluation as evaluation
from latentcov.autoencoder import ArchitectureConfig, TrainConfig
from latentcov.evaluation import (
    EvalReport,
    EvalSettings,
    ScoredRecord,
    effective_denoise,
    evaluate,
    format_table,
    kfold_split,
    roc_auc,
    write_report_csv,
)
from latentcov.synthetic import SynthConfig, generate_records
from latentcov.trigger import MethodConfig


def pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -- ROC-AUC ---------------------------------------------------------------------

def test_auc_examples():
    recs = [ScoredRecord("a", 0.1, "noise"), ScoredRecord("b", 0.4, "noise"),
            ScoredRecord("c", 0.35, "event"), ScoredRecord("d", 0.8, "event")]
    assert roc_auc(recs) == 0.75
    assert roc_auc(scores=[0, 1, 2, 3], labels=[0, 0, 1, 1]) == 1.0
    rng = np.random.default_rng(0)
    auc = roc_auc(scores=rng.standard_normal(20000), labels=rng.integers(0, 2, 20000))
    assert abs(auc - 0.5) < 0.05


def test_auc_errors_and_record_validation():
    with pytest.raises(ValueError):
        roc_auc(scores=[1, 2], labels=["event", "event"])
    with pytest.raises(ValueError):
        ScoredRecord("x", float("nan"), "event")
    with pytest.raises(ValueError):
        ScoredRecord("x", 1.0, "quake")


@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=60))
def test_auc_matches_pair_counting(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        return
    assert roc_auc(scores=scores, labels=labels) == pytest.approx(pair_count_auc(scores, labels),
                                                                  abs=1e-12)


@given(st.integers(0, 2**31))
def test_auc_rank_invariance_and_label_reversal(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(50)
    lab = np.arange(50) % 2 == 0
    auc = roc_auc(scores=s, labels=lab)
    assert roc_auc(scores=np.exp(3 * s) + 1, labels=lab) == auc
    assert roc_auc(scores=s, labels=~lab) == pytest.approx(1 - auc)


# -- folds and reports -----------------------------------------------------------

def test_kfold_basic():
    labels = ["event"] * 5 + ["noise"] * 5
    folds = kfold_split(labels, 5, seed=1)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    for f in folds:
        assert sorted(labels[i] for i in f) == ["event", "noise"]
    again = kfold_split(labels, 5, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))


@given(st.integers(5, 80), st.integers(2, 5), st.integers(0, 100))
def test_kfold_sizes_and_disjointness(n, k, seed):
    labels = ["event" if i % 3 else "noise" for i in range(n)]
    folds = kfold_split(labels, k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(np.concatenate(folds).tolist()) == list(range(n))


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(["event"] * 3, 5)
    with pytest.raises(ValueError):
        kfold_split(["event"] * 3, 1)


def test_report_statistics(tmp_path):
    r = EvalReport("single", "A", "B", [0.9, 0.95, 1.0])
    assert r.mean == pytest.approx(0.95)
    assert r.std == pytest.approx(0.05)
    assert EvalReport("single", "A", "A", [0.8]).std == 0.0
    with pytest.raises(ValueError):
        EvalReport("single", "A", "B", [1.2])
    write_report_csv(tmp_path / "r.csv", [r])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "train_dataset,test_dataset,method,fold,auc"
    assert len(lines) == 1 + 3 + 2
    table = format_table([r, EvalReport("ensemble", "A", "B", [0.9, 0.9])])
    assert "A (training)" in table and "B (testing)" in table and "0.950 +- 0.050" in table


def test_effective_denoise():
    train = TrainConfig(denoise_sigma=0.2)
    assert effective_denoise(MethodConfig("single"), train) == 0.2
    assert effective_denoise(MethodConfig("ensemble"), train) == 0.0
    assert effective_denoise(MethodConfig("single", denoise_sigma=0.0), train) == 0.0


# -- harness ---------------------------------------------------------------------

FAST = EvalSettings(arch=ArchitectureConfig(base_channels=2),
                    train=TrainConfig(batch_size=16, epochs=1, lr=1e-3), folds=2,
                    projection_epochs=2)


@pytest.fixture(scope="module")
def small_sets():
    a = generate_records(SynthConfig(n_event=10, n_noise=10, seed=1, name="a"))
    b = generate_records(SynthConfig(n_event=8, n_noise=8, seed=2, name="b",
                                     noise_spectrum="white"))
    return a, b


def test_cv_has_no_leakage_and_training_sees_arrays_only(small_sets, monkeypatch):
    seen = []
    real_train = evaluation.train

    def spy(model, dataset, cfg):
        seen.append(type(dataset))
        return real_train(model, dataset, cfg)

    monkeypatch.setattr(evaluation, "train", spy)
    outcomes = []
    reports = evaluate([MethodConfig("single", denoise_sigma=0.0)], small_sets[0],
                       settings=FAST, outcomes=outcomes)
    assert all(t is np.ndarray for t in seen)
    all_ids = {w.id for w in small_sets[0]}
    held = set()
    for o in outcomes:
        assert not set(o.train_ids) & set(o.test_ids)
        assert set(o.train_ids) | set(o.test_ids) == all_ids
        held |= set(o.test_ids)
    assert held == all_ids
    assert len(reports[0].fold_aucs) == 2
    assert all(0 <= a <= 1 for a in reports[0].fold_aucs)


def test_cross_dataset_protocol(small_sets):
    outcomes = []
    methods = [MethodConfig("single", denoise_sigma=0.0), MethodConfig("ensemble", k=2)]
    reports = evaluate(methods, small_sets[0], small_sets[1], FAST, "A", "B", outcomes=outcomes)
    for o in outcomes:
        assert set(o.train_ids) == {w.id for w in small_sets[0]}
        assert set(o.test_ids) == {w.id for w in small_sets[1]}
    assert [r.method for r in reports] == ["single", "ensemble"]
    assert all(r.train_name == "A" and r.test_name == "B" for r in reports)


def test_duplicate_method_names_rejected(small_sets):
    with pytest.raises(ValueError):
        evaluate([MethodConfig("single"), MethodConfig("single")], small_sets[0], settings=FAST)
