"""ROC-AUC, stratified folds, and the cross-validation / cross-dataset harness."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .autoencoder import ArchitectureConfig, TrainConfig, build_model, save_model, train
from .numerics import write_checkpoint
from .trigger import MethodConfig, ProjectionSet, TriggerConfig, score_method, train_projections
from .waveforms import PreprocessConfig, Waveform, onset_margin_filter, preprocess, stack_samples

log = logging.getLogger(__name__)


@dataclass
class ScoredRecord:
    id: str
    score: float
    label: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"{self.id}: non-finite score")
        if self.label not in ("event", "noise"):
            raise ValueError(f"{self.id}: label must be event or noise, got {self.label!r}")


def roc_auc(records: Sequence[ScoredRecord] | None = None, *, scores=None, labels=None) -> float:
    """Mann-Whitney AUC: P(event score > noise score), ties counting one half.

    Pass ``ScoredRecord`` objects, or ``scores`` with boolean/0-1/str ``labels``.
    """
    if records is not None:
        scores = [r.score for r in records]
        labels = [r.label for r in records]
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    pos = (lab == "event") if lab.dtype.kind in "US" else lab.astype(bool)
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both event and noise records")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def kfold_split(labels: Sequence, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Label-stratified folds of record indices, sizes within one of each other.

    ``labels`` may be label strings or waveforms.
    """
    if k < 2:
        raise ValueError("need at least two folds")
    labs = [getattr(x, "label", x) for x in labels]
    if len(labs) < k:
        raise ValueError(f"{len(labs)} records cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    ordered: list[int] = []
    for value in sorted({str(v) for v in labs}):
        members = np.array([i for i, v in enumerate(labs) if str(v) == value])
        ordered.extend(rng.permutation(members).tolist())
    assign = np.arange(len(ordered)) % k
    ordered_arr = np.array(ordered)
    return [np.sort(ordered_arr[assign == f]) for f in range(k)]


@dataclass
class EvalReport:
    method: str
    train_name: str
    test_name: str
    fold_aucs: list[float] = field(default_factory=list)

    def __post_init__(self):
        for a in self.fold_aucs:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"AUC {a} outside [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_aucs))

    @property
    def std(self) -> float:
        """Sample standard deviation across folds (0 for a single fold)."""
        return float(np.std(self.fold_aucs, ddof=1)) if len(self.fold_aucs) > 1 else 0.0


@dataclass
class EvalSettings:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    folds: int = 5
    seed: int = 0
    margin_seconds: float = 3.0
    projection_epochs: int = 30
    projection_lr: float = 1e-3
    projection_records: int = 512

    @classmethod
    def from_run_config(cls, cfg) -> "EvalSettings":
        return cls(arch=cfg.architecture, train=cfg.train, trigger=cfg.trigger,
                   preprocess=cfg.preprocess, folds=cfg.run.folds, seed=cfg.run.seed,
                   margin_seconds=cfg.run.margin_seconds, projection_epochs=cfg.projection.epochs,
                   projection_lr=cfg.projection.lr, projection_records=cfg.projection.max_records)


@dataclass
class FoldOutcome:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    aucs: dict[str, float]
    scores: dict[str, np.ndarray]


def effective_denoise(method: MethodConfig, train_cfg: TrainConfig) -> float:
    """Explicit method sigma, else none for ensembles, else the training config's."""
    if method.denoise_sigma is not None:
        return method.denoise_sigma
    if method.method == "ensemble":
        return 0.0
    return train_cfg.denoise_sigma


def _sigma(method: MethodConfig, settings: EvalSettings) -> float:
    return effective_denoise(method, settings.train)


def _fold_models(methods, train_x, settings: EvalSettings, fold_seed: int, ckpt_dir, tag):
    """Train every model the methods need once; keyed by (denoise sigma, member)."""
    needed: dict[tuple[float, int], None] = {}
    for m in methods:
        members = m.k if m.method == "ensemble" else 1
        for i in range(members):
            needed[(_sigma(m, settings), i)] = None
    models = {}
    for sigma, i in needed:
        seed = fold_seed * 1000 + i
        cfg = TrainConfig(batch_size=settings.train.batch_size, epochs=settings.train.epochs,
                          lr=settings.train.lr, denoise_sigma=sigma,
                          validation_fraction=settings.train.validation_fraction, seed=seed)
        log.info("%s: training member %d (denoise %.3g)", tag, i, sigma)
        result = train(build_model(settings.arch, seed=seed), train_x, cfg)
        models[(sigma, i)] = result.model
        if ckpt_dir is not None:
            save_model(result.model, Path(ckpt_dir) / f"{tag}_sigma{sigma:g}_m{i}.rcvw")
    return models


def run_fold(methods: Sequence[MethodConfig], train_recs: Sequence[Waveform],
             test_recs: Sequence[Waveform], settings: EvalSettings, fold: int,
             ckpt_dir=None) -> FoldOutcome:
    fold_seed = settings.seed + fold
    tag = f"fold{fold}"
    train_x = stack_samples(train_recs)
    models = _fold_models(methods, train_x, settings, fold_seed, ckpt_dir, tag)
    test = onset_margin_filter(test_recs, settings.margin_seconds)
    labels = [w.label for w in test]
    aucs, scores = {}, {}
    projections: dict[tuple[float, int], ProjectionSet] = {}
    for m in methods:
        sigma = _sigma(m, settings)
        if m.method == "ensemble":
            members = [models[(sigma, i)] for i in range(m.k)]
            key = (sigma, m.k)
            if key not in projections:
                projections[key] = train_projections(
                    members, train_x, epochs=settings.projection_epochs, lr=settings.projection_lr,
                    max_records=settings.projection_records, seed=fold_seed)
                if ckpt_dir is not None:
                    write_checkpoint(Path(ckpt_dir) / f"{tag}_sigma{sigma:g}_projections.rcvw",
                                     {f"proj{i}": p for i, p in
                                      enumerate(projections[key].matrices)})
            s, _ = score_method(m, members, test, settings.trigger, projections[key],
                                seed=fold_seed)
        else:
            s, _ = score_method(m, [models[(sigma, 0)]], test, settings.trigger, seed=fold_seed)
        scores[m.name] = s
        aucs[m.name] = roc_auc(scores=s, labels=labels)
        log.info("%s %s AUC %.4f", tag, m.name, aucs[m.name])
    return FoldOutcome(fold, [w.id for w in train_recs], [w.id for w in test], aucs, scores)


def evaluate(methods: Sequence[MethodConfig], train_records: Sequence[Waveform],
             test_records: Sequence[Waveform] | None = None,
             settings: EvalSettings = EvalSettings(), train_name: str = "train",
             test_name: str | None = None, checkpoint_dir=None,
             outcomes: list | None = None,
             on_fold: Callable[[FoldOutcome], None] | None = None) -> list[EvalReport]:
    """Cross-validate (one dataset) or cross-evaluate (two datasets).

    One dataset: stratified ``settings.folds``-fold CV, training on the other
    folds.  Two datasets: for each fold seed, train on all of the training set
    and test on all of the test set.  Training only ever sees sample arrays;
    test splits go through the onset-margin filter before scoring.
    """
    methods = list(methods)
    if len({m.name for m in methods}) != len(methods):
        raise ValueError("method names must be distinct")
    cross = test_records is not None
    test_name = test_name or (train_name if not cross else "test")
    p = settings.preprocess
    pool_train = [preprocess(w, p, settings.seed, mode="train") for w in train_records]
    if cross:
        pool_test = [preprocess(w, p, settings.seed, mode="test") for w in test_records]
    else:
        pool_test = [preprocess(w, p, settings.seed, mode="test") for w in train_records]

    reports = {m.name: EvalReport(m.name, train_name, test_name) for m in methods}
    folds = None if cross else kfold_split(train_records, settings.folds, settings.seed)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    for f in range(settings.folds):
        if cross:
            tr, te = pool_train, pool_test
        else:
            held = set(folds[f].tolist())
            tr = [w for i, w in enumerate(pool_train) if i not in held]
            te = [pool_test[i] for i in folds[f]]
        outcome = run_fold(methods, tr, te, settings, f, checkpoint_dir)
        for name, auc in outcome.aucs.items():
            reports[name].fold_aucs.append(auc)
        if outcomes is not None:
            outcomes.append(outcome)
        if on_fold is not None:
            on_fold(outcome)
    return [reports[m.name] for m in methods]


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_report_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_dataset", "test_dataset", "method", "fold", "auc"])
        for r in reports:
            for f, auc in enumerate(r.fold_aucs):
                w.writerow([r.train_name, r.test_name, r.method, f, repr(auc)])
            w.writerow([r.train_name, r.test_name, r.method, "mean", repr(r.mean)])
            w.writerow([r.train_name, r.test_name, r.method, "std", repr(r.std)])


def format_table(reports: Sequence[EvalReport]) -> str:
    """Training sets as rows, test sets as columns, one ``mean +- std`` line per method."""
    trains = list(dict.fromkeys(r.train_name for r in reports))
    tests = list(dict.fromkeys(r.test_name for r in reports))
    width = max([len(r.method) for r in reports] + [10]) + 2
    col = width + 16
    head = max([len(f"{t} (training)") for t in trains] + [12]) + 2
    lines = ["train \\ test".ljust(head) + "".join(f"{t} (testing)".ljust(col) for t in tests)]
    for tr in trains:
        methods = list(dict.fromkeys(r.method for r in reports if r.train_name == tr))
        for i, m in enumerate(methods):
            row = (f"{tr} (training)" if i == 0 else "").ljust(head)
            for te in tests:
                hit = [r for r in reports if (r.train_name, r.test_name, r.method) == (tr, te, m)]
                cell = f"{m.ljust(width)}{hit[0].mean:.3f} +- {hit[0].std:.3f}" if hit else ""
                row += cell.ljust(col)
            lines.append(row.rstrip())
        lines.append("")
    return "\n".join(lines)
