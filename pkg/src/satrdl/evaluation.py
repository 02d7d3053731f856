"""Interval- and trial-level scoring, LOSO orchestration and report files."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    STEP,
    WINDOW,
    KinematicTrial,
    build_loso_folds,
    split_groups,
    window_array,
    znormalize_array,
)
from .estimator import SatrClassifier, check_windows
from .model import DEFAULT_CLASSES, ModelConfig, SatrParams, forward
from .ndcore import LayerMode
from .training import TrainSchedule

log = logging.getLogger(__name__)

HEADS = ("skill", "task")
LEVELS = ("interval", "trial")
REPORT_VERSION = 1


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold


# ---------------------------------------------------------------------------
# prediction


@dataclass
class WindowPredictions:
    """Per-window labels ``(N, heads)`` and posteriors per head ``(N, K)``."""

    labels: np.ndarray
    posteriors: dict[str, np.ndarray]


def classify_windows(params: SatrParams, config: ModelConfig, X, batch_size: int = 256) -> WindowPredictions:
    X = check_windows(X, config.window, config.channels)
    post = {name: [] for name in config.head_names}
    for start in range(0, len(X), batch_size):
        fp = forward(params, config, X[start : start + batch_size], LayerMode.INFERENCE)
        for name, p in fp.posteriors().items():
            post[name].append(p)
    posteriors = {k: np.concatenate(v) for k, v in post.items()}
    labels = np.stack([np.argmax(posteriors[k], axis=1) for k in config.head_names], axis=1)
    return WindowPredictions(labels, posteriors)


def majority_vote(labels, posteriors) -> int:
    """Trial label from per-window ``labels`` of one head.

    Ties on vote count go to the class with the larger summed posterior
    ``posteriors`` (``(n_windows, K)``), then to the lowest index.
    """
    labels = np.asarray(labels, dtype=np.int64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("majority vote over zero windows")
    votes = np.bincount(labels, minlength=posteriors.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    mass = posteriors.sum(axis=0)[tied]
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Counts with rows = truth and columns = prediction."""

    counts: np.ndarray
    classes: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise ValueError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.classes)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.classes == other.classes
            and np.array_equal(self.counts, other.counts)
        )


@dataclass
class ClassMetrics:
    """Per-class precision/recall/f1 plus overall accuracy.

    Zero denominators yield 0 and are listed in ``undefined`` as
    ``(class, metric)`` pairs.
    """

    classes: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    undefined: list[tuple[str, str]] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float]:
        return {
            "precision": float(self.precision.mean()),
            "recall": float(self.recall.mean()),
            "f1": float(self.f1.mean()),
        }

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "ClassMetrics":
        c = cm.counts.astype(np.float64)
        tp = np.diag(c)
        pred_pos = c.sum(axis=0)
        true_pos = c.sum(axis=1)
        undefined = []

        def ratio(num, den, metric):
            out = np.zeros_like(num)
            for i, d in enumerate(den):
                if d > 0:
                    out[i] = num[i] / d
                else:
                    undefined.append((cm.classes[i], metric))
            return out

        precision = ratio(tp, pred_pos, "precision")
        recall = ratio(tp, true_pos, "recall")
        f1 = ratio(2 * precision * recall, precision + recall, "f1")
        total = c.sum()
        accuracy = float(tp.sum() / total) if total else 0.0
        return cls(cm.classes, precision, recall, f1, true_pos.astype(np.int64), accuracy, undefined)


def confusion_matrix(truths, preds, classes: Sequence) -> ConfusionMatrix:
    """Tally ``truths``/``preds`` given as class names or 0-based indices."""
    classes = tuple(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    k = len(classes)

    def index(v):
        if v in lookup:
            return lookup[v]
        if isinstance(v, (int, np.integer)) and 0 <= v < k:
            return int(v)
        raise ValueError(f"unknown label {v!r}; classes are {classes}")

    truths, preds = list(truths), list(preds)
    if len(truths) != len(preds):
        raise ValueError(f"{len(truths)} truths vs {len(preds)} predictions")
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truths, preds):
        counts[index(t), index(p)] += 1
    return ConfusionMatrix(counts, tuple(str(c) for c in classes))


def compute_metrics(truths, preds, classes: Sequence) -> tuple[ConfusionMatrix, ClassMetrics]:
    cm = confusion_matrix(truths, preds, classes)
    return cm, ClassMetrics.from_confusion(cm)


# ---------------------------------------------------------------------------
# report


@dataclass
class TrialVerdict:
    trial_id: str
    fold: int
    n_windows: int
    truth: dict[str, int]
    predicted: dict[str, int]


@dataclass
class EvaluationReport:
    """Confusion matrices per (head, level), fold by fold.

    Aggregates pool the fold counts before metrics are derived; ``metrics``
    recomputes everything from counts so the report is fully determined by
    ``folds`` plus metadata.
    """

    classes: dict[str, tuple[str, ...]]
    folds: dict[str, dict[str, list[ConfusionMatrix]]]
    trials: list[TrialVerdict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregate(self, head: str, level: str) -> ConfusionMatrix:
        cms = self.folds[head][level]
        out = cms[0]
        for cm in cms[1:]:
            out = out + cm
        return out

    def metrics(self, head: str, level: str, fold: int | None = None) -> ClassMetrics:
        cm = self.aggregate(head, level) if fold is None else self.folds[head][level][fold - 1]
        return ClassMetrics.from_confusion(cm)

    @property
    def n_folds(self) -> int:
        return len(next(iter(next(iter(self.folds.values())).values())))

    def to_dict(self) -> dict:
        def block(cm: ConfusionMatrix) -> dict:
            m = ClassMetrics.from_confusion(cm)
            return {
                "counts": cm.counts.tolist(),
                "normalized": cm.normalized().tolist(),
                "total": cm.total,
                "accuracy": m.accuracy,
                "per_class": {
                    c: {
                        "precision": float(m.precision[i]),
                        "recall": float(m.recall[i]),
                        "f1": float(m.f1[i]),
                        "support": int(m.support[i]),
                    }
                    for i, c in enumerate(cm.classes)
                },
                "macro": m.macro,
                "undefined": [list(u) for u in m.undefined],
            }

        results = {}
        for head, levels in self.folds.items():
            results[head] = {}
            for level, cms in levels.items():
                results[head][level] = {
                    "folds": [block(cm) for cm in cms],
                    "aggregate": block(self.aggregate(head, level)),
                }
        return {
            "version": REPORT_VERSION,
            "classes": {k: list(v) for k, v in self.classes.items()},
            "meta": self.meta,
            "results": results,
            "trials": [
                {
                    "trial_id": t.trial_id,
                    "fold": t.fold,
                    "n_windows": t.n_windows,
                    "truth": t.truth,
                    "predicted": t.predicted,
                }
                for t in self.trials
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        classes = {k: tuple(v) for k, v in d["classes"].items()}
        folds = {
            head: {
                level: [ConfusionMatrix(np.array(b["counts"], dtype=np.int64), classes[head]) for b in blk["folds"]]
                for level, blk in levels.items()
            }
            for head, levels in d["results"].items()
        }
        trials = [TrialVerdict(**t) for t in d.get("trials", [])]
        return cls(classes, folds, trials, d.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        return isinstance(other, EvaluationReport) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# LOSO


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_loso(
    trials: Sequence[KinematicTrial],
    config: ModelConfig | None = None,
    schedule: TrainSchedule | None = None,
    *,
    window: int = WINDOW,
    step: int = STEP,
    train_fraction: float = 0.8,
    meta: dict | None = None,
    progress=None,
) -> EvaluationReport:
    """Five-fold leave-one-supertrial-out evaluation.

    Each trial is z-normalised on its own, windowed, and every fold trains a
    fresh network on the remaining supertrials (with a trial-grouped
    validation split) before scoring the held-out windows and trials.
    ``config`` supplies topology (its ``channels``/``window`` are replaced by
    the corpus values); ``progress`` is called as ``progress(fold, record)``.
    """
    trials = sorted(trials, key=lambda t: t.trial_id)
    schedule = schedule or TrainSchedule()
    plan = build_loso_folds(trials)
    channels = {t.channels for t in trials}
    if len(channels) != 1:
        raise ValueError(f"trials disagree on channel count: {sorted(channels)}")
    base = config or ModelConfig(channels=channels.pop(), window=window)
    config = replace(base, channels=trials[0].channels, window=window)

    frames = {}
    for t in trials:
        frames[t.trial_id] = window_array(znormalize_array(t.samples), window, step)
    by_id = {t.trial_id: t for t in trials}

    classes = {k: tuple(v) for k, v in DEFAULT_CLASSES.items()}
    folds = {h: {lvl: [] for lvl in LEVELS} for h in HEADS}
    verdicts: list[TrialVerdict] = []
    fold_meta = []

    for fold in plan:
        try:
            X_tr, y_tr, g_tr = _stack(fold.train_ids, frames, by_id)
            X_te, y_te, g_te = _stack(fold.test_ids, frames, by_id)
            seed = _fold_seed(schedule.seed, fold.index)
            tr, va = split_groups(g_tr, y_tr, train_fraction, seed=seed)
            est = _estimator(config, replace(schedule, seed=seed))
            cb = (lambda rec, f=fold.index: progress(f, rec)) if progress else None
            est.fit(X_tr[tr], y_tr[tr], X_val=X_tr[va], y_val=y_tr[va], callback=cb)
            pred = classify_windows(est.params_, est.config_, X_te)
        except Exception as exc:  # tag with the fold for the caller
            raise FoldError(fold.index, exc) from exc

        for j, head in enumerate(HEADS):
            folds[head]["interval"].append(confusion_matrix(y_te[:, j], pred.labels[:, j], classes[head]))

        trial_truth = {h: [] for h in HEADS}
        trial_pred = {h: [] for h in HEADS}
        for tid in fold.test_ids:
            rows = np.flatnonzero(g_te == tid)
            truth = dict(zip(HEADS, map(int, by_id[tid].labels)))
            voted = {
                h: majority_vote(pred.labels[rows, j], pred.posteriors[h][rows])
                for j, h in enumerate(HEADS)
            }
            verdicts.append(TrialVerdict(tid, fold.index, len(rows), truth, voted))
            for h in HEADS:
                trial_truth[h].append(truth[h])
                trial_pred[h].append(voted[h])
        for h in HEADS:
            folds[h]["trial"].append(confusion_matrix(trial_truth[h], trial_pred[h], classes[h]))

        fold_meta.append({
            "fold": fold.index,
            "test_trials": len(fold.test_ids),
            "train_trials": len(fold.train_ids),
            "train_windows": int(len(tr)),
            "val_windows": int(len(va)),
            "test_windows": int(len(X_te)),
            "best_epoch": est.train_log_.best_epoch,
        })
        log.info("fold %d done: %s", fold.index, fold_meta[-1])

    info = {
        "model": config.to_dict(),
        "schedule": {k: getattr(schedule, k) for k in schedule.__dataclass_fields__},
        "window": window,
        "step": step,
        "train_fraction": train_fraction,
        "n_trials": len(trials),
        "folds": fold_meta,
    }
    info.update(meta or {})
    # JSON-normalise so a parsed report compares equal to the original
    info = json.loads(json.dumps(info, sort_keys=True))
    return EvaluationReport(classes, folds, verdicts, info)


def _stack(ids, frames, by_id):
    X = np.concatenate([frames[i] for i in ids])
    y = np.concatenate([np.tile(by_id[i].labels, (len(frames[i]), 1)) for i in ids])
    g = np.concatenate([np.full(len(frames[i]), i, dtype=object) for i in ids])
    return X, y.astype(np.int64), g


def _estimator(config: ModelConfig, schedule: TrainSchedule) -> SatrClassifier:
    return SatrClassifier(
        conv_filters=config.conv_filters,
        kernel_size=config.kernel_size,
        conv_dropout=config.conv_dropout,
        gru_units=config.gru_units,
        gru_dropout=config.gru_dropout,
        merge_dropout=config.merge_dropout,
        epochs=schedule.epochs,
        batch_size=schedule.batch_size,
        batches_per_epoch=schedule.batches_per_epoch,
        learning_rate=schedule.learning_rate,
        beta1=schedule.beta1,
        beta2=schedule.beta2,
        adam_eps=schedule.adam_eps,
        plateau_factor=schedule.plateau_factor,
        plateau_patience=schedule.plateau_patience,
        plateau_threshold=schedule.plateau_threshold,
        lr_floor=schedule.lr_floor,
        random_state=schedule.seed,
    )


# ---------------------------------------------------------------------------
# report files


def format_table(report: EvaluationReport) -> str:
    """Plain-text summary with one row per class per head, both levels."""
    hdr = ("precision", "recall", "f1-score", "accuracy")
    width = max(len(c) for cs in report.classes.values() for c in cs) + 2
    col = 10
    lines = []
    lead = " " * (8 + width)
    lines.append(lead + "Interval-level".ljust(col * 4) + " | " + "Trial-level")
    lines.append(lead + "".join(h.rjust(col) for h in hdr) + " | " + "".join(h.rjust(col) for h in hdr))
    lines.append("-" * len(lines[-1]))
    for head in HEADS:
        mets = [report.metrics(head, lvl) for lvl in LEVELS]
        for i, cls in enumerate(report.classes[head]):
            name = head.capitalize() if i == 0 else ""
            cells = []
            for m in mets:
                acc = f"{m.accuracy:.3f}" if i == 0 else ""
                cells.append(
                    f"{m.precision[i]:>{col}.2f}{m.recall[i]:>{col}.2f}{m.f1[i]:>{col}.2f}{acc:>{col}}"
                )
            lines.append(f"{name:<8}{cls:<{width}}" + " | ".join(cells))
        lines.append("-" * len(lines[1]))
    lines.append("aggregate over folds: pooled confusion counts (micro); "
                 f"{report.n_folds} folds")
    return "\n".join(lines) + "\n"


def format_confusion(report: EvaluationReport) -> str:
    """Row-normalised confusion grids (truth rows, predicted columns)."""
    out = []
    for level in ("trial", "interval"):
        for head in HEADS:
            cm = report.aggregate(head, level)
            norm = cm.normalized()
            w = max(len(c) for c in cm.classes) + 2
            out.append(f"[{level}-level {head}]  n={cm.total}")
            out.append(" " * w + "".join(c.rjust(w) for c in cm.classes))
            for i, c in enumerate(cm.classes):
                out.append(c.ljust(w) + "".join(f"{v:>{w}.3f}" for v in norm[i]))
            out.append("")
    return "\n".join(out)


def emit_report(report: EvaluationReport, out_dir, run_id: str = "loso") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{run_id}.report.json",
        "table": out / f"{run_id}.table.txt",
        "confusion": out / f"{run_id}.confusion.txt",
    }
    paths["json"].write_text(report.to_json())
    paths["table"].write_text(format_table(report))
    paths["confusion"].write_text(format_confusion(report))
    return paths
