"""Command-line entry point: ``satrdl {synth,train,crossval,predict,report}``.

Run configuration files are line oriented ``key = value`` pairs; ``#``
starts a comment and list values are comma separated. See README for the
key reference. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    CorpusError,
    SynthSpec,
    TrialTooShortError,
    load_trials,
    read_kinematics,
    split_groups,
    synth_generate,
    window_array,
    write_corpus,
    znormalize_array,
)
from .estimator import SatrClassifier
from .evaluation import (
    EvaluationReport,
    FoldError,
    emit_report,
    format_confusion,
    format_table,
    majority_vote,
    run_loso,
)
from .model import ModelConfig
from .training import TrainingDivergedError, TrainSchedule

log = logging.getLogger("satrdl")

EXIT_ERROR = 1
EXIT_IO = 2


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; defaults are the published hyperparameters."""

    data_root: str = ""
    manifest: str = ""
    synth_spec: str = ""
    columns: str = "all"
    window: int = 120
    step: int = 30
    conv_filters: tuple[int, ...] = (32, 64)
    kernel_size: int = 2
    conv_dropout: float = 0.2
    gru_units: tuple[int, ...] = (128, 64)
    gru_dropout: float = 0.2
    merge_dropout: float = 0.5
    epochs: int = 80
    batch_size: int = 64
    batches_per_epoch: int = 0  # 0 means "use batch_size"
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 5.0
    plateau_patience: int = 3
    plateau_threshold: float = 1e-6
    lr_floor: float = 1e-6
    train_fraction: float = 0.8
    seed: int = 0
    run_id: str = "loso"

    @classmethod
    def _coerce(cls, key: str, value: str):
        ftype = {f.name: f.type for f in fields(cls)}[key]
        if ftype == "tuple[int, ...]":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return value

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                kw[key] = cls._coerce(key, value)
            except ValueError:
                raise ValueError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            channels=channels,
            window=self.window,
            conv_filters=self.conv_filters,
            kernel_size=self.kernel_size,
            conv_dropout=self.conv_dropout,
            gru_units=self.gru_units,
            gru_dropout=self.gru_dropout,
            merge_dropout=self.merge_dropout,
        )

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs,
            batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch or None,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            plateau_factor=self.plateau_factor,
            plateau_patience=self.plateau_patience,
            plateau_threshold=self.plateau_threshold,
            lr_floor=self.lr_floor,
            seed=self.seed,
        )


def load_corpus(cfg: RunConfig):
    if cfg.manifest:
        root = cfg.data_root or str(Path(cfg.manifest).parent)
        return load_trials(root, cfg.manifest, None if cfg.columns == "all" else cfg.columns)
    spec = SynthSpec.from_file(cfg.synth_spec) if cfg.synth_spec else SynthSpec()
    return synth_generate(spec)


def _effective_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        overrides["batch_size"] = args.batch_size
    return replace(cfg, **overrides)


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def _write_echo(out: Path, cfg: RunConfig) -> None:
    (out / "effective_config.txt").write_text(cfg.to_text())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec.from_file(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = _prepare_out(args.out)
    trials = synth_generate(spec)
    manifest = write_corpus(trials, out)
    (out / "synth_spec.cfg").write_text(spec.to_text())
    print(f"wrote {len(trials)} trials and {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    out = _prepare_out(args.out)
    _write_echo(out, cfg)
    trials = load_corpus(cfg)
    X, y, groups = _windows(trials, cfg)
    tr, va = split_groups(groups, y, cfg.train_fraction, seed=cfg.seed)
    est = _estimator(cfg)

    def emit(rec):
        log.info("epoch %d train %.4f val %.4f acc %s", rec.epoch, rec.train_loss, rec.val_loss, rec.val_accuracy)

    est.fit(X[tr], y[tr], X_val=X[va], y_val=y[va], callback=emit)
    (out / "train_log.jsonl").write_text(est.train_log_.to_jsonl())
    est.save(out / "model.npz")
    print(f"best epoch {est.train_log_.best_epoch}; checkpoint {out / 'model.npz'}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _effective_config(args)
    out = _prepare_out(args.out)
    _write_echo(out, cfg)
    trials = load_corpus(cfg)

    def progress(fold, rec):
        log.info("fold %d epoch %d val acc %s", fold, rec.epoch, rec.val_accuracy)

    report = run_loso(
        trials,
        cfg.model_config(trials[0].channels),
        cfg.schedule(),
        window=cfg.window,
        step=cfg.step,
        train_fraction=cfg.train_fraction,
        meta={"columns": cfg.columns, "source": cfg.manifest or cfg.synth_spec or "synthetic-default"},
        progress=progress,
    )
    paths = emit_report(report, out, cfg.run_id)
    sys.stdout.write(format_table(report))
    for p in paths.values():
        print(p)
    return 0


def cmd_predict(args) -> int:
    est = SatrClassifier.from_checkpoint(args.checkpoint)
    config, classes = est.config_, est.class_names_
    src = Path(args.input)
    files = sorted(src.glob("*.txt")) if src.is_dir() else [src]
    sink = sys.stdout
    if args.out:
        out = _prepare_out(args.out)
        sink = open(out / "predictions.jsonl", "w")
    try:
        for path in files:
            samples = read_kinematics(path)
            if samples.shape[1] != config.channels:
                raise CorpusError(
                    f"{path}: expected {config.channels} channels (from checkpoint), found {samples.shape[1]}"
                )
            frames = window_array(znormalize_array(samples), config.window, args.step)
            post = est.predict_proba(frames)
            labels = np.stack([np.argmax(p, axis=1) for p in post], axis=1)
            for i in range(len(frames)):
                rec = {"type": "interval", "trial": path.stem, "window": i, "offset": i * args.step}
                for j, head in enumerate(config.head_names):
                    rec[head] = classes[head][labels[i, j]]
                    rec[f"{head}_posterior"] = post[j][i].tolist()
                sink.write(json.dumps(rec) + "\n")
            verdict = {"type": "trial", "trial": path.stem, "windows": len(frames)}
            for j, head in enumerate(config.head_names):
                verdict[head] = classes[head][majority_vote(labels[:, j], post[j])]
            sink.write(json.dumps(verdict) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_report(args) -> int:
    report = EvaluationReport.from_json(Path(args.report).read_text())
    if args.out:
        paths = emit_report(report, _prepare_out(args.out), args.run_id)
        for p in paths.values():
            print(p)
    else:
        sys.stdout.write(format_table(report))
        sys.stdout.write("\n" + format_confusion(report))
    return 0


def _windows(trials, cfg: RunConfig):
    X, y, g = [], [], []
    for tr in sorted(trials, key=lambda t: t.trial_id):
        frames = window_array(znormalize_array(tr.samples), cfg.window, cfg.step)
        X.append(frames)
        y.append(np.tile(tr.labels, (len(frames), 1)))
        g.extend([tr.trial_id] * len(frames))
    return np.concatenate(X), np.concatenate(y).astype(np.int64), np.array(g)


def _estimator(cfg: RunConfig) -> SatrClassifier:
    s = cfg.schedule()
    return SatrClassifier(
        conv_filters=cfg.conv_filters,
        kernel_size=cfg.kernel_size,
        conv_dropout=cfg.conv_dropout,
        gru_units=cfg.gru_units,
        gru_dropout=cfg.gru_dropout,
        merge_dropout=cfg.merge_dropout,
        epochs=s.epochs,
        batch_size=s.batch_size,
        batches_per_epoch=s.batches_per_epoch,
        learning_rate=s.learning_rate,
        beta1=s.beta1,
        beta2=s.beta2,
        adam_eps=s.adam_eps,
        plateau_factor=s.plateau_factor,
        plateau_patience=s.plateau_patience,
        plateau_threshold=s.plateau_threshold,
        lr_floor=s.lr_floor,
        random_state=s.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satrdl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic corpus and manifest")
    p.add_argument("--spec", help="synthetic spec file (key = value)")
    common(p)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("train", cmd_train, "train one model with an 80/20 trial split"),
        ("crossval", cmd_crossval, "leave-one-supertrial-out cross-validation"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="run config file (key = value)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="stream interval predictions and a trial verdict")
    p.add_argument("input", help="kinematics file or directory of .txt files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--step", type=int, default=30)
    common(p, out_required=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="re-render text tables from a JSON report")
    p.add_argument("report")
    p.add_argument("--run-id", default="loso")
    common(p, out_required=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CorpusError, TrialTooShortError, TrainingDivergedError, FoldError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
