"""Command-line front end: data generation, source training, staged
adaptation, evaluation, selection, census and reports.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input
error, 3 divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as D
from .adaptation import EwcState, OptimizerState, TrainConfig, compute_fisher, run_incremental, run_stage
from .errors import CheckpointError, ConfigError, DisjointnessError, DivergenceError, SelectionError
from .evaluate import DecodeConfig, evaluate_suite
from .models import RnntConfig, TransformerConfig, build_model, config_from_dict, model_from_params, param_shapes
from .registry import census, check_shapes, human_count, human_percent, load_checkpoint, save_checkpoint
from .selection import build_mask, mask_stats, save_mask

log = logging.getLogger("sftlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
INPUT_ERRORS = (ConfigError, CheckpointError, SelectionError, DisjointnessError, FileNotFoundError)
SOURCE_TRAIN_DEFAULTS = {"epochs": 6}


@dataclass
class RunConfig:
    """Everything a run needs. ``seed`` drives data, initialisation and shuffling."""

    run_id: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    model_kind: str = "transformer"
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    data_path: str | None = None
    source_checkpoint: str | None = None
    source_train: dict = field(default_factory=lambda: dict(SOURCE_TRAIN_DEFAULTS))
    plan: str = "modules:enc_mha_ffn"
    plan_name: str = ""
    adapt: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    eval_splits: list = field(default_factory=lambda: [*D.SOURCE_TESTS, *D.TARGET_TESTS])
    eval_limit: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**data).resolved()

    def resolved(self) -> "RunConfig":
        """Validate every section and materialise all defaults."""
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        model = config_from_dict(self.model_kind, self.model)
        synth = D.SynthConfig.from_dict({**self.data, "seed": self.seed})
        src = TrainConfig.from_dict({**SOURCE_TRAIN_DEFAULTS, **self.source_train, "seed": self.seed})
        adapt = TrainConfig.from_dict({**self.adapt, "seed": self.seed})
        decode = DecodeConfig.from_dict(self.decode).resolve(self.model_kind)
        bad = [s for s in self.eval_splits if s not in D.SPLITS]
        if bad or not self.eval_splits:
            raise ConfigError(f"unknown or empty eval_splits: {bad}")
        if self.eval_limit is not None and self.eval_limit < 1:
            raise ConfigError("eval_limit must be positive")
        if not self.run_id or "/" in self.run_id:
            raise ConfigError(f"bad run_id {self.run_id!r}")
        return replace(self, model=model.to_dict(), data=synth.to_dict(), source_train=src.to_dict(),
                       adapt=adapt.to_dict(), decode=decode.to_dict(), plan_name=self.plan_name or self.plan,
                       eval_splits=list(self.eval_splits))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


# ------------------------------------------------------------------ helpers


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"run directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _attach_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    return handler


def _save_model(path, model, extra: dict | None = None) -> None:
    save_checkpoint(path, model.params, model.kind, model.config.to_dict(), extra)


def _load_model(path):
    params, header = load_checkpoint(path)
    kind = header.get("model_kind")
    if kind not in ("transformer", "rnnt"):
        raise CheckpointError(f"{path}: not a model checkpoint (kind {kind!r})")
    cfg = config_from_dict(kind, header["config"])
    check_shapes(param_shapes(cfg), params.shapes())
    return model_from_params(cfg, params), header


def _limited(corpus: D.Corpus, limit: int | None) -> dict:
    return {k: (v[:limit] if limit else v) for k, v in corpus.splits.items()}


def _load_or_gen_corpus(synth: D.SynthConfig, path: Path) -> D.Corpus:
    if path.exists():
        corpus = D.load_corpus(path)
        if corpus.config != synth:
            raise ConfigError(f"{path} was generated from a different data config")
        log.info("loaded corpus %s", path)
        return corpus
    log.info("generating corpus -> %s", path)
    corpus = D.make_corpus(synth)
    path.parent.mkdir(parents=True, exist_ok=True)
    D.save_corpus(corpus, path)
    return corpus


def _train_source(model, corpus: D.Corpus, cfg: TrainConfig) -> list[float]:
    res = run_stage(model, corpus[D.SOURCE_TRAIN], None, OptimizerState(lr=cfg.lr), cfg, stage=0)
    for e, loss in enumerate(res.epoch_losses):
        log.info("source epoch %d loss %.4f", e + 1, loss)
    return res.epoch_losses


def _adapt(model, corpus: D.Corpus, plan: str, plan_name: str, train: TrainConfig, decode: DecodeConfig,
           eval_splits: list, eval_limit: int | None, run_dir: Path, run_id: str) -> list[dict]:
    """Stages 1..3 with evaluation; writes mask, checkpoints, metrics and trajectory."""
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    mask = build_mask(model, plan)
    save_mask(run_dir / "mask.sftm", mask)
    stats = mask_stats(mask)
    log.info("plan %s selects %d of %d parameters", plan, stats["selected"], stats["total"])
    ewc = None
    if train.ewc_lambda is not None:
        fisher = compute_fisher(model, corpus[D.SOURCE_TRAIN], train.fisher_samples)
        ewc = EwcState(model.params.arrays(), fisher, train.ewc_lambda)
        log.info("EWC enabled: lambda %g, Fisher from %d utterances", train.ewc_lambda, train.fisher_samples)
    splits = _limited(corpus, eval_limit)

    def evaluate(m):
        return evaluate_suite(m, splits, eval_splits, decode)

    def on_stage(k, m):
        path = ckpt_dir / f"stage{k}.sft"
        _save_model(path, m, {"stage": k, "plan": plan})
        log.info("stage %d done -> %s", k, path)
        return str(path)

    try:
        traj = run_incremental(model, [corpus[s] for s in D.STAGES], mask, train, evaluate, ewc, on_stage)
    except DivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(ckpt_dir / "last-good.sft", exc.last_good, model.kind, model.config.to_dict())
        raise
    base = {r["split"]: r["wer"] for r in traj.baseline}
    rows = []
    for r in traj.baseline + traj.rows:
        rows.append({"run_id": run_id, "stage": r["stage"], "split": r["split"], "wer": r["wer"],
                     "delta_wer": r["wer"] - base[r["split"]], "sub": r["sub"], "del": r["del"], "ins": r["ins"],
                     "n_ref": r["n_ref"], "loss": r["loss"], "plan": plan_name, "popcount": mask.popcount})
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(run_dir / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "split", "wer", "plan_name", "selected_params"])
        for row in rows:
            w.writerow([row["stage"], row["split"], repr(row["wer"]), plan_name, mask.popcount])
    return rows


def execute_run(cfg: RunConfig, force: bool = False) -> list[dict]:
    """Full pipeline for a resolved config; returns the metric rows."""
    run_dir = cfg.run_dir
    _prepare_dir(run_dir, force)
    handler = _attach_log(run_dir / "run.log")
    try:
        _write_json(run_dir / "resolved.json", cfg.to_dict())
        log.info("run %s in %s", cfg.run_id, run_dir)
        synth = D.SynthConfig.from_dict(cfg.data)
        data_path = Path(cfg.data_path) if cfg.data_path else run_dir / "data.sftd"
        corpus = _load_or_gen_corpus(synth, data_path)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        model_cfg = config_from_dict(cfg.model_kind, cfg.model)
        src = Path(cfg.source_checkpoint) if cfg.source_checkpoint else None
        if src is not None and src.exists():
            model, _ = _load_model(src)
            if model.config != model_cfg:
                raise ConfigError(f"{src} holds a different model config")
            log.info("loaded source model %s", src)
        else:
            model = build_model(model_cfg, cfg.seed)
            _train_source(model, corpus, TrainConfig.from_dict(cfg.source_train))
            if src is not None:
                src.parent.mkdir(parents=True, exist_ok=True)
                _save_model(src, model, {"stage": 0})
        _save_model(ckpt_dir / "stage0.sft", model, {"stage": 0})
        rows = _adapt(model, corpus, cfg.plan, cfg.plan_name, TrainConfig.from_dict(cfg.adapt),
                      DecodeConfig.from_dict(cfg.decode), cfg.eval_splits, cfg.eval_limit, run_dir, cfg.run_id)
        log.info("run %s finished", cfg.run_id)
        return rows
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        raise
    finally:
        log.removeHandler(handler)
        handler.close()


def load_run_config(path, seed_env: str | None = None) -> RunConfig:
    raw = _read_json(path)
    if seed_env is not None:
        try:
            raw = {**raw, "seed": int(seed_env)}
        except ValueError as exc:
            raise ConfigError(f"SFT_SEED must be an integer, got {seed_env!r}") from exc
    return RunConfig.from_dict(raw)


# ------------------------------------------------------------------ subcommands


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, os.environ.get("SFT_SEED"))
    execute_run(cfg, force=args.force)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    raw = _read_json(args.config) if args.config else {}
    seed = os.environ.get("SFT_SEED", args.seed)
    if seed is not None:
        raw["seed"] = int(seed)
    corpus = D.make_corpus(D.SynthConfig.from_dict(raw))
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_corpus(corpus, out)
    for entry in corpus.manifest()["splits"]:
        print(f"{entry['name']:20s} {entry['count']:6d}")
    return EXIT_OK


def _model_config_arg(kind: str, path: str | None):
    return config_from_dict(kind, _read_json(path) if path else {})


def cmd_train_source(args) -> int:
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    seed = int(os.environ.get("SFT_SEED", args.seed))
    corpus = D.load_corpus(args.data)
    model = build_model(_model_config_arg(args.kind, args.model_config), seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=seed)
    losses = _train_source(model, corpus, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_model(out, model, {"stage": 0})
    print(json.dumps({"checkpoint": str(out), "epoch_losses": losses}))
    return EXIT_OK


def _decode_from_args(args) -> DecodeConfig:
    kw = {}
    for key in ("method", "beam", "ctc_weight"):
        value = getattr(args, key, None)
        if value is not None:
            kw[key] = value
    return DecodeConfig(**kw)


def cmd_adapt(args) -> int:
    run_dir = Path(args.out)
    _prepare_dir(run_dir, args.force)
    handler = _attach_log(run_dir / "run.log")
    try:
        seed = int(os.environ.get("SFT_SEED", args.seed))
        model, _ = _load_model(args.source)
        corpus = D.load_corpus(args.data)
        train = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=seed,
                            ewc_lambda=args.ewc_lambda, fisher_samples=args.fisher_samples)
        splits = args.splits.split(",") if args.splits else [*D.SOURCE_TESTS, *D.TARGET_TESTS]
        decode = _decode_from_args(args).resolve(model.kind)
        _adapt(model, corpus, args.select, args.plan_name or args.select, train, decode, splits,
               args.eval_limit, run_dir, run_dir.name)
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    corpus = D.load_corpus(args.data)
    names = args.splits.split(",") if args.splits else [*D.SOURCE_TESTS, *D.TARGET_TESTS]
    rows = evaluate_suite(model, _limited(corpus, args.eval_limit), names, _decode_from_args(args))
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    for r in rows:
        print(f"{r['split']:20s} WER {100 * r['wer']:6.2f}%  (S {r['sub']} D {r['del']} I {r['ins']} / {r['n_ref']})")
    return EXIT_OK


def cmd_select(args) -> int:
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    model, _ = _load_model(args.checkpoint)
    mask = build_mask(model, args.select)
    save_mask(out, mask)
    stats = mask_stats(mask)
    print(json.dumps({"mask": str(out), **stats}, sort_keys=True))
    return EXIT_OK


def _census_source(args):
    if args.checkpoint:
        params, header = load_checkpoint(args.checkpoint, requires_grad=False)
        return params, header.get("model_kind")
    kind = args.kind
    if args.paper:
        cfg = TransformerConfig.paper() if kind == "transformer" else RnntConfig.paper()
    else:
        cfg = _model_config_arg(kind, args.model_config)
    return param_shapes(cfg), kind


def census_table(source, kind: str, select: str | None = None) -> list[str]:
    c = census(source)
    lines = [f"{'module':18s} {'weights':>12s} {'':>7s} {'biases':>10s} {'total':>12s} {'':>7s} {'share':>6s}"]
    for r in c.rows:
        lines.append(f"{r.tag.value:18s} {r.weights:12d} {human_count(r.weights):>7s} {r.biases:10d} "
                     f"{r.total:12d} {human_count(r.total):>7s} {human_percent(r.total, c.total):>6s}")
    lines.append(f"{'all':18s} {c.weights:12d} {human_count(c.weights):>7s} {c.biases:10d} "
                 f"{c.total:12d} {human_count(c.total):>7s} {'100.0%':>6s}")
    if select:
        stats = mask_stats(build_mask(source, select, kind))
        line = (f"selection {select}: {stats['selected']} ({human_count(stats['selected'])}), "
                f"{human_percent(stats['selected'], stats['total'])} of all")
        if "scope_fraction" in stats:
            line += f", {human_percent(stats['selected'], stats['strategy']['scope_size'])} of scope"
        lines.append(line)
    return lines


def cmd_census(args) -> int:
    source, kind = _census_source(args)
    for line in census_table(source, kind, args.select):
        print(line)
    return EXIT_OK


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no metrics.jsonl in {run_dir}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def report_lines(rows: list[dict]) -> list[str]:
    splits = list(dict.fromkeys(r["split"] for r in rows))
    stages = sorted({r["stage"] for r in rows})
    table = {(r["stage"], r["split"]): r for r in rows}
    plan = rows[0]["plan"] if rows else ""
    popcount = rows[0]["popcount"] if rows else 0
    lines = [f"plan {plan} ({popcount} trainable parameters)", "WER % (change from stage 0)"]
    width = max(18, *(len(s) for s in splits))
    lines.append("stage " + " ".join(f"{s:>{width}s}" for s in splits))
    for k in stages:
        cells = []
        for s in splits:
            r = table.get((k, s))
            cell = "-" if r is None else f"{100 * r['wer']:.2f} ({100 * r['delta_wer']:+.2f})"
            cells.append(f"{cell:>{width}s}")
        lines.append(f"{k:5d} " + " ".join(cells))
    return lines


def cmd_report(args) -> int:
    lines = []
    for run_dir in args.runs:
        lines.extend(report_lines(read_metrics(run_dir)))
        lines.append("")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_decode(p) -> None:
    p.add_argument("--method", default=None, help="joint, ctc_greedy, rnnt_greedy or rnnt_beam")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--ctc-weight", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sftlab", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 for bit reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with data knobs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train a model on the source split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("transformer", "rnnt"), default="transformer")
    p.add_argument("--model-config")
    p.add_argument("--epochs", type=int, default=SOURCE_TRAIN_DEFAULTS["epochs"])
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="three-stage adaptation of a source checkpoint")
    p.add_argument("--source", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--select", required=True, help="e.g. modules:enc_mha_ffn or elements:smaller:0.5:scope=all")
    p.add_argument("--plan-name", default="")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ewc-lambda", type=float, default=None)
    p.add_argument("--fisher-samples", type=int, default=256)
    p.add_argument("--splits", help="comma-separated test splits")
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_decode(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="WER of a checkpoint on test splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--out", help="write metric rows as JSONL")
    _add_decode(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="build and save a selection mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--select", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("census", help="parameter counts per functional module")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--paper", action="store_true", help="full-size configuration of --kind")
    src.add_argument("--model-config")
    p.add_argument("--kind", choices=("transformer", "rnnt"), default="transformer")
    p.add_argument("--select", help="also report the size of this selection")
    p.set_defaults(func=cmd_census)

    p = sub.add_parser("run", help="full pipeline from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="WER trajectory tables of finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    limiter = threadpool_limits(limits=args.threads) if args.threads is not None else nullcontext()
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(stderr)
    log.setLevel(logging.INFO)
    try:
        with limiter:
            return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (*INPUT_ERRORS, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        log.removeHandler(stderr)


if __name__ == "__main__":
    sys.exit(main())
