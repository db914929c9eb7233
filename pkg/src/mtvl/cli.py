"""Command line: ``python -m mtvl {gen-data,train,eval,dump-attention}``.

Every field of :class:`RunConfig` is also a flag (``num_worlds`` becomes
``--num-worlds``). Values from ``--config`` are read first; flags given on
the command line override them. The merged config is written to
``<out>/config.json``.

Failures print one line ``error: CODE: message`` to stderr and exit with a
code from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (
    REGIMES, TASKS, ContaminationError, DatasetError, RegimeError, SplitManifest, generate_dataset, load_dataset,
    make_splits, save_dataset, select,
)
from .evaluation import answer_name, evaluate, format_report, report_json
from .model import ModelConfig, MultiTaskModel
from .tensor import no_grad
from .training import StarvationError, TaskSpec, curriculum_run, derive_joint_plan, train, training_pools

EXIT_CODES = {
    "CONFIG": 2,
    "IO": 3,
    "DATASET": 4,
    "CONTAMINATION": 5,
    "REGIME": 6,
    "STARVATION": 7,
    "NONFINITE": 8,
    "CHECKPOINT": 9,
    "UNKNOWN_SAMPLE": 10,
}

DATASET_FILE = "worlds.jsonl"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "checkpoint.cmtl"


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    # data
    num_worlds: int = 1000
    regime: str = "standard"
    dataset: str | None = None
    manifest: str | None = None
    # model
    d: int = 32
    depth: int = 5
    k: int = 4
    tap_icr: int = 3
    tap_vqa: int = 5
    tap_vg: int = 2
    p_lstm: float = 0.1
    p_fc: float = 0.3
    # training
    tasks: tuple[str, ...] = TASKS
    stages: tuple[tuple[str, ...], ...] = ()
    batch_size: int = 32
    iters_icr: int = 1500
    iters_vqa: int = 1500
    iters_vg: int = 1000
    step_icr: int = 1000
    step_vqa: int = 1000
    step_vg: int = 1000
    cycle: int = 10
    base_lr: float = 0.001
    lr_decay: float = 0.5
    reset_optimizer: bool = False
    eval_every: int = 0
    # evaluation and dumps
    checkpoint: str | None = None
    split: str = "val"
    samples: tuple[int, ...] = ()

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise CommandError("CONFIG", f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.split not in ("train", "val", "test"):
            raise CommandError("CONFIG", f"unknown split {self.split!r}")
        for t in self.tasks + tuple(t for s in self.stages for t in s):
            if t not in TASKS:
                raise CommandError("CONFIG", f"unknown task {t!r}")
        for name in ("tap_icr", "tap_vqa", "tap_vg"):
            if not 1 <= getattr(self, name) <= self.depth:
                raise CommandError("CONFIG", f"{name}={getattr(self, name)} outside 1..{self.depth}")

    @property
    def taps(self) -> dict[str, int]:
        return {"ICR": self.tap_icr, "VQA": self.tap_vqa, "VG": self.tap_vg}

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, depth=self.depth, k=self.k, taps=self.taps, p_lstm=self.p_lstm,
                           p_fc=self.p_fc)

    def task_specs(self) -> dict[str, TaskSpec]:
        out = {}
        for t in self.tasks:
            key = t.lower()
            try:
                out[t] = TaskSpec(t, self.taps[t], self.batch_size, getattr(self, f"iters_{key}"),
                                  getattr(self, f"step_{key}"))
            except ValueError as exc:
                raise CommandError("CONFIG", str(exc)) from exc
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise CommandError("CONFIG", f"unknown config keys {unknown}")
        fixed = dict(values)
        for key in ("tasks", "samples"):
            if key in fixed:
                fixed[key] = tuple(fixed[key])
        if "stages" in fixed:
            fixed["stages"] = tuple(tuple(s) for s in fixed["stages"])
        return cls(**fixed)


# ------------------------------------------------------------------ flag parsing


def _task_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip().upper() for t in text.split(",") if t.strip())


def _stage_list(text: str) -> tuple[tuple[str, ...], ...]:
    """``"ICR|ICR,VQA|ICR,VQA,VG"`` -> three stages."""
    return tuple(_task_list(s) for s in text.split("|") if s.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


_PARSERS = {"tasks": _task_list, "stages": _stage_list, "samples": _int_list}


def _flag_type(f: dataclasses.Field):
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    if f.name in ("dataset", "manifest", "checkpoint", "out", "regime", "split"):
        return str
    return {int: int, float: float, bool: _bool}[type(f.default)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtvl", description="Multi-task vision-language training on synthetic worlds")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "dump-attention"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with RunConfig keys")
        for f in dataclasses.fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_flag_type(f),
                           default=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandError("CONFIG", f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise CommandError("CONFIG", "config file must hold a JSON object")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    values.update(overrides)
    return RunConfig.from_dict(values)


# ------------------------------------------------------------------ shared helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError("IO", f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CommandError("IO", f"cannot write {path}: {exc}") from exc


def _echo_config(cfg: RunConfig, out: Path) -> None:
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    """Dataset and manifest from the configured paths, or generated from the seed."""
    if cfg.dataset is None:
        worlds = generate_dataset(cfg.num_worlds, cfg.seed)
    else:
        try:
            worlds = load_dataset(cfg.dataset)
        except OSError as exc:
            raise CommandError("IO", f"cannot read dataset {cfg.dataset}: {exc}") from exc
    if cfg.manifest is None:
        try:
            manifest = make_splits(len(worlds), cfg.seed, cfg.regime)
        except ValueError as exc:
            raise CommandError("DATASET", str(exc)) from exc
    else:
        try:
            manifest = SplitManifest.load(cfg.manifest)
        except (OSError, ValueError, KeyError) as exc:
            raise CommandError("IO", f"cannot read manifest {cfg.manifest}: {exc}") from exc
    known = {w.world_id for w in worlds}
    for task, splits in manifest.pools.items():
        for split, ids in splits.items():
            missing = [i for i in ids if i not in known]
            if missing:
                raise CommandError("DATASET", f"manifest {task}/{split} names unknown world {missing[0]}")
    return worlds, manifest


def _load_model(cfg: RunConfig) -> MultiTaskModel:
    model = MultiTaskModel(cfg.model_config(), cfg.seed)
    if cfg.checkpoint is None:
        return model
    try:
        model.load_state_dict(checkpoint.load(cfg.checkpoint))
    except OSError as exc:
        raise CommandError("IO", f"cannot read checkpoint {cfg.checkpoint}: {exc}") from exc
    except (checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise CommandError("CHECKPOINT", f"{cfg.checkpoint}: {exc}") from exc
    return model


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    worlds = generate_dataset(cfg.num_worlds, cfg.seed)
    try:
        manifest = make_splits(cfg.num_worlds, cfg.seed, cfg.regime)
        save_dataset(worlds, out / DATASET_FILE, cfg.seed)
        manifest.save(out / MANIFEST_FILE)
    except ValueError as exc:
        raise CommandError("DATASET", str(exc)) from exc
    except OSError as exc:
        raise CommandError("IO", str(exc)) from exc
    _echo_config(cfg, out)
    counts = {t: {s: len(ids) for s, ids in manifest.pools[t].items()} for t in sorted(manifest.pools)}
    for t, c in counts.items():
        print(f"{t}: train={c['train']} val={c['val']} test={c['test']}")
    return counts


def cmd_train(cfg: RunConfig) -> str:
    out = _out_dir(cfg)
    worlds, manifest = _load_data(cfg)
    _echo_config(cfg, out)
    try:
        manifest.check_contamination()
    except ContaminationError as exc:
        raise CommandError("CONTAMINATION", str(exc)) from exc
    specs = cfg.task_specs()
    model = _load_model(cfg)
    pools = training_pools(worlds, manifest)
    val_tasks = [t for t in cfg.tasks if (t, "val") not in manifest.forbidden]
    val_worlds = select(worlds, manifest.pools["ICR"]["val"])

    def periodic_eval(_it):
        with no_grad():
            report = evaluate(model, val_worlds, tuple(val_tasks), manifest, "val")
        return {t: report[t] for t in val_tasks}

    try:
        log_file = open(out / "train.log", "w")
    except OSError as exc:
        raise CommandError("IO", str(exc)) from exc
    kw = dict(base_lr=cfg.base_lr, decay=cfg.lr_decay, manifest=manifest,
              log_sink=lambda line: print(line, file=log_file),
              evaluate=periodic_eval if val_tasks and cfg.eval_every else None, eval_every=cfg.eval_every)
    try:
        with log_file:
            if cfg.stages:
                res = curriculum_run(specs, cfg.cycle, [list(s) for s in cfg.stages], model, pools, cfg.seed,
                                     reset_optimizer=cfg.reset_optimizer, **kw)
                metrics = [m for stage in res.stages for m in stage.metrics]
            else:
                plan = derive_joint_plan(list(specs.values()), cfg.cycle)
                metrics = train(plan, model, pools, cfg.seed, **kw).metrics
    except StarvationError as exc:
        raise CommandError("STARVATION", str(exc)) from exc
    except ContaminationError as exc:
        raise CommandError("CONTAMINATION", str(exc)) from exc
    except FloatingPointError as exc:
        raise CommandError("NONFINITE", str(exc)) from exc
    except KeyError as exc:
        raise CommandError("CONFIG", str(exc)) from exc
    _write(out / "metrics.jsonl", "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))
    try:
        digest = checkpoint.save(out / CHECKPOINT_FILE, model.state_dict())
    except OSError as exc:
        raise CommandError("IO", str(exc)) from exc
    print(f"checkpoint {out / CHECKPOINT_FILE} sha256={digest}")
    return digest


def cmd_eval(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    worlds, manifest = _load_data(cfg)
    tasks = tuple(cfg.tasks)
    try:
        for t in tasks:
            manifest.assert_can_evaluate(t, cfg.split)
    except RegimeError as exc:
        raise CommandError("REGIME", str(exc)) from exc
    _echo_config(cfg, out)
    model = _load_model(cfg)
    # pools differ per task (VQA trains on train+val under vqa-trainval)
    report: dict = {"split": cfg.split, "num_worlds": {}}
    with no_grad():
        for t in tasks:
            part = select(worlds, manifest.pools[t][cfg.split])
            report[t] = evaluate(model, part, (t,), manifest, cfg.split)[t]
            report["num_worlds"][t] = len(part)
    table = format_report(report, label="+".join(cfg.tasks))
    _write(out / f"report_{cfg.split}.json", report_json(report) + "\n")
    _write(out / f"report_{cfg.split}.txt", table + "\n")
    print(table)
    return report


def attention_record(model: MultiTaskModel, world) -> dict:
    """Word and region attention of both summary decoders, grounding and predictions for one world."""
    with no_grad():
        S0, I0, sb, ib = model.featurize([world.caption], [world])
        score, icr_maps = model.icr_pair_scores(S0, I0, sb.mask, ib.mask, [0], [0], return_maps=True)
        answers, vqa_maps = model.vqa_forward([world], return_maps=True)
        vg, _, _ = model.vg_forward([world])
    probs = answers.data[0]
    return {
        "world_id": world.world_id,
        "caption": world.caption,
        "question": world.question,
        "icr": {
            "score": float(score.data[0]),
            "word_weights": icr_maps.word_weights.data[0].tolist(),
            "region_weights": icr_maps.region_weights.data[0].tolist(),
        },
        "vqa": {
            "prediction": answer_name(int(np.argmax(probs))),
            "probability": float(probs.max()),
            "word_weights": vqa_maps.word_weights.data[0].tolist(),
            "region_weights": vqa_maps.region_weights.data[0].tolist(),
        },
        "vg": [
            {"span": list(span), "phrase": world.caption[span[0] - 1 : span[1]], "top_region": int(np.argmax(row)) + 1}
            for span, row in zip(world.phrases, vg.data[0])
        ],
    }


def cmd_dump_attention(cfg: RunConfig) -> list[dict]:
    out = _out_dir(cfg)
    worlds, _ = _load_data(cfg)
    by_id = {w.world_id: w for w in worlds}
    ids = cfg.samples or tuple(sorted(by_id)[:1])
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CommandError("UNKNOWN_SAMPLE", f"no world with id {missing[0]}")
    _echo_config(cfg, out)
    model = _load_model(cfg)
    records = [attention_record(model, by_id[i]) for i in ids]
    lines = [json.dumps(r, sort_keys=True) for r in records]
    _write(out / "attention.jsonl", "".join(line + "\n" for line in lines))
    for line in lines:
        print(line)
    return records


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except CommandError as exc:
        print(f"error: {exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except DatasetError as exc:
        print(f"error: DATASET: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_CODES["DATASET"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
