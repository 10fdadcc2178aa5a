"""Pipeline orchestration: teacher -> score -> prune -> distill -> eval -> report.

Each stage reads its predecessors only through serialized artifacts in the
run directory, so a run can be resumed or cross-checked at any point. The
effective config is written back to the run directory and recorded in the
manifest; together with the seeds it is sufficient to re-execute any stage
bit-identically.

Exit codes: 0 success, 2 config error, 3 missing-stage error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import pruner as pr
from .criterion import entropy_criterion, cross_entropy_criterion
from .data import Dataset, sample_prune_set, split_dataset, synth_dataset, \
    synth_amplitude_dataset, load_image_dir, write_manifest
from .distill import DistillConfig, train, train_supervised, write_loss_curve
from .errors import AmpError, ConfigError, NumericError
from .evaluation import evaluate_model, extract_features
from .importance import ImportanceTable, rank, score_dataset
from .model import ModelConfig, VitModel, count_mlp_hidden_params, \
    count_params, init_random, load_checkpoint, load_tensors, save_checkpoint, \
    save_tensors
from . import autodiff as ad
from . import criterion as crit

log = logging.getLogger(__name__)


class MissingStageError(AmpError):
    """A required predecessor stage has not produced its artifacts."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    kind: str = "texture"               # "texture" | "amplitude"
    num_classes: int = 8
    per_class: int = 200
    holdout_per_class: int = 40
    image_size: int = 32
    seed: int = 7
    image_dir: str | None = None


@dataclass
class PruneConfig:
    temperature: float = 1.0 / 15.0
    delta_e: float = 0.01
    t_max: int = 6
    prune_set_size: int = 256
    batch_size: int = 64
    criterion: str = "entropy"          # "entropy" | "xent"
    seed: int = 11
    sweep_deltas: list[float] = field(
        default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])


@dataclass
class EvalConfig:
    k: int = 20
    temperature: float = 0.07
    batch_size: int = 64
    throughput_batch: int = 32
    throughput_trials: int = 5


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    teacher: DistillConfig
    prune: PruneConfig
    distill: DistillConfig
    eval: EvalConfig
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        try:
            return RunConfig(
                model=ModelConfig(**d["model"]),
                data=DataConfig(**d["data"]),
                teacher=DistillConfig(**d["teacher"]),
                prune=PruneConfig(**d["prune"]),
                distill=DistillConfig(**d["distill"]),
                eval=EvalConfig(**d["eval"]),
                seed=d.get("seed", 0),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad run config: {exc}") from exc
        except AmpError:
            raise

    def validate(self) -> None:
        self.model.validate()
        if self.model.image_size != self.data.image_size:
            raise ConfigError("model and data image sizes differ")
        if self.data.kind not in ("texture", "amplitude"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.prune.criterion not in ("entropy", "xent"):
            raise ConfigError(f"unknown criterion {self.prune.criterion!r}")
        train_size = self.data.num_classes * (self.data.per_class
                                              - self.data.holdout_per_class)
        if self.data.image_dir is None and self.prune.prune_set_size > train_size:
            raise ConfigError(
                f"prune_set_size {self.prune.prune_set_size} exceeds "
                f"train set size {train_size}")
        if self.prune.batch_size > self.prune.prune_set_size:
            raise ConfigError("prune batch_size exceeds prune_set_size")


def default_run_config() -> RunConfig:
    """Bundled toy profile: 4 blocks, C=64, M0=256, 8-class synthetic data.

    t_max, temperature and the entropy threshold default to the method's
    reference settings; the threshold in particular usually needs retuning
    at toy scale.
    """
    return RunConfig(
        model=ModelConfig(image_size=32, patch_size=16, embed_dim=64,
                          num_blocks=4, num_heads=4, mlp_hidden=256),
        data=DataConfig(),
        teacher=DistillConfig(epochs=6, warmup_epochs=1, base_lr=4e-3,
                              min_lr=1e-5, batch_size=64),
        prune=PruneConfig(),
        distill=DistillConfig(epochs=10, warmup_epochs=1, base_lr=2e-3,
                              min_lr=1e-5, batch_size=64),
        eval=EvalConfig(),
    )


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return default_run_config()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# run directory and manifest


class RunDir:
    """One run directory = one writer; tracks stage artifacts in a manifest."""

    def __init__(self, root: Path, config: RunConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"version": __version__, "config": config.to_dict(),
                             "stages": {}}
        (self.root / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True))

    def path(self, name: str) -> Path:
        return self.root / name

    def mark(self, stage: str, artifacts: dict[str, str]) -> None:
        for rel in artifacts.values():
            if not (self.root / rel).exists():
                raise AmpError(f"stage {stage} artifact missing at write time: {rel}")
        self.manifest["config"] = self.config.to_dict()
        self.manifest["stages"][stage] = {"done": True, "artifacts": artifacts}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2,
                                                 sort_keys=True))

    def require(self, stage: str) -> dict[str, Path]:
        entry = self.manifest["stages"].get(stage)
        if not entry or not entry.get("done"):
            raise MissingStageError(
                f"stage '{stage}' has not run in {self.root}; run `amp {stage}` first")
        return {k: self.root / v for k, v in entry["artifacts"].items()}


# ---------------------------------------------------------------------------
# dataset plumbing


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, holdout) pair from the data config."""
    if cfg.data.image_dir is not None:
        full = load_image_dir(cfg.data.image_dir, cfg.data.image_size)
    else:
        maker = {"texture": synth_dataset,
                 "amplitude": synth_amplitude_dataset}[cfg.data.kind]
        full = maker(cfg.data.num_classes, cfg.data.per_class,
                     cfg.data.image_size, cfg.data.seed)
    return split_dataset(full, cfg.data.holdout_per_class, cfg.data.seed)


def build_prune_set(cfg: RunConfig, train_set: Dataset) -> Dataset:
    return sample_prune_set(train_set, cfg.prune.prune_set_size, cfg.prune.seed)


def make_criterion(cfg: RunConfig, run: RunDir | None = None, head=None):
    """Criterion closure fn(record, labels) -> scalar Tensor."""
    if cfg.prune.criterion == "entropy":
        tau = cfg.prune.temperature
        return lambda rec, labels: entropy_criterion(rec.z_cls, tau)
    if head is None:
        head = load_tensors(run.require("teacher")["head"])
    head_w = ad.Tensor(head["head_w"])
    head_b = ad.Tensor(head["head_b"])

    def xent(rec, labels):
        if labels is None:
            raise ConfigError("cross-entropy criterion needs a labeled dataset")
        logits = ad.matmul(rec.z_cls, head_w) \
            + ad.reshape(head_b, (1, head_b.shape[0]))
        return cross_entropy_criterion(logits, labels)

    return xent


# ---------------------------------------------------------------------------
# stages


def cmd_teacher(cfg: RunConfig, run: RunDir, force: bool = False) -> None:
    ckpt = run.path("teacher.ckpt")
    if ckpt.exists() and not force:
        log.info("teacher checkpoint already at %s; use --force to retrain", ckpt)
        return
    train_set, holdout = build_datasets(cfg)
    model = init_random(cfg.model, cfg.seed)
    tcfg = DistillConfig(**{**asdict(cfg.teacher), "seed": cfg.seed})
    head, records = train_supervised(model, cfg.data.num_classes, train_set, tcfg)
    save_checkpoint(model, ckpt)
    save_tensors(head, run.path("teacher_head.ckpt"))
    write_loss_curve(records, run.path("teacher_loss.csv"))
    write_manifest(train_set, run.path("train_manifest.json"))
    from .evaluation import knn_classify
    bank = extract_features(model, train_set, cfg.eval.batch_size)
    test_bank = extract_features(model, holdout, cfg.eval.batch_size)
    acc = knn_classify(bank, test_bank, cfg.eval.k, cfg.eval.temperature)
    log.info("teacher kNN top-1 on holdout: %.2f%%", acc)
    (run.path("teacher_accuracy.json")).write_text(
        json.dumps({"knn_top1": acc}, indent=2))
    run.mark("teacher", {"checkpoint": "teacher.ckpt", "head": "teacher_head.ckpt",
                         "loss_curve": "teacher_loss.csv",
                         "accuracy": "teacher_accuracy.json"})


def cmd_score(cfg: RunConfig, run: RunDir) -> None:
    teacher = load_checkpoint(run.require("teacher")["checkpoint"])
    train_set, _ = build_datasets(cfg)
    prune_set = build_prune_set(cfg, train_set)
    write_manifest(prune_set, run.path("prune_set_manifest.json"))
    criterion_fn = make_criterion(cfg, run)
    table = score_dataset(teacher, prune_set, criterion_fn, cfg.prune.batch_size,
                          criterion_tag=cfg.prune.criterion)
    table.to_json(run.path("importance.json"))
    run.mark("score", {"importance": "importance.json",
                       "prune_set": "prune_set_manifest.json"})


def load_importance(path) -> ImportanceTable:
    payload = json.loads(Path(path).read_text())
    scores = [np.asarray(payload["scores"][str(l)])
              for l in range(len(payload["scores"]))]
    return ImportanceTable(sums=scores, batches_accumulated=1,
                           criterion_tag=payload["criterion"])


def _unfinetuned_eval(cfg: RunConfig, model: VitModel, train_set, holdout) -> float:
    from .evaluation import knn_classify
    bank = extract_features(model, train_set, cfg.eval.batch_size)
    test_bank = extract_features(model, holdout, cfg.eval.batch_size)
    return knn_classify(bank, test_bank, cfg.eval.k, cfg.eval.temperature)


def cmd_prune(cfg: RunConfig, run: RunDir, sweep: bool = False,
              uniform: int | None = None) -> None:
    teacher = load_checkpoint(run.require("teacher")["checkpoint"])
    table = load_importance(run.require("score")["importance"])
    ranking = rank(table)
    train_set, holdout = build_datasets(cfg)
    prune_set = build_prune_set(cfg, train_set)

    if uniform is not None:
        plan = pr.uniform_plan(ranking, uniform)
        results = []
    else:
        plan, results = pr.adaptive_prune(
            teacher, ranking, cfg.prune.delta_e, cfg.prune.t_max, prune_set,
            cfg.prune.temperature, cfg.prune.batch_size)
    pruned = pr.apply_surgery(teacher, plan)
    save_checkpoint(pruned, run.path("pruned.ckpt"))
    pr.save_plan(plan, results, run.path("prune_plan.json"))
    artifacts = {"plan": "prune_plan.json", "pruned": "pruned.ckpt"}

    if sweep:
        rows = []
        for delta in cfg.prune.sweep_deltas:
            p, _ = pr.adaptive_prune(teacher, ranking, delta, cfg.prune.t_max,
                                     prune_set, cfg.prune.temperature,
                                     cfg.prune.batch_size)
            m = pr.apply_surgery(teacher, p)
            rows.append({
                "delta_e": delta,
                "sizes": p.sizes(),
                "params": count_params(m),
                "mlp_hidden_params": count_mlp_hidden_params(m),
                "knn_top1_unfinetuned": _unfinetuned_eval(cfg, m, train_set, holdout),
            })
        run.path("sweep.json").write_text(json.dumps(rows, indent=2))
        artifacts["sweep"] = "sweep.json"
    run.mark("prune", artifacts)


def cmd_distill(cfg: RunConfig, run: RunDir) -> None:
    teacher = load_checkpoint(run.require("teacher")["checkpoint"])
    student = load_checkpoint(run.require("prune")["pruned"])
    train_set, _ = build_datasets(cfg)
    dcfg = DistillConfig(**{**asdict(cfg.distill), "seed": cfg.seed})
    student, records = train(student, teacher, train_set, dcfg)
    save_checkpoint(student, run.path("student.ckpt"))
    write_loss_curve(records, run.path("distill_loss.csv"))
    run.mark("distill", {"student": "student.ckpt", "loss_curve": "distill_loss.csv"})


def cmd_eval(cfg: RunConfig, run: RunDir) -> None:
    teacher = load_checkpoint(run.require("teacher")["checkpoint"])
    train_set, holdout = build_datasets(cfg)
    artifacts = {}

    def report(model, name):
        bank = extract_features(model, train_set, cfg.eval.batch_size)
        rep = evaluate_model(model, bank, holdout, k=cfg.eval.k,
                             knn_temperature=cfg.eval.temperature,
                             throughput_batch=cfg.eval.throughput_batch,
                             throughput_trials=cfg.eval.throughput_trials,
                             extract_batch=cfg.eval.batch_size)
        rep.to_json(run.path(f"eval_{name}.json"))
        artifacts[name] = f"eval_{name}.json"
        log.info("%s: kNN %.2f%%, %d params, %d FLOPs", name, rep.knn_top1,
                 rep.params, rep.flops)

    report(teacher, "teacher")
    if run.path("student.ckpt").exists():
        report(load_checkpoint(run.path("student.ckpt")), "student")
    elif run.path("pruned.ckpt").exists():
        report(load_checkpoint(run.path("pruned.ckpt")), "pruned")
    run.mark("eval", artifacts)


def cmd_report(cfg: RunConfig, run: RunDir, dense: bool = False,
               dense_points: int = 16) -> None:
    plan_artifacts = run.require("prune")
    _, payload = pr.load_plan(plan_artifacts["plan"])
    report_dir = run.path("report")
    report_dir.mkdir(exist_ok=True)
    gaps: list[str] = []
    artifacts: dict[str, str] = {}

    with open(report_dir / "entropy_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "step", "m_t", "e_t", "accepted"])
        for blk in payload["blocks"]:
            for row in blk["trace"]:
                writer.writerow([blk["block"], row["step"], row["m_t"],
                                 repr(row["e_t"]), int(row["accepted"])])
    artifacts["entropy_curves"] = "report/entropy_curves.csv"

    if dense:
        teacher = load_checkpoint(run.require("teacher")["checkpoint"])
        ranking = rank(load_importance(run.require("score")["importance"]))
        train_set, _ = build_datasets(cfg)
        prune_set = build_prune_set(cfg, train_set)
        with open(report_dir / "entropy_dense.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "hidden_size", "entropy"])
            for block in range(cfg.model.num_blocks):
                m0 = teacher.config.per_block_hidden[block]
                grid = sorted(set(np.linspace(max(1, m0 // dense_points), m0,
                                              dense_points, dtype=int).tolist()))
                saved = teacher.hidden_masks[block]
                for m in grid:
                    teacher.hidden_masks[block] = pr._top_mask(
                        ranking.order[block], m)
                    e = crit.evaluate_entropy(teacher, prune_set,
                                              cfg.prune.temperature,
                                              cfg.prune.batch_size).value
                    writer.writerow([block, m, repr(e)])
                teacher.hidden_masks[block] = saved
        artifacts["entropy_dense"] = "report/entropy_dense.csv"

    if run.path("sweep.json").exists():
        rows = json.loads(run.path("sweep.json").read_text())
        with open(report_dir / "sweep_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["delta_e", "params", "mlp_hidden_params",
                             "knn_top1_unfinetuned"])
            for r in rows:
                writer.writerow([repr(r["delta_e"]), r["params"],
                                 r["mlp_hidden_params"],
                                 repr(r["knn_top1_unfinetuned"])])
        artifacts["sweep_summary"] = "report/sweep_summary.csv"
    else:
        gaps.append("sweep.json not present; run `amp prune --sweep` for the "
                    "threshold-sweep summary")

    deltas: dict = {"gaps": gaps}
    if run.path("eval_teacher.json").exists():
        t = json.loads(run.path("eval_teacher.json").read_text())
        other_path = next((run.path(n) for n in ("eval_student.json",
                                                 "eval_pruned.json")
                           if run.path(n).exists()), None)
        if other_path is not None:
            s = json.loads(other_path.read_text())
            deltas.update({
                "params_reduction": 1.0 - s["params"] / t["params"],
                "flops_reduction": 1.0 - s["flops"] / t["flops"],
                "throughput_ratio": s["throughput"] / t["throughput"],
                "knn_top1_teacher": t["knn_top1"],
                "knn_top1_compressed": s["knn_top1"],
            })
        else:
            gaps.append("no compressed-model eval report; run `amp eval`")
    else:
        gaps.append("no teacher eval report; run `amp eval`")
    (report_dir / "deltas.json").write_text(json.dumps(deltas, indent=2,
                                                       sort_keys=True))
    artifacts["deltas"] = "report/deltas.json"
    run.mark("report", artifacts)
    if gaps:
        log.warning("report has gaps: %s", "; ".join(gaps))


# ---------------------------------------------------------------------------
# entry point


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "criterion", None):
        cfg.prune.criterion = {"entropy": "entropy", "xent": "xent"}.get(
            args.criterion, args.criterion)
    if getattr(args, "delta_e", None) is not None:
        cfg.prune.delta_e = args.delta_e
    if getattr(args, "t_max", None) is not None:
        cfg.prune.t_max = args.t_max
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amp", description="Adaptive MLP pruning pipeline for toy ViTs")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("teacher", "score", "prune", "distill", "eval", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--out", default="runs/toy", help="run directory")
        p.add_argument("--seed", type=int, default=None)
        if name in ("score", "prune"):
            p.add_argument("--criterion", choices=["entropy", "xent"], default=None)
        if name == "prune":
            p.add_argument("--delta-e", dest="delta_e", type=float, default=None)
            p.add_argument("--t-max", dest="t_max", type=int, default=None)
            p.add_argument("--sweep", action="store_true")
            p.add_argument("--uniform", type=int, default=None,
                           help="keep this many neurons per block instead of searching")
        if name == "teacher":
            p.add_argument("--force", action="store_true")
        if name == "report":
            p.add_argument("--dense", action="store_true",
                           help="evaluate the entropy-vs-hidden-size grid")
    return parser


def run_command(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    cfg.validate()
    run = RunDir(Path(args.out), cfg)
    if args.command == "teacher":
        cmd_teacher(cfg, run, force=args.force)
    elif args.command == "score":
        cmd_score(cfg, run)
    elif args.command == "prune":
        cmd_prune(cfg, run, sweep=args.sweep, uniform=args.uniform)
    elif args.command == "distill":
        cmd_distill(cfg, run)
    elif args.command == "eval":
        cmd_eval(cfg, run)
    elif args.command == "report":
        cmd_report(cfg, run, dense=args.dense)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except MissingStageError as exc:
        log.error("%s", exc)
        return 3
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
