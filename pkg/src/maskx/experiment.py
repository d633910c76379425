"""Single runs and ablation grids built from a RunConfig."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig
from .dataset import read_dataset, write_dataset
from .evaluate import REPORT_COLUMNS, EvalReport, RunResult, ablation_report, class_rows, coco_map, write_csv, CLASS_COLUMNS
from .model import Model
from .shapes import SceneRecord, dataset_hash, generate_dataset
from .train import LOSS_LOG_HEADER, LossRow, train
from .transfer import load_embedding_file

log = logging.getLogger(__name__)

TRAIN_DIR = "train"
EVAL_DIR = "eval"


@dataclass
class Data:
    train: list[SceneRecord]
    eval: list[SceneRecord]

    @property
    def hash(self) -> str:
        return dataset_hash(self.train + self.eval)


def generate_data(cfg: RunConfig) -> Data:
    gen = cfg.gen_config()
    n_train = cfg["gen.train_images"]
    return Data(generate_dataset(cfg["gen.seed"], n_train, gen),
                generate_dataset(cfg["gen.seed"], cfg["gen.eval_images"], gen, start_id=n_train))


def write_data(data: Data, root, config_hash: str) -> None:
    write_dataset(data.train, Path(root) / TRAIN_DIR, config_hash)
    write_dataset(data.eval, Path(root) / EVAL_DIR, config_hash)


def read_data(root) -> Data:
    train_scenes, _ = read_dataset(Path(root) / TRAIN_DIR)
    eval_scenes, _ = read_dataset(Path(root) / EVAL_DIR)
    return Data(train_scenes, eval_scenes)


def load_data(cfg: RunConfig, root=None) -> Data:
    return generate_data(cfg) if root is None else read_data(root)


def external_embedding(cfg: RunConfig):
    spec = cfg.transfer_spec()
    if cfg["train.head_mode"] != "transfer" or spec.source != "external":
        return None
    return load_embedding_file(spec.embedding_file, cfg.gen_config().num_classes)


def write_run_metadata(cfg: RunConfig, out: Path, data: Data) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dumps(), encoding="utf-8")
    hashes = [f"config {cfg.digest()}", f"dataset {data.hash}", f"gen {cfg.gen_config().digest()[:16]}",
              f"split {cfg.split_config().digest()}", f"train {cfg.train_config().digest()}",
              f"model {cfg.model_config().digest()}"]
    (out / "hashes.txt").write_text("\n".join(hashes) + "\n", encoding="utf-8")


def train_run(cfg: RunConfig, data: Data, out: Path | None = None):
    """Train per ``cfg``; with ``out`` also write the checkpoint and loss log."""
    model, ckpt, rows = train(data.train, cfg.split_config(), cfg.model_config(), cfg.train_config(),
                              external=external_embedding(cfg))
    ckpt.config_text = cfg.dumps()
    if out is not None:
        write_run_metadata(cfg, out, data)
        ckpt_io.save(ckpt, out / "checkpoint.bin")
        write_loss_log(rows, out / "loss_log.csv")
    return model, ckpt, rows


def write_loss_log(rows: list[LossRow], path) -> None:
    text = LOSS_LOG_HEADER + "\n" + "".join(r.csv() + "\n" for r in rows)
    Path(path).write_text(text, encoding="utf-8")


def load_model(cfg: RunConfig, path) -> Model:
    ckpt = ckpt_io.load(path)
    model_config = cfg.model_config()
    expected = set(Model.initialize(model_config, 0, external_embedding(cfg)).params)
    if set(ckpt.params) != expected:
        raise ValueError("checkpoint parameters do not match the configured model")
    return Model(model_config, ckpt.params, external_embedding(cfg))


def evaluate_model(cfg: RunConfig, model: Model, scenes: list[SceneRecord]) -> EvalReport:
    detections = model.detect(scenes, seed=cfg["eval.seed"], jitter=cfg["eval.jitter"],
                              batch_size=cfg["eval.batch_size"])
    return coco_map(detections, scenes, cfg.split_config())


def report_rows(label: str, report: EvalReport, breakout: bool = False) -> tuple[list[dict], list[str]]:
    row = dict(label=label, split_hash=report.split.digest(), AP_A=report.ap_a, AP_B=report.ap_b,
               rel_change_B=0.0, trials=1, std_AP_B=float("nan"))
    columns = list(REPORT_COLUMNS)
    if breakout:
        for t in (0.5, 0.75):
            for name, classes in (("A", report.split.a), ("B", report.split.b)):
                key = f"AP{int(t * 100)}_{name}"
                row[key] = report.set_ap_at(classes, t)
                columns.append(key)
    return [row], columns


def write_eval(cfg: RunConfig, label: str, report: EvalReport, out: Path) -> None:
    rows, columns = report_rows(label, report, cfg["eval.ap_breakout"])
    write_csv(rows, columns, out / "report.csv")
    write_csv(class_rows(label, report), CLASS_COLUMNS, out / "classes.csv")


# ---------------------------------------------------------------------------
# ablation grid


@dataclass(frozen=True)
class Cell:
    label: str
    overrides: tuple[tuple[str, object], ...]
    trial: int = 0


def cell_label(head_mode: str, source=None, layers=None, activation=None, stop_grad=True,
               mlp=False, mode="e2e") -> str:
    label = head_mode
    if head_mode == "transfer":
        label += f"[{source},{layers}-layer,{activation}{'' if stop_grad else ',no-stop-grad'}]"
    if mlp:
        label += "+mlp"
    if mode != "e2e":
        label += f"/{mode}"
    return label


def grid_cells(cfg: RunConfig) -> list[Cell]:
    """Head modes x (transfer options) x mlp-fusion x training mode, repeated per trial."""
    base = []
    for head_mode in cfg["ablate.head_modes"]:
        for mlp, mode in itertools.product(cfg["ablate.mlp_fusion"], cfg["ablate.modes"]):
            common = (("train.head_mode", head_mode), ("train.mlp_fusion", mlp), ("train.mode", mode))
            if head_mode != "transfer":
                base.append((cell_label(head_mode, mlp=mlp, mode=mode), common))
                continue
            for source, layers, act, sg in itertools.product(cfg["ablate.sources"], cfg["ablate.layers"],
                                                             cfg["ablate.activations"], cfg["ablate.stop_grad"]):
                extra = (("train.transfer.source", source), ("train.transfer.layers", layers),
                         ("train.transfer.activation", act), ("train.transfer.stop_grad", sg))
                base.append((cell_label(head_mode, source, layers, act, sg, mlp, mode), common + extra))
    labels = [b[0] for b in base]
    if len(set(labels)) != len(labels):
        raise ValueError("ablation grid has duplicate cells")
    return [Cell(label, overrides, trial) for trial in range(cfg["ablate.trials"]) for label, overrides in base]


def cell_config(cfg: RunConfig, cell: Cell, size_a: int | None = None) -> RunConfig:
    """Per-trial seeds: the training seed and (for random splits) the split seed advance with the trial."""
    overrides = dict(cell.overrides)
    overrides["train.seed"] = cfg["train.seed"] + cell.trial
    if cfg["split.mode"] == "random":
        overrides["split.seed"] = cfg["split.seed"] + cell.trial
    if size_a is not None:
        overrides["split.size_a"] = size_a
    return cfg.with_overrides(overrides)


def run_cell(cfg: RunConfig, data: Data, out: Path | None = None) -> EvalReport:
    model, _, _ = train_run(cfg, data, out)
    report = evaluate_model(cfg, model, data.eval)
    if out is not None:
        write_eval(cfg, "run", report, out)
    return report


def _cell_job(args):
    cfg, data, out = args
    return run_cell(cfg, data, out)


def run_grid(cfg: RunConfig, data: Data, out: Path | None = None) -> dict[int | None, list[RunResult]]:
    """Run every cell; results are keyed by split size (None when ablate.split_sizes is empty)."""
    sizes = cfg["ablate.split_sizes"] or (None,)
    jobs, keys = [], []
    for size in sizes:
        for cell in grid_cells(cfg):
            sub = cell_config(cfg, cell, size)
            name = f"{cell.label}.trial{cell.trial}" + ("" if size is None else f".A{size}")
            run_dir = None if out is None else out / "runs" / _safe(name)
            jobs.append((sub, data, run_dir))
            keys.append((size, cell))
    if cfg["ablate.workers"] > 1:
        with ProcessPoolExecutor(cfg["ablate.workers"]) as pool:
            reports = list(pool.map(_cell_job, jobs))
    else:
        reports = [_cell_job(job) for job in jobs]
    results: dict[int | None, list[RunResult]] = {}
    for (size, cell), report in zip(keys, reports):
        results.setdefault(size, []).append(RunResult(cell.label, report, data.hash, cell.trial))
    return results


def write_ablation(cfg: RunConfig, results: dict, out: Path) -> list[Path]:
    paths = []
    for size, runs in results.items():
        suffix = "" if size is None else f"_A{size}"
        path = out / f"ablation{suffix}.csv"
        ablation_report(runs, cfg["ablate.baseline"], path, out / f"ablation{suffix}_classes.csv")
        paths.append(path)
    return paths


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.+" else "_" for ch in name)
