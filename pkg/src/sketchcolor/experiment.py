"""Run orchestration: training with resume, ablation sweeps, report tables.

A run directory holds an immutable config snapshot (``manifest.json``), a
deterministic loss CSV, and per-epoch checkpoints. The same config and seed
always replay the same parameter trajectory, which is what the resume and
reproducibility guarantees lean on.
"""

from __future__ import annotations

import csv
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import (
    ConfigError,
    NonFiniteLossError,
    RunConfig,
    Scheme,
    total_objective,
)
from .data import DatasetSpec, LayoutError, load_batch, load_sketch, split_size, validate_dataset
from .fid import compute_fid, emit_sample_grid, make_extractor
from .gan import (
    BaselineStepResult,
    build_networks,
    latest_checkpoint_epoch,
    load_checkpoint,
    load_generator,
    save_checkpoint,
)
from .segloss import SegGuidedTrainer, StepReport, make_trainer
from .segmentation import FgBgPartition, load_backend
from .util import atomic_write_json, derive_seed, module_digest, tree_digest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOSS_CSV_NAME = "loss_log.csv"
CSV_HEADER = ["epoch", "step", "l_g", "l_b", "l_m", "total", "gen_grad_norm"]

VARIANT_LABELS = {
    "multiclass": "+Multi-class",
    "binary": "+Binary",
    "both": "+Both",
}


class ResumeMismatchError(RuntimeError):
    """Run directory belongs to a different configuration."""


def code_digest() -> str:
    package_dir = Path(__file__).resolve().parent
    return tree_digest(sorted(package_dir.glob("*.py")))


@dataclass
class RunManifest:
    run_id: str
    status: str                      # running | complete | failed
    config: dict[str, str]           # flat resolved snapshot
    dataset: str
    code_digest: str
    backend_digest: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    last_epoch: int = 0
    error: str | None = None

    def save(self, run_dir: str | Path) -> None:
        atomic_write_json(Path(run_dir) / MANIFEST_NAME, self.__dict__)

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        import json
        path = Path(run_dir) / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))

    @classmethod
    def try_load(cls, run_dir: str | Path) -> "RunManifest | None":
        if (Path(run_dir) / MANIFEST_NAME).is_file():
            return cls.load(run_dir)
        return None


def dataset_spec_for(cfg: RunConfig) -> DatasetSpec:
    root = Path(cfg.data_root)
    if not (root / "trainA").is_dir() and (root / cfg.dataset / "trainA").is_dir():
        root = root / cfg.dataset
    return DatasetSpec.for_dataset(cfg.dataset, root, cfg.train.scheme)


def _steps_per_epoch(spec: DatasetSpec, batch_size: int) -> int:
    n_a, n_b = split_size(spec, "train")
    if n_a == 0 or n_b == 0:
        raise LayoutError(f"dataset {spec.name} has an empty training pool")
    # unpaired pools can differ in size; one epoch walks the larger one
    return max(1, max(n_a, n_b) // batch_size)


def _as_report(result, weights) -> StepReport:
    if isinstance(result, StepReport):
        return result
    assert isinstance(result, BaselineStepResult)
    return StepReport(l_g=result.l_g, l_b=0.0, l_m=0.0,
                      total=total_objective(result.l_g, 0.0, 0.0, weights),
                      losses=result.losses, grad_norms=result.grad_norms,
                      disc_updates={})


def _trim_csv(path: Path, keep_through_epoch: int) -> None:
    if not path.is_file():
        return
    with path.open() as fh:
        rows = list(csv.reader(fh))
    kept = [row for row in rows[1:] if row and int(row[0]) <= keep_through_epoch]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(kept)


def build_trainer(cfg: RunConfig, device: str = "cpu"):
    """Networks + optimizers + (if any aux weight is nonzero) the frozen
    backend, seeded deterministically from the master seed."""
    w = cfg.variant.weights
    use_seg = w.w_b > 0 or w.w_m > 0
    seg = partition = None
    if use_seg:
        seg = load_backend(cfg.seg_backend, cfg.num_classes)
        partition = FgBgPartition.from_spec(cfg.partition, cfg.num_classes)
    bundle = build_networks(cfg.train.scheme, cfg.variant,
                            num_classes=cfg.num_classes,
                            image_size=cfg.train.image_size,
                            ngf=cfg.ngf, ndf=cfg.ndf, n_blocks=cfg.n_blocks,
                            seg_map_size=cfg.seg_map_size,
                            seed=derive_seed(cfg.train.seed, "init"))
    trainer = make_trainer(bundle, cfg.train, seg, partition,
                           map_size=cfg.seg_map_size, device=device)
    return trainer


def train_run(cfg: RunConfig, device: str = "cpu",
              max_steps: int | None = None) -> RunManifest:
    """Train to ``cfg.train.epochs``, resuming from the last checkpoint if the
    run directory already holds a matching manifest.

    ``max_steps`` caps the total number of training steps for smoke runs; the cap
    is applied at epoch boundaries, and a capped run is left in status
    "paused" so a later call picks up exactly where it stopped.
    """
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_mapping()

    existing = RunManifest.try_load(run_dir)
    if existing is not None:
        if existing.config != snapshot:
            drift = sorted(k for k in snapshot
                           if existing.config.get(k) != snapshot[k])
            raise ResumeMismatchError(
                f"{run_dir} was started with a different config "
                f"(drifted keys: {drift}); refusing to resume")
        if existing.status == "complete":
            logger.info("run %s already complete", run_dir)
            return existing

    spec = dataset_spec_for(cfg)
    report = validate_dataset(spec)
    for violation in report.violations:
        logger.warning("dataset %s: %s", spec.name, violation)

    trainer = build_trainer(cfg, device)
    backend_digest = (module_digest(trainer.seg)
                      if isinstance(trainer, SegGuidedTrainer) else None)
    manifest = existing or RunManifest(
        run_id=run_dir.name, status="running", config=snapshot,
        dataset=cfg.dataset, code_digest=code_digest(),
        backend_digest=backend_digest,
    )
    manifest.status = "running"
    manifest.save(run_dir)

    start_epoch = 1
    csv_path = run_dir / LOSS_CSV_NAME
    resumed_from = latest_checkpoint_epoch(run_dir)
    if existing is not None and resumed_from is not None:
        load_checkpoint(run_dir, resumed_from, trainer)
        start_epoch = resumed_from + 1
        _trim_csv(csv_path, resumed_from)
        logger.info("resuming %s from epoch %d", run_dir, resumed_from)
    else:
        with csv_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(CSV_HEADER)

    seed = cfg.train.seed
    steps = _steps_per_epoch(spec, cfg.train.batch_size)
    weights = cfg.variant.weights
    done_steps = 0
    capped = False
    t0 = time.monotonic()
    try:
        for epoch in range(start_epoch, cfg.train.epochs + 1):
            trainer.set_epoch(epoch)
            order = list(range(steps))
            if spec.scheme is Scheme.PAIRED:
                random.Random(derive_seed(seed, f"perm:{epoch}")).shuffle(order)
            with csv_path.open("a", newline="") as fh:
                writer = csv.writer(fh)
                for i in range(steps):
                    if spec.scheme is Scheme.PAIRED:
                        key = order[i]
                    else:
                        key = derive_seed(seed, f"draw:{epoch}:{i}")
                    batch = load_batch(spec, "train", key,
                                       image_size=cfg.train.image_size,
                                       batch_size=cfg.train.batch_size)
                    step = _as_report(trainer.step(batch), weights)
                    writer.writerow([epoch, trainer.step_count,
                                     repr(step.l_g), repr(step.l_b),
                                     repr(step.l_m), repr(step.total),
                                     repr(step.grad_norms.get("gen_sketch2color", 0.0))])
                    done_steps += 1
            capped = max_steps is not None and done_steps >= max_steps
            if epoch % cfg.checkpoint_interval == 0 or epoch == cfg.train.epochs \
                    or capped:
                paths = save_checkpoint(run_dir, epoch, trainer)
                manifest.checkpoints = sorted(set(manifest.checkpoints)
                                              | {p.name for p in paths})
                manifest.last_epoch = epoch
                manifest.save(run_dir)
            if capped:
                break
    except NonFiniteLossError as exc:
        manifest.status = "failed"
        manifest.error = str(exc)
        manifest.save(run_dir)
        raise

    manifest.status = "paused" if capped and manifest.last_epoch < cfg.train.epochs \
        else "complete"
    manifest.save(run_dir)
    logger.info("run %s: %d epochs in %.1fs", run_dir,
                cfg.train.epochs - start_epoch + 1, time.monotonic() - t0)
    return manifest


# --------------------------------------------------------------------------
# Generation + evaluation plumbing
# --------------------------------------------------------------------------

def final_checkpoint(run_dir: str | Path, net: str = "gen_sketch2color") -> Path:
    epoch = latest_checkpoint_epoch(run_dir)
    if epoch is None:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return Path(run_dir) / f"{epoch:03d}_{net}.ckpt"


def generate_images(checkpoint: str | Path, sketch_dir: str | Path,
                    out_dir: str | Path, image_size: int | None = None,
                    limit: int | None = None) -> int:
    """Colorize every sketch in a directory; PNGs keep the source stems."""
    from .data import list_images
    from .fid import _to_uint8
    from PIL import Image

    gen = load_generator(checkpoint)
    if image_size is None:
        image_size = int(torch.load(Path(checkpoint), weights_only=True)
                         ["arch"]["image_size"])
    sketches = list_images(sketch_dir)
    if limit is not None:
        sketches = sketches[:limit]
    if not sketches:
        raise ValueError(f"no sketches in {sketch_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for path in sketches:
            fake = gen(load_sketch(path, image_size)[None])[0]
            Image.fromarray(_to_uint8(fake)).save(out_dir / f"{path.stem}.png")
    return len(sketches)


def evaluate_run(cfg: RunConfig, extractor_spec: str = "small",
                 limit: int | None = None) -> float:
    """FID of a finished run's test-set generations against real test images."""
    run_dir = Path(cfg.run_dir)
    spec = dataset_spec_for(cfg)
    fake_dir = run_dir / "eval_fake"
    generate_images(final_checkpoint(run_dir), spec.split_dir("test", "A"),
                    fake_dir, image_size=cfg.train.image_size, limit=limit)
    extractor = make_extractor(extractor_spec, seed=cfg.train.seed)
    fid = compute_fid(spec.split_dir("test", "B"), fake_dir, extractor,
                      image_size=cfg.train.image_size)
    atomic_write_json(run_dir / "eval.json", {
        "fid": fid,
        "extractor": getattr(extractor, "spec_id", extractor_spec),
        "real_dir": str(spec.split_dir("test", "B")),
        "fake_dir": str(fake_dir),
    })
    return fid


# --------------------------------------------------------------------------
# Ablation sweep over w_b = w_m
# --------------------------------------------------------------------------

@dataclass
class AblationRow:
    weight: float
    fid: float | None
    run_dir: str
    error: str | None = None


def ablate(cfg: RunConfig, grid: list[float], device: str = "cpu",
           extractor_spec: str = "small",
           max_steps: int | None = None) -> list[AblationRow]:
    """One full train+evaluate per grid point, sharing everything but the
    auxiliary weights. A failed leg yields a row with its error, not a crash."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    rows: list[AblationRow] = []
    base_dir = Path(cfg.run_dir)
    for w in grid:
        leg_cfg = cfg.with_weights(w_b=w, w_m=w)
        leg_cfg = type(cfg).from_mapping({**leg_cfg.to_mapping(),
                                          "run_dir": str(base_dir / f"w{w:g}")})
        try:
            train_run(leg_cfg, device=device, max_steps=max_steps)
            fid = evaluate_run(leg_cfg, extractor_spec)
            rows.append(AblationRow(weight=w, fid=fid, run_dir=leg_cfg.run_dir))
        except Exception as exc:  # keep sweeping; mark the leg
            logger.exception("ablation leg w=%g failed", w)
            rows.append(AblationRow(weight=w, fid=None,
                                    run_dir=leg_cfg.run_dir, error=str(exc)))
    best = min((r for r in rows if r.fid is not None),
               key=lambda r: r.fid, default=None)
    atomic_write_json(base_dir / "ablation.json", {
        "grid": grid,
        "rows": [r.__dict__ for r in rows],
        "best_weight": best.weight if best else None,
    })
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    best = min((r for r in rows if r.fid is not None),
               key=lambda r: r.fid, default=None)
    lines = ["| w_b = w_m | FID |", "|---|---|"]
    for r in rows:
        fid = "failed" if r.fid is None else f"{r.fid:.4f}"
        mark = " **(best)**" if best is not None and r is best else ""
        lines.append(f"| {r.weight:g} | {fid}{mark} |")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Comparison report across finished runs
# --------------------------------------------------------------------------

def report(run_dirs: list[str | Path], out_dir: str | Path | None = None,
           extractor_spec: str = "small") -> list[dict]:
    """Dataset x variant FID table from finished run directories.

    Rows with missing manifests, checkpoints, or datasets are marked absent
    rather than dropped, so a partial sweep still reports cleanly.
    """
    rows: list[dict] = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest = RunManifest.try_load(run_dir)
        if manifest is None:
            rows.append({"run": run_dir.name, "dataset": "?", "variant": "?",
                         "fid": None, "note": "no manifest"})
            continue
        cfg = RunConfig.from_mapping(manifest.config)
        weights = cfg.variant.weights
        if weights.w_b == 0 and weights.w_m == 0:
            label = "baseline"
        else:
            label = VARIANT_LABELS[cfg.variant.variant.value]
        row = {"run": run_dir.name, "dataset": manifest.dataset,
               "variant": label, "fid": None, "note": ""}
        try:
            eval_json = run_dir / "eval.json"
            if eval_json.is_file():
                import json
                row["fid"] = json.loads(eval_json.read_text())["fid"]
            else:
                row["fid"] = evaluate_run(cfg, extractor_spec)
        except Exception as exc:
            row["note"] = f"absent ({exc})"
        rows.append(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "report.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["run", "dataset", "variant",
                                                    "fid", "note"])
            writer.writeheader()
            writer.writerows(rows)
        (out_dir / "report.md").write_text(format_report(rows) + "\n")
    return rows


def format_report(rows: list[dict]) -> str:
    lines = ["| run | dataset | variant | FID |", "|---|---|---|---|"]
    for row in rows:
        fid = f"{row['fid']:.4f}" if row["fid"] is not None else row["note"] or "absent"
        lines.append(f"| {row['run']} | {row['dataset']} | {row['variant']} | {fid} |")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Survey content export
# --------------------------------------------------------------------------

def survey_export(dataset: str, sketch_dir: str | Path,
                  baseline_ckpt: str | Path, ours_ckpt: str | Path,
                  content_root: str | Path, image_size: int | None = None,
                  limit: int | None = None) -> dict[str, int]:
    """Generate matching-stem images from both models into the survey
    service's content directory: ``{root}/{dataset}/{baseline,ours}/``."""
    content_root = Path(content_root)
    counts = {}
    for model, ckpt in (("baseline", baseline_ckpt), ("ours", ours_ckpt)):
        counts[model] = generate_images(ckpt, sketch_dir,
                                        content_root / dataset / model,
                                        image_size=image_size, limit=limit)
    return counts


__all__ = [
    "AblationRow", "ResumeMismatchError", "RunManifest", "ablate",
    "build_trainer", "code_digest", "dataset_spec_for", "emit_sample_grid",
    "evaluate_run", "final_checkpoint", "format_ablation", "format_report",
    "generate_images", "report", "survey_export", "train_run",
]
