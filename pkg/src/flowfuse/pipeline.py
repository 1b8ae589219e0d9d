"""The operations behind every service endpoint and CLI command.

Each ``run_*`` function takes a validated request model, performs the whole
operation (file I/O included), and returns a response model. The FastAPI
app and the CLI are both thin clients of this module, so a training run
behaves identically whether it was triggered over HTTP or from the shell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as qm
from .augment import AugmentationPlan, Modality, augment, deaugment, plan_for
from .dataio import (
    DatasetManifest,
    ManifestRecord,
    ModalityRecipe,
    PhantomSpec,
    _atomic_write,
    denormalize,
    generate_phantoms,
    load_checkpoint,
    load_image,
    load_manifest,
    load_split,
    normalize,
    quantize,
    save_checkpoint,
    save_image,
    save_manifest,
)
from .errors import ConfigError, DataError
from .flow import init_model, model_astype, model_forward, model_inverse, named_parameters
from .numerics import make_rng
from .service.schemas import (
    EvaluateRequest,
    EvaluateResponse,
    FuseRequest,
    GradcheckRequest,
    GradcheckResponse,
    InferRequest,
    InferResponse,
    LossSummary,
    MetricAggregate,
    PhantomsRequest,
    PhantomsResponse,
    RoundtripRequest,
    RoundtripResponse,
    TrainRequest,
    TrainResponse,
)
from .training import TrainConfig, grad_check, loss_and_gradients, train


# ---------------------------------------------------------------------------
# phantom task presets

@dataclass(frozen=True)
class PhantomTask:
    """A named desk-scale experiment: modality recipes plus generator knobs."""

    recipes: tuple
    min_channels: int = 0
    background: float = 0.1
    background_jitter: float = 0.0
    note: str = ""


PHANTOM_TASKS = {
    # classic multi-contrast synthesis: both sources determine the target
    "t1pd-t2": PhantomTask(
        recipes=(ModalityRecipe("t1", "t1", "source"),
                 ModalityRecipe("pd", "pd", "source"),
                 ModalityRecipe("t2", "t2", "target")),
        note="two full-contrast sources, flipped-contrast target"),
    "t1-t2": PhantomTask(
        recipes=(ModalityRecipe("t1", "t1", "source"),
                 ModalityRecipe("t2", "t2", "target")),
        note="one-source variant of t1pd-t2"),
    # grayscale-to-color synthesis; six channels by default
    "t1t2-pet": PhantomTask(
        recipes=(ModalityRecipe("t1", "t1", "source"),
                 ModalityRecipe("t2", "t2", "source"),
                 ModalityRecipe("pet", "pet", "target")),
        min_channels=6,
        note="color target; lower --min-channels for the narrow variant"),
    # complementary intensity windows: each source sees part of the range
    "windows2": PhantomTask(
        recipes=(ModalityRecipe("lowband", "t1", "source", window=(0.05, 0.55)),
                 ModalityRecipe("highband", "t1", "source", window=(0.45, 0.95)),
                 ModalityRecipe("full", "t1", "target", window=(0.02, 0.98))),
        note="target recoverable only from both windows together"),
    "windows1": PhantomTask(
        recipes=(ModalityRecipe("lowband", "t1", "source", window=(0.05, 0.55)),
                 ModalityRecipe("full", "t1", "target", window=(0.02, 0.98))),
        note="one-window control for windows2"),
    # fusion: windowed sources, full-range linear fused target; the random
    # background sits below both source windows, so the forward direction
    # has an irreducible floor while inverse recovery stays deterministic
    # (the linear target keeps the recovery maps well-conditioned)
    "fusion": PhantomTask(
        recipes=(ModalityRecipe("t2", "t2", "source", window=(0.12, 0.72)),
                 ModalityRecipe("ct", "ct", "source", window=(0.30, 0.90)),
                 ModalityRecipe("fused", "t1", "target", window=(0.0, 0.98))),
        background=0.03,
        background_jitter=0.03,
        note="complementary windows fused into one full-range image"),
}


def phantom_spec_for(task: str, seed: int, size: int, count: int) -> PhantomSpec:
    if task not in PHANTOM_TASKS:
        raise ConfigError(f"unknown phantom task {task!r}; known: {sorted(PHANTOM_TASKS)}")
    preset = PHANTOM_TASKS[task]
    return PhantomSpec(seed=seed, size=size, count=count,
                       recipes=list(preset.recipes),
                       background=preset.background,
                       background_jitter=preset.background_jitter)


# ---------------------------------------------------------------------------
# helpers

def _format_row(values) -> str:
    return ",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in values)


def _modalities_by_role(modalities) -> tuple[list, list]:
    sources = [m for m in modalities if m.role == "source"]
    targets = [m for m in modalities if m.role == "target"]
    if not sources or not targets:
        raise ConfigError("need at least one source and one target modality "
                          f"(got roles {[m.role for m in modalities]})")
    return sources, targets


def _prediction_path(out_dir: Path, record_id: str, modality: Modality) -> Path:
    suffix = ".ppm" if modality.channels == 3 else ".pgm"
    return out_dir / f"{record_id}_{modality.name}{suffix}"


def _write_prediction(path: Path, normalized: np.ndarray, channels: int) -> None:
    maxval = 255 if channels == 3 else 65535
    save_image(path, quantize(normalized, maxval), maxval)


def echo_config(command: str, request) -> str:
    """Render the resolved request as a re-runnable flat config file."""
    lines = [f"# flowfuse {command} - resolved configuration"]
    for key, value in request.model_dump(by_alias=True).items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _write_config_echo(out: Path, command: str, request) -> None:
    _atomic_write(out / "config.txt", echo_config(command, request).encode("utf-8"))


# ---------------------------------------------------------------------------
# train

def run_train(req: TrainRequest) -> TrainResponse:
    if (req.manifest is None) == (req.task is None):
        raise ConfigError("train needs exactly one data source: manifest= or task=")
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, "train", req)

    if req.manifest is not None:
        manifest = load_manifest(req.manifest)
        sources, targets = _modalities_by_role(manifest.modalities)
        _, data = load_split(manifest, "train")
        provenance = {"data": str(req.manifest)}
        min_channels = req.min_channels
    else:
        spec = phantom_spec_for(req.task, req.phantom_seed, req.phantom_size,
                                req.phantom_count)
        if not 0 <= req.phantom_test < req.phantom_count:
            raise ConfigError("phantom_test must be smaller than phantom_count")
        n_train = req.phantom_count - req.phantom_test
        full = generate_phantoms(spec)
        data = {name: arr[:n_train] for name, arr in full.items()}
        modalities = [r.to_modality() for r in spec.recipes]
        sources, targets = _modalities_by_role(modalities)
        provenance = {"data": f"phantom:{req.task}", "phantom_seed": req.phantom_seed}
        min_channels = max(req.min_channels, PHANTOM_TASKS[req.task].min_channels)

    plan = plan_for(sources, targets, min_channels)
    plan.dedup_rule = req.dedup_rule
    model = init_model(plan.channels, req.blocks, req.hidden, make_rng(req.seed),
                       req.s_clamp, req.slope)
    model.plan = plan
    model.provenance = provenance
    cfg = TrainConfig(lam=req.lam, loss_norm=req.loss_norm, epochs=req.epochs,
                      lr0=req.lr0, halve_every=req.halve_every,
                      batch_size=req.batch_size, seed=req.seed,
                      grad_clip=req.grad_clip)

    rows = ["epoch,lr,loss_total,loss_forward,loss_backward"]

    def on_epoch(stats):
        rows.append(_format_row([stats.epoch, stats.lr, stats.loss_total,
                                 stats.loss_forward, stats.loss_backward]))
        if (stats.epoch + 1) % cfg.halve_every == 0 and (stats.epoch + 1) < cfg.epochs:
            save_checkpoint(out / f"checkpoint_epoch{stats.epoch + 1:04d}.ivan",
                            model, plan, cfg, stats.epoch + 1)

    model, log = train(model, data, plan, cfg, on_epoch=on_epoch)

    loss_csv = out / "loss.csv"
    _atomic_write(loss_csv, ("\n".join(rows) + "\n").encode("ascii"))
    checkpoint = out / "checkpoint_final.ivan"
    save_checkpoint(checkpoint, model, plan, cfg, cfg.epochs)
    final = None
    if log:
        final = LossSummary(total=log[-1].loss_total, forward=log[-1].loss_forward,
                            backward=log[-1].loss_backward)
    return TrainResponse(out=str(out), checkpoint=str(checkpoint),
                         loss_csv=str(loss_csv), channels=plan.channels,
                         epochs_run=len(log), final=final)


# ---------------------------------------------------------------------------
# inference and fusion

def _load_side(manifest: DatasetManifest, split: str, plan: AugmentationPlan,
               side: str) -> tuple[list, dict]:
    needed = {name for name, _ in plan.layout(side)}
    declared = {m.name for m in manifest.modalities}
    missing = needed - declared
    if missing:
        raise DataError(f"manifest lacks the checkpoint's {side} modalities: "
                        f"{sorted(missing)}")
    ids, data = load_split(manifest, split)
    return ids, data


def run_infer(req: InferRequest) -> InferResponse:
    model, plan, _, _ = load_checkpoint(req.checkpoint)
    if plan is None:
        raise DataError(f"{req.checkpoint}: checkpoint carries no augmentation plan")
    manifest = load_manifest(req.manifest)
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, "infer", req)

    in_side, out_side = (("source", "target") if req.direction == "forward"
                         else ("target", "source"))
    ids, data = _load_side(manifest, req.split, plan, in_side)
    stacked = augment(plan, data, in_side)
    result = model_forward(model, stacked) if req.direction == "forward" \
        else model_inverse(model, stacked)
    per_modality = deaugment(plan, result, out_side)

    files = []
    out_modalities = plan.modalities(out_side)
    for row, record_id in enumerate(ids):
        for modality in out_modalities:
            path = _prediction_path(out, record_id, modality)
            _write_prediction(path, per_modality[modality.name][row], modality.channels)
            files.append(str(path))
    return InferResponse(out=str(out), direction=req.direction, count=len(ids),
                         files=files)


def run_fuse(req: FuseRequest) -> InferResponse:
    model, plan, _, _ = load_checkpoint(req.checkpoint)
    if plan is None:
        raise DataError(f"{req.checkpoint}: checkpoint carries no augmentation plan")
    if len(plan.targets) != 1:
        raise ConfigError("fuse needs a checkpoint trained with exactly one "
                          f"target modality (found {len(plan.targets)})")
    if len(plan.sources) < 2:
        raise ConfigError("fuse needs a checkpoint trained with at least two "
                          "source modalities")
    return run_infer(InferRequest(checkpoint=req.checkpoint, manifest=req.manifest,
                                  out=req.out, direction="forward", split=req.split))


# ---------------------------------------------------------------------------
# evaluate

def run_evaluate(req: EvaluateRequest) -> EvaluateResponse:
    manifest = load_manifest(req.manifest)
    pred_dir = Path(req.pred_dir)
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, "evaluate", req)

    sources, targets = _modalities_by_role(manifest.modalities)
    cfg = qm.MetricConfig(ssim_window=req.ssim_window,
                          entropy_levels=req.entropy_levels,
                          piella_window=req.piella_window,
                          dynamic_range=req.dynamic_range,
                          value_range=(-1.0, 1.0))
    ids, data = load_split(manifest, req.split)

    report = qm.MetricReport()
    for row, record_id in enumerate(ids):
        for modality in targets:
            path = _prediction_path(pred_dir, record_id, modality)
            if not path.is_file():
                raise DataError(f"missing prediction for record {record_id!r}: {path}")
            raw, maxval = load_image(path)
            pred = normalize(raw[0], (0, maxval))
            ref = data[modality.name][row]
            if pred.shape != ref.shape:
                raise DataError(f"{path}: prediction shape {pred.shape} does not "
                                f"match reference {ref.shape}")
            values = {
                "psnr": qm.psnr(ref, pred, cfg),
                "ssim": qm.ssim(ref, pred, cfg),
                "nmse": qm.nmse(ref, pred),
                "ag": qm.avg_gradient(qm.to_gray(pred)),
                "sf": qm.spatial_frequency(qm.to_gray(pred)),
                "en": qm.entropy(qm.to_gray(pred), cfg),
            }
            if len(sources) >= 2 and len(targets) == 1:
                x1 = qm.to_gray(data[sources[0].name][row])
                x2 = qm.to_gray(data[sources[1].name][row])
                fused = qm.to_gray(pred)
                values["qmi"] = qm.q_mi(x1, x2, fused, cfg)
                values["qp"] = qm.q_piella(x1, x2, fused, cfg)
            row_id = record_id if len(targets) == 1 else f"{record_id}:{modality.name}"
            report.add(row_id, values)

    csv_path = out / "metrics.csv"
    _atomic_write(csv_path, report.to_csv().encode("utf-8"))
    aggregates = {name: MetricAggregate(mean=mean, std=std)
                  for name, (mean, std) in report.aggregates().items()}
    return EvaluateResponse(out=str(out), csv=str(csv_path), rows=len(report.ids),
                            aggregates=aggregates)


# ---------------------------------------------------------------------------
# checks

def run_roundtrip_check(req: RoundtripRequest) -> RoundtripResponse:
    model, _, _, _ = load_checkpoint(req.checkpoint)
    rng = make_rng(req.seed)
    x32 = rng.uniform(-1.0, 1.0,
                      size=(req.samples, model.channels, req.size, req.size)
                      ).astype(np.float32)
    err32 = float(np.abs(model_inverse(model, model_forward(model, x32)) - x32).max())
    model64 = model_astype(model, np.float64)
    x64 = x32.astype(np.float64)
    err64 = float(np.abs(model_inverse(model64, model_forward(model64, x64)) - x64).max())
    return RoundtripResponse(passed=bool(err32 <= req.tol32 and err64 <= req.tol64),
                             max_abs_float32=err32, max_abs_float64=err64,
                             tol32=req.tol32, tol64=req.tol64)


def run_gradcheck(req: GradcheckRequest) -> GradcheckResponse:
    rng = make_rng(req.seed)
    model = init_model(req.channels, req.blocks, req.hidden, rng, dtype=np.float64)
    for _, arr in named_parameters(model):
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    x = rng.normal(size=(req.batch, req.channels, req.size, req.size))
    y = rng.normal(size=(req.batch, req.channels, req.size, req.size))
    cfg = TrainConfig(lam=req.lam, loss_norm=req.loss_norm, epochs=1, seed=req.seed)
    report = grad_check(model, x, y, cfg, step=req.step)
    worst = report.worst
    return GradcheckResponse(passed=report.passed(req.tol),
                             max_rel_error=report.max_rel_error,
                             worst_param=worst.name if worst else None,
                             tol=req.tol)


# ---------------------------------------------------------------------------
# phantom dataset on disk

def run_make_phantoms(req: PhantomsRequest) -> PhantomsResponse:
    if not 0 <= req.test_count < req.count:
        raise ConfigError("test_count must be smaller than count")
    spec = phantom_spec_for(req.task, req.seed, req.size, req.count)
    data = generate_phantoms(spec)
    out = Path(req.out)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    _write_config_echo(out, "make-phantoms", req)

    modalities = [r.to_modality() for r in spec.recipes]
    ranges = {}
    records = []
    n_train = req.count - req.test_count
    width = len(str(req.count - 1))
    for index in range(req.count):
        record_id = f"p{index:0{width}d}"
        split = "train" if index < n_train else "test"
        paths = {}
        for modality in modalities:
            maxval = 255 if modality.channels == 3 else req.maxval
            suffix = ".ppm" if modality.channels == 3 else ".pgm"
            rel = f"images/{record_id}_{modality.name}{suffix}"
            save_image(out / rel, quantize(data[modality.name][index], maxval), maxval)
            paths[modality.name] = rel
            ranges[modality.name] = (0.0, float(maxval))
        records.append(ManifestRecord(record_id, split, paths))

    manifest = DatasetManifest(modalities, ranges, records, base_dir=out)
    manifest_path = out / "manifest.txt"
    save_manifest(manifest_path, manifest)
    return PhantomsResponse(out=str(out), manifest=str(manifest_path),
                            train_count=n_train, test_count=req.test_count,
                            modalities=[m.name for m in modalities])
