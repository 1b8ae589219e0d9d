"""Pydantic request/response models for the service and the CLI client.

Every request rejects unknown keys, so a config file with a misspelled key
fails loudly instead of being silently ignored. The same models double as
the fully-resolved run configuration that every command echoes at startup.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TrainRequest(StrictModel):
    out: str
    manifest: Optional[str] = None  # dataset manifest path; mutually exclusive with task
    task: Optional[str] = None  # built-in phantom task preset
    phantom_count: int = 250  # total phantom images (train = count - test)
    phantom_test: int = 50
    phantom_size: int = 32
    phantom_seed: int = 11
    blocks: int = 4
    hidden: int = 32
    min_channels: int = 0  # raise to widen the augmented channel count
    s_clamp: float = 2.0
    slope: float = 0.2
    epochs: int = 300
    lr0: float = 1e-4
    halve_every: int = 50
    batch_size: int = 8
    lam: float = Field(1.0, alias="lambda")
    loss_norm: Literal["l1", "l2"] = "l2"
    seed: int = 0
    grad_clip: Optional[float] = None
    dedup_rule: Literal["mean", "first"] = "mean"


class LossSummary(StrictModel):
    total: float
    forward: float
    backward: float


class TrainResponse(StrictModel):
    out: str
    checkpoint: str
    loss_csv: str
    channels: int
    epochs_run: int
    final: Optional[LossSummary] = None


class InferRequest(StrictModel):
    checkpoint: str
    manifest: str
    out: str
    direction: Literal["forward", "inverse"] = "forward"
    split: Literal["train", "test"] = "test"


class InferResponse(StrictModel):
    out: str
    direction: str
    count: int
    files: list[str]


class FuseRequest(StrictModel):
    checkpoint: str
    manifest: str
    out: str
    split: Literal["train", "test"] = "test"


class EvaluateRequest(StrictModel):
    manifest: str
    pred_dir: str
    out: str
    split: Literal["train", "test"] = "test"
    ssim_window: int = 11
    entropy_levels: int = 256
    piella_window: int = 7
    dynamic_range: Optional[float] = None  # None: per-image reference max


class MetricAggregate(StrictModel):
    mean: float
    std: float


class EvaluateResponse(StrictModel):
    out: str
    csv: str
    rows: int
    aggregates: dict[str, MetricAggregate]


class RoundtripRequest(StrictModel):
    checkpoint: str
    seed: int = 0
    samples: int = 8
    size: int = 16
    tol32: float = 1e-3
    tol64: float = 1e-8


class RoundtripResponse(StrictModel):
    passed: bool
    max_abs_float32: float
    max_abs_float64: float
    tol32: float
    tol64: float


class GradcheckRequest(StrictModel):
    blocks: int = 2
    hidden: int = 8
    channels: int = 2
    size: int = 8
    batch: int = 1
    seed: int = 0
    step: float = 1e-5
    tol: float = 1e-4
    lam: float = Field(1.0, alias="lambda")
    loss_norm: Literal["l1", "l2"] = "l2"


class GradcheckResponse(StrictModel):
    passed: bool
    max_rel_error: float
    worst_param: Optional[str] = None
    tol: float


class PhantomsRequest(StrictModel):
    out: str
    task: str = "t1pd-t2"
    count: int = 250
    test_count: int = 50
    size: int = 32
    seed: int = 11
    maxval: int = 65535  # grayscale bit depth; color modalities always use 255


class PhantomsResponse(StrictModel):
    out: str
    manifest: str
    train_count: int
    test_count: int
    modalities: list[str]


class ErrorResponse(StrictModel):
    kind: Literal["config", "data", "check", "internal"]
    message: str


class HealthResponse(StrictModel):
    status: str
    version: str
