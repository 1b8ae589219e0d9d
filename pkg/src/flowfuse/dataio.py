"""Data plumbing: synthetic phantoms, image files, manifests, checkpoints.

Phantoms are random-ellipse anatomies rendered through per-modality monotone
intensity maps (plus optional modality-private additive detail), standing in
for clinical registered pairs at desk scale. Images travel as binary PGM
(P5, 8- or 16-bit) and PPM (P6, 8-bit) files; datasets are described by a
line-oriented manifest; trained models persist in a versioned ``.ivan``
container (text manifest + raw little-endian float32 blobs) whose round
trip is bitwise lossless.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationPlan, Modality
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .flow import FlowModel, build_model, named_parameters, set_parameter
from .numerics import make_rng, require_finite
from .training import TrainConfig

CHECKPOINT_MAGIC = "IVAN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# intensity maps and phantom generation

def _smoothstep(a: np.ndarray) -> np.ndarray:
    return a * a * (3.0 - 2.0 * a)


# each map is monotone on [0, 1] -> [0, 1], per channel
INTENSITY_MAPS = {
    "t1": lambda a: (a,),
    "t2": lambda a: (1.0 - a,),
    "pd": lambda a: (np.sqrt(a),),  # gamma 0.5
    "ct": lambda a: (a * a,),  # gamma 2
    "fused": lambda a: (_smoothstep(a),),
    "pet": lambda a: (a, a * a, np.sqrt(a)),  # color: per-channel monotone triple
}


@dataclass(frozen=True)
class ModalityRecipe:
    """How one phantom modality is rendered from the shared anatomy."""

    name: str
    map_name: str = "t1"
    role: str = "source"
    window: tuple | None = None  # (lo, hi) saturating contrast window on anatomy
    detail: bool = False  # add modality-private ellipses (invisible elsewhere)

    @property
    def channels(self) -> int:
        return 3 if self.map_name == "pet" else 1

    def to_modality(self) -> Modality:
        return Modality(self.name, self.channels, self.role)


@dataclass
class PhantomSpec:
    """Deterministic recipe for a registered multi-modal phantom dataset."""

    seed: int = 0
    size: int = 32
    count: int = 10
    ellipses: tuple = (3, 6)
    recipes: list = field(default_factory=lambda: [
        ModalityRecipe("t1", "t1", "source"),
        ModalityRecipe("pd", "pd", "source"),
        ModalityRecipe("t2", "t2", "target"),
    ])
    background: float = 0.1
    background_jitter: float = 0.0  # per-image uniform jitter of the background level
    detail_amplitude: float = 0.25


def modality_values(recipe: ModalityRecipe, anatomy: np.ndarray) -> np.ndarray:
    """Render one modality from anatomy in [0, 1]; output (channels, H, W) in [-1, 1]."""
    if recipe.map_name not in INTENSITY_MAPS:
        raise ConfigError(f"unknown intensity map {recipe.map_name!r}; "
                          f"known: {sorted(INTENSITY_MAPS)}")
    a = np.clip(anatomy, 0.0, 1.0)
    if recipe.window is not None:
        lo, hi = recipe.window
        if not lo < hi:
            raise ConfigError(f"window must satisfy lo < hi, got {recipe.window}")
        a = (np.clip(a, lo, hi) - lo) / (hi - lo)
    channels = INTENSITY_MAPS[recipe.map_name](a)
    return np.stack([2.0 * ch - 1.0 for ch in channels]).astype(np.float32)


def _render_ellipses(rng: np.random.Generator, size: int, n_ellipses: int,
                     amp_range: tuple) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    canvas = np.zeros((size, size))
    for _ in range(n_ellipses):
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, size=2)
        ax, ay = rng.uniform(0.08 * size, 0.30 * size, size=2)
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(*amp_range)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        canvas += amp * ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0)
    return canvas


def generate_phantoms(spec: PhantomSpec) -> dict:
    """Render the dataset: {modality name: (count, channels, H, W) in [-1, 1]}.

    All modalities of a record share one anatomy, so they are registered by
    construction. Content is a pure function of the spec.
    """
    if spec.count < 1:
        raise ConfigError(f"phantom count must be >= 1, got {spec.count}")
    if not spec.recipes:
        raise ConfigError("phantom spec needs at least one modality recipe")
    lo, hi = spec.ellipses
    rng = make_rng(spec.seed)
    out = {r.name: np.empty((spec.count, r.channels, spec.size, spec.size),
                            dtype=np.float32) for r in spec.recipes}
    for index in range(spec.count):
        background = spec.background
        if spec.background_jitter > 0.0:
            background += rng.uniform(-spec.background_jitter, spec.background_jitter)
        anatomy = background + _render_ellipses(rng, spec.size, int(rng.integers(lo, hi + 1)),
                                                (0.15, 0.45))
        anatomy = np.clip(anatomy, 0.0, 1.0)
        for position, recipe in enumerate(spec.recipes):
            values = modality_values(recipe, anatomy)
            if recipe.detail:
                # detail noise comes from its own spawned stream so that
                # toggling it never shifts the shared-anatomy sequence
                detail_rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=spec.seed,
                                           spawn_key=(1, index, position)))
                extra = _render_ellipses(detail_rng, spec.size,
                                         int(detail_rng.integers(1, 4)),
                                         (0.4 * spec.detail_amplitude, spec.detail_amplitude))
                sign = 1.0 if detail_rng.uniform() < 0.5 else -1.0
                values = np.clip(values + sign * extra.astype(np.float32), -1.0, 1.0)
            out[recipe.name][index] = values
    return out


# ---------------------------------------------------------------------------
# normalization and rotation

def normalize(x: np.ndarray, declared_range: tuple) -> np.ndarray:
    """Affine map of the declared range onto [-1, 1]; out-of-range values clamp."""
    lo, hi = float(declared_range[0]), float(declared_range[1])
    if not lo < hi:
        raise ConfigError(f"declared range must satisfy lo < hi, got {declared_range}")
    clipped = np.clip(np.asarray(x, dtype=np.float32), lo, hi)
    return (clipped - lo) * np.float32(2.0 / (hi - lo)) - np.float32(1.0)


def denormalize(y: np.ndarray, declared_range: tuple) -> np.ndarray:
    """Inverse of :func:`normalize` (without requantization)."""
    lo, hi = float(declared_range[0]), float(declared_range[1])
    if not lo < hi:
        raise ConfigError(f"declared range must satisfy lo < hi, got {declared_range}")
    return (np.asarray(y, dtype=np.float32) + np.float32(1.0)) * np.float32((hi - lo) / 2.0) + np.float32(lo)


ROTATION_ANGLES = (0, 90, 180, 270)


def rotate_augment(x: np.ndarray, angles) -> list:
    """Exact counter-clockwise right-angle rotations of the spatial axes."""
    out = []
    for angle in angles:
        if angle not in ROTATION_ANGLES:
            raise ConfigError(f"unsupported rotation {angle}; allowed: {ROTATION_ANGLES}")
        out.append(np.rot90(x, k=angle // 90, axes=(-2, -1)).copy())
    return out


# ---------------------------------------------------------------------------
# PGM / PPM image files

def save_image(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write integer-valued pixels as binary PGM (1 channel) or PPM (3 channels).

    ``image`` is (channels, H, W) or (1, channels, H, W) with values already
    quantized into [0, maxval]. 16-bit PGM uses the big-endian convention.
    """
    arr = np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"save_image expects a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"save_image expects (1|3, H, W), got {arr.shape}")
    if not 1 <= maxval <= 65535:
        raise ConfigError(f"maxval must be in [1, 65535], got {maxval}")
    channels, height, width = arr.shape
    if channels == 3 and maxval > 255:
        raise ConfigError("PPM output supports 8-bit only (maxval <= 255)")
    values = np.rint(np.clip(arr, 0, maxval)).astype(np.uint16 if maxval > 255 else np.uint8)
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n{maxval}\n".encode("ascii")
    raster = values.transpose(1, 2, 0)  # interleave channels per pixel
    if maxval > 255:
        raster = raster.astype(">u2")
    _atomic_write(path, header + raster.tobytes())


def load_image(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM/PPM; returns ((1, channels, H, W) float32 raw values, maxval)."""
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    magic = stream.read(2)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r} (need binary P5/P6)")
    try:
        width = _read_pnm_token(stream)
        height = _read_pnm_token(stream)
        maxval = _read_pnm_token(stream)
    except ValueError as exc:
        raise DataError(f"{path}: malformed header: {exc}") from None
    if not 1 <= maxval <= 65535:
        raise DataError(f"{path}: maxval {maxval} out of range")
    channels = 1 if magic == b"P5" else 3
    if channels == 3 and maxval > 255:
        raise DataError(f"{path}: 16-bit PPM is not supported")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = stream.read()
    if len(raster) < expected:
        raise DataError(f"{path}: truncated raster ({len(raster)} < {expected} bytes)")
    pixels = np.frombuffer(raster[:expected], dtype=dtype).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1)[None].astype(np.float32), maxval


def _read_pnm_token(stream: io.BytesIO) -> int:
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            raise ValueError("unexpected end of header")
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                break
            continue
        if not ch.isdigit():
            raise ValueError(f"unexpected byte {ch!r}")
        token += ch
    return int(token)


def quantize(normalized: np.ndarray, maxval: int) -> np.ndarray:
    """[-1, 1] values -> integer-valued float array in [0, maxval]."""
    scaled = (np.clip(normalized, -1.0, 1.0) + 1.0) * (maxval / 2.0)
    return np.rint(scaled)


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass
class ManifestRecord:
    id: str
    split: str
    paths: dict  # modality name -> path relative to the manifest


@dataclass
class DatasetManifest:
    modalities: list  # of Modality
    ranges: dict  # modality name -> (lo, hi)
    records: list  # of ManifestRecord
    base_dir: Path = Path(".")

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def modality(self, name: str) -> Modality:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigError(f"manifest does not declare modality {name!r}")


def save_manifest(path, manifest: DatasetManifest) -> None:
    lines = ["# flowfuse dataset manifest"]
    for m in manifest.modalities:
        lo, hi = manifest.ranges[m.name]
        lines.append(f"modality {m.name} channels={m.channels} role={m.role} "
                     f"range={lo:g}:{hi:g}")
    for rec in manifest.records:
        pairs = " ".join(f"{name}={rel}" for name, rel in rec.paths.items())
        lines.append(f"record {rec.id} split={rec.split} {pairs}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    modalities, ranges, records = [], {}, []
    seen_ids = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind = fields[0]
        try:
            if kind == "modality":
                name = fields[1]
                kv = dict(f.split("=", 1) for f in fields[2:])
                lo, hi = kv["range"].split(":")
                modalities.append(Modality(name, int(kv["channels"]), kv["role"]))
                ranges[name] = (float(lo), float(hi))
            elif kind == "record":
                rec_id = fields[1]
                kv = dict(f.split("=", 1) for f in fields[2:])
                split = kv.pop("split")
                if split not in ("train", "test"):
                    raise ValueError(f"bad split {split!r}")
                if rec_id in seen_ids:
                    raise ValueError(f"duplicate record id {rec_id!r}")
                seen_ids.add(rec_id)
                records.append(ManifestRecord(rec_id, split, kv))
            else:
                raise ValueError(f"unknown line kind {kind!r}")
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if not modalities:
        raise DataError(f"{path}: no modalities declared")
    declared = {m.name for m in modalities}
    for rec in records:
        missing = declared - set(rec.paths)
        if missing:
            raise DataError(f"{path}: record {rec.id} lacks files for {sorted(missing)}")
    return DatasetManifest(modalities, ranges, records, base_dir=path.parent)


def load_split(manifest: DatasetManifest, split: str) -> tuple[list, dict]:
    """Load and normalize every record of a split.

    Returns (record ids, {modality: (N, channels, H, W) float32 in [-1, 1]}).
    """
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"manifest has no records for split {split!r}")
    stacks: dict = {m.name: [] for m in manifest.modalities}
    shape = None
    for rec in records:
        for m in manifest.modalities:
            img, _ = load_image(manifest.base_dir / rec.paths[m.name])
            if img.shape[1] != m.channels:
                raise DataError(f"record {rec.id} modality {m.name}: "
                                f"{img.shape[1]} channels, manifest declares {m.channels}")
            if shape is None:
                shape = img.shape[2:]
            elif img.shape[2:] != shape:
                raise DataError(f"record {rec.id} modality {m.name}: spatial size "
                                f"{img.shape[2:]} differs from {shape} (unregistered?)")
            stacks[m.name].append(normalize(img[0], manifest.ranges[m.name]))
    return [r.id for r in records], {name: np.stack(v) for name, v in stacks.items()}


# ---------------------------------------------------------------------------
# checkpoints

def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_checkpoint(path, model: FlowModel, plan: AugmentationPlan | None = None,
                    train_config: TrainConfig | None = None, epoch: int = 0) -> None:
    """Write the ``.ivan`` container: header, JSON manifest, raw float32 blobs."""
    params = named_parameters(model)
    entries, blobs, offset = [], [], 0
    for name, arr in params:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "model": {"channels": model.channels, "blocks": model.n_blocks,
                  "hidden": model.hidden, "s_clamp": model.s_clamp,
                  "slope": model.slope},
        "plan": plan.to_dict() if plan is not None else None,
        "train": train_config.to_dict() if train_config is not None else None,
        "params": entries,
        "blob_nbytes": offset,
    }
    body = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    head = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{len(body)}\n".encode("ascii")
    _atomic_write(path, head + body + b"\n" + b"".join(blobs))


def load_checkpoint(path) -> tuple[FlowModel, AugmentationPlan | None,
                                   TrainConfig | None, int]:
    """Read a ``.ivan`` container back; parameters are restored bit for bit."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    try:
        magic_line, rest = data.split(b"\n", 1)
        length_line, rest = rest.split(b"\n", 1)
        magic, version = magic_line.decode("ascii").split()
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: not a checkpoint container") from None
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    manifest_len = int(length_line)
    body = rest[:manifest_len]
    blob = rest[manifest_len + 1:]  # skip the newline after the manifest
    try:
        manifest = json.loads(body.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: manifest format version mismatch")
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointError(f"{path}: blob length {len(blob)} != declared "
                              f"{manifest['blob_nbytes']} (corrupt or truncated)")

    spec = manifest["model"]
    model = build_model(spec["channels"], spec["blocks"], spec["hidden"],
                        spec["s_clamp"], spec["slope"])
    declared = {name for name, _ in named_parameters(model)}
    seen = set()
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if name not in declared:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        count = int(np.prod(shape)) if shape else 1
        if nbytes != 4 * count or start + nbytes > len(blob):
            raise CheckpointError(f"{path}: bad blob slice for {name!r}")
        value = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        set_parameter(model, name, value.reshape(shape).copy())
        seen.add(name)
    if seen != declared:
        raise CheckpointError(f"{path}: missing parameters {sorted(declared - seen)}")
    for name, arr in named_parameters(model):
        require_finite(arr, f"checkpoint parameter {name}")

    plan = (AugmentationPlan.from_dict(manifest["plan"])
            if manifest.get("plan") else None)
    train_config = (TrainConfig.from_dict(manifest["train"])
                    if manifest.get("train") else None)
    model.plan = plan
    model.provenance = {"epoch": manifest["epoch"], "path": str(path)}
    return model, plan, train_config, manifest["epoch"]
