#!/usr/bin/env python3
"""
Synthetic video/caption/mask/sketch generation and the on-disk dataset format.

Scenes are a single moving object (square, circle or triangle) over a flat
background. Every sample carries the clip, per-frame object masks (the region
to inpaint), a binary edge sketch of the object and a template caption such
as "a red square moves right". This module also implements the two masking
strategies used during autoencoder pretraining (random patches and a single
fully masked frame) and the cosine ratio schedule that drives them.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pandera.errors
import torch
from loguru import logger
from PIL import Image
from tqdm import tqdm

from maura.constants import (
    BACKGROUNDS,
    DEFAULT_FPS,
    FPS_VOCAB_SIZE,
    PALETTE,
    SHAPES,
    SPATIAL_DOWNSAMPLE,
    VALID_PATCH_SIZES,
)
from maura.container import atomic_write_bytes, read_array, write_array
from maura.exceptions import ManifestMismatchError, DatasetFormatError, ValidationError
from maura.internal_schemas import validate_manifest

MANIFEST_NAME = "manifest.json"


# Domain types
@dataclass(frozen=True)
class SceneSpec:
    """One moving object over a flat background."""

    shape: str
    color: Tuple[float, float, float]
    velocity: Tuple[float, float] = (0.0, 0.0)  # pixels/frame, (vx, vy)
    start: Tuple[float, float] = (16.0, 16.0)  # object center, (x, y)
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: int = 5

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"Unknown shape '{self.shape}', expected one of {SHAPES}")
        for name in ("color", "background"):
            rgb = getattr(self, name)
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise ValidationError(f"{name}={rgb} must be an RGB triple in [0, 1]")
        if self.radius < 1:
            raise ValidationError(f"radius={self.radius} must be >= 1")

    @property
    def color_name(self) -> str:
        """Nearest palette name for the object color."""
        return min(PALETTE, key=lambda n: sum((a - b) ** 2 for a, b in zip(PALETTE[n], self.color)))

    @property
    def direction(self) -> Optional[str]:
        vx, vy = self.velocity
        if vx == 0 and vy == 0:
            return None
        if abs(vx) >= abs(vy):
            return "right" if vx > 0 else "left"
        return "down" if vy > 0 else "up"

    @property
    def caption(self) -> str:
        if self.direction is None:
            return f"a {self.color_name} {self.shape} stays still"
        return f"a {self.color_name} {self.shape} moves {self.direction}"

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneSpec":
        return cls(
            shape=data["shape"],
            color=tuple(data["color"]),
            velocity=tuple(data["velocity"]),
            start=tuple(data["start"]),
            background=tuple(data["background"]),
            radius=int(data["radius"]),
        )


@dataclass
class VideoClip:
    """Pixel-space video, (N frames, 3 channels, H, W) with values in [0, 1]."""

    pixels: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValidationError(f"VideoClip pixels must be (N, 3, H, W), got {self.pixels.shape}")
        n, _, h, w = self.pixels.shape
        if n < 1:
            raise ValidationError("VideoClip needs at least one frame")
        if h % SPATIAL_DOWNSAMPLE or w % SPATIAL_DOWNSAMPLE:
            raise ValidationError(f"Frame size {h}x{w} must be divisible by {SPATIAL_DOWNSAMPLE}")
        if not np.isfinite(self.pixels).all():
            raise ValidationError("VideoClip contains non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError(
                f"VideoClip values must lie in [0, 1], got [{self.pixels.min()}, {self.pixels.max()}]"
            )
        if not 1 <= int(self.fps) <= FPS_VOCAB_SIZE:
            raise ValidationError(f"fps={self.fps} must be in [1, {FPS_VOCAB_SIZE}]")

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Channel-first tensor (3, N, H, W) as consumed by the autoencoder."""
        return torch.from_numpy(self.pixels).to(dtype).permute(1, 0, 2, 3).contiguous()

    @classmethod
    def from_tensor(cls, x: torch.Tensor, fps: int = DEFAULT_FPS) -> "VideoClip":
        """Inverse of to_tensor for a single (3, N, H, W) tensor."""
        pixels = x.detach().to(torch.float32).permute(1, 0, 2, 3).cpu().numpy()
        return cls(np.clip(pixels, 0.0, 1.0), fps=fps)


@dataclass
class InpaintSample:
    """Clip plus masks, sketch and caption."""

    clip: VideoClip
    masks: np.ndarray  # (N, H, W) uint8, 1 = region to inpaint
    sketch: np.ndarray  # (H_s, W_s) uint8 edge map
    caption: str
    spec: SceneSpec
    seed: int = 0
    id: str = "clip_00000"

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.sketch = np.asarray(self.sketch, dtype=np.uint8)
        n, _, h, w = self.clip.pixels.shape
        if self.masks.shape != (n, h, w):
            raise ValidationError(f"masks shape {self.masks.shape} does not match clip (N, H, W)={(n, h, w)}")
        if self.sketch.ndim != 2 or not self.sketch.any():
            raise ValidationError("sketch must be a nonempty single-channel 2D edge map")
        if not self.caption.strip():
            raise ValidationError("caption must be nonempty")


@dataclass(frozen=True)
class MaskEvent:
    """Record of a masking operation applied to a clip."""

    kind: str  # "patch" | "full_frame"
    ratio: float = 0.0
    patch_size: Optional[int] = None
    frame_index: Optional[int] = None
    patches: Tuple[int, ...] = field(default_factory=tuple)  # flat (frame, row, col) patch ids


# Rendering
def trajectory(spec: SceneSpec, n_frames: int, size: int) -> np.ndarray:
    """Object centers per frame, clamped so the object stays inside the frame."""
    t = np.arange(n_frames, dtype=np.float64)[:, None]
    centers = np.asarray(spec.start, dtype=np.float64)[None, :] + t * np.asarray(spec.velocity, dtype=np.float64)[None, :]
    return np.clip(centers, spec.radius, size - 1 - spec.radius)


def _object_mask(shape: str, cx: float, cy: float, r: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "circle":
        mask = dx**2 + dy**2 <= r**2
    else:
        # apex up, base on the row cy + r
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    return mask


def edge_map(mask: np.ndarray) -> np.ndarray:
    """Sobel-style boundary of a binary mask: in-mask pixels with nonzero gradient."""
    m = np.pad(mask.astype(np.int32), 1)
    gx = (m[:-2, 2:] + 2 * m[1:-1, 2:] + m[2:, 2:]) - (m[:-2, :-2] + 2 * m[1:-1, :-2] + m[2:, :-2])
    gy = (m[2:, :-2] + 2 * m[2:, 1:-1] + m[2:, 2:]) - (m[:-2, :-2] + 2 * m[:-2, 1:-1] + m[:-2, 2:])
    return (mask.astype(bool) & ((gx != 0) | (gy != 0))).astype(np.uint8)


def _check_clip_dims(n_frames: int, size: int) -> None:
    if n_frames < 1:
        raise ValidationError(f"n_frames={n_frames} must be >= 1")
    if size <= 0 or size % SPATIAL_DOWNSAMPLE:
        raise ValidationError(f"size={size} must be a positive multiple of {SPATIAL_DOWNSAMPLE}")


def generate_clip(
    spec: SceneSpec, n_frames: int, size: int, seed: int, fps: int = DEFAULT_FPS, sample_id: str = "clip_00000"
) -> InpaintSample:
    """
    Render one synthetic sample.

    Rendering is a pure function of the spec; the seed is the provenance
    recorded in the manifest (the seed the spec was drawn with).

    Args:
        spec: Scene to render
        n_frames: Frame count N
        size: Square frame side, multiple of 16
        seed: Provenance seed stored with the sample
        fps: Frame rate metadata
        sample_id: Identifier used in the dataset manifest

    Returns:
        InpaintSample with clip, object masks, sketch and caption
    """
    _check_clip_dims(n_frames, size)
    if 2 * spec.radius + 1 > size:
        raise ValidationError(f"radius={spec.radius} does not fit in a {size}x{size} frame")

    centers = trajectory(spec, n_frames, size)
    masks = np.stack([_object_mask(spec.shape, cx, cy, spec.radius, size) for cx, cy in centers])

    background = np.asarray(spec.background, dtype=np.float32)[:, None, None]
    color = np.asarray(spec.color, dtype=np.float32)[:, None, None]
    pixels = np.where(masks[:, None, :, :], color[None], background[None]).astype(np.float32)

    return InpaintSample(
        clip=VideoClip(pixels, fps=fps),
        masks=masks.astype(np.uint8),
        sketch=edge_map(masks[0]),
        caption=spec.caption,
        spec=spec,
        seed=int(seed),
        id=sample_id,
    )


def sample_scene_spec(rng: np.random.Generator, size: int) -> SceneSpec:
    """Draw a random scene whose object fits the frame."""
    radius = int(rng.integers(3, max(4, size // 6) + 1))
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = PALETTE[list(PALETTE)[int(rng.integers(len(PALETTE)))]]
    background = BACKGROUNDS[list(BACKGROUNDS)[int(rng.integers(len(BACKGROUNDS)))]]
    velocity = (float(rng.integers(-2, 3)), float(rng.integers(-2, 3)))
    lo, hi = radius, size - 1 - radius
    start = (float(rng.integers(lo, hi + 1)), float(rng.integers(lo, hi + 1)))
    return SceneSpec(shape=shape, color=color, velocity=velocity, start=start, background=background, radius=radius)


def clip_seed(seed: int, index: int) -> int:
    """Independent per-clip seed derived from the dataset seed and the clip index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(
    n_clips: int, n_frames: int, size: int, seed: int, fps: int = DEFAULT_FPS, workers: int = 1
) -> List[InpaintSample]:
    """
    Generate a list of random samples.

    Results are independent of the worker count: every clip has its own seed
    and results are collected in index order.
    """
    _check_clip_dims(n_frames, size)

    def _one(index: int) -> InpaintSample:
        s = clip_seed(seed, index)
        spec = sample_scene_spec(np.random.default_rng(s), size)
        return generate_clip(spec, n_frames, size, s, fps=fps, sample_id=f"clip_{index:05d}")

    logger.info(f"Generating {n_clips} clips ({n_frames} frames, {size}x{size}) with {workers} worker(s)")
    if workers <= 1:
        return [_one(i) for i in tqdm(range(n_clips), desc="Generating clips", unit="clip")]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(_one, range(n_clips)), total=n_clips, desc="Generating clips", unit="clip"))


# Masking schedules and strategies
def cosine_ratio(step: int, total_steps: int, lo: float, hi: float) -> float:
    """
    Cosine ramp from lo (step 0) to hi (step total_steps).

    r(s) = lo + (hi - lo) * (1 - cos(pi * s / S)) / 2
    """
    if total_steps < 1:
        raise ValidationError(f"total_steps={total_steps} must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step={step} outside [0, {total_steps}]")
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValidationError(f"need 0 <= lo <= hi <= 1, got lo={lo}, hi={hi}")
    if step == total_steps:
        return float(hi)
    value = lo + (hi - lo) * (1.0 - math.cos(math.pi * step / total_steps)) / 2.0
    return min(hi, max(lo, value))


def n_patches_for_ratio(ratio: float, total: int) -> int:
    """ceil(ratio * total), robust to float noise such as 0.3 * 10."""
    return min(total, math.ceil(round(ratio * total, 9)))


def patch_mask(clip: VideoClip, patch_size: int, ratio: float, seed: int) -> Tuple[VideoClip, MaskEvent]:
    """
    Zero a uniformly random subset of ceil(ratio * P) patches, jointly over all frames.

    Args:
        clip: Input clip
        patch_size: 16 or 32
        ratio: Fraction of patches to zero
        seed: Seed of the patch draw

    Returns:
        Tuple of (masked clip, MaskEvent recording the chosen patches)
    """
    if patch_size not in VALID_PATCH_SIZES:
        raise ValidationError(f"patch_size={patch_size} must be one of {VALID_PATCH_SIZES}")
    if clip.height % patch_size or clip.width % patch_size:
        raise ValidationError(f"patch_size={patch_size} does not tile a {clip.height}x{clip.width} frame")
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio={ratio} must be in [0, 1]")

    gh, gw = clip.height // patch_size, clip.width // patch_size
    per_frame = gh * gw
    total = clip.n_frames * per_frame
    k = n_patches_for_ratio(ratio, total)

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)

    pixels = clip.pixels.copy()
    for idx in chosen:
        frame, rem = divmod(int(idx), per_frame)
        row, col = divmod(rem, gw)
        pixels[frame, :, row * patch_size:(row + 1) * patch_size, col * patch_size:(col + 1) * patch_size] = 0.0

    event = MaskEvent(kind="patch", ratio=float(ratio), patch_size=patch_size, patches=tuple(int(i) for i in chosen))
    return VideoClip(pixels, fps=clip.fps), event


def full_frame_mask(clip: VideoClip, seed: int) -> Tuple[VideoClip, int]:
    """
    Zero one frame chosen uniformly at random.

    Returns:
        Tuple of (masked clip, index of the zeroed frame)
    """
    if clip.n_frames < 2:
        raise ValidationError(f"full-frame masking needs N >= 2 frames, got {clip.n_frames}")
    index = int(np.random.default_rng(seed).integers(clip.n_frames))
    pixels = clip.pixels.copy()
    pixels[index] = 0.0
    return VideoClip(pixels, fps=clip.fps), index


# Dataset I/O
def _manifest_frame(entries: Sequence[Dict]) -> pd.DataFrame:
    rows = [
        {
            "id": e["id"],
            "seed": e["seed"],
            "shape": e["spec"]["shape"],
            "caption": e["caption"],
            "fps": e["fps"],
            "n_frames": e["n_frames"],
            "size": e["size"],
            "pixels_file": e["files"]["pixels"],
            "masks_file": e["files"]["masks"],
            "sketch_file": e["files"]["sketch"],
        }
        for e in entries
    ]
    return pd.DataFrame(rows)


def write_dataset(samples: Sequence[InpaintSample], directory: Union[str, Path]) -> List[Dict]:
    """
    Write samples as MAURA1 arrays plus manifest.json.

    Args:
        samples: Samples to write
        directory: Target directory (created if missing)

    Returns:
        The manifest entries written
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    manifest = []
    for sample in tqdm(samples, desc="Writing dataset", unit="sample", leave=False):
        files = {
            "pixels": f"{sample.id}_pixels.maura",
            "masks": f"{sample.id}_masks.maura",
            "sketch": f"{sample.id}_sketch.maura",
        }
        write_array(directory / files["pixels"], sample.clip.pixels)
        write_array(directory / files["masks"], sample.masks)
        write_array(directory / files["sketch"], sample.sketch)
        manifest.append(
            {
                "id": sample.id,
                "seed": sample.seed,
                "spec": sample.spec.to_dict(),
                "caption": sample.caption,
                "fps": sample.clip.fps,
                "n_frames": sample.clip.n_frames,
                "size": sample.clip.height,
                "files": files,
            }
        )

    if manifest:
        validate_manifest(_manifest_frame(manifest))
    atomic_write_bytes(directory / MANIFEST_NAME, json.dumps(manifest, indent=2).encode("utf-8"))
    logger.info(f"Wrote {len(manifest)} samples to {directory}")
    return manifest


def read_dataset(directory: Union[str, Path]) -> List[InpaintSample]:
    """
    Read a dataset written by write_dataset.

    Raises:
        ManifestMismatchError: missing manifest, invalid manifest rows,
            missing array files or arrays whose shapes disagree with the manifest
        DatasetFormatError: unreadable manifest or corrupt array file
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestMismatchError(f"No {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(manifest_path, f"unreadable manifest: {e}") from e
    if not isinstance(manifest, list):
        raise DatasetFormatError(manifest_path, "manifest must be a JSON list")

    if manifest:
        try:
            validate_manifest(_manifest_frame(manifest))
        except (KeyError, pandera.errors.SchemaError) as e:
            raise ManifestMismatchError(f"{manifest_path}: invalid manifest entry: {e}") from e

    samples = []
    for entry in manifest:
        arrays = {}
        for key, name in entry["files"].items():
            path = directory / name
            if not path.exists():
                raise ManifestMismatchError(f"{manifest_path}: entry {entry['id']} references missing file {name}")
            arrays[key] = read_array(path)

        n, size = entry["n_frames"], entry["size"]
        expected = {"pixels": (n, 3, size, size), "masks": (n, size, size)}
        for key, shape in expected.items():
            if arrays[key].shape != shape:
                raise ManifestMismatchError(
                    f"{entry['files'][key]}: shape {arrays[key].shape} does not match manifest {shape}"
                )

        samples.append(
            InpaintSample(
                clip=VideoClip(arrays["pixels"], fps=entry["fps"]),
                masks=arrays["masks"],
                sketch=arrays["sketch"],
                caption=entry["caption"],
                spec=SceneSpec.from_dict(entry["spec"]),
                seed=entry["seed"],
                id=entry["id"],
            )
        )
    logger.info(f"Read {len(samples)} samples from {directory}")
    return samples


# Export for inspection
def _frames_uint8(clip: VideoClip) -> np.ndarray:
    """(N, H, W, 3) uint8 frames."""
    return (np.clip(clip.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(0, 2, 3, 1)


def export_gif(clip: VideoClip, path: Union[str, Path], scale: int = 4) -> Path:
    """Write an animated GIF (nearest-neighbour upscaled)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = [
        Image.fromarray(f).resize((clip.width * scale, clip.height * scale), Image.NEAREST)
        for f in _frames_uint8(clip)
    ]
    frames[0].save(
        path, save_all=True, append_images=frames[1:], duration=max(1, int(1000 / clip.fps)), loop=0
    )
    return path


def export_png_strip(clip: VideoClip, path: Union[str, Path], scale: int = 4) -> Path:
    """Write all frames side by side as one PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    strip = np.concatenate(list(_frames_uint8(clip)), axis=1)
    image = Image.fromarray(strip).resize((strip.shape[1] * scale, strip.shape[0] * scale), Image.NEAREST)
    image.save(path)
    return path
