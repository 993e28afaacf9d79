"""Synthetic RGB-D video scenes, on-disk sequence layout and clip loading.

Layout: ``<root>/<sequence>/{rgb,depth,gt}/%04d.{ppm,pgm}`` plus a
``manifest.txt`` with one ``sequence length seed`` line per sequence.

Depth maps store nearness (brighter = closer). In every scene the salient
object is the nearest thing in view, while distractors copy its colour and
shape but sit on the background plane, so RGB alone cannot tell them apart.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import pnm
from .functional import _bilinear_matrix

SHAPES = ("square", "disk", "lshape")


@dataclass
class SceneSpec:
    shape: str = "square"
    size: int = 14  # object extent in pixels (at native resolution)
    start: tuple[float, float] = (10.0, 24.0)  # top-left (x, y)
    velocity: tuple[float, float] = (0.0, 0.0)  # px / frame
    jitter: float = 0.0  # std of per-frame direction noise, px
    color: tuple[float, float, float] = (0.8, 0.3, 0.2)
    object_depth: float = 0.9
    background_depth: tuple[float, float] = (0.15, 0.45)  # top, bottom nearness
    min_depth_contrast: float = 0.3
    texture_seed: int = 0
    illumination: float = 1.0
    distractors: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.object_depth - max(self.background_depth) < self.min_depth_contrast:
            raise ValueError("object/background depth contrast below the configured minimum")


@dataclass
class VideoClip:
    """Aligned frames. Arrays are ``T x C x H x W`` (or ``N x T x C x H x W`` for a batch)."""

    rgb: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    sequence: str | list = ""
    frames: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.rgb.shape[-4]


def _shape_mask(shape: str, size: int, x: float, y: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    x0, y0 = int(round(x)), int(round(y))
    if shape == "square":
        return (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
    if shape == "disk":
        c = (size - 1) / 2.0
        return (xx - x0 - c) ** 2 + (yy - y0 - c) ** 2 <= (size / 2.0) ** 2
    half = size // 2
    box = (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
    notch = (xx >= x0 + half) & (yy < y0 + half)
    return box & ~notch


def _clamp(pos: np.ndarray, size: int, h: int, w: int) -> np.ndarray:
    return np.array([min(max(pos[0], 1.0), w - size - 1.0), min(max(pos[1], 1.0), h - size - 1.0)])


def trajectory(spec: SceneSpec, length: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Top-left positions per frame, clamped one pixel inside the frame."""
    pos = _clamp(np.asarray(spec.start, dtype=np.float64), spec.size, h, w)
    vel = np.asarray(spec.velocity, dtype=np.float64)
    out = [pos]
    for _ in range(length - 1):
        step = vel + (rng.normal(0, spec.jitter, 2) if spec.jitter > 0 else 0.0)
        pos = _clamp(pos + step, spec.size, h, w)
        out.append(pos)
    return np.stack(out)


def render_sequence(spec: SceneSpec, length: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render ``length`` frames; returns uint8 rgb (T,H,W,3), depth (T,H,W), gt (T,H,W)."""
    if size % 32:
        raise ValueError(f"frame size must be divisible by 32, got {size}")
    rng = np.random.default_rng(seed)
    h = w = size
    tex_rng = np.random.default_rng(spec.texture_seed)
    texture = gaussian_filter(tex_rng.uniform(size=(h, w, 3)), sigma=(3, 3, 0))
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-9)
    background = 0.25 + 0.5 * texture
    rows = np.linspace(spec.background_depth[0], spec.background_depth[1], h)[:, None]
    depth_bg = np.broadcast_to(rows, (h, w)) + gaussian_filter(tex_rng.normal(0, 0.02, (h, w)), 2)

    path = trajectory(spec, length, h, w, rng)
    distractor_pos = []
    for _ in range(spec.distractors):
        for _attempt in range(50):
            p = rng.uniform(1, size - spec.size - 1, 2)
            if all(np.abs(p - q).max() > spec.size + 2 for q in distractor_pos) and \
                    np.abs(p - path).max(axis=1).min() > spec.size + 2:
                distractor_pos.append(p)
                break
    color = np.asarray(spec.color)
    rgbs, depths, gts = [], [], []
    for pos in path:
        obj = _shape_mask(spec.shape, spec.size, pos[0], pos[1], h, w)
        img = background.copy()
        dep = depth_bg.copy()
        for q in distractor_pos:
            m = _shape_mask(spec.shape, spec.size, q[0], q[1], h, w)
            img[m] = color
        img[obj] = color
        dep[obj] = spec.object_depth
        img = img * spec.illumination + rng.normal(0, 0.02, img.shape)
        dep = dep + rng.normal(0, 0.01, dep.shape)
        rgbs.append(np.clip(img * 255 + 0.5, 0, 255).astype(np.uint8))
        depths.append(np.clip(dep * 255 + 0.5, 0, 255).astype(np.uint8))
        gts.append(obj.astype(np.uint8) * 255)
    return np.stack(rgbs), np.stack(depths), np.stack(gts)


def generate_sequence(spec: SceneSpec, root, name: str, length: int, size: int, seed: int) -> Path:
    """Write one sequence under ``root/name``; deterministic given ``seed``."""
    rgb, depth, gt = render_sequence(spec, length, size, seed)
    base = Path(root) / name
    for sub in ("rgb", "depth", "gt"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for t in range(length):
        pnm.write(base / "rgb" / f"{t:04d}.ppm", rgb[t])
        pnm.write(base / "depth" / f"{t:04d}.pgm", depth[t])
        pnm.write(base / "gt" / f"{t:04d}.pgm", gt[t])
    return base


def random_scene(rng: np.random.Generator, size: int = 64) -> SceneSpec:
    scale = size / 64.0
    obj = int(rng.integers(12, 19) * scale)
    speed = rng.uniform(0.5, 2.5) * scale
    angle = rng.uniform(0, 2 * np.pi)
    return SceneSpec(
        shape=str(rng.choice(SHAPES)),
        size=obj,
        start=tuple(rng.uniform(2, size - obj - 2, 2)),
        velocity=(speed * np.cos(angle), speed * np.sin(angle)),
        jitter=0.3 * scale,
        color=tuple(rng.uniform(0.1, 0.9, 3)),
        object_depth=float(rng.uniform(0.8, 0.95)),
        background_depth=(float(rng.uniform(0.05, 0.25)), float(rng.uniform(0.3, 0.45))),
        texture_seed=int(rng.integers(1 << 31)),
        illumination=float(rng.uniform(0.8, 1.1)),
        distractors=int(rng.integers(1, 3)),
    )


def generate_suite(root, n_sequences: int, length: int, size: int, seed: int, prefix: str = "seq") -> list[str]:
    """Generate ``n_sequences`` random scenes and write ``manifest.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names, lines = [], []
    for i in range(n_sequences):
        name = f"{prefix}{i:03d}"
        seq_seed = int(rng.integers(1 << 31))
        spec = random_scene(np.random.default_rng(seq_seed), size)
        generate_sequence(spec, root, name, length, size, seq_seed)
        names.append(name)
        lines.append(f"{name} {length} {seq_seed}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return names


def read_manifest(root) -> dict[str, int]:
    """``sequence -> length``; falls back to scanning directories when no manifest exists."""
    root = Path(root)
    man = root / "manifest.txt"
    if man.exists():
        out = {}
        for lineno, line in enumerate(man.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{man}:{lineno}: expected 'sequence length seed'")
            out[parts[0]] = int(parts[1])
        return out
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    out = {}
    for d in sorted(p for p in root.iterdir() if (p / "rgb").is_dir()):
        out[d.name] = len(list((d / "rgb").glob("*.ppm")))
    return out


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if (h, w) == (size, size):
        return img
    my, mx = _bilinear_matrix(h, size), _bilinear_matrix(w, size)
    return my @ img @ mx.T


def normalize_depth(d: np.ndarray) -> np.ndarray:
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def load_clip(root, sequence: str, start: int, T: int, size: int | None = None) -> VideoClip:
    """Decode frames ``start .. start+T-1`` of ``sequence``."""
    base = Path(root) / sequence
    rgbs, depths, gts = [], [], []
    for t in range(start, start + T):
        rgb = pnm.read(base / "rgb" / f"{t:04d}.ppm").astype(np.float64) / 255.0
        dep = pnm.read(base / "depth" / f"{t:04d}.pgm").astype(np.float64) / 255.0
        gt = pnm.read(base / "gt" / f"{t:04d}.pgm").astype(np.float64) / 255.0
        if rgb.ndim != 3 or dep.ndim != 2 or gt.ndim != 2:
            raise pnm.PnmFormatError(f"{base}: unexpected channel layout at frame {t}")
        target = size or rgb.shape[0]
        rgb = _resize(np.transpose(rgb, (2, 0, 1)), target)
        dep = normalize_depth(_resize(dep, target))
        gt = (_resize(gt, target) >= 0.5).astype(np.float64)
        rgbs.append(np.clip(rgb, 0, 1))
        depths.append(np.repeat(dep[None], 3, axis=0))
        gts.append(gt[None])
    return VideoClip(np.stack(rgbs).astype(np.float32), np.stack(depths).astype(np.float32),
                     np.stack(gts).astype(np.float32), sequence, list(range(start, start + T)))


def pseudo_depth(clip: VideoClip, mode: str) -> VideoClip:
    """Replace depth by the RGB luma (``copy``) or zeros (``black``)."""
    if mode == "copy":
        luma = 0.299 * clip.rgb[..., 0:1, :, :] + 0.587 * clip.rgb[..., 1:2, :, :] + 0.114 * clip.rgb[..., 2:3, :, :]
        depth = np.repeat(luma, 3, axis=-3)
    elif mode == "black":
        depth = np.zeros_like(clip.depth)
    else:
        raise ValueError(f"pseudo depth mode must be 'copy' or 'black', got {mode!r}")
    return replace(clip, depth=depth.astype(clip.depth.dtype))


def batch_clips(clips: list[VideoClip]) -> VideoClip:
    return VideoClip(np.stack([c.rgb for c in clips]), np.stack([c.depth for c in clips]),
                     np.stack([c.gt for c in clips]), [c.sequence for c in clips], [c.frames for c in clips])


def flip_clip(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.rgb[..., ::-1].copy(), clip.depth[..., ::-1].copy(), clip.gt[..., ::-1].copy(),
                     clip.sequence, clip.frames)


class ClipSampler:
    """Every length-``T`` window of every sequence once per epoch, in a seeded order.

    The window for global position ``i`` depends only on ``(seed, i)``, so a
    resumed run sees exactly the same stream.
    """

    def __init__(self, lengths: dict[str, int], T: int, seed: int):
        self.T = T
        self.seed = seed
        self.windows = [(name, s) for name in sorted(lengths) for s in range(lengths[name] - T + 1)]
        if not self.windows:
            raise ValueError(f"no sequence has at least {T} frames")

    def __len__(self) -> int:
        return len(self.windows)

    def epoch_order(self, epoch: int) -> list[tuple[str, int]]:
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.windows))
        return [self.windows[i] for i in perm]

    def window(self, index: int) -> tuple[str, int]:
        n = len(self.windows)
        epoch, offset = divmod(index, n)
        perm = np.random.default_rng([self.seed, epoch]).permutation(n)
        return self.windows[perm[offset]]

    def batch(self, step: int, batch_size: int) -> list[tuple[str, int]]:
        return [self.window(step * batch_size + j) for j in range(batch_size)]


class ClipCache:
    """Decoded-clip cache keyed by ``(sequence, start)``."""

    def __init__(self, root, T: int, size: int | None = None, depth_mode: str = "actual"):
        self.root = os.fspath(root)
        self.T = T
        self.size = size
        self.depth_mode = depth_mode
        self._cache: dict = {}

    def get(self, sequence: str, start: int) -> VideoClip:
        key = (sequence, start)
        if key not in self._cache:
            clip = load_clip(self.root, sequence, start, self.T, self.size)
            if self.depth_mode != "actual":
                clip = pseudo_depth(clip, self.depth_mode)
            self._cache[key] = clip
        return self._cache[key]
