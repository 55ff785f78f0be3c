"""Student inputs, label normalization, augmentation and teacher-log distillation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..errors import EmptyDataset, TargetNotVisible
from ..servo import SIM_BOUNDS


@dataclass(frozen=True)
class NormalizationBounds:
    lo: tuple = tuple(b[0] for b in SIM_BOUNDS)
    hi: tuple = tuple(b[1] for b in SIM_BOUNDS)

    def __post_init__(self):
        if any(not a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError("normalization bounds need min < max per channel")

    @classmethod
    def from_pairs(cls, pairs) -> "NormalizationBounds":
        return cls(tuple(float(p[0]) for p in pairs), tuple(float(p[1]) for p in pairs))

    def span(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float) - np.asarray(self.lo, dtype=float)


SIM = NormalizationBounds()
REAL = NormalizationBounds((-30.0, -30.0, -40.0), (30.0, 30.0, 40.0))


def normalize(cmd, b: NormalizationBounds = SIM) -> np.ndarray:
    x = np.asarray(cmd, dtype=float)
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize(y, b: NormalizationBounds = SIM) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    return lo + (y + 1.0) * 0.5 * (hi - lo)


# --------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=16)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights averaging input cells over each output interval."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(a)), min(int(np.ceil(b)), n_in)
        for j in range(j0, j1):
            m[i, j] = max(0.0, min(b, j + 1) - max(a, j))
    m /= scale
    m.setflags(write=False)
    return m


def area_downsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    rows = _area_f32(img.shape[0], out_h)
    cols = _area_f32(img.shape[1], out_w)
    return rows @ img @ cols.T


def render_input(frame, size: int = 64) -> np.ndarray:
    """(size, size, 2) tensor: downsampled car mask and a front/back shading code.

    Only the mask's bounding box contributes, so the area-average is applied
    to that crop with the matching slices of the full-frame weight matrices.
    """
    from ..perception import _crop

    mask = np.asarray(frame.mask, dtype=bool)
    sub, (r0, c0) = _crop(mask)
    if sub is None:
        raise TargetNotVisible("empty frame")
    hh, ww = sub.shape
    rows = _area_f32(mask.shape[0], size)[:, r0 : r0 + hh]
    cols = _area_f32(mask.shape[1], size)[:, c0 : c0 + ww].T
    box = np.s_[r0 : r0 + hh, c0 : c0 + ww]
    out = np.empty((size, size, 2), dtype=np.float32)
    out[..., 0] = rows @ (sub.astype(np.float32) @ cols)
    code = np.asarray(frame.gt_back[box], dtype=np.float32) + 0.5 * np.asarray(frame.gt_front[box], dtype=np.float32)
    out[..., 1] = rows @ (code @ cols)
    return np.clip(out, 0.0, 1.0, out=out)


@lru_cache(maxsize=16)
def _area_f32(n_in: int, n_out: int) -> np.ndarray:
    m = area_matrix(n_in, n_out).astype(np.float32)
    m.setflags(write=False)
    return m


# --------------------------------------------------------------------------
# augmentation


def augment(t: np.ndarray, rng: np.random.Generator, gain=None, shift=None, rate=None) -> np.ndarray:
    """Random gain, brightness shift and salt-and-pepper noise; output clipped to [0, 1]."""
    gain = rng.uniform(0.8, 1.2) if gain is None else gain
    shift = rng.uniform(-0.1, 0.1) if shift is None else shift
    rate = rng.uniform(0.0, 0.02) if rate is None else rate
    out = np.asarray(t, dtype=np.float32) * gain + shift
    if rate > 0:
        hit = rng.random(out.shape) < rate
        salt = rng.random(out.shape) < 0.5
        out = np.where(hit, salt.astype(out.dtype), out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``augment`` with independent parameters per sample, vectorized over the batch."""
    n = len(x)
    shape = (n,) + (1,) * (x.ndim - 1)
    gain = rng.uniform(0.8, 1.2, size=shape).astype(np.float32)
    shift = rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
    rate = rng.uniform(0.0, 0.02, size=shape)
    out = x.astype(np.float32) * gain + shift
    hit = rng.random(x.shape) < rate
    salt = (rng.random(x.shape) < 0.5).astype(np.float32)
    out = np.where(hit, salt, out)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# distillation dataset


@dataclass
class Dataset:
    """Frames stored as uint8 (value * 255), normalized targets, episode ids."""

    x: np.ndarray  # (N, H, W, C) uint8
    y: np.ndarray  # (N, 3) float32 in [-1, 1]
    episode: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.y)

    def inputs(self, idx) -> np.ndarray:
        return self.x[idx].astype(np.float32) / 255.0

    def subset(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.y[mask], self.episode[mask])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for ep in np.unique(self.episode):
            sel = self.episode == ep
            name = f"episode_{int(ep):05d}.npz"
            np.savez_compressed(d / name, x=self.x[sel], y=self.y[sel])
            files.append({"file": name, "episode": int(ep), "samples": int(sel.sum())})
        manifest = {"samples": len(self), "input_shape": list(self.x.shape[1:]), "episodes": files}
        (d / "index.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        manifest = json.loads((d / "index.json").read_text())
        xs, ys, eps = [], [], []
        for entry in manifest["episodes"]:
            with np.load(d / entry["file"]) as z:
                xs.append(z["x"])
                ys.append(z["y"])
            eps.append(np.full(len(ys[-1]), entry["episode"]))
        if not xs:
            raise EmptyDataset(f"no samples in {d}")
        return cls(np.concatenate(xs), np.concatenate(ys), np.concatenate(eps))


def to_uint8(t: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def distill(logs, cfg, bounds: NormalizationBounds | None = None) -> Dataset:
    """One sample per logged frame: rendered input and normalized, clamped raw teacher command."""
    from ..simkit import Scene, render

    scene = Scene.from_config(cfg)
    bounds = bounds or NormalizationBounds.from_pairs(cfg.student.bounds)
    size = cfg.student.input_size
    xs, ys, eps = [], [], []
    for ep, log in enumerate(logs):
        for fr in log.frames:
            frame = render(scene, fr.pose)
            xs.append(to_uint8(render_input(frame, size)))
            clamped = np.clip(fr.raw, bounds.lo, bounds.hi)
            ys.append(normalize(clamped, bounds))
            eps.append(ep)
    if not xs:
        return Dataset(np.zeros((0, size, size, 2), np.uint8), np.zeros((0, 3), np.float32), np.zeros(0, int))
    return Dataset(np.stack(xs), np.asarray(ys, dtype=np.float32), np.asarray(eps))
