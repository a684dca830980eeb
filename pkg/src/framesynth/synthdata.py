"""Procedurally generated moving-shape videos and frame-sequence file I/O.

Scenes hold colored squares/circles moving at constant velocity over a
constant or vertically graded background, with optional additive gaussian
noise. All randomness comes from numpy's PCG64 generator seeded per scene,
so sequences are bit-reproducible across runs and platforms.

Frames are written as binary PPM (P6, maxval 255) named frame_0000.ppm,
frame_0001.ppm, ... next to a meta.txt carrying the position tokens and the
scene parameters. A dataset manifest is a plain text file listing sequence
directories one per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class PpmBadMagic(ValueError):
    pass


class PpmMalformedHeader(ValueError):
    pass


class PpmShortFile(ValueError):
    pass


@dataclass
class ObjectSpec:
    """One moving object. Positions and velocities are (x, y) with x along
    columns and y along rows; the start point is the object center."""
    shape: str  # "square" or "circle"
    size: float
    color: tuple
    start: tuple
    velocity: tuple

    def __post_init__(self):
        if self.shape not in ("square", "circle"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"color channels must lie in [0,1], got {self.color}")


@dataclass
class SceneSpec:
    height: int
    width: int
    objects: list
    background: tuple = (0.0, 0.0, 0.0)
    background2: Optional[tuple] = None  # set for a vertical gradient
    noise_sigma: float = 0.0
    frames: int = 5
    seed: int = 0
    times: Optional[list] = None  # defaults to 1..frames

    def frame_times(self) -> list:
        if self.times is not None:
            return [float(t) for t in self.times]
        return [float(t) for t in range(1, self.frames + 1)]


@dataclass
class FrameSequence:
    """Ordered RGB frames in [0,1] with strictly increasing position tokens."""
    frames: np.ndarray  # (n, 3, h, w)
    positions: list
    meta: Optional[SceneSpec] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be (n,3,h,w), got {self.frames.shape}")
        n = self.frames.shape[0]
        if n < 1:
            raise ValueError("a frame sequence needs at least one frame")
        if len(self.positions) != n:
            raise ValueError(
                f"{len(self.positions)} positions for {n} frames")
        diffs = np.diff(np.asarray(self.positions, dtype=np.float64))
        if n > 1 and not np.all(diffs > 0):
            raise ValueError(f"positions must strictly increase, got {self.positions}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frame values must lie in [0,1], got [{lo}, {hi}]")

    def __len__(self):
        return self.frames.shape[0]


def _render_background(spec: SceneSpec, dtype) -> np.ndarray:
    img = np.empty((3, spec.height, spec.width), dtype=dtype)
    if spec.background2 is None:
        img[:] = np.asarray(spec.background, dtype=dtype).reshape(3, 1, 1)
    else:
        t = np.linspace(0.0, 1.0, spec.height, dtype=dtype).reshape(1, -1, 1)
        c0 = np.asarray(spec.background, dtype=dtype).reshape(3, 1, 1)
        c1 = np.asarray(spec.background2, dtype=dtype).reshape(3, 1, 1)
        img[:] = c0 * (1 - t) + c1 * t
    return img


def _object_mask(obj: ObjectSpec, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    cols = np.arange(w, dtype=np.float64).reshape(1, -1)
    rows = np.arange(h, dtype=np.float64).reshape(-1, 1)
    half = obj.size / 2.0
    if obj.shape == "square":
        return (np.abs(cols - cx) <= half) & (np.abs(rows - cy) <= half)
    return (cols - cx) ** 2 + (rows - cy) ** 2 <= half ** 2


def generate(spec: SceneSpec) -> FrameSequence:
    """Render a scene: constant-velocity motion sampled at the scene's frame
    times, then optional gaussian noise, clamped to [0,1]."""
    if spec.frames < 1:
        raise ValueError("a scene must have at least one frame")
    times = spec.frame_times()
    if spec.times is not None and len(times) != spec.frames:
        raise ValueError(
            f"{len(times)} sample times given for {spec.frames} frames")
    dtype = np.float64
    out = np.empty((spec.frames, 3, spec.height, spec.width), dtype=dtype)
    t0 = times[0]
    for fi, t in enumerate(times):
        img = _render_background(spec, dtype)
        for obj in spec.objects:
            cx = obj.start[0] + obj.velocity[0] * (t - t0)
            cy = obj.start[1] + obj.velocity[1] * (t - t0)
            mask = _object_mask(obj, cx, cy, spec.height, spec.width)
            for ch in range(3):
                img[ch][mask] = obj.color[ch]
        out[fi] = img
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        out += rng.normal(0.0, spec.noise_sigma, out.shape)
    np.clip(out, 0.0, 1.0, out=out)
    return FrameSequence(frames=out, positions=times, meta=spec)


def split(specs: Sequence, ratios, seed: int = 0):
    """Disjoint (train, val, test) partition: deterministic shuffle by seed,
    sizes by largest remainder. A nonzero ratio that would receive nothing
    is rejected."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    n = len(specs)
    raw = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for r, c in zip(ratios, counts):
        if r > 0 and c == 0:
            raise ValueError(
                f"ratio {r} of {n} specs yields an empty split ({counts})")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [specs[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------------------
# PPM / meta I/O

def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, h, w) float image in [0,1] as binary P6, maxval 255."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3,h,w) image, got {image.shape}")
    _, h, w = image.shape
    quant = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    payload = quant.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def write_ppm_gray(path, image: np.ndarray) -> None:
    """Write a (h, w) grayscale image in [0,255] through the same P6 path."""
    g = np.asarray(image, dtype=np.float64) / 255.0
    write_ppm(path, np.stack([g, g, g], axis=0))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to a (3, h, w) float image in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise PpmBadMagic(f"{path}: not a P6 file (starts with {data[:2]!r})")
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 3:
        raise PpmMalformedHeader(f"{path}: truncated header")
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PpmMalformedHeader(f"{path}: non-numeric header fields {tokens}") from exc
    if maxval != 255:
        raise PpmMalformedHeader(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    expected = w * h * 3
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise PpmShortFile(
            f"{path}: expected {expected} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def _spec_to_lines(spec: SceneSpec) -> list:
    lines = [
        f"height={spec.height}",
        f"width={spec.width}",
        f"background={','.join(repr(c) for c in spec.background)}",
        f"noise_sigma={spec.noise_sigma!r}",
        f"frames={spec.frames}",
        f"seed={spec.seed}",
    ]
    if spec.background2 is not None:
        lines.append(f"background2={','.join(repr(c) for c in spec.background2)}")
    for obj in spec.objects:
        lines.append(
            "object={};{};{};{};{}".format(
                obj.shape, obj.size,
                ",".join(repr(c) for c in obj.color),
                ",".join(repr(c) for c in obj.start),
                ",".join(repr(c) for c in obj.velocity)))
    return lines


def write_frames(seq: FrameSequence, out_dir) -> None:
    """One PPM per frame plus meta.txt with positions and scene params."""
    os.makedirs(out_dir, exist_ok=True)
    for i in range(len(seq)):
        write_ppm(os.path.join(out_dir, f"frame_{i:04d}.ppm"), seq.frames[i])
    lines = [f"positions={','.join(repr(p) for p in seq.positions)}"]
    if seq.meta is not None:
        lines += _spec_to_lines(seq.meta)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_frames(in_dir) -> FrameSequence:
    """Inverse of write_frames up to the 8-bit quantization of PPM."""
    names = sorted(f for f in os.listdir(in_dir)
                   if f.startswith("frame_") and f.endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no frame_*.ppm files in {in_dir}")
    frames = np.stack([read_ppm(os.path.join(in_dir, f)) for f in names])
    positions = [float(i + 1) for i in range(len(names))]
    meta_path = os.path.join(in_dir, "meta.txt")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            for line in fh:
                if line.startswith("positions="):
                    positions = [float(x) for x in line.strip().split("=", 1)[1].split(",")]
    return FrameSequence(frames=frames, positions=positions, meta=None)


def write_manifest(path, dir_names: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for name in dir_names:
            fh.write(name + "\n")


def read_manifest(path) -> list:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# dataset presets

_PRESETS = ("squares", "direction", "interp")


def _random_object(rng, canvas: int, t_min: float, t_max: float,
                   even_velocity: bool = False, max_speed: int = 2) -> ObjectSpec:
    """Object whose center stays in-canvas for elapsed times [t_min, t_max]."""
    size = int(rng.integers(3, 6))
    margin = size // 2 + 1
    for attempt in range(1000):
        if even_velocity:
            v = (int(rng.integers(-1, 2)) * 2, int(rng.integers(-1, 2)) * 2)
        else:
            v = (int(rng.integers(-max_speed, max_speed + 1)),
                 int(rng.integers(-max_speed, max_speed + 1)))
        if v == (0, 0):
            continue
        bounds = []
        for vc in v:
            disp = (vc * t_min, vc * t_max)
            lo = margin - min(disp)
            hi = canvas - 1 - margin - max(disp)
            bounds.append((int(np.ceil(lo)), int(np.floor(hi))))
        if all(lo <= hi for lo, hi in bounds):
            start = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in bounds)
            break
    else:
        # canvas too tight to keep the motion inside: let it clip at the edge
        step = 2 if even_velocity else 1
        v = [(step, 0), (0, step), (-step, 0), (0, -step)][int(rng.integers(4))]
        if margin >= canvas - margin:
            raise ValueError(f"canvas {canvas} too small for size-{size} objects")
        start = (int(rng.integers(margin, canvas - margin)),
                 int(rng.integers(margin, canvas - margin)))
    color = tuple(float(c) for c in rng.uniform(0.55, 1.0, size=3))
    shape = "square" if rng.random() < 0.5 else "circle"
    return ObjectSpec(shape=shape, size=size, color=color, start=start, velocity=v)


def make_specs(preset: str, count: int, seed: int, canvas: int = 16) -> list:
    """Seeded scene specs for a named preset.

    squares:   5-frame sequences, one object, integer velocities.
    direction: pairs of a sequence and its time-reversal (motion sign
               flipped, start advanced), so correct continuations differ.
    interp:    9 samples at times (1,2,3,3.5,4,4.5,5,6,7) with even
               velocities, so half-step positions stay on the pixel grid.
    """
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {_PRESETS}")
    rng = np.random.default_rng(seed)
    specs = []
    while len(specs) < count:
        bg = tuple(float(c) for c in rng.uniform(0.0, 0.25, size=3))
        if preset == "squares":
            obj = _random_object(rng, canvas, 0.0, 4.0)
            specs.append(SceneSpec(height=canvas, width=canvas, objects=[obj],
                                   background=bg, frames=5,
                                   seed=int(rng.integers(2 ** 31))))
        elif preset == "direction":
            # must stay in-canvas both forward (t in 0..4) and reversed
            # (center at t in -1..3 relative to the forward start)
            obj = _random_object(rng, canvas, -1.0, 4.0, max_speed=2)
            fwd = SceneSpec(height=canvas, width=canvas, objects=[obj],
                            background=bg, frames=5, seed=int(rng.integers(2 ** 31)))
            # reversed twin: starts where the forward inputs ended, moves back
            back_start = (obj.start[0] + obj.velocity[0] * 3,
                          obj.start[1] + obj.velocity[1] * 3)
            rev = ObjectSpec(shape=obj.shape, size=obj.size, color=obj.color,
                             start=back_start,
                             velocity=(-obj.velocity[0], -obj.velocity[1]))
            bwd = SceneSpec(height=canvas, width=canvas, objects=[rev],
                            background=bg, frames=5, seed=fwd.seed)
            specs.append(fwd)
            if len(specs) < count:
                specs.append(bwd)
        else:  # interp
            # in-canvas through the mid targets; may exit near the ends
            obj = _random_object(rng, canvas, 0.0, 4.0, even_velocity=True)
            times = [1.0, 2.0, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0]
            specs.append(SceneSpec(height=canvas, width=canvas, objects=[obj],
                                   background=bg, frames=9, times=times,
                                   seed=int(rng.integers(2 ** 31))))
    return specs
