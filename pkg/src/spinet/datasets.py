"""Data sources: uniform box samples, discrete states and bouncing-ball video."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spinet.errors import (
    DimensionMismatch,
    FormatVersionMismatch,
    InsufficientFrames,
    PlacementFailure,
    SpinIOError,
)

PLACEMENT_ATTEMPTS = 10_000
SUBPIXELS = 4


# -- continuous and discrete samplers ------------------------------------------


def sample_uniform_box(batch: int, dim: int, halfwidth: float, margin: float, rng) -> np.ndarray:
    """Points uniform on [-halfwidth + margin, halfwidth - margin]^dim."""
    if not margin < halfwidth:
        raise ValueError("margin must be smaller than halfwidth")
    lim = halfwidth - margin
    return rng.uniform(-lim, lim, size=(batch, dim))


def sample_states(n_states: int, batch: int, rng) -> np.ndarray:
    return rng.integers(0, n_states, size=batch)


def sample_state_pairs(n_states: int, batch: int, rng):
    """Independent uniform state pairs (s, s')."""
    return rng.integers(0, n_states, size=batch), rng.integers(0, n_states, size=batch)


def full_population_pairs(n_states: int):
    """Every ordered pair once, so pair averages equal exact expectations."""
    s, t = np.meshgrid(np.arange(n_states), np.arange(n_states), indexing="ij")
    return s.ravel(), t.ravel()


# -- bouncing balls --------------------------------------------------------------


@dataclass
class VideoClip:
    """Rendered frames (T, H, W) in [0, 1] and ball states (T, n_balls, 4).

    States hold (x, y, vx, vy) in pixel units, velocities per frame; x runs
    along columns and y along rows.
    """

    frames: np.ndarray
    states: np.ndarray
    radius: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_balls(self) -> int:
        return self.states.shape[1]

    def save(self, path):
        save_clip(self, path)


def _world_size(height, width):
    side = float(max(height, width))
    return width / side, height / side, side


def _next_event(pos, vel, r, box):
    """Earliest (time, kind, i, j) collision from the current state, or None."""
    best = (np.inf, None, -1, -1)
    for axis in range(2):
        v = vel[:, axis]
        p = pos[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(v > 0, (box[axis] - r - p) / v, np.inf)
            t_lo = np.where(v < 0, (r - p) / v, np.inf)
        t = np.maximum(np.minimum(t_hi, t_lo), 0.0)
        i = int(np.argmin(t))
        if t[i] < best[0]:
            best = (float(t[i]), "wall", i, axis)
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            dp = pos[j] - pos[i]
            dv = vel[j] - vel[i]
            b = dp @ dv
            if b >= 0:
                continue
            a = dv @ dv
            c = dp @ dp - 4.0 * r * r
            disc = b * b - a * c
            if disc < 0:
                continue
            t = max((-b - np.sqrt(disc)) / a, 0.0)
            if t < best[0]:
                best = (float(t), "pair", i, j)
    return best


def _advance(pos, vel, r, box, duration=1.0):
    """Move balls for ``duration`` resolving each collision at its exact time."""
    remaining = duration
    for _ in range(10_000):
        t, kind, i, j = _next_event(pos, vel, r, box)
        if t > remaining:
            break
        pos += vel * t
        remaining -= t
        if kind == "wall":
            vel[i, j] = -vel[i, j]
        else:
            n = pos[j] - pos[i]
            n /= np.linalg.norm(n)
            exchange = (vel[i] - vel[j]) @ n
            vel[i] -= exchange * n
            vel[j] += exchange * n
    pos += vel * remaining
    # guard against round-off leaving a centre a hair outside its range
    for axis in range(2):
        np.clip(pos[:, axis], r, box[axis] - r, out=pos[:, axis])


def _place(n_balls, r, box, rng):
    pos = np.zeros((n_balls, 2))
    placed = 0
    for _ in range(PLACEMENT_ATTEMPTS):
        cand = np.array([rng.uniform(r, box[0] - r), rng.uniform(r, box[1] - r)])
        if placed and np.min(np.linalg.norm(pos[:placed] - cand, axis=1)) < 2.0 * r:
            continue
        pos[placed] = cand
        placed += 1
        if placed == n_balls:
            return pos
    raise PlacementFailure(f"could not place {n_balls} balls in {PLACEMENT_ATTEMPTS} attempts")


def simulate_balls(pos, vel, radius, box, n_frames):
    """Trajectory (n_frames, n, 4) in world units, starting from the given state."""
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    out = np.zeros((n_frames, pos.shape[0], 4))
    for t in range(n_frames):
        out[t, :, :2] = pos
        out[t, :, 2:] = vel
        if t + 1 < n_frames:
            _advance(pos, vel, radius, box)
    return out


def render_discs(centers, radius, height, width) -> np.ndarray:
    """Anti-aliased coverage of discs given in pixel units, by 4x4 subpixel sampling."""
    s = SUBPIXELS
    ys = (np.arange(height * s) + 0.5) / s
    xs = (np.arange(width * s) + 0.5) / s
    inside = np.zeros((height * s, width * s), dtype=bool)
    for cx, cy in centers:
        inside |= (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= radius * radius
    return inside.reshape(height, s, width, s).mean(axis=(1, 3))


def bouncing_balls_generate(
    n_frames: int,
    height: int,
    width: int,
    n_balls: int,
    radius: float,
    speed: float,
    seed: int,
) -> VideoClip:
    """Simulate equal-mass elastic discs in a box and render them.

    ``radius`` and ``speed`` (per frame) are fractions of the longer frame
    side, so the same seed gives the same trajectory at any resolution.
    """
    wx, wy, side = _world_size(height, width)
    if n_balls * np.pi * (radius * side) ** 2 >= 0.5 * height * width:
        raise PlacementFailure("balls cover too much of the frame")
    box = (wx, wy)
    if 2 * radius >= min(box):
        raise PlacementFailure("ball does not fit inside the frame")
    rng = np.random.default_rng(seed)
    pos = _place(n_balls, radius, box, rng)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_balls)
    vel = speed * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    world = simulate_balls(pos, vel, radius, box, n_frames)
    states = world * side
    frames = np.stack(
        [render_discs(states[t, :, :2], radius * side, height, width) for t in range(n_frames)]
    )
    return VideoClip(frames=frames, states=states, radius=radius * side)


def kinetic_energy(states) -> np.ndarray:
    """Per-frame sum of squared speeds (unit masses)."""
    return np.sum(np.asarray(states)[..., 2:] ** 2, axis=(-2, -1))


# -- clip files --------------------------------------------------------------------

_MAGIC = b"BBV1"


def save_clip(clip: VideoClip, path):
    t, h, w = clip.frames.shape
    header = _MAGIC + struct.pack("<4I", t, h, w, clip.n_balls)
    body = clip.frames.astype("<f4").tobytes() + clip.states.astype("<f8").tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as exc:
        raise SpinIOError(str(exc)) from exc


def load_clip(path, radius: float = float("nan")) -> VideoClip:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SpinIOError(str(exc)) from exc
    if data[:4] != _MAGIC:
        raise FormatVersionMismatch("not a BBV1 clip file")
    t, h, w, n = struct.unpack("<4I", data[4:20])
    n_px = t * h * w
    expected = 20 + 4 * n_px + 8 * t * n * 4
    if len(data) != expected:
        raise DimensionMismatch(f"clip file has {len(data)} bytes, expected {expected}")
    frames = np.frombuffer(data, dtype="<f4", count=n_px, offset=20).astype(np.float64)
    states = np.frombuffer(data, dtype="<f8", count=t * n * 4, offset=20 + 4 * n_px)
    return VideoClip(frames.reshape(t, h, w), states.reshape(t, n, 4).copy(), radius)


# -- slowness pairs ----------------------------------------------------------------


def stacked_pairs(frames, stack: int = 2):
    """All (x, x') pairs of a frame sequence: x = frames t..t+stack-1, x' shifted by one."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0] - stack
    if n < 1:
        raise InsufficientFrames(f"need at least {stack + 1} frames, got {frames.shape[0]}")
    flat = frames.reshape(frames.shape[0], -1)
    windows = np.stack([flat[i : i + n + 1] for i in range(stack)], axis=1).reshape(n + 1, -1)
    return windows[:-1], windows[1:]


def consecutive_pair_batches(clips, clips_per_batch: int, frames_per_clip: int, rng, stack: int = 2):
    """One minibatch of slowness pairs.

    Draws ``clips_per_batch`` windows of ``frames_per_clip`` consecutive
    frames (random clip, random start) and returns every stacked pair in
    each window: ``clips_per_batch * (frames_per_clip - stack)`` pairs.
    """
    if isinstance(clips, VideoClip):
        clips = [clips]
    if frames_per_clip < stack + 1:
        raise InsufficientFrames(f"frames_per_clip must be at least {stack + 1}")
    lengths = [c.n_frames for c in clips]
    if max(lengths) < frames_per_clip:
        raise InsufficientFrames(
            f"clips have at most {max(lengths)} frames, windows need {frames_per_clip}"
        )
    eligible = [i for i, n in enumerate(lengths) if n >= frames_per_clip]
    xs, xps = [], []
    for _ in range(clips_per_batch):
        c = clips[eligible[int(rng.integers(len(eligible)))]]
        start = int(rng.integers(0, c.n_frames - frames_per_clip + 1))
        x, xp = stacked_pairs(c.frames[start : start + frames_per_clip], stack)
        xs.append(x)
        xps.append(xp)
    return np.concatenate(xs), np.concatenate(xps)
