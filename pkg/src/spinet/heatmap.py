"""Signed heatmap export as binary PGM (gray) and PPM (blue-white-red)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from spinet.errors import SpinIOError


def _normalized(values):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("heatmap values must be a 2-D array")
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap values must be finite")
    m = float(np.max(np.abs(v))) if v.size else 0.0
    return v / m if m > 0 else np.zeros_like(v)


def gray_pixels(values) -> np.ndarray:
    """-max|v| -> 0, 0 -> 128, +max|v| -> 255."""
    t = _normalized(values)
    return np.floor(255.0 * (t + 1.0) / 2.0 + 0.5).astype(np.uint8)


def diverging_pixels(values) -> np.ndarray:
    """Blue for negative, white at zero, red for positive, symmetric about zero."""
    t = _normalized(values)
    fade = np.round(255.0 * (1.0 - np.abs(t))).astype(np.uint8)
    full = np.full_like(fade, 255)
    red = np.where(t < 0, fade, full)
    blue = np.where(t > 0, fade, full)
    return np.stack([red, fade, blue], axis=-1)


def pgm_bytes(values) -> bytes:
    px = gray_pixels(values)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def ppm_bytes(values) -> bytes:
    px = diverging_pixels(values)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def export_heatmap(values, path):
    """Write ``<stem>.pgm`` and ``<stem>.ppm``; row 0 of ``values`` is the top row."""
    base = Path(path)
    if base.suffix in (".pgm", ".ppm"):
        base = base.with_suffix("")
    pgm, ppm = base.with_suffix(".pgm"), base.with_suffix(".ppm")
    try:
        pgm.write_bytes(pgm_bytes(values))
        ppm.write_bytes(ppm_bytes(values))
    except OSError as exc:
        raise SpinIOError(f"cannot write heatmap {base}: {exc}") from exc
    return pgm, ppm
