"""Binary training checkpoints.

Layout (little endian): magic ``SPIN``, version u32, K u32, P u32, then
Sigma-bar (K*K f64), its Jacobian (K*K*P f64), params (P f64), optimizer
accumulator (P f64), step u64, seed u64, and a CRC32 of everything before it.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from spinet.errors import CorruptChecksum, FormatVersionMismatch, SpinIOError
from spinet.spin import AveragedState, RmsState, TrainState

MAGIC = b"SPIN"
VERSION = 1
_HEAD = struct.Struct("<4sIII")
_TAIL = struct.Struct("<QQ")


def checkpoint_bytes(state: TrainState) -> bytes:
    sigma = np.ascontiguousarray(state.averages.sigma_bar, dtype="<f8")
    jac = np.ascontiguousarray(state.averages.jac_sigma_bar, dtype="<f8")
    k, p = sigma.shape[0], state.params.size
    payload = b"".join(
        [
            _HEAD.pack(MAGIC, VERSION, k, p),
            sigma.tobytes(),
            jac.tobytes(),
            np.ascontiguousarray(state.params, dtype="<f8").tobytes(),
            np.ascontiguousarray(state.opt.mean_square, dtype="<f8").tobytes(),
            _TAIL.pack(state.step, state.seed),
        ]
    )
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(state: TrainState, path):
    """Write atomically: a crash mid-write never leaves a half file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(state))
        os.replace(tmp, path)
    except OSError as exc:
        raise SpinIOError(f"cannot write checkpoint {path}: {exc}") from exc


def parse_checkpoint(data: bytes, beta=0.01, decay=0.999, epsilon=1e-10, learning_rate=1e-5):
    if len(data) < _HEAD.size:
        raise CorruptChecksum("checkpoint shorter than its header")
    magic, version, k, p = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatVersionMismatch("not a spinet checkpoint")
    if version != VERSION:
        raise FormatVersionMismatch(f"checkpoint format {version}, this build reads {VERSION}")
    n_f64 = k * k + k * k * p + 2 * p
    expected = _HEAD.size + 8 * n_f64 + _TAIL.size + 4
    if len(data) != expected:
        raise CorruptChecksum(f"checkpoint has {len(data)} bytes, expected {expected}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise CorruptChecksum("checkpoint CRC32 mismatch")
    vals = np.frombuffer(data, dtype="<f8", count=n_f64, offset=_HEAD.size).astype(np.float64)
    sigma = vals[: k * k].reshape(k, k)
    jac = vals[k * k : k * k + k * k * p].reshape(k, k, p)
    params = vals[k * k + k * k * p : k * k + k * k * p + p]
    ms = vals[k * k + k * k * p + p :]
    step, seed = _TAIL.unpack_from(data, _HEAD.size + 8 * n_f64)
    return TrainState(
        step=int(step),
        params=params.copy(),
        averages=AveragedState(sigma.copy(), jac.copy(), beta),
        opt=RmsState(ms.copy(), decay=decay, epsilon=epsilon, learning_rate=learning_rate),
        seed=int(seed),
    )


def load_checkpoint(path, **hyper) -> TrainState:
    """Read a checkpoint; optimizer hyperparameters come from the caller's config."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SpinIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data, **hyper)
