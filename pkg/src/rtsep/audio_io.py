"""Mono 16 kHz WAV reading and writing (16-bit PCM or 32-bit float)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from rtsep.errors import InputError

SAMPLE_RATE = 16000


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono WAV file as float64 in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise InputError(f"{path}: unreadable WAV ({exc})") from exc
    if rate != sample_rate:
        raise InputError(
            f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz; "
            f"resample first, e.g. `sox in.wav -r {sample_rate} out.wav`"
        )
    if data.ndim != 1:
        raise InputError(
            f"{path}: {data.shape[1]} channels, expected mono; downmix first, e.g. `sox in.wav -c 1 out.wav`"
        )
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise InputError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, signal, sample_rate: int = SAMPLE_RATE, subtype: str = "float32"):
    signal = np.asarray(signal, dtype=np.float64)
    if subtype == "float32":
        data = signal.astype(np.float32)
    elif subtype == "int16":
        data = np.clip(np.round(signal * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    wavfile.write(Path(path), sample_rate, data)


def open_wav(path, sample_rate: int = SAMPLE_RATE):
    """Memory-mapped view of a mono WAV plus its full-scale divisor, for block-wise reading."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    try:
        rate, data = wavfile.read(path, mmap=True)
    except ValueError as exc:
        raise InputError(f"{path}: unreadable WAV ({exc})") from exc
    if rate != sample_rate:
        raise InputError(
            f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz; "
            f"resample first, e.g. `sox in.wav -r {sample_rate} out.wav`"
        )
    if data.ndim != 1:
        raise InputError(
            f"{path}: {data.shape[1]} channels, expected mono; downmix first, e.g. `sox in.wav -c 1 out.wav`"
        )
    scale = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0,
             np.dtype(np.float32): 1.0, np.dtype(np.float64): 1.0}.get(data.dtype)
    if scale is None:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return data, scale


class WavWriter:
    """Append-only 32-bit float mono WAV; sizes in the header are patched on close."""

    def __init__(self, path, sample_rate: int = SAMPLE_RATE):
        self.path = Path(path)
        self.sample_rate = sample_rate
        self.frames = 0
        self._fh = open(self.path, "wb")
        self._fh.write(self._header())

    def _header(self) -> bytes:
        data_bytes = 4 * self.frames
        fmt = struct.pack("<HHIIHHH", 3, 1, self.sample_rate, 4 * self.sample_rate, 4, 32, 0)
        fact = struct.pack("<I", self.frames)
        return (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(fact) + 8 + data_bytes) + b"WAVE"
                + b"fmt " + struct.pack("<I", len(fmt)) + fmt
                + b"fact" + struct.pack("<I", len(fact)) + fact
                + b"data" + struct.pack("<I", data_bytes))

    def write(self, block):
        data = np.asarray(block, dtype="<f4")
        self._fh.write(data.tobytes())
        self.frames += len(data)

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(self._header())
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
