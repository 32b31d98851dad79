"""Waveform I/O and the spectrogram front end.

The pipeline turns a 16 kHz mono waveform into the network input unit: a
3-second crop becomes a 300x161 magnitude spectrogram (20 ms Hamming
window, 10 ms hop, 320-point DFT), each frequency bin is mean/variance
normalized across time, and the plane is copied into 3 identical channels.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ShapeError

SAMPLE_RATE = 16000
WINDOW = 320          # 20 ms at 16 kHz
HOP = 160             # 10 ms
NUM_BINS = WINDOW // 2 + 1
CROP_SAMPLES = 3 * SAMPLE_RATE
NUM_FRAMES = 300
END_PAD = 160         # reflect pad so a 3 s signal yields exactly 300 frames

SPECTROGRAM_MODES = ("magnitude", "power", "log")
NORM_MODES = ("per-bin", "none")


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ContractError("waveform needs at least one sample in a 1-D array")
        if self.sample_rate <= 0:
            raise ContractError("sample rate must be positive")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    """Non-negative time-frequency magnitudes, frames x 161 bins."""

    frames: np.ndarray
    frame_width_ms: int = 20
    frame_step_ms: int = 10

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_BINS:
            raise ShapeError(f"spectrogram must be (frames, {NUM_BINS}), got {self.frames.shape}")


@dataclass
class FeatureCrop:
    """The 3x300x161 network input: three identical normalized planes."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (3, NUM_FRAMES, NUM_BINS):
            raise ShapeError(
                f"feature crop must be (3, {NUM_FRAMES}, {NUM_BINS}), got {self.data.shape}"
            )


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF WAV at 16 kHz; reject anything else."""
    path = Path(path)
    try:
        wf = wave.open(str(path), "rb")
    except FileNotFoundError:
        raise DataError(f"{path}: file not found")
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})")
    with wf:
        if wf.getcomptype() != "NONE":
            raise DataError(f"{path}: compressed WAV not supported")
        if wf.getnchannels() != 1:
            raise DataError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != SAMPLE_RATE:
            raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()} Hz")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise DataError(f"{path}: empty audio stream")
    return Waveform(samples, SAMPLE_RATE)


def write_wav(path, waveform: Waveform):
    ints = np.clip(np.rint(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(ints.tobytes())


def spectrogram(w: Waveform, mode: str = "magnitude") -> Spectrogram:
    """Sliding-window DFT magnitudes of a 16 kHz waveform.

    320-sample Hamming windows with a 160-sample hop; the signal is
    end-reflect-padded by 160 samples, so frame count is
    (len + 160 - 320) // 160 + 1 and a 48000-sample crop gives exactly 300.
    """
    if mode not in SPECTROGRAM_MODES:
        raise ContractError(f"mode must be one of {SPECTROGRAM_MODES}")
    if w.sample_rate != SAMPLE_RATE:
        raise DataError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate} Hz")
    x = np.pad(w.samples, (0, END_PAD), mode="reflect") if len(w) > 1 else w.samples
    if x.size < WINDOW:
        raise DataError(f"waveform too short: {len(w)} samples ({x.size} after padding)")
    n_frames = (x.size - WINDOW) // HOP + 1
    idx = HOP * np.arange(n_frames)[:, None] + np.arange(WINDOW)[None, :]
    frames = x[idx] * np.hamming(WINDOW)[None, :]
    mag = np.abs(np.fft.rfft(frames, n=WINDOW, axis=1))
    if mode == "power":
        mag = mag ** 2
    elif mode == "log":
        mag = np.log(mag + 1e-10)
    return Spectrogram(mag)


def crop_3s(w: Waveform, rng: np.random.Generator | None = None) -> Waveform:
    """Exactly 3 seconds of audio: tile short inputs, window long ones.

    Inputs longer than 3 s take a uniformly random 48000-sample window drawn
    from ``rng``; shorter inputs are repeated end-to-end and truncated, so no
    randomness is consumed.
    """
    x = w.samples
    if x.size < CROP_SAMPLES:
        reps = -(-CROP_SAMPLES // x.size)
        x = np.tile(x, reps)[:CROP_SAMPLES]
    elif x.size > CROP_SAMPLES:
        if rng is None:
            raise ContractError("cropping an input longer than 3 s needs an rng")
        start = int(rng.integers(0, x.size - CROP_SAMPLES + 1))
        x = x[start:start + CROP_SAMPLES]
    return Waveform(x.copy(), w.sample_rate)


def uniform_crops(w: Waveform, count: int = 10) -> list[Waveform]:
    """Deterministic evenly spaced 3-second crops for evaluation."""
    if count < 1:
        raise ContractError("need at least one crop")
    x = w.samples
    if x.size <= CROP_SAMPLES:
        base = crop_3s(w)
        return [Waveform(base.samples.copy(), w.sample_rate) for _ in range(count)]
    starts = np.rint(np.linspace(0, x.size - CROP_SAMPLES, count)).astype(int)
    return [Waveform(x[s:s + CROP_SAMPLES].copy(), w.sample_rate) for s in starts]


def to_feature_crop(s: Spectrogram, norm: str = "per-bin") -> FeatureCrop:
    """Normalize each frequency bin over time and copy into 3 channels.

    With ``norm="per-bin"`` every bin has mean 0 and variance 1 across the
    300 frames; zero-variance bins map to 0.
    """
    if norm not in NORM_MODES:
        raise ContractError(f"norm must be one of {NORM_MODES}")
    if s.frames.shape != (NUM_FRAMES, NUM_BINS):
        raise ShapeError(f"expected ({NUM_FRAMES}, {NUM_BINS}) spectrogram, got {s.frames.shape}")
    plane = s.frames
    if norm == "per-bin":
        mu = plane.mean(axis=0)
        sd = plane.std(axis=0)
        # treat bins whose spread is at rounding level as zero-variance
        live = sd > 1e-12 * (1.0 + np.abs(mu))
        plane = np.where(live, (plane - mu) / np.where(live, sd, 1.0), 0.0)
    return FeatureCrop(np.broadcast_to(plane, (3, NUM_FRAMES, NUM_BINS)).copy())


def crop_features(
    w: Waveform,
    rng: np.random.Generator | None = None,
    mode: str = "magnitude",
    norm: str = "per-bin",
) -> FeatureCrop:
    """Full front end: random 3 s crop -> spectrogram -> normalized crop."""
    return to_feature_crop(spectrogram(crop_3s(w, rng), mode), norm)


@dataclass
class CropCacheMeta:
    shape: list = field(default_factory=lambda: [3, NUM_FRAMES, NUM_BINS])
    dtype: str = "<f8"
    normalization: str = "per-bin"
    spectrogram_mode: str = "magnitude"
    source: str = ""
    seed: int | None = None


def save_crop(base_path, crop: FeatureCrop, meta: CropCacheMeta | None = None):
    """Cache a crop as a flat little-endian float64 blob plus a JSON sidecar."""
    base = Path(base_path)
    meta = meta or CropCacheMeta()
    meta.shape = list(crop.data.shape)
    base.with_suffix(".f64").write_bytes(crop.data.astype("<f8").tobytes())
    base.with_suffix(".json").write_text(json.dumps(meta.__dict__, indent=1) + "\n")


def load_crop(base_path) -> tuple[FeatureCrop, dict]:
    base = Path(base_path)
    blob_path = base.with_suffix(".f64")
    meta_path = base.with_suffix(".json")
    if not blob_path.exists() or not meta_path.exists():
        raise DataError(f"{base}: missing .f64 blob or .json sidecar")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta.get("shape", ()))
    raw = blob_path.read_bytes()
    if len(raw) != 8 * int(np.prod(shape)):
        raise DataError(f"{blob_path}: blob has {len(raw)} bytes, manifest says shape {shape}")
    arr = np.frombuffer(raw, dtype="<f8")
    return FeatureCrop(arr.reshape(shape).astype(np.float64)), meta
