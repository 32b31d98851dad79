"""Deterministic synthetic toy-speaker corpus.

Each speaker is a fixed vocal identity: a fundamental pitch, three formant
resonances, and a per-speaker harmonic timbre profile. An utterance is a
harmonic source at the speaker's pitch (with up to 5% per-utterance pitch
jitter and a touch of breath noise) shaped by second-order resonators at
the formants, amplitude-modulated, and mixed with white noise at 20 dB SNR.
Speaker identity therefore lives in the spectral envelope, which is the cue
the attention backbone is meant to pick up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ContractError, DataError
from .features import SAMPLE_RATE, Waveform, write_wav

PITCH_RANGE = (90.0, 280.0)
FORMANT_BANDS = ((320.0, 900.0), (1000.0, 2000.0), (2200.0, 3400.0))
BANDWIDTH_RANGE = (130.0, 220.0)
MAX_HARMONIC_FREQ = 7600.0
PITCH_JITTER = 0.02   # within the <= 5% per-utterance contract
BREATH_LEVEL = 0.35   # formant-shaped noise floor; keeps the envelope visible
SNR_DB = 20.0
_N_TIMBRE = 96


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    pitch_hz: float
    formants_hz: tuple
    bandwidths_hz: tuple
    timbre_seed: int

    def __post_init__(self):
        if not 80.0 <= self.pitch_hz <= 300.0:
            raise ContractError(f"pitch {self.pitch_hz} outside [80, 300] Hz")
        f = self.formants_hz
        if len(f) != 3 or len(set(f)) != 3 or min(f) < 300.0 or max(f) > 3500.0:
            raise ContractError(f"formants {f} must be 3 distinct values in [300, 3500] Hz")


def speaker_profiles(num_speakers: int, seed: int, id_offset: int = 0) -> list[SpeakerProfile]:
    """Deterministic speaker identities; ids are spk{offset+i:04d}."""
    profiles = []
    for i in range(num_speakers):
        rng = np.random.default_rng([seed, 101, id_offset + i])
        profiles.append(SpeakerProfile(
            speaker_id=f"spk{id_offset + i:04d}",
            pitch_hz=float(rng.uniform(*PITCH_RANGE)),
            formants_hz=tuple(float(rng.uniform(lo, hi)) for lo, hi in FORMANT_BANDS),
            bandwidths_hz=tuple(float(rng.uniform(*BANDWIDTH_RANGE)) for _ in range(3)),
            timbre_seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return profiles


def _resonator(freq: float, bandwidth: float):
    """Two-pole resonator coefficients at 16 kHz."""
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    return [1.0 - r * r], [1.0, -2.0 * r * np.cos(theta), r * r]


def _syllable_envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    """Raised-cosine syllable bursts over a quiet floor, ~2-4 per second.

    The gating makes utterances non-stationary, so per-bin normalized
    features keep a speech-synchronized pattern in the bins that carry
    voice energy.
    """
    env = np.full(n, 0.12)
    pos = 0
    while pos < n:
        pos += int(rng.uniform(0.04, 0.22) * SAMPLE_RATE)
        dur = int(rng.uniform(0.12, 0.35) * SAMPLE_RATE)
        if pos >= n:
            break
        end = min(pos + dur, n)
        m = end - pos
        burst = np.sin(np.pi * np.arange(m) / m) ** 2
        env[pos:end] = np.maximum(env[pos:end], 0.12 + 0.88 * burst)
        pos = end
    return env


def synth_utterance(profile: SpeakerProfile, duration_s: float,
                    rng: np.random.Generator) -> Waveform:
    """One utterance of the speaker; all randomness comes from ``rng``."""
    n = int(round(duration_s * SAMPLE_RATE))
    if n < 1:
        raise ContractError("duration must be positive")
    t = np.arange(n) / SAMPLE_RATE
    f0 = profile.pitch_hz * (1.0 + rng.uniform(-PITCH_JITTER, PITCH_JITTER))
    timbre = np.random.default_rng([profile.timbre_seed]).uniform(-1.0, 1.0, _N_TIMBRE)
    n_harm = min(int(MAX_HARMONIC_FREQ / f0), _N_TIMBRE)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    src = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = (1.0 / np.sqrt(k)) * (1.0 + 0.25 * timbre[k - 1])
        src += amp * np.sin(2.0 * np.pi * k * f0 * t + phases[k - 1])
    src /= np.abs(src).max()
    src = src + BREATH_LEVEL * rng.standard_normal(n)
    # parallel formant branches, so each resonance owns a local spectral peak
    shaped = np.zeros(n)
    for gain, (freq, bw) in zip((1.0, 0.9, 0.8),
                                zip(profile.formants_hz, profile.bandwidths_hz)):
        b, a = _resonator(freq, bw)
        shaped += gain * lfilter(b, a, src)
    shaped = shaped * _syllable_envelope(n, rng)
    shaped = _utterance_channel(shaped, rng)
    shaped = 0.55 * shaped / np.abs(shaped).max()
    noise_rms = np.sqrt(np.mean(shaped ** 2)) * 10.0 ** (-SNR_DB / 20.0)
    shaped = shaped + noise_rms * rng.standard_normal(n)
    return Waveform(np.clip(shaped, -0.99, 0.99), SAMPLE_RATE)


def _utterance_channel(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-utterance spectral tilt plus one broad content-emphasis bump.

    These nuisances vary utterance to utterance regardless of speaker, so
    they dominate what an untrained embedding sees while leaving the
    speaker's formant positions learnable.
    """
    n = x.size
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    tilt_db = rng.uniform(-8.0, 8.0)
    bump_f = rng.uniform(400.0, 3200.0)
    bump_gain = rng.uniform(0.0, 1.2)
    bump_w = rng.uniform(300.0, 500.0)
    shape = 10.0 ** (tilt_db / 20.0 * freqs / 8000.0)
    shape *= 1.0 + bump_gain * np.exp(-0.5 * ((freqs - bump_f) / bump_w) ** 2)
    return np.fft.irfft(np.fft.rfft(x) * shape, n)


def gen_corpus(out_dir, num_speakers: int, utts_per_speaker: int, duration_s: float,
               seed: int, manifest_name: str = "train_manifest.tsv",
               id_offset: int = 0) -> Path:
    """Write WAV files plus a ``speaker<TAB>relative_path`` manifest.

    Per-utterance seeds derive from (seed, global speaker index, utterance
    index), so regeneration is byte-identical regardless of write order.
    """
    if num_speakers < 2 or utts_per_speaker < 2:
        raise ContractError("need at least 2 speakers and 2 utterances per speaker")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}")
    rows = []
    for si, profile in enumerate(speaker_profiles(num_speakers, seed, id_offset)):
        spk_dir = out_dir / "wav" / profile.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for ui in range(utts_per_speaker):
            rng = np.random.default_rng([seed, 20000 + id_offset + si, ui])
            wav = synth_utterance(profile, duration_s, rng)
            rel = f"wav/{profile.speaker_id}/utt{ui:03d}.wav"
            write_wav(out_dir / rel, wav)
            rows.append(f"{profile.speaker_id}\t{rel}")
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def gen_trials(manifest_path, out_path, num_target: int, num_nontarget: int,
               seed: int) -> Path:
    """Sample a balanced labeled trial list over the manifest's speakers.

    Pairs are drawn without replacement from the enumerated pools of
    same-speaker and cross-speaker utterance pairs; no utterance is ever
    paired with itself. Lines are ``label path_a path_b`` with label 1 for
    same-speaker trials.
    """
    from .batching import load_manifest

    records = load_manifest(manifest_path)
    by_spk: dict[str, list[str]] = {}
    for rec in records:
        by_spk.setdefault(rec.speaker_id, []).append(rec.path)
    speakers = sorted(by_spk)
    target_pool = [
        (paths[i], paths[j])
        for spk in speakers
        for paths in [by_spk[spk]]
        for i in range(len(paths))
        for j in range(i + 1, len(paths))
    ]
    nontarget_pool = [
        (pa, pb)
        for ia in range(len(speakers))
        for ib in range(ia + 1, len(speakers))
        for pa in by_spk[speakers[ia]]
        for pb in by_spk[speakers[ib]]
    ]
    if num_target > len(target_pool):
        raise DataError(f"requested {num_target} target trials, pool has {len(target_pool)}")
    if num_nontarget > len(nontarget_pool):
        raise DataError(
            f"requested {num_nontarget} nontarget trials, pool has {len(nontarget_pool)}"
        )
    rng = np.random.default_rng([seed, 777])
    lines = []
    for idx in rng.choice(len(target_pool), size=num_target, replace=False):
        a, b = target_pool[idx]
        lines.append(f"1 {a} {b}")
    for idx in rng.choice(len(nontarget_pool), size=num_nontarget, replace=False):
        a, b = nontarget_pool[idx]
        lines.append(f"0 {a} {b}")
    order = rng.permutation(len(lines))
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines[i] for i in order) + "\n", encoding="utf-8")
    return out_path
