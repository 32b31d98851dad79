import hashlib
from pathlib import Path

import numpy as np
import pytest

from metricforge.errors import ContractError, DataError
from metricforge.features import Waveform, read_wav, spectrogram
from metricforge.synth import (
    SpeakerProfile,
    gen_corpus,
    gen_trials,
    speaker_profiles,
    synth_utterance,
)


def _dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _formant_peak_bins(w: Waveform, formants):
    """Windowed power centroid around each nominal formant bin."""
    s = spectrogram(Waveform(w.samples[:48000]))
    mean_power = (s.frames ** 2).mean(axis=0)
    out = []
    for f in formants:
        center = int(round(f / 50.0))
        lo, hi = max(0, center - 8), min(161, center + 9)
        bins = np.arange(lo, hi)
        weights = mean_power[lo:hi]
        out.append(float((bins * weights).sum() / weights.sum()))
    return out


class TestSpeakerProfiles:
    def test_constraints_hold(self):
        for p in speaker_profiles(20, seed=3):
            assert 80.0 <= p.pitch_hz <= 300.0
            assert len(set(p.formants_hz)) == 3
            assert all(300.0 <= f <= 3500.0 for f in p.formants_hz)

    def test_deterministic(self):
        assert speaker_profiles(5, seed=1) == speaker_profiles(5, seed=1)
        assert speaker_profiles(5, seed=1) != speaker_profiles(5, seed=2)

    def test_invalid_profile_rejected(self):
        with pytest.raises(ContractError):
            SpeakerProfile("x", 50.0, (400.0, 1500.0, 2500.0), (150.0,) * 3, 0)
        with pytest.raises(ContractError):
            SpeakerProfile("x", 120.0, (400.0, 400.0, 2500.0), (150.0,) * 3, 0)


class TestSynthUtterance:
    def test_length_and_range(self):
        p = speaker_profiles(2, seed=4)[0]
        w = synth_utterance(p, 2.5, np.random.default_rng(0))
        assert len(w) == 40000
        assert np.abs(w.samples).max() <= 0.99

    def test_shared_formant_peaks_within_one_bin(self):
        for si, p in enumerate(speaker_profiles(4, seed=11)):
            peaks = []
            for ui in range(2):
                rng = np.random.default_rng([11, 20000 + si, ui])
                peaks.append(_formant_peak_bins(synth_utterance(p, 4.0, rng), p.formants_hz))
            for a, b in zip(*peaks):
                assert abs(a - b) <= 1.0

    def test_snr_roughly_20db(self):
        # the additive noise floor should sit ~2 orders of magnitude below signal power
        p = speaker_profiles(2, seed=6)[1]
        w = synth_utterance(p, 3.0, np.random.default_rng(1))
        s = spectrogram(w)
        assert s.frames.max() / np.median(s.frames) > 10.0


class TestGenCorpus:
    def test_counts_and_manifest(self, tmp_path):
        manifest = gen_corpus(tmp_path, 3, 4, 1.5, seed=8)
        rows = manifest.read_text().splitlines()
        assert len(rows) == 12
        wavs = list((tmp_path / "wav").rglob("*.wav"))
        assert len(wavs) == 12
        # every manifest entry resolves and reads back as valid 16 kHz mono PCM
        for row in rows:
            spk, rel = row.split("\t")
            w = read_wav(tmp_path / rel)
            assert len(w) == 24000

    def test_byte_identical_regeneration(self, tmp_path):
        gen_corpus(tmp_path / "a", 3, 2, 1.0, seed=13)
        gen_corpus(tmp_path / "b", 3, 2, 1.0, seed=13)
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")
        gen_corpus(tmp_path / "c", 3, 2, 1.0, seed=14)
        assert _dir_digest(tmp_path / "a") != _dir_digest(tmp_path / "c")

    def test_too_few_speakers_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            gen_corpus(tmp_path, 1, 4, 1.0, seed=0)
        with pytest.raises(ContractError):
            gen_corpus(tmp_path, 4, 1, 1.0, seed=0)

    def test_id_offset_separates_splits(self, tmp_path):
        m1 = gen_corpus(tmp_path, 2, 2, 1.0, seed=5, manifest_name="train.tsv")
        m2 = gen_corpus(tmp_path, 2, 2, 1.0, seed=5, manifest_name="eval.tsv", id_offset=2)
        train_spk = {r.split("\t")[0] for r in m1.read_text().splitlines()}
        eval_spk = {r.split("\t")[0] for r in m2.read_text().splitlines()}
        assert not train_spk & eval_spk

    def test_nearest_neighbor_separability(self, tmp_path):
        manifest = gen_corpus(tmp_path, 5, 3, 2.0, seed=21)
        feats, labels = [], []
        for row in manifest.read_text().splitlines():
            spk, rel = row.split("\t")
            w = read_wav(tmp_path / rel)
            s = spectrogram(Waveform(np.tile(w.samples, 2)[:48000]))
            feats.append(s.frames.mean(axis=0))
            labels.append(spk)
        feats = np.asarray(feats)
        labels = np.asarray(labels)
        correct = 0
        for i in range(len(feats)):
            d = np.linalg.norm(feats - feats[i], axis=1)
            d[i] = np.inf
            correct += labels[np.argmin(d)] == labels[i]
        assert correct / len(feats) > 1.0 / 5


class TestGenTrials:
    def _corpus(self, tmp_path):
        return gen_corpus(tmp_path, 4, 3, 1.0, seed=17)

    def test_balanced_counts(self, tmp_path):
        manifest = self._corpus(tmp_path)
        trials = gen_trials(manifest, tmp_path / "trials.txt", 6, 6, seed=1)
        lines = trials.read_text().splitlines()
        assert len(lines) == 12
        labels = [line.split()[0] for line in lines]
        assert labels.count("1") == 6 and labels.count("0") == 6

    def test_no_self_pairs_and_label_consistency(self, tmp_path):
        manifest = self._corpus(tmp_path)
        trials = gen_trials(manifest, tmp_path / "trials.txt", 10, 10, seed=2)
        for line in trials.read_text().splitlines():
            label, a, b = line.split()
            assert a != b
            spk_a = a.split("/")[1]
            spk_b = b.split("/")[1]
            assert (spk_a == spk_b) == (label == "1")

    def test_deterministic(self, tmp_path):
        manifest = self._corpus(tmp_path)
        t1 = gen_trials(manifest, tmp_path / "t1.txt", 5, 5, seed=3).read_bytes()
        t2 = gen_trials(manifest, tmp_path / "t2.txt", 5, 5, seed=3).read_bytes()
        assert t1 == t2

    def test_insufficient_pool_rejected(self, tmp_path):
        manifest = self._corpus(tmp_path)
        with pytest.raises(DataError):
            gen_trials(manifest, tmp_path / "t.txt", 10_000, 5, seed=0)
        with pytest.raises(DataError):
            gen_trials(manifest, tmp_path / "t.txt", 5, 10_000, seed=0)
