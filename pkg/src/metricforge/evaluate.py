"""Verification scoring: 10-crop embeddings, trial scores, EER and DET.

Each utterance contributes 10 deterministic evenly spaced 3-second crops.
A trial's score is minus the mean of the 100 cross-crop distances between
the two utterances (higher score = more likely same speaker). EER is read
off the crossing of the false-acceptance and false-rejection curves, with
linear interpolation between adjacent distinct-score thresholds.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .features import Waveform, read_wav, spectrogram, to_feature_crop, uniform_crops
from .model import ModelConfig, embed_batch

METRICS = ("cosine", "sqeuclidean")


@dataclass
class TrialPair:
    label: int
    path_a: str
    path_b: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"trial label must be 0 or 1, got {self.label}")


@dataclass
class ScoreSet:
    """Trial scores (higher = more likely same speaker) with 0/1 labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ContractError("scores and labels must be matching 1-D arrays")


@dataclass
class EERResult:
    eer: float
    threshold: float


def load_trials(path) -> list[TrialPair]:
    """Parse whitespace-separated ``label path_a path_b`` lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: trial file not found")
    trials = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3 or fields[0] not in ("0", "1"):
            raise DataError(f"{path}:{ln}: expected 'label path_a path_b' with label 0/1, "
                            f"got {line!r}")
        trials.append(TrialPair(int(fields[0]), fields[1], fields[2]))
    if not trials:
        raise DataError(f"{path}: no trials")
    return trials


def _far_frr(scores: np.ndarray, labels: np.ndarray):
    """FAR/FRR at every distinct score threshold, ascending.

    FAR(t) = fraction of nontarget scores >= t; FRR(t) = fraction of target
    scores < t. Returns (thresholds, far, frr).
    """
    tar = np.sort(scores[labels == 1])
    non = np.sort(scores[labels == 0])
    if tar.size == 0 or non.size == 0:
        raise ContractError("need at least one target and one nontarget trial")
    ts = np.unique(scores)
    far = 1.0 - np.searchsorted(non, ts, side="left") / non.size
    frr = np.searchsorted(tar, ts, side="left") / tar.size
    return ts, far, frr


def compute_eer(s: ScoreSet) -> EERResult:
    """Equal error rate at the FAR/FRR crossing, linearly interpolated.

    Every distinct score is a threshold candidate; a virtual candidate just
    above the maximum (FAR 0, FRR 1) closes the sweep so a crossing always
    exists.
    """
    ts, far, frr = _far_frr(s.scores, s.labels)
    ts = np.append(ts, np.nextafter(ts[-1], np.inf))
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    d = far - frr  # non-increasing in the threshold
    i = int(np.nonzero(d >= 0)[0][-1])
    if d[i] == 0.0:
        return EERResult(float(far[i]), float(ts[i]))
    w = d[i] / (d[i] - d[i + 1])
    eer = far[i] + w * (far[i + 1] - far[i])
    thr = ts[i] + w * (ts[i + 1] - ts[i])
    return EERResult(float(eer), float(thr))


def det_points(s: ScoreSet) -> np.ndarray:
    """(FAR, FRR) at each distinct threshold; FAR falls and FRR rises."""
    _, far, frr = _far_frr(s.scores, s.labels)
    return np.column_stack([far, frr])


def _crop_array(w: Waveform, mode: str, norm: str, count: int) -> np.ndarray:
    crops = uniform_crops(w, count)
    return np.stack([to_feature_crop(spectrogram(c, mode), norm).data for c in crops])


def utterance_embeddings(path, cfg: ModelConfig, params, mode: str = "magnitude",
                         norm: str = "per-bin", n_crops: int = 10) -> np.ndarray:
    """(n_crops, D) unit embeddings of an utterance's deterministic crops."""
    return embed_batch(_crop_array(read_wav(path), mode, norm, n_crops), cfg, params)


def _mean_distance(emb_a: np.ndarray, emb_b: np.ndarray, metric: str) -> float:
    if metric not in METRICS:
        raise ContractError(f"metric must be one of {METRICS}")
    cos = emb_a @ emb_b.T
    if metric == "cosine":
        dists = 1.0 - cos
    else:
        sq_a = (emb_a * emb_a).sum(axis=1)[:, None]
        sq_b = (emb_b * emb_b).sum(axis=1)[None, :]
        dists = sq_a + sq_b - 2.0 * cos
    return float(dists.mean())


def pair_distance(utt_a, utt_b, cfg: ModelConfig, params, metric: str = "cosine",
                  mode: str = "magnitude", norm: str = "per-bin",
                  n_crops: int = 10) -> float:
    """Score two utterances: minus the mean of the 100 cross-crop distances."""
    ea = utterance_embeddings(utt_a, cfg, params, mode, norm, n_crops)
    eb = utterance_embeddings(utt_b, cfg, params, mode, norm, n_crops)
    return -_mean_distance(ea, eb, metric)


@dataclass
class EvalOutput:
    result: EERResult
    scores: ScoreSet
    rows: list  # (label, path_a, path_b, score)


def evaluate(trial_path, cfg: ModelConfig, params, metric: str = "cosine",
             mode: str = "magnitude", norm: str = "per-bin", n_crops: int = 10,
             threads: int = 1) -> EvalOutput:
    """Score every trial with per-utterance embedding caching.

    Paths are resolved relative to the trial file. All paths are checked up
    front; any unresolvable ones abort the run, listed in the error.
    """
    trial_path = Path(trial_path)
    trials = load_trials(trial_path)
    root = trial_path.parent
    uniq = sorted({p for t in trials for p in (t.path_a, t.path_b)})
    resolved = {p: (root / p if not Path(p).is_absolute() else Path(p)) for p in uniq}
    missing = [p for p, rp in resolved.items() if not rp.exists()]
    if missing:
        raise DataError(f"{len(missing)} unresolvable utterance path(s): "
                        + ", ".join(missing[:10]))

    def embed(p):
        return utterance_embeddings(resolved[p], cfg, params, mode, norm, n_crops)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cache = dict(zip(uniq, pool.map(embed, uniq)))
    else:
        cache = {p: embed(p) for p in uniq}
    rows = []
    for t in trials:
        score = -_mean_distance(cache[t.path_a], cache[t.path_b], metric)
        rows.append((t.label, t.path_a, t.path_b, score))
    scores = ScoreSet(np.array([r[3] for r in rows]), np.array([r[0] for r in rows]))
    return EvalOutput(compute_eer(scores), scores, rows)


def write_scores_csv(path, rows):
    lines = ["label,path_a,path_b,score"]
    lines += [f"{label},{a},{b},{score:.12g}" for label, a, b, score in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores_csv(path) -> ScoreSet:
    """Read back a score CSV (passthrough evaluation input)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: score file not found")
    labels, scores = [], []
    lines = path.read_text(encoding="utf-8").splitlines()
    if lines and lines[0].startswith("label,"):
        lines = lines[1:]
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4 or fields[0] not in ("0", "1"):
            raise DataError(f"{path}:{ln}: expected 'label,path_a,path_b,score'")
        try:
            scores.append(float(fields[3]))
        except ValueError:
            raise DataError(f"{path}:{ln}: bad score {fields[3]!r}")
        labels.append(int(fields[0]))
    if not labels:
        raise DataError(f"{path}: no scores")
    return ScoreSet(np.array(scores), np.array(labels))


def write_det_csv(path, points: np.ndarray):
    lines = ["far,frr"] + [f"{p:.12g},{r:.12g}" for p, r in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_eer_json(path, result: EERResult, scores: ScoreSet, metric: str):
    payload = {
        "eer": result.eer,
        "threshold": result.threshold,
        "metric": metric,
        "num_trials": int(scores.labels.size),
        "num_target": int((scores.labels == 1).sum()),
        "num_nontarget": int((scores.labels == 0).sum()),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")
