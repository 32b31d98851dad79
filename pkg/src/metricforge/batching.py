"""PK batch sampling, semi-hard negative mining, and tuple construction.

A PK batch holds P distinct speakers with K crops each. For every ordered
same-speaker (anchor, positive) pair the miner picks the semi-hard negative:
the closest negative that is still farther from the anchor than the
positive. When none qualifies it falls back to the hardest (closest)
negative so the triplet stays informative. Mining runs on the current
embeddings, after the forward pass, and is a pure function of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class UttRecord:
    speaker_id: str
    path: str


def load_manifest(path) -> list[UttRecord]:
    """Parse newline-delimited ``speaker_id<TAB>wav_path`` records."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    records = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise DataError(f"{path}:{ln}: expected 'speaker_id<TAB>wav_path', got {line!r}")
        records.append(UttRecord(fields[0], fields[1]))
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


class Dataset:
    """Utterance records grouped by speaker, rooted at the manifest directory."""

    def __init__(self, records: list[UttRecord], root=None):
        if not records:
            raise DataError("dataset needs at least one record")
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        self.by_speaker: dict[str, list[UttRecord]] = {}
        for rec in self.records:
            self.by_speaker.setdefault(rec.speaker_id, []).append(rec)
        self.speakers = sorted(self.by_speaker)
        self.speaker_index = {s: i for i, s in enumerate(self.speakers)}

    @classmethod
    def from_manifest(cls, path) -> "Dataset":
        return cls(load_manifest(path), root=Path(path).parent)

    def __len__(self):
        return len(self.records)

    def resolve(self, rec: UttRecord) -> Path:
        p = Path(rec.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


@dataclass
class PKBatch:
    """P speakers x K crops with dataset-level integer labels."""

    crops: np.ndarray
    labels: np.ndarray
    speaker_ids: list
    p: int
    k: int
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.p < 2 or self.k < 2:
            raise ContractError("PK batch needs P >= 2 and K >= 2")
        if self.labels.shape != (self.p * self.k,):
            raise ContractError(f"expected {self.p * self.k} labels, got {self.labels.shape}")
        if self.crops.shape[0] != self.p * self.k:
            raise ContractError(f"expected {self.p * self.k} crops, got {self.crops.shape[0]}")
        uniq, counts = np.unique(self.labels, return_counts=True)
        if len(uniq) != self.p or not np.all(counts == self.k):
            raise ContractError("batch must hold exactly P distinct labels, K crops each")


def sample_pk(dataset: Dataset, p: int, k: int, rng: np.random.Generator, loader) -> PKBatch:
    """Sample P speakers and K utterances each, both without replacement.

    ``loader(path, rng) -> crop array`` turns an utterance into a network
    input; it receives the same generator, so a fixed seed fixes the batch.
    """
    if p < 2 or k < 2:
        raise ContractError("need P >= 2 and K >= 2")
    eligible = [s for s in dataset.speakers if len(dataset.by_speaker[s]) >= k]
    if len(eligible) < p:
        raise DataError(
            f"need {p} speakers with >= {k} utterances, dataset has {len(eligible)}"
        )
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=p, replace=False)]
    crops, labels, speaker_ids, records = [], [], [], []
    for spk in chosen:
        utts = dataset.by_speaker[spk]
        for j in rng.choice(len(utts), size=k, replace=False):
            rec = utts[j]
            crops.append(loader(dataset.resolve(rec), rng))
            labels.append(dataset.speaker_index[spk])
            speaker_ids.append(spk)
            records.append(rec)
    return PKBatch(np.stack(crops), np.asarray(labels), speaker_ids, p, k, records)


@dataclass(frozen=True)
class TripletIndices:
    anchor: int
    positive: int
    negative: int


def _pairwise_sq_dists(embeddings: np.ndarray) -> np.ndarray:
    sq = (embeddings * embeddings).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * embeddings @ embeddings.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def mine_semi_hard(embeddings, labels, margin: float = 0.0) -> list[TripletIndices]:
    """Pick one negative per ordered (anchor, positive) pair.

    The semi-hard choice minimizes ||a-n||^2 subject to ||a-n||^2 > ||a-p||^2;
    when no negative satisfies that, the hardest negative (minimum ||a-n||^2)
    is used instead. ``margin`` is accepted alongside the loss configuration
    but does not enter the selection rule.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if embeddings.shape[0] != n:
        raise ContractError("one embedding per label required")
    if len(np.unique(labels)) < 2:
        raise ContractError("mining needs at least two classes in the batch")
    d2 = _pairwise_sq_dists(embeddings)
    triplets = []
    for a in range(n):
        neg_idx = np.nonzero(labels != labels[a])[0]
        d_an = d2[a, neg_idx]
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            d_ap = d2[a, p]
            semi = d_an > d_ap
            if semi.any():
                local = np.nonzero(semi)[0][np.argmin(d_an[semi])]
            else:
                local = int(np.argmin(d_an))
            triplets.append(TripletIndices(a, p, int(neg_idx[local])))
    return triplets


@dataclass
class NPairTuple:
    """One (anchor, positive) index pair per class, N distinct classes."""

    anchor_idx: np.ndarray
    positive_idx: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.anchor_idx = np.asarray(self.anchor_idx, dtype=np.intp)
        self.positive_idx = np.asarray(self.positive_idx, dtype=np.intp)
        self.labels = np.asarray(self.labels)
        n = len(self.labels)
        if n < 2:
            raise ContractError("n-pair tuple needs at least two classes")
        if self.anchor_idx.shape != (n,) or self.positive_idx.shape != (n,):
            raise ContractError("index arrays must have one entry per class")
        if len(np.unique(self.labels)) != n:
            raise ContractError("n-pair classes must be distinct")

    @property
    def n(self) -> int:
        return len(self.labels)


def build_npair(embeddings, labels) -> NPairTuple:
    """Pair the first two crops of each class in batch order, N = P."""
    labels = np.asarray(labels)
    if embeddings is not None and len(embeddings) != len(labels):
        raise ContractError("one embedding per label required")
    first: dict = {}
    second: dict = {}
    order = []
    for i, lab in enumerate(labels.tolist()):
        if lab not in first:
            first[lab] = i
            order.append(lab)
        elif lab not in second:
            second[lab] = i
    missing = [lab for lab in order if lab not in second]
    if missing:
        raise ContractError(f"n-pair construction needs K >= 2; classes {missing} have one crop")
    return NPairTuple(
        anchor_idx=np.array([first[lab] for lab in order]),
        positive_idx=np.array([second[lab] for lab in order]),
        labels=np.array(order),
    )


def build_angular_triplets(embeddings, labels, margin: float = 0.0) -> list[TripletIndices]:
    """The angular term shares the mined triplet structure."""
    return mine_semi_hard(embeddings, labels, margin)
