import numpy as np
import pytest

from conftest import TINY_MODEL
from metricforge.errors import ContractError, DataError
from metricforge.evaluate import (
    EERResult,
    ScoreSet,
    compute_eer,
    det_points,
    evaluate,
    load_trials,
    pair_distance,
    read_scores_csv,
    write_det_csv,
    write_eer_json,
    write_scores_csv,
)
from metricforge.model import init_params


def _brute_force_eer(scores, labels):
    """Sweep every distinct threshold (plus one past the max), pick min |FAR-FRR|."""
    tar = scores[labels == 1]
    non = scores[labels == 0]
    cands = list(np.unique(scores)) + [np.max(scores) + 1.0]
    best = None
    for t in cands:
        far = np.mean(non >= t)
        frr = np.mean(tar < t)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2.0)
    return best[1]


class TestComputeEER:
    def test_perfect_separation(self):
        s = ScoreSet(np.array([0.9, 0.9, 0.9, 0.1, 0.1]), np.array([1, 1, 1, 0, 0]))
        assert compute_eer(s).eer == 0.0

    def test_identical_multisets_give_half(self):
        s = ScoreSet(np.array([0.3, 0.7, 0.3, 0.7]), np.array([1, 1, 0, 0]))
        assert compute_eer(s).eer == pytest.approx(0.5, abs=1e-12)

    def test_all_tied_scores_give_half(self):
        s = ScoreSet(np.array([0.5, 0.5, 0.5, 0.5]), np.array([1, 1, 0, 0]))
        assert compute_eer(s).eer == pytest.approx(0.5, abs=1e-12)

    def test_three_plus_three_is_one_third(self):
        s = ScoreSet(np.array([0.8, 0.6, 0.4, 0.7, 0.3, 0.2]),
                     np.array([1, 1, 1, 0, 0, 0]))
        result = compute_eer(s)
        assert result.eer == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(4, 400))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            scores = rng.normal(size=n) + 0.6 * labels
            s = ScoreSet(scores, labels)
            assert abs(compute_eer(s).eer - _brute_force_eer(scores, labels)) <= 1.0 / n

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=101)
        labels[:2] = [0, 1]
        scores = rng.normal(size=101) + labels
        base = compute_eer(ScoreSet(scores, labels)).eer
        for transform in (lambda x: 3 * x + 2, np.tanh, lambda x: x ** 3):
            assert compute_eer(ScoreSet(transform(scores), labels)).eer == base

    def test_missing_class_rejected(self):
        with pytest.raises(ContractError):
            compute_eer(ScoreSet(np.array([0.1, 0.2]), np.array([1, 1])))

    def test_threshold_sits_at_crossing(self):
        s = ScoreSet(np.array([0.8, 0.6, 0.4, 0.7, 0.3, 0.2]),
                     np.array([1, 1, 1, 0, 0, 0]))
        r = compute_eer(s)
        # at the returned threshold FAR and FRR are both 1/3
        assert np.mean(np.array([0.7, 0.3, 0.2]) >= r.threshold) == pytest.approx(r.eer)
        assert np.mean(np.array([0.8, 0.6, 0.4]) < r.threshold) == pytest.approx(r.eer)


class TestDetPoints:
    def test_monotone(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=100)
        labels[:2] = [0, 1]
        scores = rng.normal(size=100) + 0.8 * labels
        pts = det_points(ScoreSet(scores, labels))
        assert np.all(np.diff(pts[:, 0]) <= 0)
        assert np.all(np.diff(pts[:, 1]) >= 0)

    def test_perfect_separation_touches_origin_corner(self):
        s = ScoreSet(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0]))
        pts = det_points(s)
        assert (pts == [0.0, 0.0]).all(axis=1).any()

    def test_eer_between_adjacent_points(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=80)
        labels[:2] = [0, 1]
        scores = rng.normal(size=80) + labels
        s = ScoreSet(scores, labels)
        eer = compute_eer(s).eer
        pts = det_points(s)
        gap = pts[:, 0] - pts[:, 1]
        if np.any(gap == 0):
            assert eer in pts[gap == 0, 0]
        else:
            i = int(np.nonzero(gap >= 0)[0][-1])
            lo = min(pts[i, 0], pts[i + 1, 0], pts[i, 1], pts[i + 1, 1])
            hi = max(pts[i, 0], pts[i + 1, 0], pts[i, 1], pts[i + 1, 1])
            assert lo <= eer <= hi


class TestPairDistance:
    def test_symmetric(self, tiny_corpus):
        params = init_params(TINY_MODEL, 0)
        root = tiny_corpus["root"]
        utts = sorted((root / "wav").rglob("*.wav"))[:2]
        ab = pair_distance(utts[0], utts[1], TINY_MODEL, params)
        ba = pair_distance(utts[1], utts[0], TINY_MODEL, params)
        assert ab == pytest.approx(ba, abs=1e-12)

    def test_exactly_100_distances(self, monkeypatch, tiny_corpus):
        import metricforge.evaluate as ev

        seen = {}
        orig = ev._mean_distance

        def spy(ea, eb, metric):
            seen["shape"] = (ea.shape[0], eb.shape[0])
            return orig(ea, eb, metric)

        monkeypatch.setattr(ev, "_mean_distance", spy)
        params = init_params(TINY_MODEL, 0)
        utts = sorted((tiny_corpus["root"] / "wav").rglob("*.wav"))[:2]
        pair_distance(utts[0], utts[1], TINY_MODEL, params)
        assert seen["shape"] == (10, 10)

    def test_degenerate_constant_model_gives_zero_distance(self, tiny_corpus):
        from metricforge.evaluate import _mean_distance

        e = np.tile(np.array([[1.0, 0.0, 0.0]]), (10, 1))
        assert _mean_distance(e, e, "cosine") == pytest.approx(0.0, abs=1e-12)


class TestEvaluate:
    def test_duplicated_trial_scores_identical(self, tiny_corpus, tmp_path):
        trials = tiny_corpus["trials"].read_text().splitlines()
        dup = tmp_path / "dup_trials.txt"
        dup.write_text("\n".join([trials[0], trials[1], trials[0]]) + "\n")
        import shutil

        # trial paths resolve relative to the trial file, so mirror the wavs
        shutil.copytree(tiny_corpus["root"] / "wav", tmp_path / "wav")
        params = init_params(TINY_MODEL, 1)
        out = evaluate(dup, TINY_MODEL, params)
        assert out.rows[0][3] == out.rows[2][3]

    def test_missing_paths_listed(self, tmp_path):
        t = tmp_path / "trials.txt"
        t.write_text("1 missing_a.wav missing_b.wav\n0 missing_a.wav missing_c.wav\n")
        with pytest.raises(DataError, match="missing_a.wav"):
            evaluate(t, TINY_MODEL, init_params(TINY_MODEL, 0))

    def test_cosine_and_sqeuclidean_eers_match_on_unit_embeddings(self, tiny_corpus):
        params = init_params(TINY_MODEL, 2)
        a = evaluate(tiny_corpus["trials"], TINY_MODEL, params, metric="cosine")
        b = evaluate(tiny_corpus["trials"], TINY_MODEL, params, metric="sqeuclidean")
        # squared euclidean on unit vectors is exactly twice the cosine distance
        np.testing.assert_allclose(b.scores.scores, 2.0 * a.scores.scores, atol=1e-12)
        assert a.result.eer == b.result.eer

    def test_threaded_matches_sequential(self, tiny_corpus):
        params = init_params(TINY_MODEL, 3)
        seq = evaluate(tiny_corpus["trials"], TINY_MODEL, params, threads=1)
        par = evaluate(tiny_corpus["trials"], TINY_MODEL, params, threads=4)
        np.testing.assert_array_equal(seq.scores.scores, par.scores.scores)

    def test_malformed_trials_rejected(self, tmp_path):
        t = tmp_path / "bad.txt"
        t.write_text("2 a.wav b.wav\n")
        with pytest.raises(DataError):
            load_trials(t)


class TestScoreFiles:
    def test_round_trip(self, tmp_path):
        rows = [(1, "a.wav", "b.wav", -0.25), (0, "a.wav", "c.wav", -0.75)]
        p = tmp_path / "scores.csv"
        write_scores_csv(p, rows)
        s = read_scores_csv(p)
        np.testing.assert_allclose(s.scores, [-0.25, -0.75])
        np.testing.assert_array_equal(s.labels, [1, 0])

    def test_eer_json_and_det_csv(self, tmp_path):
        s = ScoreSet(np.array([0.9, 0.1]), np.array([1, 0]))
        r = compute_eer(s)
        write_eer_json(tmp_path / "eer.json", r, s, "cosine")
        import json

        payload = json.loads((tmp_path / "eer.json").read_text())
        assert payload["eer"] == 0.0
        assert payload["num_trials"] == 2
        write_det_csv(tmp_path / "det.csv", det_points(s))
        lines = (tmp_path / "det.csv").read_text().splitlines()
        assert lines[0] == "far,frr"
        assert len(lines) == 3

    def test_bad_score_file(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("label,path_a,path_b,score\n7,a,b,0.5\n")
        with pytest.raises(DataError):
            read_scores_csv(p)
