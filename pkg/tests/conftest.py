import pytest

from metricforge.model import ModelConfig
from metricforge.synth import gen_corpus, gen_trials

TINY_MODEL = ModelConfig(stage_channels=(4, 8), blocks_per_stage=1, se_reduction=2,
                         embedding_dim=8, stem_pool=4)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 train speakers x 3 utts plus 3 held-out speakers with a trial list."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    train = gen_corpus(root, 4, 3, 1.2, seed=100, manifest_name="train_manifest.tsv")
    evalm = gen_corpus(root, 3, 3, 1.2, seed=100, manifest_name="eval_manifest.tsv",
                       id_offset=4)
    trials = gen_trials(evalm, root / "trials.txt", 8, 8, seed=100)
    return {"root": root, "train": train, "eval": evalm, "trials": trials}
