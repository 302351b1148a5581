from dataclasses import replace

import pytest

from hybridseq import recipes


@pytest.fixture(scope="module")
def tiny_task():
    return recipes.TransferTask(source_utts=40, target_utts=10, test_utts=10, text_sentences=50,
                                source_steps=3, target_steps=3, step1=2, step2=2, lm_cells=8,
                                lm_epochs=1, beam=2, decode_max_len=20)


def test_transfer_experiment_runs(tiny_task):
    result = recipes.run_transfer_experiment(tiny_task, 0)
    assert set(result.wer) == {"scratch", "transferred", "boosted", "transferred+lm", "boosted+lm"}
    assert all(v >= 0 for v in result.wer.values())
    assert set(result.dev_token_error) == {"scratch", "transferred", "boosted"}


def test_transfer_experiment_deterministic(tiny_task):
    task = replace(tiny_task, with_fusion=False)
    assert recipes.run_transfer_experiment(task, 1).wer == recipes.run_transfer_experiment(task, 1).wer


def test_languages_share_acoustics_not_labels(tiny_task):
    src = tiny_task.spec(tiny_task.source_alphabet, 10, 0, "src")
    tgt = tiny_task.spec(tiny_task.target_alphabet, 10, 100, "tgt")
    assert not set(src.alphabet) & set(tgt.alphabet)
    assert src.prototype_seed != tgt.prototype_seed  # the experiment overrides this to share them


def test_first_train_sizes(tiny_task):
    spec = tiny_task.spec("abc", 10, 0, "x")
    train, _, test = recipes._first_train(spec, 30, 12)
    assert len(train) == 30 and len(test) == 12
