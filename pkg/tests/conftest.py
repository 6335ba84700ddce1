import copy

import pytest
import torch

from pisnet.data_pipeline import SynthConfig, write_dataset
from pisnet.training import TrainConfig, pretrain_backbone

torch.set_num_threads(1)

TINY_SYNTH = SynthConfig(ids=6, singles_per_id=6, multis=40, distractors=10, id_split="closed",
                         query_per_id=2, multi_scale=(0.6, 0.8), multi_train_frac=0.7, seed=0)


def tiny_train_cfg(**kw) -> TrainConfig:
    base = dict(batch_size=8, base_lr=0.05, pretrain_lr=0.05, total_epochs=3, decay_epoch=2,
                pretrain_epochs=3, pretrain_batch_size=16, steps_per_epoch=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return write_dataset(TINY_SYNTH, tmp_path_factory.mktemp("tiny") / "ds")


@pytest.fixture(scope="session")
def _pretrained(tiny_manifest):
    return pretrain_backbone(tiny_manifest, tiny_train_cfg())


@pytest.fixture
def pretrained(_pretrained):
    """A private copy of the session's pretrained model."""
    model = copy.deepcopy(_pretrained)
    return model


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
