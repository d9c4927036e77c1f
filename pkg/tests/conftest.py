import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

from dsfda.data import SynthConfig, synth_generate  # noqa: E402
from dsfda.networks import ModelConfig  # noqa: E402
from dsfda.training import TrainConfig, pretrain_source  # noqa: E402


def small_model_config(c_id=4, c_exp=2, size=32):
    return ModelConfig(c_id=c_id, c_exp=c_exp, image_size=size, width=16, embed_dim=16, feat_dim=32,
                       feature_hw=4)


@pytest.fixture(scope="session")
def synth_data():
    """8 identities, 2 classes; the last 5 frames of every cell are held out."""
    data = synth_generate(SynthConfig(n_identities=8, n_expressions=2, frames_per_cell=25, image_size=32, seed=0))
    pos = torch.tensor([int(p.rsplit("/", 1)[1]) for p in data.paths])
    return data.select(pos < 20), data.select(pos >= 20, role="target-test")


@pytest.fixture(scope="session")
def trained_source(synth_data):
    train, _ = synth_data
    cfg = TrainConfig(phase="source", learning_rate=1e-3, epochs=6, batch_size=32, seed=0, augment=False)
    mcfg = ModelConfig(c_id=8, c_exp=2, image_size=32, width=32, feature_hw=4)
    return pretrain_source(train, cfg, mcfg)


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
