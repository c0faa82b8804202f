import sys

import pytest

from trimodal.config import RunConfig, apply_overrides
from trimodal.pipeline import prepare

TINY = [
    'corpus.sizes={"AV": 6, "A": 6, "AP": 6, "P": 6}',
    "corpus.labeled=4",
    "corpus.test=4",
    "corpus.latent_units=8",
    "corpus.roi=8",
    "tokenizer.k=8",
    "tokenizer.n_init=1",
    "p2u.steps=20",
    "p2u.dim=16",
    "p2u.enc_layers=1",
    "p2u.dec_layers=1",
    "model.dim=8",
    "model.layers=1",
    "model.visual_channels=2",
    "model.embed_dim=4",
    "sampler.batch_size=4",
    "optim.warmup=10",
    "train.checkpoint_every=0",
]


def tiny_config(*extra) -> RunConfig:
    return apply_overrides(RunConfig(), TINY + list(extra))


@pytest.fixture(scope="session")
def tiny_prepared():
    cfg = tiny_config()
    return cfg, prepare(cfg)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
