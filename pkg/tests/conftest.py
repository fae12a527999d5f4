import hashlib
import inspect
import os
from pathlib import Path

import pytest

import acceptance_log
from kbtransformer import checkpoint, control, harness, seqmodel
from kbtransformer.harness import ExperimentConfig, dump_config, pretrain_model


def _pretrain_key(config: ExperimentConfig) -> str:
    # invalidate the cached model whenever the config or the code that produces it changes
    h = hashlib.sha256(dump_config(config.replace(checkpoint="")).encode())
    for mod in (seqmodel, control, checkpoint):
        h.update(Path(mod.__file__).read_bytes())
    h.update(inspect.getsource(harness.pretrain_model).encode())
    return h.hexdigest()[:16]


def _pretrained(config: ExperimentConfig, directory: Path) -> ExperimentConfig:
    path = directory / f"pretrained-{_pretrain_key(config)}.ckpt"
    if not path.exists():
        model, _ = pretrain_model(config)
        tmp = path.with_suffix(".tmp")
        model.save(tmp)
        os.replace(tmp, path)
    return config.replace(checkpoint=str(path))


@pytest.fixture(scope="session")
def pretrained_config(request):
    """Default config pointing at a default-pretrained checkpoint (cached across sessions)."""
    return _pretrained(ExperimentConfig(), Path(request.config.cache.mkdir("kbt-pretrained")))


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    """A barely trained model; fast to build, fine for plumbing and bookkeeping tests."""
    base = ExperimentConfig(pretrain_samples=200, pretrain_epochs=2, n_samples=40, trials=2, timing=False)
    return _pretrained(base, tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    out = acceptance_log.lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
