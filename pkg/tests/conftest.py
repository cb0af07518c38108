import numpy as np
import pytest

from dropping.data import SynthSpec, synth_task
from dropping.encoders import ModelConfig, PairModel
from dropping.ensemble import BagConfig, train_dropping_ensemble
from dropping.training import TrainConfig, train_model


def synth(size, seed, **kw):
    return synth_task(SynthSpec(size=size, **kw), np.random.default_rng(seed))


@pytest.fixture(scope="session")
def shift0_source():
    """Bidirectional 1-layer model trained on the shift-0 overlap task (vocab 40)."""
    cfg = ModelConfig(vocab_size=41, embed_dim=16, hidden_size=24, num_layers=1,
                      bidirectional=True, dropout=0.2)
    model = PairModel.init(cfg, np.random.default_rng(0))
    train_model(model, synth(3000, 1).encoded(),
                TrainConfig(lr=0.01, batch_size=64, epochs=15, eval_every=20, patience=20),
                np.random.default_rng(4), dev=synth(300, 2).encoded())
    return model


TINY_MODEL = ModelConfig(vocab_size=21, embed_dim=6, hidden_size=6, num_layers=2)
TINY_SPEC = dict(vocab_size=20, min_len=4, max_len=6)


@pytest.fixture(scope="session")
def tiny_sources():
    """Small related (shift 0) and distant (shift 0.8) source ensembles."""
    bag = BagConfig(n_members=3, train=TrainConfig(lr=0.01, batch_size=32, epochs=3,
                                                   eval_every=10, patience=3))
    out = {}
    for name, shift, seed in (("related", 0.0, 30), ("distant", 0.8, 40)):
        train = synth(600, seed, shift=shift, **TINY_SPEC).encoded()
        dev = synth(100, seed + 1, shift=shift, **TINY_SPEC).encoded()
        out[name] = train_dropping_ensemble(train, dev, TINY_MODEL, bag, seed=seed)
    return out


@pytest.fixture(scope="session")
def tiny_target():
    return {"few": synth(60, 50, shift=0.1, **TINY_SPEC),
            "dev": synth(80, 51, shift=0.1, **TINY_SPEC),
            "test": synth(200, 52, shift=0.1, **TINY_SPEC)}


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, ok, detail=""):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"ACCEPTANCE {criterion}: {status}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
