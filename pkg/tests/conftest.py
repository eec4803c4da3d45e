import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from pathlib import Path

import numpy as np
import pytest

from bagvae.corpus import Bag, EncodedSentence
from bagvae.model import JointModel, ModelDims

FIXTURES = Path(__file__).parent / "fixtures"


def random_sentence(rng, length, head, tail, vocab=20, max_len=8, pair=("a", "b"), relation="r1"):
    ids = rng.integers(4, vocab, size=length)
    pos = np.arange(length)
    return EncodedSentence(ids, np.clip(pos - head[0], -max_len, max_len) + max_len,
                           np.clip(pos - tail[0], -max_len, max_len) + max_len,
                           head, tail, pair, relation)


def random_bag(rng, sizes, num_relations=3, pair=("a", "b"), vocab=20, max_len=8):
    sents = []
    for n in sizes:
        h = int(rng.integers(0, n - 1)) if n > 1 else 0
        t = int(rng.integers(0, n))
        sents.append(random_sentence(rng, n, (h, h + 1), (t, t + 1), vocab, max_len, pair))
    labels = np.zeros(num_relations, dtype=np.int64)
    labels[rng.integers(0, num_relations)] = 1
    return Bag(pair, sents, labels)


def tiny_dims(**overrides):
    kwargs = dict(vocab_size=20, num_relations=3, max_len=8, word_dim=4, pos_dim=2, latent_dim=3,
                  enc_hidden=5, dec_hidden=5, rel_dim=4, softmax="full")
    kwargs.update(overrides)
    return ModelDims(**kwargs)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def tiny_model():
    rng = np.random.default_rng(7)
    model = JointModel.create(tiny_dims(), rng)
    for p in model.params.values():
        p.data += rng.normal(0.0, 0.3, p.shape)
    return model


# (number, title, passed, details) appended by the acceptance tests
ACCEPTANCE = []
ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "KL oracle",
    3: "metric oracle equivalence",
    4: "synthetic end-to-end",
    5: "latent geometry",
    6: "TransE sanity",
    7: "preprocessing fixtures",
    8: "protocol invariants",
    9: "determinism",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    seen = {n: (ok, details) for n, _, ok, details in ACCEPTANCE}
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        ok, details = seen.get(n, (False, {"note": "not run or errored before checking"}))
        extra = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({extra})")
