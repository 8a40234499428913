import os
import sys
from pathlib import Path

# single-threaded BLAS keeps reductions bit-stable before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))

import pytest  # noqa: E402

CACHE_DIR = Path(__file__).parent / ".cache"
PRETRAIN_STEPS = 2000
PRETRAIN_CORPUS = 512


def pretrained_encoder(seed: int, n_blocks: int = 2):
    """Pretrain once per (seed, n_blocks) and reuse the checkpoint across runs.

    The cache key carries a version tag; bump it if the architecture, the
    initialization, or the training recipe changes.
    """
    from covertalign import encoder as E

    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / f"enc_s{seed}_b{n_blocks}_v1.ckpt"
    if path.exists():
        return E.load_weights(path.read_bytes())
    enc = E.pretrain_contrastive(seed=seed, steps=PRETRAIN_STEPS,
                                 corpus_size=PRETRAIN_CORPUS, n_blocks=n_blocks)
    path.write_bytes(E.save_weights(enc))
    return enc


@pytest.fixture(scope="session")
def surrogate_one():
    from covertalign.encoder import SURROGATE_SEEDS

    return pretrained_encoder(SURROGATE_SEEDS[0])


@pytest.fixture(scope="session")
def surrogates():
    from covertalign.encoder import SURROGATE_SEEDS, EncoderBundle

    return EncoderBundle(tuple(pretrained_encoder(s) for s in SURROGATE_SEEDS), "surrogate")


@pytest.fixture(scope="session")
def victims():
    from covertalign.encoder import VICTIM_SPECS, EncoderBundle

    return EncoderBundle(
        tuple(pretrained_encoder(seed, n_blocks) for seed, n_blocks in VICTIM_SPECS), "victim")
