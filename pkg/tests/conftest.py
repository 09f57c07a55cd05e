import dataclasses
import pathlib
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

# Stdlib sources make a deterministic few-MB byte-level corpus without any
# network access; the exact text only matters within one session.
_CORPUS_MODULES = [
    "json", "argparse", "dataclasses", "typing", "inspect", "difflib",
    "ast", "pickle", "pydoc", "unittest", "logging", "email", "http",
    "urllib", "xml", "asyncio", "collections", "importlib", "ctypes",
    "multiprocessing", "concurrent", "encodings",
]


def build_corpus(target_bytes: int) -> bytes:
    parts = []
    total = 0
    for name in _CORPUS_MODULES:
        mod = __import__(name)
        path = pathlib.Path(mod.__file__)
        files = sorted(path.parent.rglob("*.py")) if path.name == "__init__.py" else [path]
        for f in files:
            try:
                data = f.read_bytes()
            except OSError:
                continue
            parts.append(data)
            total += len(data)
            if total >= target_bytes:
                return b"".join(parts)[:target_bytes]
    return b"".join(parts)[:target_bytes]


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory) -> pathlib.Path:
    """~2 MB deterministic text corpus (within the 1-5 MB target band)."""
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(build_corpus(2_200_000))
    return path


@pytest.fixture(scope="session")
def small_corpus_path(tmp_path_factory) -> pathlib.Path:
    """~100 KB corpus for smoke-scale training tests."""
    path = tmp_path_factory.mktemp("corpus_small") / "small.txt"
    path.write_bytes(build_corpus(100_000))
    return path


@pytest.fixture(scope="session")
def holdout_text_path(tmp_path_factory) -> pathlib.Path:
    """Corpus tail disjoint from the training corpus, for held-out evals."""
    path = tmp_path_factory.mktemp("holdout") / "holdout.txt"
    path.write_bytes(build_corpus(2_400_000)[2_200_000:])
    return path


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


# --- trained twin models for the acceptance suite -------------------------

TWIN_MODEL = dict(n_layers=2, d_model=128, n_heads=4, n_ctx=128, window=512,
                  rope_base=1e5, seed=0)
TWIN_TRAIN = dict(steps=2000, batch_tokens=1024, warmup=100, eval_every=500,
                  seed=0)


@dataclasses.dataclass
class TwinPair:
    softmax: object  # TrainResult
    elastic: object
    elapsed: float
    seed: int


def train_twin_pair(corpus, out_root, seed, steps) -> TwinPair:
    from lazyattn.model import ModelConfig
    from lazyattn.training import TrainConfig, train

    t0 = time.perf_counter()
    results = {}
    for name, over in (("softmax", dict(positional="rope", normalizer="softmax")),
                       ("elastic", dict(positional="rope_bias", normalizer="elastic",
                                        tau_init=-1.0))):
        mc = ModelConfig(**{**TWIN_MODEL, **over, "seed": seed})
        tc = TrainConfig(corpus=str(corpus), out_dir=str(out_root / f"{name}{seed}"),
                         **{**TWIN_TRAIN, "steps": steps, "seed": seed})
        results[name] = train(mc, tc)
    return TwinPair(softmax=results["softmax"], elastic=results["elastic"],
                    elapsed=time.perf_counter() - t0, seed=seed)


@pytest.fixture(scope="session")
def trained_twins(corpus_path, tmp_path_factory) -> TwinPair:
    """The criterion-6 twins: identical seed/corpus, 2000 steps each."""
    out = tmp_path_factory.mktemp("twins")
    return train_twin_pair(corpus_path, out, seed=0, steps=TWIN_TRAIN["steps"])


@pytest.fixture(scope="session")
def extra_seed_twins(corpus_path, tmp_path_factory) -> list[TwinPair]:
    """Two reduced-step twin pairs for the multi-seed extrapolation report."""
    out = tmp_path_factory.mktemp("twins_extra")
    return [train_twin_pair(corpus_path, out, seed=seed, steps=600) for seed in (1, 2)]
