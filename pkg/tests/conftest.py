from pathlib import Path

import pytest

from html_bundler import generate_corpus
from radio_sim import REFERENCE_SIZES_KB

ROOT = Path(__file__).resolve().parent.parent
REFERENCE_DIR = ROOT / "reference_data"
PROFILE_DIR = ROOT / "profiles"
EXPERIMENT_DIR = ROOT / "experiments"
TESTDATA_DIR = ROOT / "testdata"

# 1x1 transparent PNG
DOT_PNG = bytes.fromhex(
    "89504e470d0a1a0a0000000d4948445200000001000000010806000000"
    "1f15c4890000000d49444154789c6360000002000154a24f5d0000000049454e44ae426082"
)


@pytest.fixture(scope="session")
def corpus():
    """Benchmark pages keyed by size in kb"""
    return dict(zip(REFERENCE_SIZES_KB, generate_corpus(REFERENCE_SIZES_KB)))
