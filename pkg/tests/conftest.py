import numpy as np
import pytest

from stegattn.gradcheck import small_check_config
from stegattn.qim import default_codebooks
from stegattn.qis import CodecShape


@pytest.fixture(scope="session")
def codec_shape():
    return CodecShape()


@pytest.fixture(scope="session")
def small_shape():
    return CodecShape(codebook_sizes=(5, 4, 3))


@pytest.fixture(scope="session")
def small_config():
    return small_check_config()


@pytest.fixture(scope="session")
def default_qim(codec_shape):
    return default_codebooks(codec_shape, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
