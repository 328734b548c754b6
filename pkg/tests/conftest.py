# Pin BLAS to one thread before numpy loads so results are bit-deterministic
# under concurrent fine-tuning jobs (parallel-equivalence tests).
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from twinpress.model import ModelDims, build_toy_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_dims():
    return ModelDims(d=32, n_heads=4, d_h=8, d_ff=64, n_layers=2, vocab=11)


@pytest.fixture
def toy_model(toy_dims):
    return build_toy_model(toy_dims, np.random.default_rng(7))
