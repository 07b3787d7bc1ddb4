import numpy as np
import pytest
import torch

from jointist import _kernels_py, kernels

BACKENDS = {"python": _kernels_py}
try:
    from jointist import _kernels as _compiled
    BACKENDS["compiled"] = _compiled
except ImportError:  # extension not built
    pass


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per kernel backend, routing ``jointist.kernels`` to it."""
    impl = BACKENDS[request.param]
    for name in ("render_notes", "decode_rolls", "max_matching"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return impl


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
