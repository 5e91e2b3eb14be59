import os
import subprocess
import sys

import pytest

from moe_upcycle import _backend

SCRIPT = """
import hashlib, numpy as np
from moe_upcycle import backend_name, init_dense_random, ModelConfig, UpcyclePlan, upcycle
from moe_upcycle.losses import compute_loss
from moe_upcycle.schedule import OptState, optimizer_step
ck = upcycle(init_dense_random(ModelConfig(2, 8, 16, 32), 0), UpcyclePlan(4, 2, 2, seed=1))
ids = np.arange(32)
rep, grads = compute_loss(ck, ids, (ids * 7) % 32)
optimizer_step(ck.tensors, grads, OptState(), 1e-2)
print(backend_name(), ck.digest(), repr(rep.total))
"""


def run(backend):
    env = dict(os.environ, MOE_UPCYCLE_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_python_backend_selectable():
    assert run("python")[0] == "python"


@pytest.mark.skipif(not _backend.native_available(), reason="compiled kernels not built")
def test_backends_agree_bit_for_bit():
    nat, py = run("native"), run("python")
    assert nat[0] == "native"
    assert nat[1:] == py[1:]


def test_bad_backend_name():
    env = dict(os.environ, MOE_UPCYCLE_BACKEND="gpu")
    out = subprocess.run([sys.executable, "-c", "import moe_upcycle"], env=env, capture_output=True, text=True)
    assert out.returncode != 0
