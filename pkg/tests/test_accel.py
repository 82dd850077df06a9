import os
import subprocess
import sys

import numpy as np

from merlin.rng import stream

SCRIPT = """
import numpy as np
from merlin import _accel
from merlin.harness import RunConfig, run
res = run(RunConfig(dataset="synthetic", n_per_task=60, B=2, E=2, vae_epochs=2, chunk_size=100, buffer=12))
print(_accel.HAS_NUMBA, repr(res.seeds[0].matrix.rows))
"""


def run_with(flag):
    env = {**os.environ, "MERLIN_DISABLE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    has, rows = out.stdout.strip().split(" ", 1)
    return has == "True", eval(rows)


def test_env_flag_selects_numpy_path_with_matching_results():
    fast_has, fast = run_with("0")
    slow_has, slow = run_with("1")
    assert slow_has is False
    for a, b in zip(fast, slow):
        assert np.allclose(a, b, atol=1e-9)


def test_streams_are_keyed_not_ordered():
    a = stream(3, "gate", 1, 2).random(4)
    stream(3, "other").random(100)
    assert np.array_equal(a, stream(3, "gate", 1, 2).random(4))
    assert not np.array_equal(a, stream(3, "gate", 2, 1).random(4))
    assert not np.array_equal(a, stream(4, "gate", 1, 2).random(4))
