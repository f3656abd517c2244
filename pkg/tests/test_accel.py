import os
import subprocess
import sys
from pathlib import Path

import pytest

from promptseg import _accel

ROOT = Path(__file__).resolve().parents[1]


def _flag(env: dict[str, str]) -> str:
    code = "from promptseg import _accel; print(_accel.USE_NUMBA)"
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env={**os.environ, **env})
    return res.stdout.strip()


def test_env_switch_selects_numpy():
    assert _flag({"PROMPTSEG_NUMBA": "0"}) == "False"
    assert _flag({"PROMPTSEG_NUMBA": "1"}) == str(_accel.HAS_NUMBA)


def test_thread_cap(monkeypatch):
    import torch

    before = torch.get_num_threads()
    try:
        assert _accel.set_threads(1) == 1 and torch.get_num_threads() == 1
        monkeypatch.setenv("PROMPTSEG_THREADS", "1")
        assert _accel.set_threads() == 1
        with pytest.raises(ValueError):
            _accel.set_threads(0)
    finally:
        torch.set_num_threads(before)


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba unavailable")
def test_benchmark_script_runs():
    res = subprocess.run([sys.executable, str(ROOT / "benchmarks" / "bench_kernels.py"), "--sizes", "16",
                          "--repeat", "1"], capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert "edt_sq" in res.stdout and "speed-up" in res.stdout
