import time

import numpy as np
import pytest

from contraction_ac import envs
from contraction_ac.numerics import make_rng
from contraction_ac.sysid import DynModel, collect_data, pretrain


@pytest.fixture(scope="session")
def car_pretrained():
    """Car dynamics model trained on the default 200-episode dataset (shared, ~1 min)."""
    spec = envs.make_env("car")
    data = collect_data(spec, make_rng(0, "collect"), episodes=200)
    model = DynModel(spec.n, spec.m, make_rng(0, "dyn-init"))
    t0 = time.perf_counter()
    res = pretrain(model, data, make_rng(0, "dyn-train"), batch=1024, epochs=100)
    return {"spec": spec, "data": data, "model": model, "result": res, "seconds": time.perf_counter() - t0}


# criterion number -> (passed, title, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
