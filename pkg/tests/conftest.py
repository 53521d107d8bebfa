from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from bnnmap.autodiff import Stream
from bnnmap.model import init_mapper
from bnnmap.world import generate_floorplan


def central_diff(f: Callable[[], float], arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. ``arr[idx]``, restoring the entry afterwards."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def sample_indices(shape, k: int, rng: np.random.Generator) -> list[tuple]:
    flat = rng.choice(int(np.prod(shape)), size=min(k, int(np.prod(shape))), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


@pytest.fixture
def tiny_net():
    return init_mapper(Stream(7), width=8, depth=2)


@pytest.fixture(scope="session")
def layout():
    return generate_floorplan(0)


def empty_room(size_m: float = 10.0, res: float = 0.05) -> np.ndarray:
    n = int(round(size_m / res))
    g = np.zeros((n, n), dtype=bool)
    g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = True
    return g


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
