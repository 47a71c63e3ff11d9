import numpy as np
import pytest

from garmesh.mesh import Mesh
from garmesh.primitives import grid_faces, tube

_ACCEPTANCE = []


def wavy_sheet(rows=8, cols=9, seed=0, noise=0.02):
    """Randomly perturbed open grid, no near-degenerate faces."""
    rng = np.random.default_rng(seed)
    x, y = np.meshgrid(np.linspace(0, 1, cols), np.linspace(0, 1, rows))
    z = 0.1 * np.sin(3 * x + 1) * np.cos(2 * y)
    v = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    v = v + rng.normal(0, noise, v.shape)
    return Mesh(v, grid_faces(rows, cols))


def noisy_tube(n_around=12, n_down=8, seed=0, noise=0.01):
    rng = np.random.default_rng(seed)
    m = tube(0.3, 0.3, -0.3, n_around, n_down)
    return m.with_vertices(m.vertices + rng.normal(0, noise, m.vertices.shape))


def fd_check(fn, x, h=1e-5, exclude=None):
    """Relative error between ``fn(x)[1]`` and central differences of ``fn(x)[0]``.

    ``exclude`` is a boolean mask shaped like ``x``; masked coordinates
    (nearest-neighbour ties) are left out of the comparison.
    """
    x = np.array(x, dtype=np.float64)
    _, grad = fn(x)
    keep = np.ones(x.shape, bool) if exclude is None else ~np.asarray(exclude, bool)
    fd = np.zeros_like(x)
    for idx in zip(*np.nonzero(keep)):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
    num = np.linalg.norm((grad - fd)[keep])
    den = max(np.linalg.norm(fd[keep]), 1e-12)
    return num / den


def chamfer_tie_mask(a, b, h=1e-5, slack=10.0):
    """Rows of ``a`` whose +-h moves could switch a nearest-neighbour assignment.

    A point is a tie if its own two nearest targets are within ``slack*h``
    in distance, or if it is one of the two nearest sources of a target whose
    first two source distances are that close.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    tie = np.zeros(len(a), bool)
    if d.shape[1] > 1:
        s = np.sort(d, axis=1)
        tie |= s[:, 1] - s[:, 0] <= slack * h
    if d.shape[0] > 1:
        order = np.argsort(d, axis=0)[:2]
        s = np.take_along_axis(d, order, axis=0)
        close = s[1] - s[0] <= slack * h
        tie[order[:, close].ravel()] = True
    return np.repeat(tie[:, None], 3, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    passed = call.excinfo is None
    detail = ""
    for name, value in item.user_properties:
        if name == "detail":
            detail = value
    _ACCEPTANCE.append((marker.args[0], marker.args[1], passed, detail))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion covered by a test")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, text, passed, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0][2:])):
        line = f"{cid:<5} {'PASS' if passed else 'FAIL'}  {text}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)
