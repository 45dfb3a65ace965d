import numpy as np
import pytest

from zeroreg.geometry import RigidTransform, random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_transform(rng, max_t=1.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-max_t, max_t, size=3))


def cube_cloud(rng, n=4000, size=1.0):
    return rng.uniform(0.0, size, size=(n, 3))


def planted_pairs(rng, n, outlier_frac, noise=0.0, T=None, extent=5.0):
    """(src, dst, T, inlier mask) with ``outlier_frac`` of dst replaced."""
    T = T or random_transform(rng, 2.0)
    src = rng.uniform(-extent, extent, size=(n, 3))
    dst = T.apply(src) + rng.normal(scale=noise, size=(n, 3))
    n_out = int(round(outlier_frac * n))
    out = rng.choice(n, size=n_out, replace=False)
    dst[out] = rng.uniform(-extent, extent, size=(n_out, 3)) + T.translation
    mask = np.ones(n, dtype=bool)
    mask[out] = False
    return src, dst, T, mask


# acceptance criteria report: one line per criterion, repeated in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
