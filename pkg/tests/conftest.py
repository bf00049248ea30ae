import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from sgdiff.scene import Scene, SceneObject

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
positive = st.floats(0.01, 2.0, allow_nan=False)


@st.composite
def scenes(draw, min_n=1, max_n=6, num_categories=4, code_dim=3):
    n = draw(st.integers(min_n, max_n))
    objs = []
    for _ in range(n):
        objs.append(SceneObject(
            [draw(finite), draw(st.floats(0, 3)), draw(finite)],
            draw(st.floats(-np.pi, np.pi)),
            [draw(positive) for _ in range(3)],
            draw(st.integers(0, num_categories - 1)),
            [draw(finite) for _ in range(code_dim)],
        ))
    return Scene(tuple(objs))


def random_scene(rng: np.random.Generator, n: int, num_categories: int = 4, code_dim: int = 3) -> Scene:
    return Scene(tuple(
        SceneObject(rng.uniform(-3, 3, 3), rng.uniform(-np.pi, np.pi), rng.uniform(0.05, 1.0, 3),
                    int(rng.integers(num_categories)), rng.standard_normal(code_dim))
        for _ in range(n)
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda k: int(k[1:])):
        terminalreporter.write_line(results[name])
