import itertools
import sys

import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from amtubes.geometry import Box


@st.composite
def boxes(draw, min_size=0.0):
    x0 = draw(st.floats(0.0, 1.0 - min_size))
    y0 = draw(st.floats(0.0, 1.0 - min_size))
    x1 = draw(st.floats(x0 + min_size, 1.0))
    y1 = draw(st.floats(y0 + min_size, 1.0))
    return Box(x0, y0, x1, y1)


def raster_iou(a, b, res=1000):
    """IoU by counting pixel centres on a ``res`` x ``res`` lattice."""
    c = (np.arange(res) + 0.5) / res

    def mask(box):
        xs = (c >= box[0]) & (c < box[2])
        ys = (c >= box[1]) & (c < box[3])
        return ys[:, None] & xs[None, :]

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def brute_force_filter(model, obs):
    """P(q_t | o_1..o_t) by summing the joint over every state prefix."""
    n = model.n_states
    T = len(obs)
    emit = np.array([[multivariate_normal(model.means[i], model.covariances[i]).pdf(o)
                      for i in range(n)] for o in obs])
    out = np.zeros((T, n))
    for t in range(T):
        paths = np.array(list(itertools.product(range(n), repeat=t + 1)))
        p = model.initial[paths[:, 0]] * emit[0, paths[:, 0]]
        for k in range(1, t + 1):
            p = p * model.transitions[paths[:, k - 1], paths[:, k]] * emit[k, paths[:, k]]
        out[t] = np.bincount(paths[:, -1], weights=p, minlength=n)
        out[t] /= out[t].sum()
    return out


def random_model(rng, n, d=4, sep=0.3, cov_scale=0.05):
    from amtubes.hmm import HmmModel

    A = rng.random((n, n)) + 0.1
    A /= A.sum(axis=1, keepdims=True)
    means = rng.random((n, d)) * sep
    covs = []
    for _ in range(n):
        m = rng.normal(size=(d, d)) * cov_scale
        covs.append(m @ m.T + np.eye(d) * cov_scale**2)
    pi = rng.random(n) + 0.1
    return HmmModel(A, means, np.array(covs), pi / pi.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.format_line(n))
