import functools

import pytest

from saapde.problems import make_problem
from saapde.saa_engine import ExactProblem, build_envelope

TAGS = ("boundary_semilinear", "burgers", "distributed_maxterm", "appendix_infcompact")


@functools.lru_cache(maxsize=None)
def enveloped(tag):
    """Default problem with R_ad from its default 5-atom model, plus that model."""
    p = make_problem(tag)
    model = p.make_model()
    env = build_envelope(ExactProblem(p, model))
    return p.with_envelope(env.r_ad), model, env


@pytest.fixture(params=TAGS)
def tag(request):
    return request.param


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
