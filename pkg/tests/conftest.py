import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dcppo.mdp import TabularLinearMdp, random_instance

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def one_hot_phi(S, A):
    n_live = S - 1
    phi = np.zeros((S, A, n_live * (A - 1)))
    for s in range(n_live):
        for a in range(1, A):
            phi[s, a, s * (A - 1) + a - 1] = 1.0
    return phi


def opt_out_P(H, S, A, live_block):
    """Transition tensor whose live, non-anchor part is ``live_block``."""
    P = np.zeros((H, S, A, S))
    P[:, :, 0, S - 1] = 1.0
    P[:, S - 1, :, :] = 0.0
    P[:, S - 1, :, S - 1] = 1.0
    P[:, : S - 1, 1:, : S - 1] = live_block
    return P


def hand_instance():
    """Two live states, two actions, two steps; every number chosen by hand."""
    S, A, H = 3, 2, 2
    live = np.array(
        [
            [[[0.3, 0.7]], [[0.6, 0.4]]],
            [[[1.0, 0.0]], [[0.2, 0.8]]],
        ]
    )
    w = np.array([[0.4, 0.2], [0.1, 0.5]])
    return TabularLinearMdp(one_hot_phi(S, A), opt_out_P(H, S, A, live), w).validate()


def dominance_instance(r1=0.2, r2=0.5):
    """One live state; action 2 pays most and both non-anchor actions stay live."""
    S, A, H = 2, 3, 2
    live = np.ones((H, 1, 2, 1))
    w = np.array([[r1, r2], [r1, r2]])
    return TabularLinearMdp(one_hot_phi(S, A), opt_out_P(H, S, A, live), w).validate()


def zero_reward_instance(seed=0):
    base = random_instance(seed, 4, 3, 3)
    return TabularLinearMdp(base.phi, base.P, np.zeros_like(base.w)).validate()


@pytest.fixture
def seed0():
    return random_instance(0, 5, 3, 3)


ACCEPTANCE_LINES = {}


def record_acceptance(number, title, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
