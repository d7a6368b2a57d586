import pytest

from rwtail import model

ACCEPTANCE_LINES: dict[str, str] = {}


def scenario(n=1, losses=None, weights=None, x_theta=None, x_x=None, theta_theta=None,
             regime="pTAI", stopping=None):
    rec = {"n": n,
           "losses": losses or {"family": "pareto", "alpha": 2.0, "scale": 1.0},
           "weights": weights or {"family": "bounded_discrete", "atoms": [1.0], "probs": [1.0]},
           "links": {}, "regime": regime}
    if x_theta is not None:
        rec["links"]["x_theta"] = x_theta
    if x_x is not None:
        rec["links"]["x_x"] = x_x
    if theta_theta is not None:
        rec["links"]["theta_theta"] = theta_theta
    if stopping is not None:
        rec["stopping"] = {"pmf": stopping}
    return model.build_scenario(rec)


TWO_POINT = {"family": "two_point", "theta1": 1.0, "p1": 0.5, "theta2": 2.0, "p2": 0.5}
UNIFORM_W = {"family": "uniform", "a": 0.5, "b": 1.5}


@pytest.fixture(scope="session")
def s1():
    return model.build_scenario(model.scenario_record_s1())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
