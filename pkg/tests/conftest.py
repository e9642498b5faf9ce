import numpy as np
import pytest
from hypothesis import settings

from ctplan.ctm import init_student
from ctplan.numerics import Mlp, grad
from ctplan.schedule import NoiseSchedule
from ctplan.teacher import TeacherModel

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def tiny_teacher(horizon=3, state_dim=2, hidden=8, seed=0, conditioned=True, n_train=6):
    rng = np.random.default_rng(seed)
    d_in = TeacherModel.input_dim(horizon, state_dim, conditioned, 16)
    net = Mlp.init((d_in, hidden, hidden, horizon * state_dim), rng)
    return TeacherModel(net, horizon, state_dim, NoiseSchedule(n_train=n_train), 0.5, conditioned, 16)


def perturbed_student(teacher, seed=1, scale=0.3):
    """Student copy with every weight jittered so no pathway is exactly zero."""
    student = init_student(teacher)
    rng = np.random.default_rng(seed)
    for p in student.net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape) / np.sqrt(max(p.shape[0], 1))
    return student


def fd_relative_errors(loss_fn, params, h=1e-5):
    """Relative error between autodiff and central differences, one entry per parameter."""
    params = list(params)
    analytic = grad(loss_fn(), params)
    errs = []
    for p, g in zip(params, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            num.reshape(-1)[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
        errs.append(np.linalg.norm(g - num) / scale)
    return errs


@pytest.fixture
def teacher():
    return tiny_teacher()


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
