import numpy as np
import pytest

from conftest import central_fd, rel_err, tiny_problem
from fiplab.data import gen_synthetic
from fiplab.ffip import (
    ShiftLayout,
    ShiftProblem,
    anchor_penalty,
    ce_and_grad,
    ffip_purify,
    pull_back,
    trace_fim_and_grad,
)
from fiplab.fip import FipConfig
from fiplab.fisher import grad_trace_fim, lr_penalty, trace_fim
from fiplab.nn import grad, init_mlp, loss_ce
from fiplab.svd import tunable_count


@pytest.fixture(params=[0, 1])
def problem(request):
    model, batch = tiny_problem(request.param, dims=(6, 5, 4, 3), n=6)
    prob = ShiftProblem(model, batch, FipConfig(eta_F=0.01, eta_r=5.0))
    rng = np.random.default_rng(request.param)
    phi = prob.initial()
    phi[: prob.layout.n_shifts] += 0.05 * rng.normal(size=prob.layout.n_shifts)
    return prob, batch, phi


def test_layout_sizes():
    model = init_mlp([256, 64, 32, 3])
    prob = ShiftProblem(model, tiny_problem(0, dims=(256, 64, 32, 3), n=3)[1])
    assert prob.layout.n_shifts == tunable_count([(64, 256), (32, 64), (3, 32)]) == 99
    assert prob.layout.size == 99 + 64 + 32 + 3


def test_initial_phi_rebuilds_the_model(problem):
    prob, _, _ = problem
    assert np.max(np.abs(prob.rebuild(prob.initial()).theta - prob.model.theta)) <= 1e-12


def test_ce_matches_rebuilt_model_and_finite_differences(problem):
    prob, batch, phi = problem
    loss, g = ce_and_grad(prob.decomp, prob.layout, phi, batch)
    assert loss == pytest.approx(loss_ce(prob.rebuild(phi), batch), rel=1e-12)
    fd = central_fd(lambda p: ce_and_grad(prob.decomp, prob.layout, p, batch)[0], phi)
    assert rel_err(g, fd) <= 1e-5
    oracle = pull_back(prob.decomp, prob.layout, phi, prob.model.layout, grad(prob.rebuild(phi), batch))
    np.testing.assert_allclose(g, oracle, atol=1e-12)


def test_anchor_quadratic_form_matches_direct_penalty(problem):
    prob, _, phi = problem
    value, g = anchor_penalty(prob.decomp, prob.layout, phi, prob.anchor)
    direct = lr_penalty(prob.rebuild(phi).theta, prob.theta_bar, prob.fisher)[0]
    assert value == pytest.approx(direct, rel=1e-9, abs=1e-15)
    fd = central_fd(lambda p: anchor_penalty(prob.decomp, prob.layout, p, prob.anchor)[0], phi)
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_factored_trace_gradient_matches_pull_back_oracle(problem):
    prob, batch, phi = problem
    tr, g = trace_fim_and_grad(prob.decomp, prob.layout, phi, batch)
    m = prob.rebuild(phi)
    assert tr == pytest.approx(trace_fim(m, batch), rel=1e-10)
    oracle = pull_back(prob.decomp, prob.layout, phi, m.layout, grad_trace_fim(m, batch))
    assert rel_err(g, oracle) <= 1e-4


def test_objective_gradient_matches_finite_differences(problem):
    prob, batch, phi = problem
    _, g = prob.objective(phi, batch)
    fd = central_fd(lambda p: prob.objective(p, batch)[0], phi, h=1e-5)
    assert rel_err(g, fd) <= 2e-3


def test_decay_gradient_is_rebuilt_weight_norm(problem):
    prob, _, phi = problem

    def half_sq(p):
        m = prob.rebuild(p)
        return 0.5 * sum(np.sum(w * w) + np.sum(b * b) for w, b in m.layers)

    fd = central_fd(half_sq, phi)
    np.testing.assert_allclose(prob.decay_grad(phi), fd, atol=1e-7)


def test_shift_layout_split():
    model, batch = tiny_problem(0)
    prob = ShiftProblem(model, batch)
    parts = ShiftLayout(prob.decomp).split(prob.initial())
    assert [p[0].shape[0] for p in parts] == [d.rank for d in prob.decomp]
    assert np.array_equal(parts[0][1], prob.decomp[0].bias)


def test_ffip_purify_runs_and_reports():
    ds = gen_synthetic(3, 10, 8, seed=0)
    model = init_mlp([64, 8, 3], seed=0)
    out, trace = ffip_purify(model, ds, FipConfig(epochs=2, batch_size=5))
    assert len(trace.rows) == 3
    assert trace.tunable_weights == 8 + 3
    assert trace.svd_seconds >= 0
    assert out.dims == model.dims
