import numpy as np
import pytest

from conftest import central_fd, rel_err, tiny_problem
from fiplab.errors import ShapeError
from fiplab.fisher import FisherDiagonal, fim_diag, grad_trace_fim, lr_penalty, trace_fim
from fiplab.nn import per_sample_loglik_grads


@pytest.mark.parametrize("seed", range(3))
def test_trace_equals_sum_of_diagonal_and_entries_nonnegative(seed):
    model, batch = tiny_problem(seed)
    f = fim_diag(model, batch)
    assert f.values.sum() == trace_fim(model, batch)
    assert np.all(f.values >= 0)
    assert f.trace == trace_fim(model, batch)


def test_single_sample_is_gradient_squared():
    model, batch = tiny_problem(1)
    one = batch.subset([2])
    g = per_sample_loglik_grads(model, one)[0]
    np.testing.assert_array_equal(fim_diag(model, one).values, g * g)


def test_diagonal_matches_loop_oracle():
    model, batch = tiny_problem(2)
    acc = np.zeros(model.n_params)
    for s in range(len(batch)):
        g = per_sample_loglik_grads(model, batch.subset([s]))[0]
        acc += g * g
    np.testing.assert_allclose(fim_diag(model, batch).values, acc / len(batch), rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_trace_gradient_matches_finite_differences(seed):
    model, batch = tiny_problem(seed)
    fd = central_fd(lambda t: trace_fim(model.with_params(t), batch), model.theta, h=1e-5)
    assert rel_err(grad_trace_fim(model, batch), fd) <= 2e-3


def test_lr_penalty_value_and_gradient():
    rng = np.random.default_rng(0)
    f, t, tb = rng.uniform(size=5), rng.normal(size=5), rng.normal(size=5)
    value, g = lr_penalty(t, tb, f)
    assert value == pytest.approx(np.sum(f * (t - tb) ** 2))
    np.testing.assert_allclose(g, central_fd(lambda x: lr_penalty(x, tb, f)[0], t), rtol=1e-7)
    assert lr_penalty(tb, tb, f) == (0.0, pytest.approx(np.zeros(5)))
    with pytest.raises(ShapeError):
        lr_penalty(t, tb[:4], f)


def test_fisher_save_load(tmp_path):
    model, batch = tiny_problem(0)
    f = fim_diag(model, batch)
    f.save(tmp_path / "f.bin")
    back = FisherDiagonal.load(tmp_path / "f.bin")
    assert np.array_equal(back.values, f.values)
    assert back.model_checksum == model.checksum()
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        FisherDiagonal.load(tmp_path / "f.bin")


def test_fisher_is_immutable():
    model, batch = tiny_problem(0)
    f = fim_diag(model, batch)
    with pytest.raises(ValueError):
        f.values[0] = 1.0
