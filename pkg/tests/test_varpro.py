import numpy as np
import pytest

from sagefit.expr import Dataset, evaluate, parse_expression
from sagefit.varpro import (
    PENALTY_LOSS, InvalidRegionError, build_separable_form, classify_parameters, full_mse, is_conditionally_linear,
    plain_form, project, projected_loss, projected_residual, separate, solve_alpha_star,
)
from oracles import random_linear_instance, spectral_pinv_solve
from treegen import random_separable


def data(x, y):
    x = np.asarray(x, dtype=float)
    return Dataset(x[:, None], np.asarray(y, dtype=float), ("x",))


def names(expr, idx):
    return {expr.parameters[i] for i in idx}


# -- classification ---------------------------------------------------------

@pytest.mark.parametrize("text,params,linear", [
    ("a*sin(b*x+c)", ["a", "b", "c"], {"a"}),
    ("a*x + b", ["a", "b"], {"a", "b"}),
    ("exp(a)*x", ["a"], set()),
    ("a*sin(b*x+c) + d", ["a", "b", "c", "d"], {"a", "d"}),
    ("a/(1 + b*x)", ["a", "b"], {"a"}),
    ("x^a", ["a"], set()),
    ("a*a*x", ["a"], set()),
])
def test_classify_examples(text, params, linear):
    e = parse_expression(text, ["x"], params)
    lin, non = classify_parameters(e)
    assert names(e, lin) == linear
    assert names(e, non) == set(params) - linear


def test_joint_affinity_guard_demotes_one_of_a_product():
    # each of a and b is individually linear, but not jointly
    e = parse_expression("a*b*x + c", ["x"], ["a", "b", "c"])
    assert is_conditionally_linear(e, 0) and is_conditionally_linear(e, 1)
    lin, non = classify_parameters(e)
    assert "c" in names(e, lin)
    assert len(names(e, non) & {"a", "b"}) == 1


def test_dimension_collapse():
    rng = np.random.default_rng(4)
    for _ in range(50):
        text, params, _ = random_separable(rng)
        e = parse_expression(text, ["x"], params)
        form = separate(e)
        if form.m:
            assert form.d_beta < e.n_params
        else:
            assert form.d_beta == e.n_params


# -- separable form ---------------------------------------------------------

def test_build_form_sine_plus_constant():
    e = parse_expression("a*sin(b*x+c) + d", ["x"], ["a", "b", "c", "d"])
    lin, non = classify_parameters(e)
    form = build_separable_form(e, lin, non)
    assert [str(v) for v in form.linear_names] == ["a", "d"]
    rng = np.random.default_rng(0)
    d = data(rng.uniform(-3, 3, 20), np.zeros(20))
    beta = np.array([1.7, 0.3])
    c, Phi = form.parts(d, beta)
    np.testing.assert_allclose(c, 0.0, atol=0)
    np.testing.assert_allclose(Phi[:, 0], np.sin(1.7 * d.inputs[:, 0] + 0.3), rtol=1e-15)
    np.testing.assert_allclose(Phi[:, 1], 1.0)
    # f = c + Phi @ alpha on random probes
    for _ in range(5):
        alpha = rng.normal(size=2)
        full, _ = evaluate(e, d, form.merge(alpha, beta))
        np.testing.assert_allclose(c + Phi @ alpha, full, rtol=1e-12, atol=1e-12)


def test_build_form_affine_and_no_linear():
    d = data([0.0, 1.0, 2.0], np.zeros(3))
    e = parse_expression("a*x + b", ["x"], ["a", "b"])
    form = separate(e)
    c, Phi = form.parts(d, [])
    np.testing.assert_array_equal(c, 0.0)
    np.testing.assert_array_equal(Phi, [[0, 1], [1, 1], [2, 1]])
    e = parse_expression("sin(b*x)", ["x"], ["b"])
    form = separate(e)
    c, Phi = form.parts(d, [2.0])
    assert form.m == 0 and Phi.shape == (3, 0)
    np.testing.assert_allclose(c, np.sin(2.0 * d.inputs[:, 0]))


def test_merge_split_round_trip():
    e = parse_expression("a*sin(b*x+c) + d", ["x"], ["a", "b", "c", "d"])
    form = separate(e)
    theta = np.array([1.0, 2.0, 3.0, 4.0])
    alpha, beta = form.split(theta)
    np.testing.assert_array_equal(form.merge(alpha, beta), theta)


# -- linear solve -----------------------------------------------------------

def test_solve_identity():
    y = np.array([1.0, -2.0, 3.5])
    rep = solve_alpha_star(np.eye(3), np.zeros(3), y)
    np.testing.assert_allclose(rep.alpha_star, y, rtol=1e-15)
    assert rep.tikhonov_lambda_used == 0.0


def test_solve_duplicate_columns_minimum_norm():
    x = np.linspace(0.1, 2.0, 15)
    Phi = np.column_stack([x, x])
    rep = solve_alpha_star(Phi, np.zeros_like(x), 2 * x)
    oracle = spectral_pinv_solve(Phi, 2 * x)
    np.testing.assert_allclose(oracle, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(rep.alpha_star, oracle, atol=1e-8)
    assert rep.effective_rank == 1
    assert rep.tikhonov_lambda_used > 0


def test_solve_exact_interpolation():
    x = np.linspace(-1, 1, 9)
    rep = solve_alpha_star(np.column_stack([x, np.ones_like(x)]), np.zeros_like(x), 3 * x + 2)
    np.testing.assert_allclose(rep.alpha_star, [3.0, 2.0], rtol=1e-13)
    assert rep.residual_norm < 1e-13


def test_solve_matches_pinv_oracle_on_random_instances():
    rng = np.random.default_rng(99)
    for _ in range(200):
        Phi, c, y = random_linear_instance(rng)
        b = y - c
        rep = solve_alpha_star(Phi, c, y)
        ours = np.linalg.norm(b - Phi @ rep.alpha_star)
        ref = np.linalg.norm(b - Phi @ spectral_pinv_solve(Phi, b))
        assert abs(ours - ref) <= 1e-8 * np.linalg.norm(b)


def test_solve_drops_nonfinite_rows():
    x = np.linspace(0, 1, 6)
    Phi = np.column_stack([x, np.ones(6)])
    Phi[2, 0] = np.nan
    y = 3 * x + 2
    y[4] = np.inf
    rep = solve_alpha_star(Phi, np.zeros(6), y)
    assert rep.n_excluded == 2
    np.testing.assert_allclose(rep.alpha_star, [3.0, 2.0], rtol=1e-12)


def test_solve_all_rows_invalid():
    with pytest.raises(InvalidRegionError):
        solve_alpha_star(np.full((3, 1), np.nan), np.zeros(3), np.ones(3))


def test_solve_matches_normal_equations_when_well_conditioned():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n, m = int(rng.integers(10, 60)), int(rng.integers(1, 6))
        Phi = rng.normal(size=(n, m))
        y = rng.normal(size=n)
        rep = solve_alpha_star(Phi, np.zeros(n), y)
        ref = np.linalg.solve(Phi.T @ Phi, Phi.T @ y)
        np.testing.assert_allclose(rep.alpha_star, ref, rtol=1e-10, atol=1e-12)


# -- projected objective ----------------------------------------------------

def test_projected_loss_pure_linear_is_zero():
    x = np.linspace(-2, 2, 30)
    form = separate(parse_expression("a*x + b", ["x"], ["a", "b"]))
    assert form.d_beta == 0
    assert projected_loss(form, data(x, 3 * x + 2), []) <= 1e-20


def test_projected_loss_exact_beta():
    x = np.linspace(0, np.pi, 64)
    form = separate(parse_expression("a*sin(b*x)", ["x"], ["a", "b"]))
    assert projected_loss(form, data(x, np.sin(2 * x)), [2.0]) <= 1e-20


def test_projected_loss_matches_amplitude_grid_oracle():
    x = np.linspace(0, np.pi, 64)
    d = data(x, np.sin(2 * x))
    expr = parse_expression("a*sin(b*x)", ["x"], ["a", "b"])
    form = separate(expr)
    ours = projected_loss(form, d, [2.05])
    grid = np.linspace(-3, 3, 10_000)
    phi = np.sin(2.05 * x)
    losses = np.mean((d.targets[None, :] - grid[:, None] * phi[None, :]) ** 2, axis=1)
    step = grid[1] - grid[0]
    # the loss is a parabola in a with curvature |phi|^2 / n
    bound = np.mean(phi**2) * (step / 2) ** 2
    assert losses.min() >= ours - 1e-15
    assert losses.min() - ours <= bound + 1e-15
    assert full_mse(expr, d, [grid[np.argmin(losses)], 2.05]) == pytest.approx(losses.min(), rel=1e-12)


def test_projected_loss_invariant_to_linear_ordering():
    rng = np.random.default_rng(21)
    x = rng.uniform(0.5, 3, 40)
    d = data(x, np.exp(-0.7 * x) + 0.3 * x + 0.1 * rng.normal(size=40))
    e = parse_expression("a*exp(-b*x) + c*x + f", ["x"], ["a", "b", "c", "f"])
    lin, non = classify_parameters(e)
    f1 = build_separable_form(e, lin, non)
    f2 = build_separable_form(e, list(reversed(lin)), non)
    for beta in rng.uniform(-1, 2, 10):
        l1, l2 = projected_loss(f1, d, [beta]), projected_loss(f2, d, [beta])
        assert l1 == pytest.approx(l2, rel=1e-12)


def test_varpro_dominance_small_battery():
    rng = np.random.default_rng(17)
    for _ in range(40):
        text, params, _ = random_separable(rng)
        e = parse_expression(text, ["x"], params)
        form = separate(e)
        x = rng.uniform(0.5, 3.0, 32)
        d = data(x, rng.normal(size=32))
        beta = rng.uniform(0.1, 2.0, form.d_beta)
        p = projected_loss(form, d, beta)
        for _ in range(20):
            alpha = rng.normal(scale=3.0, size=form.m)
            assert p <= full_mse(e, d, form.merge(alpha, beta)) + 1e-9


def test_projected_residual_cases():
    x = np.linspace(0, 2, 32)
    form = separate(parse_expression("a*sin(b*x+c)", ["x"], ["a", "b", "c"]))
    r = projected_residual(form, data(x, 1.5 * np.sin(2 * x + 0.5)), [2.0, 0.5])
    np.testing.assert_allclose(r, 0.0, atol=1e-13)
    form = separate(parse_expression("sin(b*x)", ["x"], ["b"]))
    y = np.cos(x)
    np.testing.assert_allclose(projected_residual(form, data(x, y), [1.3]), y - np.sin(1.3 * x), rtol=1e-14)


def test_invalid_region_penalty():
    x = -np.linspace(0.5, 2.0, 16)
    form = separate(parse_expression("c*log(b*x)", ["x"], ["b", "c"]))
    p = project(form, data(x, np.ones(16)), [1.0])
    assert not p.valid and p.loss == PENALTY_LOSS
    with pytest.raises(InvalidRegionError):
        projected_residual(form, data(x, np.ones(16)), [1.0])


def test_partial_validity_uses_valid_rows():
    x = np.linspace(-1, 3, 40)  # log(x) invalid on the first quarter
    y = np.where(x > 0, 2.0 * np.log(np.abs(x) + 1e-300), 0.0)
    form = separate(parse_expression("a*log(x)", ["x"], ["a"]))
    p = project(form, data(x, y), [])
    assert p.valid and p.row_mask.sum() == np.sum(x > 0)
    assert p.loss < 1e-20


def test_plain_form_equals_full_mse():
    rng = np.random.default_rng(2)
    e = parse_expression("a*sin(b*x+c) + d*x", ["x"], ["a", "b", "c", "d"])
    x = rng.uniform(0, 3, 30)
    d = data(x, rng.normal(size=30))
    theta = rng.normal(size=4)
    assert projected_loss(plain_form(e), d, theta) == pytest.approx(full_mse(e, d, theta), rel=1e-14)
