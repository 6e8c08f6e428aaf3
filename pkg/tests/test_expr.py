import numpy as np
import pytest

from sagefit.expr import (
    ArityError, Binary, Dataset, ExpressionError, Num, Param, ParseError, UnknownIdentifierError, Unary, Var,
    compile_nodes, differentiate_wrt, evaluate, fold, param_names, parse_expression, references,
    substitute_parameter, to_text,
)
from treegen import random_tree, smooth_tree


def data1(x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return Dataset(x[:, None], np.zeros(x.shape[0]), ("x",))


# -- parsing ----------------------------------------------------------------

def test_parse_sine_structure():
    e = parse_expression("a*sin(b*x + c)", ["x"], ["a", "b", "c"])
    assert e.root == Binary("*", Param("a"), Unary("sin", Binary("+", Binary("*", Param("b"), Var("x")), Param("c"))))


def test_parse_single_variable():
    e = parse_expression("x", ["x"], [])
    assert e.root == Var("x")
    assert e.n_params == 0


def test_unbalanced_paren_offset():
    with pytest.raises(ParseError) as info:
        parse_expression("a*sin(b*x", ["x"], ["a", "b"])
    assert info.value.offset == 8


@pytest.mark.parametrize("text,exc", [
    ("a*x+", ParseError),
    ("a*x)", ParseError),
    ("a*q", UnknownIdentifierError),
    ("sin(a, x)", ArityError),
    ("pow(a)", ArityError),
    ("a**x", ParseError),
    ("", ParseError),
])
def test_parse_errors(text, exc):
    with pytest.raises(exc):
        parse_expression(text, ["x"], ["a"])


def test_unused_parameter_rejected():
    with pytest.raises(ExpressionError):
        parse_expression("2*x", ["x"], ["a"])


def test_names_must_be_disjoint():
    with pytest.raises(ExpressionError):
        parse_expression("a*x", ["x", "a"], ["a"])


def test_power_is_right_associative_and_binds_tighter_than_neg():
    e = parse_expression("-x^2^a", ["x"], ["a"])
    assert e.root == Unary("neg", Binary("^", Var("x"), Binary("^", Num(2.0), Param("a"))))
    pred, _ = evaluate(e, data1([2.0]), [0.5])
    assert pred[0] == pytest.approx(-(2.0 ** (2.0 ** 0.5)))


def test_pow_function_form():
    e = parse_expression("pow(x, a)", ["x"], ["a"])
    pred, _ = evaluate(e, data1([3.0]), [2.0])
    assert pred[0] == pytest.approx(9.0)


def test_round_trip_random_trees():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        tree = random_tree(rng)
        text = to_text(tree)
        back = parse_expression(text, ["x", "y"], sorted(param_names(tree)))
        assert back.root == tree, text
        assert back.serialize() == text


# -- evaluation -------------------------------------------------------------

def test_evaluate_affine():
    e = parse_expression("a*x + b", ["x"], ["a", "b"])
    pred, mask = evaluate(e, data1([3.0]), [2.0, 1.0])
    assert pred[0] == 7.0 and mask[0]


def test_evaluate_sin_zero():
    e = parse_expression("a*sin(b*x+c)", ["x"], ["a", "b", "c"])
    pred, _ = evaluate(e, data1([0.0]), [1.0, 1.0, 0.0])
    assert pred[0] == 0.0


def test_domain_violation_flagged_not_raised():
    e = parse_expression("log(a*x)", ["x"], ["a"])
    pred, mask = evaluate(e, data1([-1.0, 2.0]), [1.0])
    assert not mask[0] and mask[1]
    assert pred[1] == pytest.approx(np.log(2.0))


def test_constant_expression_broadcasts():
    e = parse_expression("a + 2", ["x"], ["a"])
    pred, mask = evaluate(e, data1([1.0, 2.0, 3.0]), [1.5])
    assert pred.shape == (3,) and np.all(pred == 3.5) and mask.all()


def test_evaluate_is_pure():
    rng = np.random.default_rng(3)
    e = parse_expression("a*exp(-b*x)*cos(c*x) + sqrt(abs(x))", ["x"], ["a", "b", "c"])
    d = data1(rng.uniform(-2, 2, 50))
    first, _ = evaluate(e, d, [1.3, 0.4, 2.2])
    second, _ = evaluate(e, d, [1.3, 0.4, 2.2])
    assert first.tobytes() == second.tobytes()


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros(2))


def test_named_columns_select_by_name():
    d = Dataset(np.array([[1.0, 10.0], [2.0, 20.0]]), np.zeros(2), ("u", "x"))
    e = parse_expression("a*x", ["x"], ["a"])
    pred, _ = evaluate(e, d, [2.0])
    np.testing.assert_array_equal(pred, [20.0, 40.0])


# -- folding, substitution, differentiation ----------------------------------

def test_fold_literal_and_identities():
    assert fold(Binary("+", Num(2.0), Num(3.0))) == Num(5.0)
    assert fold(Binary("*", Num(0.0), Unary("sin", Param("a")))) == Num(0.0)
    assert fold(Binary("*", Num(1.0), Var("x"))) == Var("x")
    assert fold(Binary("+", Var("x"), Num(0.0))) == Var("x")
    assert fold(Unary("exp", Num(0.0))) == Num(1.0)


def test_substitute_examples():
    e = parse_expression("a*x + b", ["x"], ["a", "b"])
    s = substitute_parameter(e, 1, 0.0)
    assert s.serialize() == "a * x"
    e = parse_expression("a*sin(b*x+c)", ["x"], ["a", "b", "c"])
    assert substitute_parameter(e, 0, 0.0).root == Num(0.0)


def test_substitute_exp_zero_matches_x():
    e = parse_expression("exp(a)*x", ["x"], ["a"])
    s = substitute_parameter(e, 0, 0.0)
    assert s.root == Var("x")
    rows = data1(np.random.default_rng(1).normal(size=5))
    orig, _ = evaluate(e, rows, [0.0])
    new, _ = evaluate(s, rows, [])
    np.testing.assert_allclose(new, orig, rtol=1e-12, atol=0)


def test_derivative_examples():
    e = parse_expression("a*x + b", ["x"], ["a", "b"])
    assert differentiate_wrt(e, 0).root == Var("x")
    e = parse_expression("sin(b*x)", ["x"], ["b"])
    assert differentiate_wrt(e, 0).serialize() == "x * cos(b * x)"
    e = parse_expression("a*sin(b*x+c)", ["x"], ["a", "b", "c"])
    d = differentiate_wrt(e, 0)
    assert not references(d.root, "a")


def _fd_check(expr, theta, rows, k):
    h = 1e-6 * max(1.0, abs(theta[k]))
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    fp, mp = evaluate(expr, rows, tp)
    fm, mm = evaluate(expr, rows, tm)
    fd = (fp - fm) / (2 * h)
    d = differentiate_wrt(expr, k)
    sub = [theta[expr.param_index(n)] for n in d.parameters]  # derivative keeps only the names it uses
    sym, ms = evaluate(d, rows, sub)
    ok = mp & mm & ms & np.isfinite(fd)
    return sym[ok], fd[ok]


def test_derivative_of_amplitude_matches_fd():
    rng = np.random.default_rng(11)
    e = parse_expression("a*sin(b*x+c)", ["x"], ["a", "b", "c"])
    rows = data1(rng.uniform(-3, 3, 5))
    sym, fd = _fd_check(e, np.array([1.7, 0.8, -0.3]), rows, 0)
    np.testing.assert_allclose(sym, fd, rtol=1e-6)


def test_derivative_random_trees_match_fd():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(300):
        tree = smooth_tree(rng)
        names = sorted(param_names(tree))
        if not names:
            continue
        e = parse_expression(to_text(tree), ["x"], names)
        theta = rng.uniform(-1.5, 1.5, len(names))
        rows = data1(rng.uniform(-1.5, 1.5, 6))
        for k in range(len(names)):
            sym, fd = _fd_check(e, theta, rows, k)
            scale = np.maximum(1.0, np.abs(sym))
            assert np.all(np.abs(sym - fd) <= 1e-5 * scale), (to_text(tree), k)
            checked += sym.size
    assert checked > 1000


def test_compiled_multi_output():
    fn = compile_nodes([Binary("*", Param("a"), Var("x")), Num(2.0)], ["x"], ["a"])
    out = fn([np.array([1.0, 2.0])], np.array([3.0]))
    np.testing.assert_array_equal(out[0], [3.0, 6.0])
    assert float(out[1]) == 2.0
