"""Finite-difference verification of every autodiff op.

``registry()`` maps check names to zero-argument callables returning the
max relative error between analytic and central-difference gradients, in
double precision with dropout in eval mode. Multi-input ops get one check
per differentiable input. The last entries run the full adaptation
meta-loss on a four-pixel episode, differentiating through attention,
layer norm, the residual update, and the query cross-entropy with respect
to each adapter parameter.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .adaptation import ClassifierWeights, cwt_forward, init_cwt, query_loss
from .backbone import FeatureMap
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_smoothed,
    dropout,
    exp,
    finite_diff_check,
    im2col3x3,
    layer_norm,
    log,
    make_rng,
    matmul,
    mean_,
    mul,
    narrow,
    neg,
    pow_const,
    relu,
    reshape,
    softmax_rows,
    sum_,
    transpose,
)

__all__ = ["registry", "run_checks", "TOLERANCE"]

TOLERANCE = 1e-4


def _input(key: int, shape: tuple[int, ...], *, positive: bool = False,
           away_from_zero: bool = False) -> Tensor:
    data = make_rng(8000, key).standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    if away_from_zero:
        # keep central differences clear of the ReLU kink
        data = data + 0.2 * np.sign(data) + np.where(data == 0, 0.2, 0.0)
    return Tensor(data, requires_grad=True)


def _probe(key: int, shape: tuple[int, ...]) -> np.ndarray:
    """Fixed projection so the scalarized loss has non-uniform gradients."""
    return make_rng(8100, key).standard_normal(shape)


def _scalarize(out: Tensor, key: int) -> Tensor:
    return sum_(mul(out, Tensor(_probe(key, out.shape))))


def _simple(op: Callable[[Tensor], Tensor], key: int,
            shape: tuple[int, ...] = (3, 4), **input_kw) -> Callable[[], float]:
    def run() -> float:
        x = _input(key, shape, **input_kw)
        return finite_diff_check(lambda t: _scalarize(op(t), key), x)
    return run


def _cwt_episode():
    """A 2x2-pixel episode: fixed features, classifier, and query labels."""
    rng = make_rng(8200)
    d = 5
    qfeats = Tensor(rng.standard_normal((4, d)))
    qmap = FeatureMap(features=qfeats, spatial=(2, 2), source_id=0)
    w = ClassifierWeights(Tensor(rng.standard_normal((2, d)) * 0.5))
    labels = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    return qmap, w, labels


def _cwt_param_check(name: str) -> Callable[[], float]:
    """End-to-end meta-loss gradient w.r.t. one adapter parameter."""
    def run() -> float:
        qmap, w, labels = _cwt_episode()
        base = init_cwt(feature_dim=5, latent_dim=6, num_heads=2, seed=11,
                        dropout_rate=0.3, psi_sigma=0.2)

        def loss_of(x: Tensor) -> Tensor:
            params = init_cwt(feature_dim=5, latent_dim=6, num_heads=2, seed=11,
                              dropout_rate=0.3, psi_sigma=0.2)
            setattr(params, name, x)
            w_star = cwt_forward(w, qmap, params, train_mode=False)
            return query_loss(w_star, qmap, labels)

        return finite_diff_check(loss_of, getattr(base, name))
    return run


def registry() -> dict[str, Callable[[], float]]:
    """One named finite-difference check per op input (insertion-ordered)."""
    checks: dict[str, Callable[[], float]] = {
        "add/a": _simple(lambda t: add(t, _input(50, (3, 4))), 1),
        "add/b": _simple(lambda t: add(_input(51, (3, 4)), t), 2),
        "neg": _simple(neg, 3),
        "mul/a": _simple(lambda t: mul(t, _input(52, (3, 4))), 4),
        "mul/b": _simple(lambda t: mul(_input(53, (3, 4)), t), 5),
        "pow_const": _simple(lambda t: pow_const(t, 3.0), 6),
        "relu": _simple(relu, 7, away_from_zero=True),
        "exp": _simple(exp, 8),
        "log": _simple(log, 9, positive=True),
        "matmul/a": _simple(lambda t: matmul(t, _input(54, (4, 2))), 10),
        "matmul/b": _simple(lambda t: matmul(_input(55, (2, 3)), t), 11),
        "transpose": _simple(transpose, 12),
        "reshape": _simple(lambda t: reshape(t, (2, 6)), 13),
        "narrow": _simple(lambda t: narrow(t, 1, 1, 2), 14),
        "concat/first": _simple(lambda t: concat([t, _input(56, (2, 4))]), 15,
                                shape=(2, 4)),
        "concat/second": _simple(lambda t: concat([_input(57, (2, 4)), t]), 16,
                                 shape=(2, 4)),
        "sum/all": _simple(lambda t: reshape(sum_(t), (1, 1)), 17),
        "sum/axis0": _simple(lambda t: sum_(t, axis=0, keepdims=True), 18),
        "mean/all": _simple(lambda t: reshape(mean_(t), (1, 1)), 19),
        "mean/axis1": _simple(lambda t: mean_(t, axis=1, keepdims=True), 20),
        "softmax_rows": _simple(softmax_rows, 21),
        "layer_norm/x": _simple(
            lambda t: layer_norm(t, _input(58, (4,)), _input(59, (4,))), 22),
        "layer_norm/gamma": _simple(
            lambda t: layer_norm(_input(60, (3, 4)), t, _input(61, (4,))), 23,
            shape=(4,)),
        "layer_norm/beta": _simple(
            lambda t: layer_norm(_input(62, (3, 4)), _input(63, (4,)), t), 24,
            shape=(4,)),
        "cross_entropy/plain": _simple(
            lambda t: cross_entropy_smoothed(t, np.array([0, 2, 1]), epsilon=0.0),
            25, shape=(3, 3)),
        "cross_entropy/smoothed": _simple(
            lambda t: cross_entropy_smoothed(t, np.array([0, 2, 1]), epsilon=0.1),
            26, shape=(3, 3)),
        "dropout/eval_mode": _simple(
            lambda t: dropout(t, rate=0.5, train_mode=False), 27),
        "im2col3x3": _simple(im2col3x3, 28, shape=(1, 4, 4, 2)),
    }
    for name in ("wq", "wk", "wv", "psi_w", "psi_b", "ln_gamma", "ln_beta"):
        checks[f"cwt_meta_loss/{name}"] = _cwt_param_check(name)
    return checks


def run_checks(tolerance: float = TOLERANCE,
               corrupt: str | None = None) -> list[dict]:
    """Run every registered check; rows carry name, error, and verdict.

    ``corrupt`` names a check whose loss gets a gradient-invisible term
    added (value moves with the input, analytic gradient does not), so the
    harness itself can be shown to catch a wrong gradient.
    """
    checks = registry()
    if corrupt is not None and corrupt not in checks:
        raise ValueError(f"unknown check {corrupt!r}; expected one of "
                         f"{sorted(checks)}")
    rows = []
    for name, run in checks.items():
        if name == corrupt:
            err = _run_corrupted(name)
        else:
            err = run()
        rows.append({"check": name, "max_rel_err": err,
                     "passed": bool(err < tolerance)})
    return rows


def _run_corrupted(name: str) -> float:
    x = _input(1, (3, 4))

    def f(t: Tensor) -> Tensor:
        clean = _scalarize(relu(t), 1)
        # detached term: shifts the value but contributes no gradient
        return add(clean, Tensor(np.full((), 0.1 * float(t.data.sum()))))

    return finite_diff_check(f, x)
