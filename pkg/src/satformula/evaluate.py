"""Pixelwise evaluation and constant gradients of expressions.

Protected semantics (guard constants in :mod:`satformula.kernels`)::

    a / b   -> a / (sign(b) * max(|b|, EPS_DIV))     sign(0) = +1
    log(a)  -> log(max(|a|, EPS_LOG))
    exp(a)  -> exp(clip(a, -EXP_MAX, EXP_MAX))

and every operator output is clamped to ``[-VALUE_MAX, VALUE_MAX]``.
Derivatives are those of the guarded forms, so they vanish wherever a guard
is active.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .expr import Const, Expr, OpKind, Var, bands_used, n_constants

_OPCODES = {
    OpKind.ADD: 2,
    OpKind.SUB: 3,
    OpKind.MUL: 4,
    OpKind.DIV: 5,
    OpKind.EXP: 6,
    OpKind.LOG: 7,
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Program:
    """Postfix node arrays; children precede parents and the root is last."""

    ops: np.ndarray
    args: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_consts: int
    max_band: int

    def __len__(self):
        return len(self.ops)


@lru_cache(maxsize=4096)
def compile_expr(e: Expr) -> Program:
    ops, args, left, right = [], [], [], []

    def emit(node):
        if isinstance(node, Var):
            ops.append(0)
            args.append(node.band - 1)
            left.append(-1)
            right.append(-1)
        elif isinstance(node, Const):
            ops.append(1)
            args.append(node.slot)
            left.append(-1)
            right.append(-1)
        else:
            idx = [emit(c) for c in node.children]
            ops.append(_OPCODES[node.kind])
            args.append(-1)
            left.append(idx[0])
            right.append(idx[1] if len(idx) > 1 else -1)
        return len(ops) - 1

    emit(e)
    as_i32 = lambda xs: np.ascontiguousarray(xs, dtype=np.int32)  # noqa: E731
    return Program(
        as_i32(ops), as_i32(args), as_i32(left), as_i32(right),
        n_constants(e), max(bands_used(e), default=0),
    )


def _check(prog: Program, X: np.ndarray, consts) -> np.ndarray:
    consts = np.ascontiguousarray(consts, dtype=np.float64).reshape(-1)
    if len(consts) != prog.n_consts:
        raise EvaluationError(
            f"constant vector has length {len(consts)}, expression has {prog.n_consts} slots"
        )
    if prog.max_band > X.shape[0]:
        raise EvaluationError(f"expression references B{prog.max_band}, data has {X.shape[0]} bands")
    return consts


def pixel_matrix(image) -> np.ndarray:
    """(C, N) float64 matrix from a Raster, a (C, H, W) array, or a (C, N) array."""
    data = getattr(image, "data", image)
    data = np.asarray(data)
    return np.ascontiguousarray(data.reshape(data.shape[0], -1), dtype=np.float64)


def eval_pixels(e: Expr | Program, X: np.ndarray, consts, backend=None) -> np.ndarray:
    prog = e if isinstance(e, Program) else compile_expr(e)
    consts = _check(prog, X, consts)
    k = kernels.get_backend(backend)
    return k.evaluate(prog.ops, prog.args, prog.left, prog.right, X, consts, *kernels.GUARDS)


def vjp_pixels(e: Expr | Program, X: np.ndarray, consts, weights, backend=None) -> np.ndarray:
    """``sum_p weights[p] * d f(x_p) / d consts``."""
    prog = e if isinstance(e, Program) else compile_expr(e)
    consts = _check(prog, X, consts)
    weights = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != X.shape[1]:
        raise EvaluationError("weight vector length does not match pixel count")
    k = kernels.get_backend(backend)
    return k.vjp(prog.ops, prog.args, prog.left, prog.right, X, consts, weights, *kernels.GUARDS)


def jacobian_pixels(e: Expr | Program, X: np.ndarray, consts, backend=None):
    prog = e if isinstance(e, Program) else compile_expr(e)
    consts = _check(prog, X, consts)
    k = kernels.get_backend(backend)
    return k.jacobian(prog.ops, prog.args, prog.left, prog.right, X, consts, *kernels.GUARDS)


def _default_consts(e: Expr, consts):
    if consts is None:
        from .expr import constants

        return constants(e)
    return consts


def eval_expr(e: Expr, raster, consts=None) -> np.ndarray:
    """Evaluate ``e`` on every pixel of ``raster``; returns an (H, W) float64 band.

    ``consts`` defaults to the values stored in the tree.
    """
    data = np.asarray(getattr(raster, "data", raster))
    if data.ndim != 3:
        raise EvaluationError("expected a (C, H, W) raster")
    _, h, w = data.shape
    out = eval_pixels(e, pixel_matrix(data), _default_consts(e, consts))
    return out.reshape(h, w)


def grad_constants(e: Expr, raster, consts, target) -> np.ndarray:
    """Gradient of the mean squared pixel error with respect to the constants."""
    X = pixel_matrix(raster)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if len(target) != X.shape[1]:
        raise EvaluationError("target shape does not match raster")
    pred = eval_pixels(e, X, consts)
    weights = 2.0 * (pred - target) / len(target)
    return vjp_pixels(e, X, consts, weights)
