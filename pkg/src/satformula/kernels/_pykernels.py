"""Numpy implementation of the expression kernels.

Same contract as the compiled module: the program is swept once over all
pixels at a time instead of once per pixel.
"""

import numpy as np

OP_VAR, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_EXP, OP_LOG = range(8)


def _forward(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max, partials):
    n = len(ops)
    npix = X.shape[1]
    vals = [None] * n
    dl = [None] * n
    dr = [None] * n
    for i in range(n):
        op = ops[i]
        if op == OP_VAR:
            vals[i] = X[args[i]]
            continue
        if op == OP_CONST:
            vals[i] = np.full(npix, consts[args[i]])
            continue
        a = vals[left[i]]
        da = db = None
        if op == OP_ADD:
            b = vals[right[i]]
            v = a + b
            if partials:
                da = np.ones(npix)
                db = np.ones(npix)
        elif op == OP_SUB:
            b = vals[right[i]]
            v = a - b
            if partials:
                da = np.ones(npix)
                db = -np.ones(npix)
        elif op == OP_MUL:
            b = vals[right[i]]
            v = a * b
            if partials:
                da = b.copy()
                db = a.copy()
        elif op == OP_DIV:
            b = vals[right[i]]
            live = np.abs(b) > eps_div
            den = np.where(live, b, np.where(b >= 0.0, eps_div, -eps_div))
            v = a / den
            if partials:
                da = 1.0 / den
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    db = np.where(live, -a / (b * b), 0.0)
        elif op == OP_EXP:
            live = np.abs(a) <= exp_max
            v = np.exp(np.clip(a, -exp_max, exp_max))
            if partials:
                da = np.where(live, v, 0.0)
        else:
            live = np.abs(a) > eps_log
            v = np.log(np.maximum(np.abs(a), eps_log))
            if partials:
                with np.errstate(divide="ignore"):
                    da = np.where(live, 1.0 / np.where(live, a, 1.0), 0.0)
        clamped = np.abs(v) > value_max
        if clamped.any():
            v = np.clip(v, -value_max, value_max)
            if partials:
                da = np.where(clamped, 0.0, da)
                if db is not None:
                    db = np.where(clamped, 0.0, db)
        vals[i] = v
        dl[i] = da
        dr[i] = db
    return vals, dl, dr


def _adjoints(ops, left, right, dl, dr, seed):
    n = len(ops)
    adj = [None] * n
    adj[n - 1] = seed
    for i in range(n - 1, -1, -1):
        g = adj[i]
        if g is None or ops[i] < OP_ADD:
            continue
        contrib = g * dl[i]
        adj[left[i]] = contrib if adj[left[i]] is None else adj[left[i]] + contrib
        if ops[i] <= OP_DIV:
            contrib = g * dr[i]
            adj[right[i]] = contrib if adj[right[i]] is None else adj[right[i]] + contrib
    return adj


def evaluate(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max):
    vals, _, _ = _forward(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max, False)
    return np.array(vals[-1], dtype=np.float64, copy=True)


def vjp(ops, args, left, right, X, consts, weights, eps_div, eps_log, exp_max, value_max):
    _, dl, dr = _forward(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max, True)
    adj = _adjoints(ops, left, right, dl, dr, np.asarray(weights, dtype=np.float64))
    grad = np.zeros(len(consts))
    for i, op in enumerate(ops):
        if op == OP_CONST and adj[i] is not None:
            grad[args[i]] += adj[i].sum()
    return grad


def jacobian(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max):
    vals, dl, dr = _forward(ops, args, left, right, X, consts, eps_div, eps_log, exp_max, value_max, True)
    npix = X.shape[1]
    adj = _adjoints(ops, left, right, dl, dr, np.ones(npix))
    jac = np.zeros((npix, len(consts)))
    for i, op in enumerate(ops):
        if op == OP_CONST and adj[i] is not None:
            jac[:, args[i]] += adj[i]
    return np.array(vals[-1], dtype=np.float64, copy=True), jac
