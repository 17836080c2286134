"""Candidate generation, BFGS constant fitting and selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluate import compile_expr, eval_pixels, pixel_matrix, vjp_pixels
from .expr import (
    BOS,
    EOS,
    BAND_TOKEN0,
    VOCAB_SIZE,
    Expr,
    bind_constants,
    check_tokens,
    from_tokens,
    node_count,
    to_infix,
    to_tokens,
    token_arity,
)
from .objectives import LossReport, LossWeights, laplacian_operator, total_loss

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BfgsConfig:
    max_iters: int = 500
    grad_tol: float = 1e-10
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    init_value: float = 1.0
    restarts: tuple = (0.1, 10.0)
    curvature_eps: float = 1e-10
    f_tol: float = 1e-12  # stop once a step lowers f by less than f_tol * |f|

    def __post_init__(self):
        if self.grad_tol <= 0 or self.armijo_c1 <= 0 or not 0 < self.backtrack < 1:
            raise ValueError("BFGS tolerances must be positive and 0 < backtrack < 1")
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class Candidate:
    skeleton: tuple
    expr: Expr
    constants: np.ndarray
    report: LossReport
    nodes: int
    converged: bool = True
    line_search_failed: bool = False
    trace: list = field(default_factory=list, repr=False)

    def score(self, w: LossWeights) -> float:
        return self.report.selection_score(w)

    def formula(self) -> str:
        return to_infix(self.expr)


# -- pixel data and the refinement objective ---------------------------------------


class FitData:
    """Pixels of a list of equally sized samples, stacked for evaluation.

    ``rho`` defaults to the Laplacian of each target, so the physics term
    penalises the Laplacian of the residual.
    """

    def __init__(self, samples: Sequence, h: float = 1.0, rho: Optional[Sequence[np.ndarray]] = None):
        if not samples:
            raise ValueError("empty dataset")
        shapes = {s.target.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError("all samples must share one spatial shape")
        self.H, self.W = shapes.pop()
        self.n = len(samples)
        self.X = np.ascontiguousarray(np.concatenate([pixel_matrix(s.image) for s in samples], axis=1))
        self.y = np.concatenate([s.target.reshape(-1) for s in samples])
        self.lap = laplacian_operator(self.H, self.W, h)
        if rho is None:
            self.rho = self._lap(self.y)
        else:
            self.rho = np.stack([np.asarray(r, dtype=np.float64).reshape(-1) for r in rho], axis=1)
            if self.rho.shape != (self.H * self.W, self.n):
                raise ValueError("rho must hold one (H, W) grid per sample")

    def _lap(self, flat: np.ndarray) -> np.ndarray:
        """Apply the Laplacian per sample: (n*H*W,) -> (H*W, n)."""
        return self.lap @ flat.reshape(self.n, self.H * self.W).T

    def losses(self, prog, consts):
        pred = eval_pixels(prog, self.X, consts)
        r = pred - self.y
        q = self._lap(pred) - self.rho
        return float(np.mean(r * r)), float(np.sum(q * q)), pred, r, q

    def objective(self, e: Expr, w: LossWeights) -> Callable:
        prog = compile_expr(e)
        lap_t = self.lap.T.tocsr()
        N = len(self.y)

        def fun(c):
            mse, phy, _, r, q = self.losses(prog, c)
            f = w.lambda_mse * mse + w.lambda_phy * phy
            weights = (2.0 * w.lambda_mse / N) * r + (2.0 * w.lambda_phy) * (lap_t @ q).T.reshape(-1)
            g = vjp_pixels(prog, self.X, c, weights)
            return f, g

        return fun


# -- BFGS -----------------------------------------------------------------------


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool
    trace: list


def bfgs_minimize(fun: Callable, x0, cfg: BfgsConfig = BfgsConfig()) -> BfgsResult:
    """Quasi-Newton minimisation with an Armijo backtracking line search.

    ``fun(x)`` returns ``(f, grad)``. The inverse Hessian starts at the
    identity, is rescaled once after the first accepted step, and its
    update is skipped whenever ``y.s <= curvature_eps``. Converged means the
    gradient norm fell below ``grad_tol`` or the relative decrease in ``f``
    stalled below ``f_tol`` (redundant constants leave flat valleys).
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    trace = [f]
    n = len(x)
    Hinv = np.eye(n)
    scaled = False
    failed = False
    stalled = False
    it = 0
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return BfgsResult(x, f, math.inf, 0, False, True, trace)
    while it < cfg.max_iters:
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.grad_tol:
            break
        p = -Hinv @ g
        slope = float(g @ p)
        if slope >= 0:
            Hinv = np.eye(n)
            p = -g
            slope = -gnorm * gnorm
        alpha = 1.0 if scaled else min(1.0, 1.0 / gnorm)
        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = x + alpha * p
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new <= f + cfg.armijo_c1 * alpha * slope:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            failed = True
            break
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > cfg.curvature_eps:
            if not scaled:
                Hinv = np.eye(n) * (sy / float(yv @ yv))
                scaled = True
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        stalled = f - f_new <= cfg.f_tol * max(abs(f), abs(f_new))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        it += 1
        if stalled:
            break
    gnorm = float(np.linalg.norm(g))
    return BfgsResult(x, f, gnorm, it, gnorm < cfg.grad_tol or stalled, failed, trace)


def _as_skeleton(skeleton) -> Expr:
    if isinstance(skeleton, (tuple, list)):
        return from_tokens(skeleton)
    return skeleton


def bfgs_refine(
    skeleton,
    data,
    weights: LossWeights = LossWeights(),
    cfg: BfgsConfig = BfgsConfig(),
    ce: float = 0.0,
    con: float = 0.0,
) -> Candidate:
    """Fit the constant slots of ``skeleton`` by BFGS on ``λ_mse·MSE + λ_phy·L_phy``.

    ``data`` is a :class:`FitData` or a list of samples. ``ce`` and ``con``
    do not depend on the constants; they are only recorded in the report.
    Multi-start from each ``cfg.restarts`` value when the first run stalls
    above the gradient tolerance.
    """
    if not isinstance(data, FitData):
        data = FitData(data)
    e = _as_skeleton(skeleton)
    tokens = to_tokens(e)
    prog = compile_expr(e)
    k = prog.n_consts
    result = None
    if k == 0:
        consts = np.zeros(0)
        converged, failed, trace = True, False, []
    else:
        fun = data.objective(e, weights)
        result = bfgs_minimize(fun, np.full(k, cfg.init_value), cfg)
        if not result.converged:
            for start in cfg.restarts:
                alt = bfgs_minimize(fun, np.full(k, start), cfg)
                if alt.f < result.f:
                    result = alt
                if result.converged:
                    break
        consts = result.x
        converged, failed, trace = result.converged, result.line_search_failed, result.trace
        if failed:
            log.debug("line search failed for %s", to_infix(e))
    mse, phy, *_ = data.losses(prog, consts)
    report = total_loss({"con": con, "mse": mse, "ce": ce, "phy": phy}, weights)
    bound = bind_constants(e, consts)
    return Candidate(tokens, bound, consts, report, node_count(bound), converged, failed, trace)


# -- selection ------------------------------------------------------------------


def _selection_key(c: Candidate, w: LossWeights):
    return (c.score(w), c.nodes, tuple(c.skeleton))


def select_best(candidates: Sequence[Candidate], weights: LossWeights = LossWeights()) -> Candidate:
    """Minimum of λ_mse·MSE + λ_ce·CE + λ_phy·L_phy; ties go to fewer nodes, then token order."""
    if not candidates:
        raise SearchError("no candidates to select from")
    return min(candidates, key=lambda c: _selection_key(c, weights))


def rank_candidates(candidates: Sequence[Candidate], weights: LossWeights = LossWeights()) -> list[Candidate]:
    return sorted(candidates, key=lambda c: _selection_key(c, weights))


def write_candidates_tsv(candidates: Sequence[Candidate], path, weights: LossWeights = LossWeights()) -> None:
    with open(path, "w") as fh:
        fh.write("expression\tnodes\tcon\tmse\tce\tphy\ttotal\n")
        for c in rank_candidates(candidates, weights):
            r = c.report
            fh.write(
                f"{c.formula()}\t{c.nodes}\t{r.con!r}\t{r.mse!r}\t{r.ce!r}\t{r.phy!r}\t{r.total!r}\n"
            )


# -- grammar-masked beam search ----------------------------------------------------


def allowed_tokens(need: int, body_len: int, max_len: int, n_bands: int) -> np.ndarray:
    """Boolean vocabulary mask of arity-valid continuations.

    ``need`` is the number of open operand slots, ``body_len`` the number of
    body tokens emitted so far. Operators are only allowed while the
    sequence can still be closed within ``max_len`` (BOS and EOS included).
    """
    mask = np.zeros(VOCAB_SIZE, dtype=bool)
    if need == 0:
        mask[EOS] = True
        return mask
    budget = max_len - 2 - body_len  # body tokens still available
    for tok in range(VOCAB_SIZE):
        a = token_arity(tok)
        if a < 0:
            continue
        if BAND_TOKEN0 <= tok < BAND_TOKEN0 + 8 and tok - BAND_TOKEN0 >= n_bands:
            continue
        if 1 + (need - 1 + a) <= budget:
            mask[tok] = True
    return mask


@dataclass(order=True)
class _Beam:
    neg_score: float
    tokens: tuple = field(compare=True)
    need: int = field(compare=False, default=1)
    logp: float = field(compare=False, default=0.0)


def decode_candidates(
    model,
    F_fused,
    beam_width: int = 4,
    max_len: int = 32,
    rng_seed: int = 0,
    n_bands: int = 8,
    stochastic: bool = False,
    return_scores: bool = False,
):
    """Beam search over grammar-masked decoder distributions.

    Returns up to ``beam_width`` distinct well-formed token sequences sorted
    by log-probability (best first). With ``stochastic=True`` the expansion
    scores are Gumbel-perturbed from ``rng_seed`` (sampling without
    replacement); ranking still uses the unperturbed log-probability.
    An empty list means no sequence could be completed within ``max_len``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 3:
        log.warning("max_len %d leaves no room for an expression", max_len)
        return []
    rng = np.random.default_rng(rng_seed)
    F = np.asarray(getattr(F_fused, "data", F_fused), dtype=np.float64).reshape(-1)
    beams = [_Beam(0.0, (BOS,), 1, 0.0)]
    finished: list[_Beam] = []
    while beams:
        logp = model.next_token_log_probs([b.tokens for b in beams], F)
        expansions = []
        for b, row in zip(beams, logp):
            mask = allowed_tokens(b.need, len(b.tokens) - 1, max_len, n_bands)
            for tok in np.flatnonzero(mask):
                lp = b.logp + float(row[tok])
                key = lp + (float(rng.gumbel()) if stochastic else 0.0)
                need = b.need - 1 + token_arity(int(tok)) if tok != EOS else 0
                expansions.append((-key, b.tokens + (int(tok),), need, lp))
        expansions.sort(key=lambda t: (t[0], t[1]))
        beams = []
        for neg_key, toks, need, lp in expansions:
            if toks[-1] == EOS:
                finished.append(_Beam(-lp, toks, 0, lp))
            else:
                beams.append(_Beam(neg_key, toks, need, lp))
            if len(beams) >= beam_width:
                break
        finished.sort()
        finished = finished[:beam_width]
        if len(finished) >= beam_width and (not beams or max(b.logp for b in beams) <= finished[-1].logp):
            break
    out = []
    seen = set()
    for b in sorted(finished):
        if b.tokens in seen:
            continue
        seen.add(b.tokens)
        check_tokens(b.tokens, max_len)
        out.append((b.tokens, b.logp) if return_scores else b.tokens)
    return out[:beam_width]


def sequence_ce(model, tokens: Sequence[int], F_fused) -> float:
    """Mean per-token negative log-likelihood of ``tokens`` under the decoder."""
    tokens = tuple(tokens)
    F = np.asarray(getattr(F_fused, "data", F_fused), dtype=np.float64).reshape(1, -1)
    from .nn.model import decoder_logits
    from .nn.tensor import no_grad

    with no_grad():
        logits = decoder_logits([tokens[:-1]], F, model.seq_cfg, model.params).data[0]
    m = logits.max(axis=-1, keepdims=True)
    lsm = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    targets = np.asarray(tokens[1:])
    return float(-lsm[np.arange(len(targets)), targets].mean())
