"""Three-stage training, candidate search, evaluation and the sampling sweep."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluate import eval_expr
from .expr import PAD, to_infix
from .nn.checkpoint import save_params
from .nn.model import EncoderConfig, SatFormulaModel, SeqModelConfig, decoder_logits
from .nn.optim import Adam
from .nn.tensor import Tensor, log_softmax, mul, no_grad, relu
from .nn import layers as L
from .objectives import LossWeights, consistency_loss, total_loss
from .search import (
    BfgsConfig,
    Candidate,
    FitData,
    SearchError,
    bfgs_refine,
    decode_candidates,
    rank_candidates,
    select_best,
    sequence_ce,
    write_candidates_tsv,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 100  # T: stage-2 epochs, one decode round each
    stage1_epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = LossWeights()
    stage1: bool = True
    stage2: bool = True
    # target MLP (toy widths stand in for 256/128)
    mlp_hidden: tuple = (32, 16)
    mlp_epochs: int = 400
    mlp_lr: float = 1e-3
    mlp_grid: int = 8
    # search
    beam_width: int = 4
    decode_max_len: int = 32
    quick_bfgs_iters: int = 20
    max_refine: int = 24
    bfgs: BfgsConfig = BfgsConfig()
    test_fraction: float = 0.2

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class MetricsReport:
    r2: Optional[float]
    mae: float
    rmse: float
    nodes: int = 0
    runtime: float = 0.0

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None


def metrics(pred, target, nodes: int = 0, runtime: float = 0.0) -> MetricsReport:
    """MAE, RMSE and R²; R² is None when the target has zero variance."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("metrics needs equal, nonzero lengths")
    e = target - pred
    mae = float(np.mean(np.abs(e)))
    rmse = float(math.sqrt(np.mean(e * e)))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(e * e)) / ss_tot
    return MetricsReport(r2, mae, rmse, nodes, runtime)


def split_indices(n: int, seed: int, test_fraction: float = 0.2):
    """Seeded 80/20 split by sample index; both parts sorted."""
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return sorted(perm[n_test:].tolist()), sorted(perm[:n_test].tolist())


# -- consistency target -------------------------------------------------------------


def image_features(image, grid: int) -> np.ndarray:
    """Band means over a ``grid`` x ``grid`` block partition, flattened."""
    d = np.asarray(image.data, dtype=np.float64)
    C, H, W = d.shape
    if H % grid or W % grid:
        raise ValueError(f"image {H}x{W} not divisible into a {grid}x{grid} grid")
    return d.reshape(C, grid, H // grid, grid, W // grid).mean(axis=(2, 4)).reshape(-1)


class TargetMLP:
    """Regressor of the per-sample mean target; its last hidden layer, linearly
    projected to ``out_dim``, supplies the consistency-loss targets."""

    def __init__(self, in_dim, hidden, out_dim, seed, grid):
        rng = np.random.default_rng([seed, 0x3117])
        self.grid = grid
        self.hidden = tuple(hidden)
        self.params: L.Params = {}
        dims = (in_dim, *hidden)
        for i in range(len(hidden)):
            L.init_linear(self.params, f"mlp.h{i}", dims[i], dims[i + 1], rng)
        L.init_linear(self.params, "mlp.out", dims[-1], 1, rng)
        # fixed projection of the last hidden layer to the feature width
        self.projection = rng.uniform(-1.0, 1.0, size=(dims[-1], out_dim)) / math.sqrt(dims[-1])
        self.x_mean = np.zeros(in_dim)
        self.x_std = np.ones(in_dim)
        self.y_mean = 0.0
        self.y_std = 1.0

    def _inputs(self, images) -> Tensor:
        X = np.stack([image_features(im, self.grid) for im in images])
        return Tensor((X - self.x_mean) / self.x_std)

    def _hidden(self, x: Tensor) -> Tensor:
        for i in range(len(self.hidden)):
            x = relu(L.linear(self.params, f"mlp.h{i}", x))
        return x

    def predict(self, images) -> np.ndarray:
        with no_grad():
            out = L.linear(self.params, "mlp.out", self._hidden(self._inputs(images))).data[:, 0]
        return out * self.y_std + self.y_mean

    def features(self, images) -> np.ndarray:
        with no_grad():
            h = self._hidden(self._inputs(images)).data
        return h @ self.projection


def fit_target_mlp(dataset, seed: int = 0, hidden=(32, 16), out_dim: int = 128, epochs: int = 400,
                   lr: float = 1e-3, grid: int = 8) -> TargetMLP:
    if not dataset:
        raise ValueError("fit_target_mlp needs a nonempty dataset")
    images = [s.image for s in dataset]
    y = np.array([s.scalar_target if s.scalar_target is not None else float(np.mean(s.target)) for s in dataset])
    X = np.stack([image_features(im, grid) for im in images])
    mlp = TargetMLP(X.shape[1], hidden, out_dim, seed, grid)
    mlp.x_mean = X.mean(axis=0)
    mlp.x_std = np.where(X.std(axis=0) > 1e-12, X.std(axis=0), 1.0)
    mlp.y_mean = float(y.mean())
    mlp.y_std = float(y.std()) if y.std() > 1e-12 else 1.0
    xt = mlp._inputs(images)
    yt = (y - mlp.y_mean) / mlp.y_std
    opt = Adam(mlp.params, lr)
    for _ in range(epochs):
        opt.zero_grad()
        out = L.linear(mlp.params, "mlp.out", mlp._hidden(xt))
        diff = out - yt[:, None]
        loss = (diff * diff).mean()
        loss.backward()
        opt.step()
    return mlp


# -- stages -------------------------------------------------------------------------


@dataclass
class StageResult:
    trace: list = field(default_factory=list)  # one dict per epoch


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, stage, epoch):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{stage}: loss became {value} at epoch {epoch}")


def _stage_lr(cfg: TrainConfig, lr: Optional[float]) -> float:
    if lr is None:
        return cfg.lr
    if not lr >= 0:
        raise ValueError("lr must be >= 0")
    return lr


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def stage1_train(model: SatFormulaModel, dataset, mlp: TargetMLP, cfg: TrainConfig,
                 epochs: Optional[int] = None, lr: Optional[float] = None) -> StageResult:
    """Adam on ``λ_con · L_con`` over the image encoder only.

    ``lr`` overrides ``cfg.lr``; unlike the config it may be 0 (a no-op run).
    """
    epochs = cfg.stage1_epochs if epochs is None else epochs
    enc_params = model.group("img")
    opt = Adam(enc_params, _stage_lr(cfg, lr))
    images = [s.image for s in dataset]
    targets = mlp.features(images)
    rng = np.random.default_rng([cfg.seed, 1])
    result = StageResult()
    lam = cfg.weights.lambda_con
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            opt.zero_grad()
            _, F_img = model.encode_image([images[i] for i in idx])
            con = consistency_loss(F_img, Tensor(targets[idx]))
            _check_finite(con.item(), "stage 1", epoch)
            (con * lam).backward()
            opt.step()
            total += con.item() * len(idx)
            count += len(idx)
        con_mean = total / count
        result.trace.append({"stage": 1, "epoch": epoch, "con": con_mean, "mse": 0.0, "ce": 0.0,
                             "phy": 0.0, "total": lam * con_mean})
    return result


def _token_batch(seqs):
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, :len(s)] = s
    return arr


def teacher_forced_ce(model: SatFormulaModel, skeletons, F_fused: Tensor) -> Tensor:
    """Token-mean (non-PAD) cross-entropy per sequence, averaged over the batch."""
    toks = _token_batch(skeletons)
    inputs, targets = toks[:, :-1], toks[:, 1:]
    logits = decoder_logits(inputs, F_fused, model.seq_cfg, model.params)
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(lsm.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    keep = (targets != PAD).astype(np.float64)
    w = keep / keep.sum(axis=1, keepdims=True) / len(skeletons)
    return mul(lsm, -onehot * w[..., None]).sum()


@dataclass
class _PoolEntry:
    tokens: tuple
    quick_score: float
    first_epoch: int


class CandidatePool:
    """Unique decoded skeletons with a quick-fit score."""

    def __init__(self, quick_data: FitData, weights: LossWeights, quick_iters: int):
        self.data = quick_data
        self.weights = weights
        self.cfg = BfgsConfig(max_iters=quick_iters, restarts=())
        self.entries: dict[tuple, _PoolEntry] = {}
        self._fits: dict[tuple, Candidate] = {}

    def quick_fit(self, tokens) -> Candidate:
        tokens = tuple(tokens)
        if tokens not in self._fits:
            self._fits[tokens] = bfgs_refine(tokens, self.data, self.weights, self.cfg)
        return self._fits[tokens]

    def add(self, tokens, ce: float, epoch: int):
        tokens = tuple(tokens)
        if tokens in self.entries:
            return
        c = self.quick_fit(tokens)
        score = self.weights.lambda_mse * c.report.mse + self.weights.lambda_phy * c.report.phy
        self.entries[tokens] = _PoolEntry(tokens, score + self.weights.lambda_ce * ce, epoch)

    def best(self, k: int) -> list[tuple]:
        ranked = sorted(self.entries.values(), key=lambda e: (e.quick_score, len(e.tokens), e.tokens))
        return [e.tokens for e in ranked[:k]]


def _inference_memory(model, F_img_train: np.ndarray, skeletons) -> np.ndarray:
    with no_grad():
        F_exp = model.encode_expr(list(dict.fromkeys(skeletons))).data.mean(axis=0, keepdims=True)
        F_img = F_img_train.mean(axis=0, keepdims=True)
        return model.fuse(Tensor(F_img), Tensor(F_exp)).data[0]


def stage2_train(model: SatFormulaModel, dataset, mlp: TargetMLP, cfg: TrainConfig,
                 epochs: Optional[int] = None, pool: Optional[CandidatePool] = None,
                 n_bands: Optional[int] = None, lr: Optional[float] = None) -> StageResult:
    """Teacher-forced training of expression encoder, fusion and decoder; encoder frozen.

    Each epoch reports all four terms. L_con is constant (frozen encoder);
    L_MSE and L_phy come from a short BFGS fit of each batch's supervision
    skeletons. With a ``pool``, every epoch also decodes a candidate round.
    """
    epochs = cfg.iterations if epochs is None else epochs
    n_bands = dataset[0].image.bands if n_bands is None else n_bands
    trainable = {k: v for k, v in model.params.items() if not k.startswith("img.")}
    opt = Adam(trainable, _stage_lr(cfg, lr))
    w = cfg.weights
    images = [s.image for s in dataset]
    if any(not s.skeleton for s in dataset):
        raise ValueError("stage 2 needs supervision skeletons on every sample")
    skeletons = [tuple(s.skeleton) for s in dataset]
    with no_grad():
        _, F_img_all = model.encode_image(images)
    F_img_all = F_img_all.data
    con = float(consistency_loss(F_img_all, mlp.features(images)))
    quick_cfg = BfgsConfig(max_iters=cfg.quick_bfgs_iters, restarts=())
    rng = np.random.default_rng([cfg.seed, 2])
    result = StageResult()
    for epoch in range(epochs):
        sums = {"ce": 0.0, "mse": 0.0, "phy": 0.0}
        count = 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            opt.zero_grad()
            batch_sk = [skeletons[i] for i in idx]
            F_exp = model.encode_expr(batch_sk)
            F_fused = model.fuse(Tensor(F_img_all[idx]), F_exp)
            ce = teacher_forced_ce(model, batch_sk, F_fused)
            _check_finite(ce.item(), "stage 2", epoch)
            (ce * w.lambda_ce).backward()
            opt.step()
            mse = phy = 0.0
            for sk in dict.fromkeys(batch_sk):
                members = [dataset[i] for i, s in zip(idx, batch_sk) if s == sk]
                fit = bfgs_refine(sk, FitData(members), w, quick_cfg)
                mse += fit.report.mse * len(members)
                phy += fit.report.phy
            sums["ce"] += ce.item() * len(idx)
            sums["mse"] += mse
            sums["phy"] += phy
            count += len(idx)
        parts = {"con": con, "ce": sums["ce"] / count, "mse": sums["mse"] / count, "phy": sums["phy"]}
        rep = total_loss(parts, w)
        result.trace.append({"stage": 2, "epoch": epoch, "con": rep.con, "mse": rep.mse, "ce": rep.ce,
                             "phy": rep.phy, "total": rep.total})
        if pool is not None:
            memory = _inference_memory(model, F_img_all, skeletons)
            for toks, lp in decode_candidates(model, memory, cfg.beam_width, cfg.decode_max_len,
                                              rng_seed=epoch, n_bands=n_bands, return_scores=True):
                pool.add(toks, -lp / (len(toks) - 1), epoch)
    return result


# -- full run -----------------------------------------------------------------------


@dataclass
class PipelineResult:
    best: Candidate
    report: MetricsReport
    candidates: list
    trace: list
    model: SatFormulaModel
    train_idx: list
    test_idx: list


def run_pipeline(dataset, cfg: TrainConfig = TrainConfig(), out_dir=None, task: str = "",
                 enc_cfg: Optional[EncoderConfig] = None, seq_cfg: Optional[SeqModelConfig] = None
                 ) -> PipelineResult:
    """Encode, fuse, decode/train for T rounds, refine constants, select, evaluate."""
    t0 = time.perf_counter()
    dataset = list(dataset)
    if len(dataset) < 2:
        raise ValueError("run_pipeline needs at least 2 samples")
    train_idx, test_idx = split_indices(len(dataset), cfg.seed, cfg.test_fraction)
    train = [dataset[i] for i in train_idx]
    test = [dataset[i] for i in test_idx]
    n_bands = train[0].image.bands
    enc_cfg = enc_cfg or EncoderConfig(in_chans=n_bands)
    if enc_cfg.in_chans != n_bands:
        enc_cfg = replace(enc_cfg, in_chans=n_bands)
    seq_cfg = seq_cfg or SeqModelConfig()
    model = SatFormulaModel.create(enc_cfg, seq_cfg, cfg.seed)

    mlp = fit_target_mlp(train, cfg.seed, cfg.mlp_hidden, enc_cfg.out_dim, cfg.mlp_epochs, cfg.mlp_lr, cfg.mlp_grid)
    trace = []
    if cfg.stage1:
        trace += stage1_train(model, train, mlp, cfg).trace
    quick = FitData(train[: min(2, len(train))])
    pool = CandidatePool(quick, cfg.weights, cfg.quick_bfgs_iters)
    if cfg.stage2:
        trace += stage2_train(model, train, mlp, cfg, pool=pool, n_bands=n_bands).trace
    else:
        with no_grad():
            F_img = model.encode_image([s.image for s in train])[1].data
        memory = _inference_memory(model, F_img, [tuple(s.skeleton) for s in train])
        for toks, lp in decode_candidates(model, memory, cfg.beam_width, cfg.decode_max_len,
                                          n_bands=n_bands, return_scores=True):
            pool.add(toks, -lp / (len(toks) - 1), 0)
    if not pool.entries:
        raise SearchError("decoder produced no candidate expressions")

    # stage 3: full refinement of the most promising skeletons, then arg-min
    with no_grad():
        F_img_train = model.encode_image([s.image for s in train])[1].data
    skeletons = [tuple(s.skeleton) for s in train]
    memory = _inference_memory(model, F_img_train, skeletons)
    con = float(consistency_loss(F_img_train, mlp.features([s.image for s in train])))
    fit = FitData(train)
    candidates = []
    for toks in pool.best(cfg.max_refine):
        ce = sequence_ce(model, toks, memory)
        candidates.append(bfgs_refine(toks, fit, cfg.weights, cfg.bfgs, ce=ce, con=con))
    best = select_best(candidates, cfg.weights)

    preds = np.concatenate([eval_expr(best.expr, s.image).reshape(-1) for s in test])
    targets = np.concatenate([s.target.reshape(-1) for s in test])
    report = metrics(preds, targets, best.nodes, time.perf_counter() - t0)
    result = PipelineResult(best, report, rank_candidates(candidates, cfg.weights), trace, model, train_idx, test_idx)
    if out_dir is not None:
        write_run(result, out_dir, task, cfg)
    return result


# -- outputs ------------------------------------------------------------------------

METRICS_HEADER = ["task", "r2", "mae", "rmse", "nodes", "runtime_s"]
TRACE_HEADER = ["stage", "epoch", "con", "mse", "ce", "phy", "total"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics_csv(path, task: str, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        w.writerow([task, _fmt(report.r2), _fmt(report.mae), _fmt(report.rmse), report.nodes,
                     f"{report.runtime:.3f}"])


def write_run(result: PipelineResult, out_dir, task: str, cfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "expression.txt").write_text(to_infix(result.best.expr) + "\n")
    write_metrics_csv(out / "metrics.csv", task, result.report)
    write_candidates_tsv(result.candidates, out / "candidates.tsv", cfg.weights)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_HEADER)
        w.writeheader()
        for row in result.trace:
            w.writerow({k: (repr(float(v)) if k not in ("stage", "epoch") else v) for k, v in row.items()})
    save_params(result.model.params, out / "model.satw")


# -- sampling sweep -------------------------------------------------------------------

SWEEP_HEADER = ["ratio", "n_samples", "r2", "mae", "rmse", "nodes", "runtime_s"]


def sweep_subset(n: int, ratio: float, seed: int) -> list[int]:
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio {ratio} outside (0, 1]")
    k = int(round(ratio * n))
    if k < 2:
        raise ValueError(f"ratio {ratio} keeps {k} of {n} samples; need at least 2")
    if k == n:
        return list(range(n))
    return sorted(np.random.default_rng([seed, 0xA11]).choice(n, size=k, replace=False).tolist())


def _sweep_one(args):
    dataset, ratio, cfg = args
    idx = sweep_subset(len(dataset), ratio, cfg.seed)
    res = run_pipeline([dataset[i] for i in idx], cfg)
    return ratio, len(idx), res.report


def sampling_sweep(dataset, ratios: Sequence[float], cfg: TrainConfig = TrainConfig(), jobs: int = 1,
                   csv_path=None) -> list[dict]:
    """Run the pipeline on a seed-pinned random subset for each sampling ratio."""
    dataset = list(dataset)
    for r in ratios:
        sweep_subset(len(dataset), r, cfg.seed)  # validate all before running any
    work = [(dataset, r, cfg) for r in ratios]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]
    rows = [
        {"ratio": r, "n_samples": n, "r2": rep.r2, "mae": rep.mae, "rmse": rep.rmse, "nodes": rep.nodes,
         "runtime_s": rep.runtime}
        for r, n, rep in results
    ]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_HEADER)
            for row in rows:
                w.writerow([repr(row["ratio"]), row["n_samples"], _fmt(row["r2"]), _fmt(row["mae"]),
                            _fmt(row["rmse"]), row["nodes"], f"{row['runtime_s']:.3f}"])
    return rows


def expression_metrics(expr, samples) -> MetricsReport:
    preds = np.concatenate([eval_expr(expr, s.image).reshape(-1) for s in samples])
    targets = np.concatenate([s.target.reshape(-1) for s in samples])
    from .expr import node_count

    return metrics(preds, targets, node_count(expr))
