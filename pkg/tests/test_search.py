import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satformula.expr import BOS, CONST, EOS, check_tokens, parse, to_tokens
from satformula.nn.model import EncoderConfig, SatFormulaModel, SeqModelConfig
from satformula.nn.tensor import no_grad
from satformula.objectives import LossWeights, total_loss
from satformula.pipeline import _inference_memory
from satformula.raster import Raster, Sample, make_dataset
from satformula.search import (
    BfgsConfig,
    Candidate,
    FitData,
    SearchError,
    allowed_tokens,
    bfgs_minimize,
    bfgs_refine,
    decode_candidates,
    rank_candidates,
    select_best,
    write_candidates_tsv,
)

NDVI = "(B4 - B3) / (B4 + B3)"
NO_PHY = LossWeights(lambda_phy=0.0)


def skeleton(text):
    return to_tokens(parse(text))


def constant_samples(value, n=2, size=8):
    img = Raster(np.zeros((1, size, size), dtype=np.float32))
    return [Sample(img, np.full((size, size), value)) for _ in range(n)]


def fake_candidate(text, mse=0.0, ce=0.0, phy=0.0, nodes=None):
    e = parse(text)
    from satformula.expr import node_count

    rep = total_loss({"con": 0.0, "mse": mse, "ce": ce, "phy": phy})
    return Candidate(to_tokens(e), e, np.zeros(0), rep, node_count(e) if nodes is None else nodes)


class TestBfgsMinimize:
    def test_rosenbrock(self):
        def fun(x):
            a, b = x
            f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
            g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
            return f, g

        res = bfgs_minimize(fun, [-1.2, 1.0], BfgsConfig(max_iters=2000))
        assert res.converged and not res.line_search_failed
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-4)
        assert np.all(np.diff(res.trace) <= 0)

    def test_quadratic_exact(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([1.0, -1.0])
        res = bfgs_minimize(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(2))
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)

    def test_line_search_failure_flagged(self):
        x0 = np.array([2.0])

        def fun(x):
            if np.array_equal(x, x0):
                return float(x @ x), 2 * x
            return np.nan, np.full_like(x, np.nan)

        res = bfgs_minimize(fun, x0)
        assert res.line_search_failed and not res.converged
        np.testing.assert_array_equal(res.x, x0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BfgsConfig(grad_tol=0)
        with pytest.raises(ValueError):
            BfgsConfig(backtrack=1.0)


class TestRefine:
    def test_constant_skeleton(self):
        c = bfgs_refine((BOS, CONST, EOS), constant_samples(3.0))
        assert c.constants[0] == pytest.approx(3.0, abs=1e-6)
        assert c.nodes == 1 and c.report.mse < 1e-12

    def test_h_formula_recovery(self):
        data = make_dataset(0, 4, "h", size=32)
        t0 = time.perf_counter()
        c = bfgs_refine(skeleton("((B2 - B1) + 1.0) * 1.0"), data)
        elapsed = time.perf_counter() - t0
        np.testing.assert_allclose(c.constants, [0.76, 76.58], rtol=1e-3)
        assert elapsed < 5.0
        assert c.converged

    def test_grid_search_oracle(self):
        rng = np.random.default_rng(0)
        img = Raster(rng.uniform(0.0, 1.0, size=(1, 6, 6)).astype(np.float32))
        b1 = img.band(1).astype(np.float64)
        target = 1.5 / (b1 + 0.4) + 0.1 * b1  # not representable by the skeleton
        data = [Sample(img, target)]
        cand = bfgs_refine(skeleton("2.0 / (B1 + 1.0)"), data, NO_PHY)
        c0 = np.linspace(1.0, 3.0, 200)
        c1 = np.linspace(0.1, 1.1, 200)
        x = b1.reshape(-1)
        pred = c0[:, None, None] / (x[None, None, :] + c1[None, :, None])
        loss = np.mean((pred - target.reshape(-1)) ** 2, axis=-1)
        i, j = np.unravel_index(np.argmin(loss), loss.shape)
        np.testing.assert_allclose(cand.constants, [c0[i], c1[j]], atol=1e-2)
        assert cand.report.mse <= loss[i, j] + 1e-12

    def test_trace_monotone(self):
        data = make_dataset(1, 2, "savi", size=16)
        for text in ["(1.0 * (B4 - B3)) / ((B4 + B3) + 1.0)", "exp(B4 * 1.0) - 1.0", "log(B3 + 1.0) * 1.0"]:
            c = bfgs_refine(skeleton(text), data)
            assert len(c.trace) >= 2
            assert np.all(np.diff(c.trace) <= 0)

    def test_zero_constant_skeleton(self):
        data = make_dataset(2, 2, "ndvi", size=16)
        c = bfgs_refine(skeleton(NDVI), data)
        assert c.constants.shape == (0,) and c.converged and c.trace == []
        assert c.report.mse < 1e-12 and c.nodes == 7

    @pytest.mark.parametrize(
        "task, text",
        [
            ("savi", "(1.0 * (B4 - B3)) / ((B4 + B3) + 1.0)"),
            ("ndvi", "(1.0 * (B4 - B3)) / (B4 + B3)"),
            ("h", "((B2 - B1) + 1.0) * 1.0"),
            ("gndvi", "((B4 - B2) / (B4 + B2)) + 1.0"),
        ],
    )
    def test_representable_reaches_zero_mse(self, task, text):
        data = make_dataset(3, 2, task, size=16)
        c = bfgs_refine(skeleton(text), data, cfg=BfgsConfig(max_iters=500))
        assert c.report.mse < 1e-8

    def test_records_ce_and_con(self):
        c = bfgs_refine((BOS, CONST, EOS), constant_samples(1.0), ce=0.25, con=4.0)
        assert c.report.ce == 0.25 and c.report.con == 4.0
        assert c.score(LossWeights()) == pytest.approx(0.125, abs=1e-9)

    def test_expr_matches_skeleton(self):
        data = make_dataset(0, 1, "h", size=16)
        c = bfgs_refine(skeleton("((B2 - B1) + 1.0) * 1.0"), data)
        assert to_tokens(c.expr) == c.skeleton
        assert c.formula().startswith("(((B2 - B1) + 0.76")

    def test_fit_data_rho_shape(self):
        data = make_dataset(0, 2, "ndvi", size=8)
        with pytest.raises(ValueError):
            FitData(data, rho=[np.zeros((8, 8))])
        with pytest.raises(ValueError):
            FitData([])


class TestSelectBest:
    def test_single(self):
        c = fake_candidate("B1", mse=3.0)
        assert select_best([c]) is c

    def test_tie_prefers_fewer_nodes(self):
        a = fake_candidate("B1 + B2", mse=1.0, nodes=9)
        b = fake_candidate("B1 - B2", mse=1.0, nodes=7)
        assert select_best([a, b]) is b

    def test_tie_on_nodes_uses_token_order(self):
        a = fake_candidate("B1 - B2", mse=1.0)
        b = fake_candidate("B1 + B2", mse=1.0)
        assert select_best([a, b]) is b  # ADD token precedes SUB

    def test_empty(self):
        with pytest.raises(SearchError):
            select_best([])

    def test_ndvi_among_distractors(self):
        data = make_dataset(4, 2, "ndvi", size=16)
        texts = [NDVI, "(B4 - B3) * 1.0", "B4 / (B3 + 1.0)", "(B4 - 1.0) / (B4 + B3)", "log(B4) - log(B3)"]
        cands = [bfgs_refine(skeleton(t), data) for t in texts]
        best = select_best(cands)
        assert best.skeleton == skeleton(NDVI)
        assert best.report.mse == 0.0 or best.report.mse < 1e-20

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(range(6)))
    def test_order_invariance(self, perm):
        pool = [fake_candidate(t, mse=m) for t, m in
                [("B1", 1.0), ("B2", 0.5), ("B1 + B2", 0.5), ("B3", 2.0), ("B2 - B1", 0.5), ("B4", 0.5)]]
        shuffled = [pool[i] for i in perm]
        assert select_best(shuffled) is select_best(pool)
        assert [c.skeleton for c in rank_candidates(shuffled)] == [c.skeleton for c in rank_candidates(pool)]

    def test_consistency_excluded(self):
        a = fake_candidate("B1", mse=1.0)
        b = fake_candidate("B2", mse=1.0 + 1e-9)
        a.report = total_loss({"con": 1e6, "mse": 1.0, "ce": 0.0, "phy": 0.0})
        assert select_best([a, b]) is a

    def test_candidates_tsv(self, tmp_path):
        path = tmp_path / "candidates.tsv"
        write_candidates_tsv([fake_candidate("B2", mse=2.0), fake_candidate("B1", mse=1.0)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "expression\tnodes\tcon\tmse\tce\tphy\ttotal"
        assert lines[1].split("\t")[:2] == ["B1", "1"]
        assert len(lines) == 3


@pytest.fixture(scope="module")
def model():
    return SatFormulaModel.create(EncoderConfig(), SeqModelConfig(), seed=1)


class TestDecoding:
    def test_allowed_tokens(self):
        assert np.flatnonzero(allowed_tokens(0, 5, 32, 4)).tolist() == [EOS]
        leaves = np.flatnonzero(allowed_tokens(1, 29, 32, 4)).tolist()
        assert leaves == [9, 10, 11, 12, CONST]  # one body slot left: no room for an operator
        unary = np.flatnonzero(allowed_tokens(1, 28, 32, 4)).tolist()
        assert unary == [7, 8, 9, 10, 11, 12, CONST]
        assert np.flatnonzero(allowed_tokens(1, 27, 32, 4)).tolist() == list(range(3, 13)) + [CONST]
        full = np.flatnonzero(allowed_tokens(1, 0, 32, 8)).tolist()
        assert full == list(range(3, 18))

    def test_beam_contract(self, model):
        F = np.random.default_rng(0).normal(size=64)
        out = decode_candidates(model, F, beam_width=4, max_len=16, n_bands=4, return_scores=True)
        assert 1 <= len(out) <= 4
        toks = [t for t, _ in out]
        assert len(set(toks)) == len(toks)
        for t in toks:
            assert check_tokens(t, 16)
            assert all(tok < 13 or tok > 16 for tok in t)  # only bands 1..4
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)

    def test_deterministic(self, model):
        F = np.random.default_rng(1).normal(size=64)
        a = decode_candidates(model, F, beam_width=3, max_len=12, n_bands=4, rng_seed=5, stochastic=True)
        b = decode_candidates(model, F, beam_width=3, max_len=12, n_bands=4, rng_seed=5, stochastic=True)
        assert a == b
        assert all(check_tokens(t, 12) for t in a)

    def test_short_max_len(self, model):
        F = np.zeros(64)
        assert decode_candidates(model, F, max_len=2) == []
        out = decode_candidates(model, F, beam_width=4, max_len=3, n_bands=2)
        assert all(len(t) == 3 for t in out)

    def test_bad_width(self, model):
        with pytest.raises(ValueError):
            decode_candidates(model, np.zeros(64), beam_width=0)

    def test_overfit_model_greedy(self, ndvi_overfit):
        model, data = ndvi_overfit["model"], ndvi_overfit["data"]
        with no_grad():
            F_img = model.encode_image([s.image for s in data])[1].data
        memory = _inference_memory(model, F_img, [s.skeleton for s in data])
        assert decode_candidates(model, memory, beam_width=1, n_bands=4) == [skeleton(NDVI)]
