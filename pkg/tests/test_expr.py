import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satformula.expr import (
    BOS,
    CONST,
    EOS,
    OP_TOKENS,
    PAD,
    VOCAB_SIZE,
    ArityError,
    Const,
    ExprSyntaxError,
    Op,
    OpKind,
    TokenSeqError,
    UnknownIdentifierError,
    Var,
    band_token,
    bind_constants,
    check_tokens,
    constants,
    depth,
    from_tokens,
    is_well_formed,
    node_count,
    parse,
    print_expr,
    random_expr,
    to_infix,
    to_tokens,
)

H_FORMULA = "((B2 - B1) + 0.76) * 76.58"
AGB_FORMULA = "(B3 × 14493.77) + (42412.93 − (−1171.04 / ((B4 + 0.54) + (B3 × (B4 − 0.93)))))"
CS_FORMULA = "((B3 + 2.65) × 8437.08) − ((B1 / (0.02 − B3)) / (B4 + 0.53))"


def skeletonize(e):
    """Structure with constant values replaced by slot ids."""
    if isinstance(e, Const):
        return ("C", e.slot)
    if isinstance(e, Var):
        return ("B", e.band)
    return (e.kind, tuple(skeletonize(c) for c in e.children))


class TestOpKind:
    def test_exactly_six_operators(self):
        assert {k.name for k in OpKind} == {"ADD", "SUB", "MUL", "DIV", "EXP", "LOG"}

    def test_arity(self):
        assert [k.arity for k in OpKind] == [2, 2, 2, 2, 1, 1]

    def test_construction_checks_arity(self):
        with pytest.raises(ArityError):
            Op(OpKind.EXP, (Var(1), Var(2)))
        with pytest.raises(ArityError):
            Op(OpKind.ADD, (Var(1),))

    def test_band_range(self):
        with pytest.raises(ValueError):
            Var(0)
        with pytest.raises(ValueError):
            Var(9)


class TestParse:
    def test_h_formula(self):
        e = parse(H_FORMULA)
        assert isinstance(e, Op) and e.kind is OpKind.MUL
        assert node_count(e) == 7

    def test_single_leaf(self):
        e = parse("B1")
        assert e == Var(1)
        assert node_count(e) == 1

    def test_ndvi_roundtrip(self):
        e = parse("(B4 - B3) / (B4 + B3)")
        assert e.kind is OpKind.DIV and node_count(e) == 7
        assert to_infix(e) == "((B4 - B3) / (B4 + B3))"
        assert parse(to_infix(e)) == e

    def test_precedence_and_associativity(self):
        assert to_infix(parse("B1 + B2 * B3")) == "(B1 + (B2 * B3))"
        assert to_infix(parse("B1 - B2 - B3")) == "((B1 - B2) - B3)"
        assert to_infix(parse("B1 / B2 / B3")) == "((B1 / B2) / B3)"
        assert to_infix(parse("B1 * B2 + B3 / B4")) == "((B1 * B2) + (B3 / B4))"

    def test_slots_left_to_right(self):
        e = parse("1.5 * B1 + 2.5 - 3.5")
        assert list(constants(e)) == [1.5, 2.5, 3.5]
        slots = [n.slot for n in _consts_in_order(e)]
        assert slots == [0, 1, 2]

    def test_unary_minus_on_literal_folds(self):
        assert parse("-2.5") == Const(-2.5, 0)
        assert parse("B1 * -2") == Op(OpKind.MUL, (Var(1), Const(-2.0, 0)))

    def test_unary_minus_on_expression(self):
        assert parse("-B1") == Op(OpKind.SUB, (Const(0.0, 0), Var(1)))

    def test_functions(self):
        e = parse("exp(B1) + log(B2)")
        assert e.children[0].kind is OpKind.EXP and e.children[1].kind is OpKind.LOG

    def test_unicode_operators(self):
        assert parse("B1 × B2 ÷ B3 − B4") == parse("B1 * B2 / B3 - B4")

    def test_band_with_underscore(self):
        assert parse("B_2") == Var(2)

    @pytest.mark.parametrize(
        "text, offset",
        [("B1 +", 4), ("(B1 + B2", 8), ("B1 B2", 3), ("B1 + $", 5), ("", 0)],
    )
    def test_syntax_error_offsets(self, text, offset):
        with pytest.raises(ExprSyntaxError) as ei:
            parse(text)
        assert ei.value.offset == offset

    def test_unknown_identifier(self):
        with pytest.raises(UnknownIdentifierError):
            parse("sin(B1)")
        with pytest.raises(UnknownIdentifierError):
            parse("B9")

    def test_arity_violation(self):
        with pytest.raises(ArityError):
            parse("exp(B1, B2)")


def _consts_in_order(e):
    from satformula.expr import walk

    return [n for n in walk(e) if isinstance(n, Const)]


class TestPrint:
    def test_variable(self):
        assert print_expr(Var(1)) == "B1"

    def test_h_tree(self):
        e = Op(OpKind.MUL, (Op(OpKind.ADD, (Op(OpKind.SUB, (Var(2), Var(1))), Const(0.76, 0))), Const(76.58, 1)))
        assert to_infix(e) == "(((B2 - B1) + 0.76) * 76.58)"

    def test_roundtrip_1000_random_trees(self):
        for seed in range(1000):
            e = random_expr(seed, 6, 4)
            back = parse(to_infix(e))
            assert back == e, (seed, to_infix(e))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(allow_nan=False, allow_infinity=False, width=64))
    def test_constant_roundtrip_exact(self, v):
        e = Op(OpKind.ADD, (Var(1), Const(v, 0)))
        assert parse(to_infix(e)).children[1].value == v


class TestNodeCount:
    @pytest.mark.parametrize("text, n", [(H_FORMULA, 7), (AGB_FORMULA, 17), (CS_FORMULA, 15)])
    def test_table_formulas(self, text, n):
        assert node_count(parse(text)) == n

    def test_recurrence(self):
        for seed in range(200):
            e = random_expr(seed, 5, 4)
            if isinstance(e, Op):
                assert node_count(e) == 1 + sum(node_count(c) for c in e.children)


class TestTokens:
    def test_vocabulary_indices(self):
        assert (PAD, BOS, EOS) == (0, 1, 2)
        assert [OP_TOKENS[k] for k in OpKind] == [3, 4, 5, 6, 7, 8]
        assert [band_token(b) for b in range(1, 9)] == list(range(9, 17))
        assert CONST == 17 and VOCAB_SIZE == 18

    def test_prefix_example(self):
        toks = to_tokens(parse("B1 + log(B2)"))
        assert toks == (BOS, OP_TOKENS[OpKind.ADD], band_token(1), OP_TOKENS[OpKind.LOG], band_token(2), EOS)

    def test_const_skeleton(self):
        e = from_tokens([BOS, CONST, EOS])
        assert isinstance(e, Const) and e.slot == 0

    def test_unbalanced(self):
        with pytest.raises(TokenSeqError):
            from_tokens([BOS, OP_TOKENS[OpKind.ADD], band_token(1), EOS])

    def test_premature_eos_and_trailing(self):
        add = OP_TOKENS[OpKind.ADD]
        assert not is_well_formed([BOS, band_token(1), EOS, band_token(2)])
        assert not is_well_formed([BOS, band_token(1), band_token(2), EOS])
        assert not is_well_formed([BOS, add, EOS])
        assert not is_well_formed([band_token(1), EOS])
        assert is_well_formed([BOS, band_token(1), EOS, PAD, PAD])

    def test_max_len(self):
        e = parse("B1 + B2")
        assert is_well_formed(to_tokens(e), max_len=5)
        assert not is_well_formed(to_tokens(e), max_len=4)

    def test_from_tokens_refreshes_slots(self):
        e = parse("(1.5 * B1) + (B2 / 7.0)")
        sk = from_tokens(to_tokens(e))
        assert skeletonize(sk) == skeletonize(e)
        assert list(constants(sk)) == [1.0, 1.0]

    def test_10000_random_sequences_well_formed(self):
        for seed in range(10000):
            assert check_tokens(to_tokens(random_expr(seed, 6, 8)))

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 7), st.integers(1, 8))
    def test_skeleton_roundtrip(self, seed, d, bands):
        e = random_expr(seed, d, bands)
        assert skeletonize(from_tokens(to_tokens(e))) == skeletonize(e)


class TestRandomExpr:
    def test_depth_one_is_leaf(self):
        e = random_expr(1, 1, 4)
        assert isinstance(e, (Var, Const))

    def test_deterministic(self):
        assert random_expr(42, 5, 4) == random_expr(42, 5, 4)

    def test_depth_bound_and_band_range(self):
        from satformula.expr import bands_used

        for seed in range(500):
            e = random_expr(seed, 5, 3)
            assert depth(e) <= 5
            assert bands_used(e) <= {1, 2, 3}

    def test_bad_depth(self):
        with pytest.raises(ValueError):
            random_expr(0, 0, 4)


class TestBindConstants:
    def test_bind(self):
        e = bind_constants(parse("(1.0 * B1) + 2.0"), [3.0, 4.0])
        assert list(constants(e)) == [3.0, 4.0]

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            bind_constants(parse("B1 + 1.0"), [1.0, 2.0])

    def test_print_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            to_infix(Const(math.inf, 0))

    def test_frozen(self):
        e = parse("B1 + 1.0")
        with pytest.raises(Exception):
            e.kind = OpKind.SUB
        assert np.isfinite(constants(e)).all()
