"""Lexer, parser, analyzer, pretty-printer."""
import random

import pytest

from eduction import lang

FACT_SRC = (
    "fact where dimension d; "
    "fact = if #.d == 0 then 1 else #.d * (fact @.d (#.d - 1)); end"
)


class TestTokenize:
    def test_single_int(self):
        toks = lang.tokenize("42")
        assert [(t.kind, t.lexeme) for t in toks] == [("int", "42"), ("eof", "")]

    def test_hash_navigation(self):
        kinds = [t.kind for t in lang.tokenize("#.d")]
        assert kinds == ["#", ".", "ident", "eof"]

    def test_lex_error_position(self):
        with pytest.raises(lang.LexError) as e:
            lang.tokenize("4 $ 2")
        assert e.value.line == 1 and e.value.col == 3 and e.value.char == "$"

    def test_comments_skipped(self):
        toks = lang.tokenize("1 // trailing words $ % ^\n+ 2")
        assert [t.lexeme for t in toks[:-1]] == ["1", "+", "2"]

    def test_float_forms(self):
        toks = lang.tokenize("1.5 2.0e3 7.25E-2")
        assert [t.kind for t in toks[:-1]] == ["float"] * 3

    def test_positions_are_one_based(self):
        tok = lang.tokenize("  abc")[0]
        assert (tok.line, tok.col) == (1, 3)

    def test_two_char_operators(self):
        kinds = [t.kind for t in lang.tokenize("== != <= >= && ||")[:-1]]
        assert kinds == ["==", "!=", "<=", ">=", "&&", "||"]


class TestParse:
    def parse(self, src):
        return lang.parse_program(lang.tokenize(src))

    def test_bare_expression_program(self):
        root, decls = self.parse("42")
        assert root == lang.Literal(42) and decls == []

    def test_fact_program_shape(self):
        root, decls = self.parse(FACT_SRC)
        assert root == lang.Ident("fact")
        kinds = [d[0] for d in decls]
        assert kinds == ["dim", "def"]

    def test_missing_else(self):
        with pytest.raises(lang.ParseError) as e:
            self.parse("if 1 then 2")
        assert "else" in str(e.value)

    def test_precedence_arithmetic_over_comparison(self):
        root, _ = self.parse("1 + 2 * 3 < 4 - 1")
        assert isinstance(root, lang.Binary) and root.op == "<"
        assert root.left == lang.Binary("+", lang.Literal(1), lang.Binary("*", lang.Literal(2), lang.Literal(3)))

    def test_logical_is_loosest(self):
        root, _ = self.parse("1 < 2 && 3 < 4 || 5 < 6")
        assert root.op == "||" and root.left.op == "&&"

    def test_left_associativity(self):
        root, _ = self.parse("10 - 3 - 2")
        assert root == lang.Binary("-", lang.Binary("-", lang.Literal(10), lang.Literal(3)), lang.Literal(2))

    def test_at_binds_on_primary(self):
        # E @.d T: tag operand is a primary, whole form is postfix-level
        _, decls = self.parse("x where dimension d; x = 1 + y @.d 2; y = #.d; end")
        x_body = next(d[2] for d in decls if d[0] == "def" and d[1] == "x")
        assert isinstance(x_body, lang.Binary) and x_body.op == "+"
        assert isinstance(x_body.right, lang.At)

    def test_unary_minus_folds_literals(self):
        root, _ = self.parse("-5")
        assert root == lang.Literal(-5)
        root, _ = self.parse("-x where x = 1; end")
        assert root == lang.Binary("-", lang.Literal(0), lang.Ident("x"))

    def test_call_arguments(self):
        root, _ = self.parse("call add2(1, 2 + 3)")
        assert isinstance(root, lang.Call)
        assert root.proc == "add2" and len(root.args) == 2

    def test_dimension_list(self):
        _, decls = self.parse("1 where dimension d, e; end")
        assert decls == [("dim", "d"), ("dim", "e")]

    def test_trailing_garbage_rejected(self):
        with pytest.raises(lang.ParseError):
            self.parse("1 2")


class TestAnalyze:
    def test_fact_geer(self):
        geer = lang.compile_source(FACT_SRC, "facts")
        assert geer.dimensions == frozenset({"d"})
        assert set(geer.dictionary) == {"fact"}
        assert geer.program_id == "facts"

    def test_undefined_identifier(self):
        with pytest.raises(lang.UndefinedIdentifier):
            lang.compile_source("x where y = 1; end", "p")

    def test_undeclared_dimension(self):
        with pytest.raises(lang.UndeclaredDimension):
            lang.compile_source("#.q", "p")
        with pytest.raises(lang.UndeclaredDimension):
            lang.compile_source("x where x = 1 @.q 2; end", "p")

    def test_duplicate_definition(self):
        with pytest.raises(lang.DuplicateDefinition):
            lang.compile_source("x where x = 1; x = 2; end", "p")
        with pytest.raises(lang.DuplicateDefinition):
            lang.compile_source("1 where dimension d; dimension d; end", "p")

    def test_digest_ignores_whitespace_and_comments(self):
        a = lang.compile_source("1 + 2", "p")
        b = lang.compile_source("1   +   2 // same tokens", "p")
        c = lang.compile_source("1 + 3", "p")
        assert a.source_digest == b.source_digest
        assert a.source_digest != c.source_digest


class TestPretty:
    def test_roundtrip_fact(self):
        geer = lang.compile_source(FACT_SRC, "facts")
        again = lang.compile_source(lang.pretty_program(geer), "facts")
        assert again.dictionary == geer.dictionary
        assert again.root_expr == geer.root_expr
        assert again.dimensions == geer.dimensions

    def test_roundtrip_random_programs(self):
        import helpers

        rng = random.Random(7)
        for i in range(60):
            geer = helpers.gen_program(rng, i, max_depth=6)
            again = lang.compile_source(lang.pretty_program(geer), geer.program_id)
            assert again.dictionary == geer.dictionary, lang.pretty_program(geer)
            assert again.root_expr == geer.root_expr

    def test_analyze_idempotent_on_pretty_source(self):
        geer = lang.compile_source(FACT_SRC, "facts")
        again = lang.compile_source(lang.pretty_program(geer), "facts")
        third = lang.compile_source(lang.pretty_program(again), "facts")
        assert set(third.dictionary) == set(geer.dictionary)
        assert third.dimensions == geer.dimensions
        assert third.source_digest == again.source_digest

    def test_negative_tag_parenthesized(self):
        src = "x where dimension d; x = 1 @.d (0 - 2); end"
        geer = lang.compile_source(src, "p")
        again = lang.compile_source(lang.pretty_program(geer), "p")
        assert again.dictionary == geer.dictionary
