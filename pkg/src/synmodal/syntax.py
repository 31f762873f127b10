"""Mini-language parser, depth-first AST serialisation and JSON AST ingestion.

The mini language is a small Python-like subset: ``def`` functions,
assignments, ``return``, ``if``/``else``, calls, arithmetic and comparison
operators, and string/number/boolean literals. Blocks are delimited by
indentation.

Node kinds follow tree-sitter naming. Internal nodes carry no text; leaves
carry exactly the source text of one token.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

INTERNAL_KINDS = (
    "module",
    "function_definition",
    "parameters",
    "block",
    "expression_statement",
    "assignment",
    "return_statement",
    "if_statement",
    "else_clause",
    "binary_operator",
    "comparison_operator",
    "unary_operator",
    "call",
    "argument_list",
    "parenthesized_expression",
)
LEAF_KINDS = (
    "identifier",
    "integer",
    "float",
    "string",
    "true",
    "false",
    "none",
    "keyword",
    "operator",
    "delimiter",
)
KEYWORDS = frozenset({"def", "return", "if", "else"})
_CONSTANTS = {"True": "true", "False": "false", "None": "none"}
_COMPARISONS = frozenset({"==", "!=", "<", ">", "<=", ">="})


class ParseError(ValueError):
    """Syntax error in mini-language source, with 1-based line/column."""

    def __init__(self, message: str, line: int, column: int, expected: frozenset[str] = frozenset()):
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        detail = f"; expected one of {sorted(self.expected)}" if self.expected else ""
        super().__init__(f"line {line}, column {column}: {message}{detail}")


class AstFormatError(ValueError):
    """Malformed AST JSON; the message names the offending node path."""


@dataclass(frozen=True)
class AstNode:
    kind: str
    text: str | None = None
    children: tuple[AstNode, ...] = ()
    # byte offsets into the source, leaves from the parser only
    span: tuple[int, int] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.text is not None and self.children:
            raise ValueError(f"node {self.kind!r} has both text and children")
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_leaf(self) -> bool:
        return self.text is not None

    def leaves(self) -> Iterator[AstNode]:
        stack = [self]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(reversed(node.children))

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


class AstToken(NamedTuple):
    surface: str
    kind: str
    is_leaf: bool


@dataclass(frozen=True)
class AstSequence:
    """Pre-order token sequence of a tree plus its parent->child edges."""

    tokens: tuple[AstToken, ...]
    edges: tuple[tuple[int, int], ...]
    identifier_flags: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)


@dataclass(frozen=True)
class CodeTokenSpan:
    surface: str
    is_identifier: bool
    start: int | None = None
    end: int | None = None


# -- lexer ------------------------------------------------------------------


class _Tok(NamedTuple):
    type: str  # name, integer, float, string, op, NEWLINE, INDENT, DEDENT, EOF
    text: str
    line: int
    col: int
    start: int
    end: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t]+)
  | (?P<comment>\#.*)
  | (?P<float>\d+\.\d+)
  | (?P<integer>\d+)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>==|!=|<=|>=|[-+*/%<>=(),:])
    """,
    re.VERBOSE,
)


def _tokenize(source: str) -> list[_Tok]:
    toks: list[_Tok] = []
    indents = [0]
    offset = 0
    line_no = 0
    for line_no, line in enumerate(source.splitlines(keepends=True), start=1):
        body = line.rstrip("\r\n")
        stripped = body.lstrip(" \t")
        if not stripped or stripped.startswith("#"):
            offset += len(line)
            continue
        width = len(body) - len(stripped)
        if width > indents[-1]:
            indents.append(width)
            toks.append(_Tok("INDENT", "", line_no, width + 1, offset + width, offset + width))
        while width < indents[-1]:
            indents.pop()
            toks.append(_Tok("DEDENT", "", line_no, width + 1, offset + width, offset + width))
        if width != indents[-1]:
            raise ParseError("inconsistent dedent", line_no, width + 1)
        pos = width
        while pos < len(body):
            m = _TOKEN_RE.match(body, pos)
            if m is None:
                raise ParseError(f"unexpected character {body[pos]!r}", line_no, pos + 1)
            kind = m.lastgroup
            if kind not in ("ws", "comment"):
                toks.append(_Tok(kind, m.group(), line_no, pos + 1, offset + pos, offset + m.end()))
            pos = m.end()
        toks.append(_Tok("NEWLINE", "", line_no, len(body) + 1, offset + len(body), offset + len(body)))
        offset += len(line)
    end_line = max(line_no, 1)
    for _ in indents[1:]:
        toks.append(_Tok("DEDENT", "", end_line, 1, offset, offset))
    toks.append(_Tok("EOF", "", end_line + (1 if source.endswith("\n") else 0), 1, offset, offset))
    return toks


# -- parser -----------------------------------------------------------------

_EXPR_START = frozenset({"identifier", "integer", "float", "string", "True", "False", "None", "(", "-"})
_STMT_START = _EXPR_START | {"def", "if", "return"}


class _Parser:
    def __init__(self, source: str):
        self.toks = _tokenize(source)
        self.pos = 0
        encoded = [len(ch.encode("utf-8")) for ch in source]
        self.byte_at = [0]
        for n in encoded:
            self.byte_at.append(self.byte_at[-1] + n)

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.type in ("op", "name") and t.text == text

    def fail(self, message: str, expected) -> ParseError:
        t = self.tok
        return ParseError(message, t.line, t.col, frozenset(expected))

    def _describe(self, t: _Tok) -> str:
        return {"EOF": "end of input", "NEWLINE": "end of line", "INDENT": "indent", "DEDENT": "dedent"}.get(
            t.type, repr(t.text)
        )

    def leaf(self, kind: str) -> AstNode:
        t = self.tok
        self.pos += 1
        return AstNode(kind, text=t.text, span=(self.byte_at[t.start], self.byte_at[t.end]))

    def expect(self, text: str, kind: str) -> AstNode:
        if not self.at(text):
            raise self.fail(f"unexpected {self._describe(self.tok)}", {text})
        return self.leaf(kind)

    def expect_type(self, type_: str) -> None:
        if self.tok.type != type_:
            raise self.fail(f"unexpected {self._describe(self.tok)}", {type_})
        self.pos += 1

    def identifier(self) -> AstNode:
        t = self.tok
        if t.type != "name" or t.text in KEYWORDS or t.text in _CONSTANTS:
            raise self.fail(f"unexpected {self._describe(t)}", {"identifier"})
        return self.leaf("identifier")

    # statements

    def module(self) -> AstNode:
        body = []
        while self.tok.type == "NEWLINE":
            self.pos += 1
        if self.tok.type == "EOF":
            raise self.fail("empty program", _STMT_START)
        while self.tok.type != "EOF":
            body.append(self.statement())
        return AstNode("module", children=tuple(body))

    def statement(self) -> AstNode:
        if self.at("def"):
            return self.function_definition()
        if self.at("if"):
            return self.if_statement()
        node = self.return_statement() if self.at("return") else self.expression_statement()
        if self.tok.type == "NEWLINE":
            self.pos += 1
        elif self.tok.type not in ("EOF", "DEDENT"):
            raise self.fail(f"unexpected {self._describe(self.tok)}", {"NEWLINE"})
        return node

    def function_definition(self) -> AstNode:
        kw = self.expect("def", "keyword")
        name = self.identifier()
        params = self.parameters()
        colon = self.expect(":", "delimiter")
        return AstNode("function_definition", children=(kw, name, params, colon, self.block()))

    def parameters(self) -> AstNode:
        parts = [self.expect("(", "delimiter")]
        if not self.at(")"):
            parts.append(self.identifier())
            while self.at(","):
                parts.append(self.leaf("delimiter"))
                parts.append(self.identifier())
        if not self.at(")"):
            raise self.fail(f"unexpected {self._describe(self.tok)}", {",", ")"})
        parts.append(self.leaf("delimiter"))
        return AstNode("parameters", children=tuple(parts))

    def block(self) -> AstNode:
        if self.tok.type != "NEWLINE":
            if self.tok.type == "EOF":
                raise self.fail("unexpected end of input", _STMT_START | {"NEWLINE"})
            return AstNode("block", children=(self.statement(),))
        self.pos += 1
        if self.tok.type != "INDENT":
            raise self.fail("expected an indented block", {"INDENT"})
        self.pos += 1
        body = []
        while self.tok.type not in ("DEDENT", "EOF"):
            body.append(self.statement())
        self.expect_type("DEDENT")
        return AstNode("block", children=tuple(body))

    def if_statement(self) -> AstNode:
        parts = [self.expect("if", "keyword"), self.expression(), self.expect(":", "delimiter"), self.block()]
        if self.at("else"):
            kw = self.leaf("keyword")
            colon = self.expect(":", "delimiter")
            parts.append(AstNode("else_clause", children=(kw, colon, self.block())))
        return AstNode("if_statement", children=tuple(parts))

    def return_statement(self) -> AstNode:
        parts = [self.expect("return", "keyword")]
        if self.tok.type not in ("NEWLINE", "EOF", "DEDENT"):
            parts.append(self.expression())
        return AstNode("return_statement", children=tuple(parts))

    def expression_statement(self) -> AstNode:
        nxt = self.toks[self.pos + 1]
        if self.tok.type == "name" and nxt.type == "op" and nxt.text == "=":
            target = self.identifier()
            eq = self.leaf("operator")
            inner = AstNode("assignment", children=(target, eq, self.expression()))
        else:
            inner = self.expression()
        return AstNode("expression_statement", children=(inner,))

    # expressions

    def expression(self) -> AstNode:
        left = self.arith()
        while self.tok.type == "op" and self.tok.text in _COMPARISONS:
            op = self.leaf("operator")
            left = AstNode("comparison_operator", children=(left, op, self.arith()))
        return left

    def arith(self) -> AstNode:
        left = self.term()
        while self.at("+") or self.at("-"):
            op = self.leaf("operator")
            left = AstNode("binary_operator", children=(left, op, self.term()))
        return left

    def term(self) -> AstNode:
        left = self.unary()
        while self.at("*") or self.at("/") or self.at("%"):
            op = self.leaf("operator")
            left = AstNode("binary_operator", children=(left, op, self.unary()))
        return left

    def unary(self) -> AstNode:
        if self.at("-"):
            op = self.leaf("operator")
            return AstNode("unary_operator", children=(op, self.unary()))
        node = self.atom()
        while self.at("("):
            node = AstNode("call", children=(node, self.argument_list()))
        return node

    def argument_list(self) -> AstNode:
        parts = [self.leaf("delimiter")]
        if not self.at(")"):
            parts.append(self.expression())
            while self.at(","):
                parts.append(self.leaf("delimiter"))
                parts.append(self.expression())
        if not self.at(")"):
            raise self.fail(f"unexpected {self._describe(self.tok)}", {",", ")"})
        parts.append(self.leaf("delimiter"))
        return AstNode("argument_list", children=tuple(parts))

    def atom(self) -> AstNode:
        t = self.tok
        if t.type == "name" and t.text in _CONSTANTS:
            return self.leaf(_CONSTANTS[t.text])
        if t.type == "name" and t.text not in KEYWORDS:
            return self.leaf("identifier")
        if t.type in ("integer", "float", "string"):
            return self.leaf(t.type)
        if self.at("("):
            lp = self.leaf("delimiter")
            inner = self.expression()
            rp = self.expect(")", "delimiter")
            return AstNode("parenthesized_expression", children=(lp, inner, rp))
        raise self.fail(f"unexpected {self._describe(t)}", _EXPR_START)


def parse(source: str) -> AstNode:
    """Parse mini-language source into a ``module`` tree.

    Raises :class:`ParseError` (with line, column and expected-token set) on
    invalid input, including the empty program.
    """
    return _Parser(source).module()


# -- serialisation ----------------------------------------------------------


def serialize(root: AstNode) -> AstSequence:
    """Depth-first pre-order token sequence with parent->child position edges."""
    tokens: list[AstToken] = []
    edges: list[tuple[int, int]] = []
    stack: list[tuple[AstNode, int]] = [(root, -1)]
    while stack:
        node, parent = stack.pop()
        pos = len(tokens)
        if node.is_leaf:
            tokens.append(AstToken(node.text, node.kind, True))
        else:
            tokens.append(AstToken(node.kind, node.kind, False))
        if parent >= 0:
            edges.append((parent, pos))
        for child in reversed(node.children):
            stack.append((child, pos))
    flags = tuple(t.is_leaf and t.kind == "identifier" for t in tokens)
    return AstSequence(tuple(tokens), tuple(edges), flags)


def deserialize(seq: AstSequence) -> AstNode:
    """Rebuild the tree from tokens + edges (inverse of :func:`serialize`)."""
    n = len(seq.tokens)
    if n == 0:
        raise ValueError("empty AST sequence")
    children: list[list[int]] = [[] for _ in range(n)]
    has_parent = [False] * n
    for p, c in seq.edges:
        if not (0 <= p < c < n):
            raise ValueError(f"edge {(p, c)} out of order or out of range for {n} tokens")
        if has_parent[c]:
            raise ValueError(f"position {c} has two parents")
        has_parent[c] = True
        children[p].append(c)
    if any(not has_parent[i] for i in range(1, n)):
        raise ValueError("edges do not form a tree rooted at position 0")
    built: list[AstNode | None] = [None] * n
    for i in range(n - 1, -1, -1):
        tok = seq.tokens[i]
        if tok.is_leaf:
            if children[i]:
                raise ValueError(f"leaf at position {i} has children")
            built[i] = AstNode(tok.kind, text=tok.surface)
        else:
            built[i] = AstNode(tok.kind, children=tuple(built[c] for c in sorted(children[i])))
    return built[0]


def code_token_labels(root: AstNode) -> list[CodeTokenSpan]:
    """One span per source leaf, in source order, flagged when the leaf is an identifier."""
    spans = []
    for leaf in root.leaves():
        start, end = leaf.span if leaf.span is not None else (None, None)
        spans.append(CodeTokenSpan(leaf.text, leaf.kind == "identifier", start, end))
    return spans


# -- JSON ingestion / export ------------------------------------------------


def export_ast(root: AstNode) -> dict:
    if root.is_leaf:
        return {"kind": root.kind, "text": root.text}
    return {"kind": root.kind, "children": [export_ast(c) for c in root.children]}


def dumps_ast(root: AstNode) -> str:
    return json.dumps(export_ast(root), ensure_ascii=False)


def load_ast(obj, kinds: frozenset[str] | None = None, path: str = "$") -> AstNode:
    """Build an :class:`AstNode` from decoded JSON, validating every node."""
    if not isinstance(obj, dict):
        raise AstFormatError(f"{path}: node must be an object")
    if "kinds" in obj and "root" in obj and path == "$":
        declared = obj["kinds"]
        if not isinstance(declared, list) or not all(isinstance(k, str) for k in declared):
            raise AstFormatError("$.kinds: must be a list of strings")
        return load_ast(obj["root"], frozenset(declared), "$.root")
    kind = obj.get("kind")
    if not isinstance(kind, str) or not kind:
        raise AstFormatError(f"{path}: missing or non-string 'kind'")
    if kinds is not None and kind not in kinds:
        raise AstFormatError(f"{path}: kind {kind!r} not in the declared inventory")
    has_text, has_children = "text" in obj, "children" in obj
    if has_text and has_children:
        raise AstFormatError(f"{path}: node has both 'text' and 'children'")
    if has_text:
        if not isinstance(obj["text"], str):
            raise AstFormatError(f"{path}: 'text' must be a string")
        return AstNode(kind, text=obj["text"])
    if not has_children:
        raise AstFormatError(f"{path}: node needs 'text' (leaf) or 'children' (internal)")
    if not isinstance(obj["children"], list):
        raise AstFormatError(f"{path}: 'children' must be an array")
    return AstNode(
        kind,
        children=tuple(load_ast(c, kinds, f"{path}.children[{i}]") for i, c in enumerate(obj["children"])),
    )


def loads_ast(text: str) -> AstNode:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AstFormatError(f"$: malformed JSON ({exc})") from None
    return load_ast(obj)


def ingest_ast(path: str | Path) -> AstNode:
    """Read one tree from a UTF-8 JSON file."""
    return loads_ast(Path(path).read_text(encoding="utf-8"))


def ingest_ast_lines(path: str | Path) -> list[AstNode]:
    """Read one tree per non-blank line of a JSONL file."""
    trees = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            trees.append(loads_ast(line))
        except AstFormatError as exc:
            raise AstFormatError(f"line {i}: {exc}") from None
    return trees


def node_kinds(root: AstNode) -> set[str]:
    """Kinds of all internal nodes in ``root``."""
    out = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if not node.is_leaf:
            out.add(node.kind)
            stack.extend(node.children)
    return out
