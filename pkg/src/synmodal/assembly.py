"""Model-input construction: ``[CLS] nl [SEP] pl [SEP] ast [SEP]``.

A :class:`ModalTriple` holds token ids for the comment (optional), the code
tokens with identifier flags, and the serialised AST with its edges. Edges
are stored over AST sub-word positions: each AST node contributes one or more
sub-words and an edge attaches to the first sub-word of each endpoint node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .syntax import AstNode, code_token_labels, ingest_ast, parse, serialize
from .tokenizer import CLS_ID, PAD_ID, SEP_ID, Vocab, encode

CLS, NL, SEP, PL, AST, PAD = "CLS", "NL", "SEP", "PL", "AST", "PAD"


@dataclass(frozen=True)
class Budgets:
    """Per-segment token budgets, excluding [CLS]/[SEP]."""

    nl: int = 32
    pl: int = 48
    ast: int = 64

    def __post_init__(self):
        if min(self.nl, self.pl, self.ast) <= 0:
            raise ValueError(f"segment budgets must be positive, got {self}")

    @property
    def max_length(self) -> int:
        return self.nl + self.pl + self.ast + 4


FULL_BUDGETS = Budgets(96, 160, 256)


@dataclass(frozen=True)
class ModalTriple:
    pl: tuple[int, ...]
    pl_identifier: tuple[bool, ...]
    ast: tuple[int, ...]
    ast_edges: tuple[tuple[int, int], ...]
    ast_nodes: tuple[int, ...]
    nl: tuple[int, ...] | None = None
    swapped: bool = False

    def __post_init__(self):
        if not self.pl:
            raise ValueError("PL segment is empty")
        if not self.ast:
            raise ValueError("AST segment is empty")
        if self.nl is not None and not self.nl:
            raise ValueError("NL segment must be None (unpaired) or non-empty")
        if len(self.pl_identifier) != len(self.pl):
            raise ValueError("one identifier flag per PL token is required")
        nodes = set(self.ast_nodes)
        for p, c in self.ast_edges:
            if not (0 <= p < c < len(self.ast)) or p not in nodes or c not in nodes:
                raise ValueError(f"AST edge {(p, c)} is out of range or not between node starts")

    @property
    def paired(self) -> bool:
        return self.nl is not None


@dataclass(frozen=True)
class PackedInput:
    ids: tuple[int, ...]
    segments: tuple[str, ...]
    nl_positions: tuple[int, ...]
    pl_positions: tuple[int, ...]
    ast_positions: tuple[int, ...]
    edge_pairs: tuple[tuple[int, int], ...]
    ast_node_positions: tuple[int, ...]
    identifier_labels: tuple[bool, ...]
    swapped: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def maskable_positions(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.segments) if s in (NL, PL, AST))

    def with_ids(self, ids: Sequence[int]) -> PackedInput:
        if len(ids) != len(self.ids):
            raise ValueError("replacement ids must keep the packed length")
        return replace(self, ids=tuple(int(i) for i in ids))


def _truncate_ast(triple: ModalTriple, budget: int):
    ast = triple.ast[:budget]
    edges = tuple((p, c) for p, c in triple.ast_edges if c < budget)
    nodes = tuple(n for n in triple.ast_nodes if n < budget)
    return ast, edges, nodes


def pack(triple: ModalTriple, budgets: Budgets = Budgets(), *,
         include_nl: bool = True, include_code: bool = True) -> PackedInput:
    """Concatenate the segments, truncating each to its budget (tail dropped).

    Segment order is NL, PL, AST, or NL, AST, PL for a swapped triple.
    ``include_nl=False`` packs only the code segments; ``include_code=False``
    packs only the comment.
    """
    ids: list[int] = [CLS_ID]
    segs: list[str] = [CLS]
    nl_pos: list[int] = []
    pl_pos: list[int] = []
    ast_pos: list[int] = []
    edges: tuple[tuple[int, int], ...] = ()
    nodes: tuple[int, ...] = ()
    labels: tuple[bool, ...] = ()

    def emit(tokens, tag, sink):
        for t in tokens:
            sink.append(len(ids))
            ids.append(int(t))
            segs.append(tag)
        ids.append(SEP_ID)
        segs.append(SEP)

    if include_nl and triple.nl is not None:
        emit(triple.nl[: budgets.nl], NL, nl_pos)
    if include_code:
        pl = triple.pl[: budgets.pl]
        labels = tuple(triple.pl_identifier[: budgets.pl])
        ast, kept_edges, kept_nodes = _truncate_ast(triple, budgets.ast)
        if not pl:
            raise ValueError("PL segment is empty after truncation")
        order = [(ast, AST, ast_pos), (pl, PL, pl_pos)] if triple.swapped else [(pl, PL, pl_pos), (ast, AST, ast_pos)]
        for tokens, tag, sink in order:
            emit(tokens, tag, sink)
        base = ast_pos[0]
        edges = tuple((base + p, base + c) for p, c in kept_edges)
        nodes = tuple(base + n for n in kept_nodes)
    if len(ids) == 1:
        raise ValueError("nothing to pack: the triple has no NL segment")
    return PackedInput(
        ids=tuple(ids),
        segments=tuple(segs),
        nl_positions=tuple(nl_pos),
        pl_positions=tuple(pl_pos),
        ast_positions=tuple(ast_pos),
        edge_pairs=edges,
        ast_node_positions=nodes,
        identifier_labels=labels,
        swapped=triple.swapped,
    )


def unpack(packed: PackedInput) -> ModalTriple:
    """Recover the (truncated) triple from a packed input, keeping its current ids."""
    if not packed.ast_positions:
        raise ValueError("packed input carries no code segments")
    base = packed.ast_positions[0]
    ids = packed.ids
    return ModalTriple(
        pl=tuple(ids[i] for i in packed.pl_positions),
        pl_identifier=packed.identifier_labels,
        ast=tuple(ids[i] for i in packed.ast_positions),
        ast_edges=tuple((p - base, c - base) for p, c in packed.edge_pairs),
        ast_nodes=tuple(n - base for n in packed.ast_node_positions),
        nl=tuple(ids[i] for i in packed.nl_positions) if packed.nl_positions else None,
        swapped=packed.swapped,
    )


def swap_pl_ast(triple: ModalTriple) -> ModalTriple:
    """Same content with the PL and AST segments in the opposite packed order."""
    return replace(triple, swapped=not triple.swapped)


def build_triple(code: str | AstNode, vocab: Vocab, comment: str | None = None) -> ModalTriple:
    """Tokenise one example.

    ``code`` is mini-language source or an already-built tree. Every sub-word
    of an identifier inherits its flag; internal AST nodes become their
    atomic kind token and leaves are BPE-split like code.
    """
    tree = parse(code) if isinstance(code, str) else code
    pl: list[int] = []
    flags: list[bool] = []
    for span in code_token_labels(tree):
        pieces = encode(span.surface, vocab, kinds=False) or [vocab.unk_id]
        pl.extend(pieces)
        flags.extend([span.is_identifier] * len(pieces))
    seq = serialize(tree)
    ast: list[int] = []
    starts: list[int] = []
    for tok in seq.tokens:
        starts.append(len(ast))
        if tok.is_leaf:
            ast.extend(encode(tok.surface, vocab, kinds=False) or [vocab.unk_id])
        else:
            ast.append(vocab.kind_id(tok.kind))
    edges = tuple((starts[p], starts[c]) for p, c in seq.edges)
    nl = None
    if comment is not None and comment.strip():
        nl = tuple(encode(comment, vocab, kinds=False)) or (vocab.unk_id,)
    return ModalTriple(tuple(pl), tuple(flags), tuple(ast), edges, tuple(starts), nl)


@dataclass
class Batch:
    """Right-padded batch of packed inputs."""

    ids: np.ndarray
    attention_mask: np.ndarray
    items: list[PackedInput] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def collate(items: Sequence[PackedInput], pad_id: int = PAD_ID) -> Batch:
    if not items:
        raise ValueError("cannot collate an empty batch")
    length = max(len(p) for p in items)
    ids = np.full((len(items), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(items), length), dtype=bool)
    for row, p in enumerate(items):
        ids[row, : len(p)] = p.ids
        mask[row, : len(p)] = True
    return Batch(ids, mask, list(items))


# -- corpus files -----------------------------------------------------------


@dataclass(frozen=True)
class Record:
    code: str | None
    tree: AstNode
    comment: str | None = None
    cluster_id: str | None = None

    @property
    def paired(self) -> bool:
        return self.comment is not None and bool(self.comment.strip())

    def surface_text(self) -> list[str]:
        """Strings the tokenizer should see for this record."""
        texts = [self.comment] if self.paired else []
        texts.append(self.code if self.code is not None else " ".join(leaf.text for leaf in self.tree.leaves()))
        return texts


def load_corpus(path: str | Path) -> list[Record]:
    """Read a corpus JSONL: ``comment`` (optional), ``code`` or ``ast_file``, ``cluster_id`` (optional)."""
    path = Path(path)
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{line_no}: malformed JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise ValueError(f"{path}:{line_no}: each line must be an object")
        comment = obj.get("comment")
        cluster = obj.get("cluster_id")
        if "code" in obj:
            tree = parse(obj["code"])
            code = obj["code"]
        elif "ast_file" in obj:
            tree = ingest_ast(path.parent / obj["ast_file"])
            code = None
        else:
            raise ValueError(f"{path}:{line_no}: record needs 'code' or 'ast_file'")
        records.append(Record(code, tree, comment, None if cluster is None else str(cluster)))
    if not records:
        raise ValueError(f"{path}: corpus is empty")
    return records


def write_corpus(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def record_triple(record: Record, vocab: Vocab) -> ModalTriple:
    return build_triple(record.tree, vocab, record.comment if record.paired else None)
