import json

import pytest

from programs import random_program
from synmodal.assembly import (
    AST,
    NL,
    PL,
    SEP,
    Budgets,
    ModalTriple,
    build_triple,
    collate,
    load_corpus,
    pack,
    swap_pl_ast,
    unpack,
)
from synmodal.syntax import dumps_ast, parse
from synmodal.tokenizer import CLS_ID, PAD_ID, SEP_ID, train_bpe

T1, T2, T3 = 101, 102, 103


def tiny(nl=(T1,), pl=(T2,), ast=(T3,)):
    return ModalTriple(pl=pl, pl_identifier=(False,) * len(pl), ast=ast, ast_edges=(), ast_nodes=(0,), nl=nl)


@pytest.fixture(scope="module")
def vocab():
    texts = [random_program(s) for s in range(40)] + ["compute the sum of x and y"]
    return train_bpe(texts, 300)


def test_minimal_paired_pack():
    packed = pack(tiny())
    assert packed.ids == (CLS_ID, T1, SEP_ID, T2, SEP_ID, T3, SEP_ID)
    assert packed.segments == ("CLS", NL, SEP, PL, SEP, AST, SEP)


def test_unpaired_pack_omits_nl():
    packed = pack(tiny(nl=None))
    assert packed.ids == (CLS_ID, T2, SEP_ID, T3, SEP_ID)
    assert packed.nl_positions == ()


def test_truncation_drops_out_of_budget_edges():
    triple = ModalTriple(
        pl=(7,), pl_identifier=(True,), ast=(10, 11, 12, 13, 14),
        ast_edges=((0, 1), (0, 4)), ast_nodes=(0, 1, 2, 3, 4),
    )
    packed = pack(triple, Budgets(nl=8, pl=8, ast=4))
    assert len(packed.ast_positions) == 4
    base = packed.ast_positions[0]
    assert packed.edge_pairs == ((base, base + 1),)


def test_swap_orders():
    swapped = pack(swap_pl_ast(tiny()))
    assert swapped.ids == (CLS_ID, T1, SEP_ID, T3, SEP_ID, T2, SEP_ID)
    unpaired = pack(swap_pl_ast(tiny(nl=None)))
    assert unpaired.ids == (CLS_ID, T3, SEP_ID, T2, SEP_ID)
    assert pack(swap_pl_ast(swap_pl_ast(tiny()))).ids == pack(tiny()).ids


def test_swap_moves_edges_and_labels_with_segments(vocab):
    triple = build_triple("result = x + y", vocab, comment="add x and y")
    plain, swapped = pack(triple), pack(swap_pl_ast(triple))
    assert [plain.ids[i] for i in plain.pl_positions] == [swapped.ids[i] for i in swapped.pl_positions]
    assert plain.identifier_labels == swapped.identifier_labels
    shift = swapped.ast_positions[0] - plain.ast_positions[0]
    assert swapped.edge_pairs == tuple((p + shift, c + shift) for p, c in plain.edge_pairs)
    for p, c in swapped.edge_pairs:
        assert swapped.ids[p] == plain.ids[p - shift] and swapped.ids[c] == plain.ids[c - shift]


def test_empty_pl_rejected():
    with pytest.raises(ValueError):
        ModalTriple(pl=(), pl_identifier=(), ast=(1,), ast_edges=(), ast_nodes=(0,))


def test_identifier_flags_propagate_to_subwords(vocab):
    triple = build_triple("long_identifier_name = 12345", vocab)
    spans = ["long_identifier_name", "=", "12345"]
    sizes = [len(vocab.encode(s, kinds=False)) for s in spans]
    assert sizes[0] > 1
    assert triple.pl_identifier == (True,) * sizes[0] + (False,) * (sizes[1] + sizes[2])


def test_ast_edges_attach_to_first_subword(vocab):
    triple = build_triple("long_identifier_name = 1", vocab)
    kinds = {vocab.kind_id(k) for k in ("module", "expression_statement", "assignment")}
    for p, c in triple.ast_edges:
        assert p in triple.ast_nodes and c in triple.ast_nodes
        assert triple.ast[p] in kinds


@pytest.mark.parametrize("seed", range(25))
def test_pack_invariants(vocab, seed):
    budgets = Budgets(nl=5, pl=9, ast=13)
    triple = build_triple(random_program(seed), vocab, comment="return the value")
    packed = pack(triple, budgets)
    assert len(packed) <= budgets.max_length
    assert packed.ids[0] == CLS_ID and packed.ids.count(CLS_ID) == 1
    assert len(packed.identifier_labels) == len(packed.pl_positions)
    ast = set(packed.ast_positions)
    for p, c in packed.edge_pairs:
        assert p in ast and c in ast and p < c
    for i, seg in enumerate(packed.segments[:-1]):
        if seg != SEP and packed.segments[i + 1] == SEP:
            assert packed.ids[i + 1] == SEP_ID
    assert pack(triple, budgets) == packed


def test_unpack_inverts_pack(vocab):
    triple = build_triple("def f(a):\n    return a + 1\n", vocab, comment="increment a")
    assert unpack(pack(triple)) == triple
    assert unpack(pack(swap_pl_ast(triple))) == swap_pl_ast(triple)


def test_collate_pads():
    batch = collate([pack(tiny()), pack(tiny(nl=None))])
    assert batch.ids.shape == (2, 7)
    assert batch.ids[1, 5] == PAD_ID and not batch.attention_mask[1, 5]
    assert batch.attention_mask[0].all()


def test_load_corpus(tmp_path):
    (tmp_path / "t.json").write_text(dumps_ast(parse("y = 2")))
    lines = [
        {"comment": "set x", "code": "x = 1"},
        {"code": "return 3"},
        {"comment": "set y", "ast_file": "t.json", "cluster_id": 4},
    ]
    path = tmp_path / "c.jsonl"
    path.write_text("\n".join(json.dumps(x) for x in lines))
    records = load_corpus(path)
    assert [r.paired for r in records] == [True, False, True]
    assert records[2].tree == parse("y = 2") and records[2].cluster_id == "4"


def test_load_corpus_rejects_records_without_code(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"comment": "nothing"}\n')
    with pytest.raises(ValueError, match="code"):
        load_corpus(path)
