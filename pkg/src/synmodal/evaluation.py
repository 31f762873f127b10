"""Zero-shot retrieval evaluation and a synthetic corpus with a known gold standard.

Embeddings are projection-head outputs, so code search ranks candidates with
the same dot product the contrastive objective trains on.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import objectives as ob
from .assembly import Budgets, ModalTriple, Record, collate, pack, record_triple
from .encoder import EncoderConfig, forward
from .numcore import Tensor
from .tokenizer import Vocab

log = logging.getLogger(__name__)

NL_MODE, CODE_MODE = "nl", "code"


@dataclass
class EmbeddingModel:
    params: Mapping[str, Tensor]
    encoder_config: EncoderConfig
    vocab: Vocab
    budgets: Budgets = Budgets()
    pooling: str = "cls"

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> EmbeddingModel:
        from .training import load_state

        state = load_state(path)
        cfg = state.train_config
        return cls(state.params, state.encoder_config, state.vocab, cfg.budgets, cfg.pooling)


def _packed_view(triple: ModalTriple, mode: str, budgets: Budgets, index: int):
    if mode == NL_MODE:
        if not triple.paired:
            raise ValueError(f"example {index} has no comment; NL-only embedding is undefined")
        return pack(triple, budgets, include_code=False)
    if mode == CODE_MODE:
        return pack(triple, budgets, include_nl=False)
    raise ValueError(f"mode must be {NL_MODE!r} or {CODE_MODE!r}, got {mode!r}")


def embed_corpus(
    examples: Sequence[Record | ModalTriple],
    model: EmbeddingModel,
    mode: str,
    batch_size: int = 32,
) -> np.ndarray:
    """Projection-space vectors ``(n, P)``; ``mode`` selects the comment or the PL+AST segments."""
    triples = [e if isinstance(e, ModalTriple) else record_triple(e, model.vocab) for e in examples]
    packed = [_packed_view(t, mode, model.budgets, i) for i, t in enumerate(triples)]
    out = []
    for start in range(0, len(packed), batch_size):
        batch = collate(packed[start : start + batch_size])
        hidden = forward(model.params, model.encoder_config, batch).hidden
        out.append(ob.project(model.params, ob.pooled(hidden, batch.attention_mask, model.pooling)).data)
    dim = model.params["proj.out.bias"].shape[0]
    return np.concatenate(out, axis=0) if out else np.zeros((0, dim))


# -- metrics ------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalQuery:
    query: np.ndarray
    candidates: np.ndarray
    gold: int | None = None
    query_cluster: str | None = None
    candidate_clusters: tuple[str | None, ...] = ()

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise ValueError("a query needs at least one candidate")
        if self.gold is not None and not 0 <= self.gold < len(self.candidates):
            raise ValueError(f"gold index {self.gold} outside {len(self.candidates)} candidates")


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    query_count: int
    skipped: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.name} value {self.value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def similarities(query: np.ndarray, candidates: np.ndarray, similarity: str = "dot") -> np.ndarray:
    if similarity == "dot":
        return candidates @ query
    if similarity == "cosine":
        norms = np.linalg.norm(candidates, axis=1) * np.linalg.norm(query)
        return (candidates @ query) / np.maximum(norms, 1e-12)
    raise ValueError(f"unknown similarity {similarity!r}")


def ranking(scores: np.ndarray) -> np.ndarray:
    """Candidate indices by descending score; equal scores keep index order."""
    return np.lexsort((np.arange(len(scores)), -scores))


def mrr(queries: Sequence[RetrievalQuery], similarity: str = "dot") -> MetricReport:
    if not queries:
        raise ValueError("mrr needs at least one query")
    total = 0.0
    for q in queries:
        if q.gold is None:
            raise ValueError("code-search queries need a gold index")
        order = ranking(similarities(q.query, q.candidates, similarity))
        rank = int(np.flatnonzero(order == q.gold)[0]) + 1
        total += 1.0 / rank
    return MetricReport("MRR", total / len(queries), len(queries))


def average_precision_at_r(relevant: Sequence[bool]) -> float:
    """AP over the first R retrieved items, R = number of relevant items overall."""
    r = int(sum(relevant))
    hits, acc = 0, 0.0
    for k, rel in enumerate(relevant[:r], start=1):
        if rel:
            hits += 1
            acc += hits / k
    return acc / r


def map_at_r(queries: Sequence[RetrievalQuery], similarity: str = "dot") -> MetricReport:
    """Mean over queries of AP@R; queries from singleton clusters are skipped and counted."""
    values, skipped = [], 0
    for q in queries:
        relevant = np.array([c == q.query_cluster for c in q.candidate_clusters], dtype=bool)
        if q.query_cluster is None or not relevant.any():
            skipped += 1
            continue
        order = ranking(similarities(q.query, q.candidates, similarity))
        values.append(average_precision_at_r(relevant[order].tolist()))
    if skipped:
        log.warning("MAP@R skipped %d queries without other cluster members", skipped)
    value = float(np.mean(values)) if values else 0.0
    return MetricReport("MAP@R", value, len(values), skipped)


def code_search_queries(nl_vectors: np.ndarray, code_vectors: np.ndarray) -> list[RetrievalQuery]:
    """Query i is comment i; its gold is code i among every code vector."""
    if nl_vectors.shape[0] != code_vectors.shape[0]:
        raise ValueError("comments and code must be aligned one-to-one")
    return [RetrievalQuery(nl_vectors[i], code_vectors, gold=i) for i in range(len(nl_vectors))]


def clone_queries(vectors: np.ndarray, clusters: Sequence[str | None]) -> list[RetrievalQuery]:
    """Each example queries all the others; relevance is a shared cluster id."""
    n = len(vectors)
    if n != len(clusters):
        raise ValueError("one cluster id per vector is required")
    out = []
    for i in range(n):
        rest = [j for j in range(n) if j != i]
        out.append(
            RetrievalQuery(
                vectors[i], vectors[rest],
                query_cluster=clusters[i], candidate_clusters=tuple(clusters[j] for j in rest),
            )
        )
    return out


def evaluate_search(records: Sequence[Record], model: EmbeddingModel, similarity: str = "dot") -> MetricReport:
    paired = [r for r in records if r.paired]
    if len(paired) != len(records):
        log.warning("code search ignores %d records without a comment", len(records) - len(paired))
    if not paired:
        raise ValueError("code search needs records with comments")
    nl = embed_corpus(paired, model, NL_MODE)
    code = embed_corpus(paired, model, CODE_MODE)
    return mrr(code_search_queries(nl, code), similarity)


def evaluate_clones(records: Sequence[Record], model: EmbeddingModel, similarity: str = "dot") -> MetricReport:
    if not records:
        raise ValueError("clone retrieval needs records")
    vectors = embed_corpus(records, model, CODE_MODE)
    return map_at_r(clone_queries(vectors, [r.cluster_id for r in records]), similarity)


# -- synthetic corpus -------------------------------------------------------------------

_VARIABLES = (
    "x", "y", "z", "a", "b", "n", "m", "value", "total", "count", "left", "right", "first",
    "second", "items", "data", "num", "amount", "width", "height", "price", "rate", "score", "limit",
)
_FUNCTIONS = ("f", "g", "helper", "compute", "calc", "run", "process", "apply", "evaluate", "solve", "op", "step")

# name -> (comment paraphrases, body with {a} {b} {c} {k} slots)
_TEMPLATES: dict[str, tuple[tuple[str, ...], str]] = {
    "add": (("return the sum of {a} and {b}", "add {a} and {b}", "compute {a} plus {b}"), "return {a} + {b}"),
    "sub": (("subtract {b} from {a}", "return the difference of {a} and {b}", "compute {a} minus {b}"),
            "return {a} - {b}"),
    "mul": (("return the product of {a} and {b}", "multiply {a} with {b}", "compute {a} times {b}"),
            "return {a} * {b}"),
    "div": (("divide {a} by {b}", "return the quotient of {a} and {b}", "compute {a} over {b}"), "return {a} / {b}"),
    "mod": (("return {a} modulo {b}", "compute the remainder of {a} divided by {b}", "take {a} mod {b}"),
            "return {a} % {b}"),
    "square": (("return the square of {a}", "square {a}", "compute {a} squared"), "return {a} * {a}"),
    "neg": (("negate {a}", "return minus {a}", "flip the sign of {a}"), "return -{a}"),
    "max": (("return the larger of {a} and {b}", "maximum of {a} and {b}", "pick the bigger one of {a} and {b}"),
            "if {a} > {b}:\n        return {a}\n    else:\n        return {b}"),
    "min": (("return the smaller of {a} and {b}", "minimum of {a} and {b}", "pick the lesser one of {a} and {b}"),
            "if {a} < {b}:\n        return {a}\n    else:\n        return {b}"),
    "abs": (("return the absolute value of {a}", "magnitude of {a}", "drop the sign of {a}"),
            "if {a} < 0:\n        return -{a}\n    else:\n        return {a}"),
    "len": (("return the length of {a}", "count the elements in {a}", "get the size of {a}"), "return len({a})"),
    "show": (("print {a}", "display {a}", "write {a} to the output"), "print({a})"),
    "addk": (("add {k} to {a}", "increase {a} by {k}", "return {a} plus {k}"), "return {a} + {k}"),
    "mulk": (("scale {a} by {k}", "return {k} times {a}", "multiply {a} by the constant {k}"), "return {a} * {k}"),
    "eq": (("check whether {a} equals {b}", "test if {a} is equal to {b}", "compare {a} and {b} for equality"),
           "return {a} == {b}"),
    "avg": (("return the average of {a} and {b}", "mean of {a} and {b}", "compute the midpoint of {a} and {b}"),
            "return ({a} + {b}) / 2"),
    "positive": (("check whether {a} is positive", "test if {a} is above zero", "is {a} greater than zero"),
                 "return {a} > 0"),
    "store": (("store the sum of {a} and {b} in {c}", "save {a} plus {b} into {c}", "assign {a} + {b} to {c}"),
              "{c} = {a} + {b}\n    return {c}"),
}


def _instantiate(rng: random.Random, name: str, k: int | None) -> dict:
    comments, body = _TEMPLATES[name]
    slots = sorted(set(s for s in ("a", "b", "c") if "{" + s + "}" in body))
    chosen = dict(zip(slots, rng.sample(_VARIABLES, len(slots))))
    fill = dict(chosen, k=k)
    params = ", ".join(chosen[s] for s in slots if s != "c")
    code = f"def {rng.choice(_FUNCTIONS)}({params}):\n    {body.format(**fill)}\n"
    comment = rng.choice(comments).format(**fill)
    cluster = name if k is None else f"{name}-{k}"
    return {"comment": comment, "code": code, "cluster_id": cluster}


def synthetic_corpus(n: int, seed: int, clones: int = 1) -> list[dict]:
    """``n`` records of templated functions with paraphrased comments.

    Consecutive groups of ``clones`` records share a template (and constant)
    but use fresh variable names, function names and comment wording; they
    carry the same ``cluster_id``.
    """
    if n < 1 or clones < 1:
        raise ValueError("n and clones must be positive")
    rng = random.Random(seed)
    names = sorted(_TEMPLATES)
    out: list[dict] = []
    while len(out) < n:
        name = rng.choice(names)
        k = rng.randrange(1, 10) if "{k}" in _TEMPLATES[name][1] else None
        for _ in range(min(clones, n - len(out))):
            out.append(_instantiate(rng, name, k))
    return out
