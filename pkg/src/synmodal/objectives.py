"""Pre-training objectives: label construction and the four losses.

* masked language modelling over the concatenated NL/PL/AST input,
* identifier prediction over every code token,
* AST edge prediction from the sigmoid of a dot product of two node states,
* multi-modal contrastive loss with in-batch and cross-batch negatives.

Every loss takes and returns :class:`~synmodal.numcore.Tensor` objects so it
can sit inside one compute graph with the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .assembly import Budgets, ModalTriple, PackedInput, pack, swap_pl_ast, unpack
from .encoder import EncoderConfig, _param, truncated_normal
from .numcore import Tensor
from .tokenizer import MASK_ID, SPECIAL_TOKENS

MASK_RATIO = 0.15
MASK, RANDOM, KEEP = "MASK", "RANDOM", "KEEP"

NL_VS_PLAST = "NL_vs_PLAST"
TRIPLE_VS_SWAPPED = "TRIPLE_vs_SWAPPED"
PAIR_VS_SWAPPED = "PAIR_vs_SWAPPED"
SCHEMES = (NL_VS_PLAST, TRIPLE_VS_SWAPPED, PAIR_VS_SWAPPED)

Seed = int | Sequence[int] | np.random.SeedSequence


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# -- masked language modelling ---------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]
    replacements: tuple[str, ...]
    written_ids: tuple[int, ...]
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.positions)


def mask_count(n: int, ratio: float = MASK_RATIO) -> int:
    """round-half-up(ratio * n), at least 1 when n > 0."""
    if n <= 0:
        return 0
    exact = Fraction(str(ratio)) * n
    return max(1, math.floor(exact + Fraction(1, 2)))


def plan_mmlm(packed: PackedInput, seed: Seed, vocab_size: int, ratio: float = MASK_RATIO) -> MaskPlan:
    """Select ``mask_count`` NL/PL/AST positions; replace 80% [MASK], 10% random, 10% kept."""
    maskable = np.asarray(packed.maskable_positions)
    if maskable.size == 0:
        raise ValueError("packed input has no maskable positions")
    if vocab_size <= len(SPECIAL_TOKENS):
        raise ValueError("vocab_size leaves no ordinary tokens for random replacement")
    rng = _rng(seed)
    chosen = rng.choice(maskable, size=mask_count(maskable.size, ratio), replace=False)
    draws = rng.random(chosen.size)
    randoms = rng.integers(len(SPECIAL_TOKENS), vocab_size, size=chosen.size)
    order = np.argsort(chosen, kind="stable")
    positions, replacements, written, labels = [], [], [], []
    for k in order:
        pos = int(chosen[k])
        original = packed.ids[pos]
        if draws[k] < 0.8:
            kind, wid = MASK, MASK_ID
        elif draws[k] < 0.9:
            kind, wid = RANDOM, int(randoms[k])
        else:
            kind, wid = KEEP, original
        positions.append(pos)
        replacements.append(kind)
        written.append(wid)
        labels.append(original)
    return MaskPlan(tuple(positions), tuple(replacements), tuple(written), tuple(labels))


def apply_mask(packed: PackedInput, plan: MaskPlan) -> PackedInput:
    ids = list(packed.ids)
    for pos, wid in zip(plan.positions, plan.written_ids):
        ids[pos] = wid
    return packed.with_ids(ids)


def _reduce(terms: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return terms.mean()
    if reduction == "sum":
        return terms.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_mmlm(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """Cross-entropy of the true ids under softmax(logits); one logit row per masked position."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise nc.ShapeError(f"loss_mmlm: logits {logits.shape} do not match {labels.size} labels")
    picked = nc.log_softmax(logits)[np.arange(labels.size), labels]
    return -_reduce(picked, reduction)


# -- identifier prediction -------------------------------------------------


def loss_ip(probs: Tensor, labels: Sequence[bool], reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of identifier probabilities, one per code token."""
    y = np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise nc.ShapeError(f"loss_ip: probabilities {probs.shape} vs labels {y.shape}")
    if np.any((probs.data <= 0.0) | (probs.data >= 1.0)):
        raise nc.DomainError("loss_ip: probabilities must lie strictly inside (0, 1)")
    terms = Tensor(y) * nc.log(probs) + Tensor(1.0 - y) * nc.log(1.0 - probs)
    return -_reduce(terms, reduction)


def bce_with_logits(logits: Tensor, labels: Sequence[bool], reduction: str = "mean") -> Tensor:
    """Same value as binary cross-entropy on sigmoid(logits), computed stably."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise nc.ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {y.shape}")
    terms = Tensor(y) * nc.log_sigmoid(logits) + Tensor(1.0 - y) * nc.log_sigmoid(-logits)
    return -_reduce(terms, reduction)


# -- AST edge prediction ---------------------------------------------------


@dataclass(frozen=True)
class TepPlan:
    pairs: tuple[tuple[int, int], ...]
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def shifted(self, offset: int) -> TepPlan:
        return TepPlan(tuple((i + offset, j + offset) for i, j in self.pairs), self.labels)

    @staticmethod
    def concat(plans: Sequence[TepPlan]) -> TepPlan:
        return TepPlan(
            tuple(p for plan in plans for p in plan.pairs),
            tuple(y for plan in plans for y in plan.labels),
        )


def plan_tep(packed: PackedInput, seed: Seed, negatives_per_positive: int = 1, full_pairs: bool = False) -> TepPlan:
    """All retained AST edges as positives plus sampled non-edge node pairs as negatives.

    With ``full_pairs`` every node pair ``i < j`` is labelled instead. An input
    without edges yields an empty plan.
    """
    edges = sorted(packed.edge_pairs)
    if not edges:
        return TepPlan((), ())
    nodes = packed.ast_node_positions
    edge_set = set(edges)
    candidates = [(a, b) for ia, a in enumerate(nodes) for b in nodes[ia + 1 :]]
    if full_pairs:
        return TepPlan(tuple(candidates), tuple(int(p in edge_set) for p in candidates))
    non_edges = [p for p in candidates if p not in edge_set]
    k = min(negatives_per_positive * len(edges), len(non_edges))
    picked = _rng(seed).choice(len(non_edges), size=k, replace=False) if k else []
    negatives = [non_edges[i] for i in sorted(picked)]
    return TepPlan(tuple(edges) + tuple(negatives), (1,) * len(edges) + (0,) * len(negatives))


def edge_logits(reps: Tensor, plan: TepPlan) -> Tensor:
    """Dot product of the two node representations for every planned pair."""
    idx = np.asarray(plan.pairs, dtype=np.int64).reshape(-1, 2)
    return (reps[idx[:, 0]] * reps[idx[:, 1]]).sum(axis=-1)


def loss_tep(reps: Tensor, plan: TepPlan, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of sigmoid(rep_i . rep_j) against the edge labels."""
    if not len(plan):
        raise ValueError("loss_tep needs a non-empty plan")
    return bce_with_logits(edge_logits(reps, plan), plan.labels, reduction)


# -- heads ------------------------------------------------------------------


def init_head_params(config: EncoderConfig, projection_dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """MLM transform + tied decoder bias, identifier classifier, projection MLP."""
    h, std = config.hidden_size, config.init_std
    # Fan-in scaling for the freshly added projection MLP; at 0.02 its outputs start
    # almost identical and the contrastive gradient into the encoder is negligible.
    proj_std = 1.0 / math.sqrt(3 * h)
    p = {
        "mlm.dense.weight": truncated_normal(rng, (h, h), std),
        "mlm.dense.bias": np.zeros(h),
        "mlm.ln.gamma": np.ones(h),
        "mlm.ln.beta": np.zeros(h),
        "mlm.decoder.bias": np.zeros(config.vocab_size),
        "ip.weight": truncated_normal(rng, (h, 1), std),
        "ip.bias": np.zeros(1),
        "proj.dense.weight": truncated_normal(rng, (h, h), proj_std),
        "proj.dense.bias": np.zeros(h),
        "proj.out.weight": truncated_normal(rng, (h, projection_dim), proj_std),
        "proj.out.bias": np.zeros(projection_dim),
    }
    return {n: _param(v, n) for n, v in p.items()}


def mlm_logits(params: Mapping[str, Tensor], rows: Tensor, eps: float = 1e-12) -> Tensor:
    """Vocabulary logits for hidden rows ``(M, H)``; the decoder is tied to the token embeddings."""
    x = nc.gelu(rows @ params["mlm.dense.weight"] + params["mlm.dense.bias"])
    x = nc.layer_norm(x, params["mlm.ln.gamma"], params["mlm.ln.beta"], eps)
    return x @ params["embeddings.token"].transpose() + params["mlm.decoder.bias"]


def ip_logits(params: Mapping[str, Tensor], rows: Tensor) -> Tensor:
    return (rows @ params["ip.weight"] + params["ip.bias"]).reshape(rows.shape[0])


def project(params: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """Two-layer projection head: tanh between the affine maps."""
    hidden = nc.tanh(h @ params["proj.dense.weight"] + params["proj.dense.bias"])
    return hidden @ params["proj.out.weight"] + params["proj.out.bias"]


# -- contrastive --------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    anchors: list[PackedInput]
    positives: list[PackedInput]
    schemes: list[str]

    @property
    def size(self) -> int:
        return len(self.anchors)

    def negatives(self, i: int, side: str = "anchor") -> list[tuple[str, int]]:
        """Negatives of example ``i``: every other anchor and every other positive."""
        n = self.size
        if not 0 <= i < n:
            raise IndexError(i)
        return [("anchor", j) for j in range(n) if j != i] + [("positive", j) for j in range(n) if j != i]


def scheme_for(triple: ModalTriple, epoch: int, mix: str = "alternate") -> str:
    """Paired data alternates between the two paired schemes by epoch parity."""
    if not triple.paired:
        return PAIR_VS_SWAPPED
    if mix == "alternate":
        return NL_VS_PLAST if epoch % 2 == 0 else TRIPLE_VS_SWAPPED
    if mix == "nl_vs_plast":
        return NL_VS_PLAST
    if mix == "swap":
        return TRIPLE_VS_SWAPPED
    raise ValueError(f"unknown scheme mix {mix!r}")


def _masked_pack(triple: ModalTriple, budgets: Budgets, seed: Seed, vocab_size: int) -> PackedInput:
    packed = pack(triple, budgets)
    return apply_mask(packed, plan_mmlm(packed, seed, vocab_size))


def build_contrastive_batch(
    triples: Sequence[ModalTriple],
    schemes: Sequence[str] | str,
    seed: int | Sequence[int],
    vocab_size: int,
    budgets: Budgets = Budgets(),
) -> ContrastiveBatch:
    """Anchor/positive inputs for each example.

    ``NL_vs_PLAST`` pairs the comment alone with the unmasked code segments.
    The swap schemes mask the example twice with independent seeds and swap
    PL and AST in the second copy.
    """
    n = len(triples)
    if n < 2:
        raise ValueError(f"contrastive batch needs at least 2 examples, got {n}")
    if isinstance(schemes, str):
        schemes = [schemes] * n
    if len(schemes) != n:
        raise ValueError("one scheme per example is required")
    base = (seed,) if isinstance(seed, int) else tuple(seed)
    anchors, positives = [], []
    for i, (triple, scheme) in enumerate(zip(triples, schemes)):
        if scheme == NL_VS_PLAST:
            if not triple.paired:
                raise ValueError(f"example {i}: {scheme} needs a comment")
            anchors.append(pack(triple, budgets, include_code=False))
            positives.append(pack(triple, budgets, include_nl=False))
        elif scheme in (TRIPLE_VS_SWAPPED, PAIR_VS_SWAPPED):
            if (scheme == TRIPLE_VS_SWAPPED) != triple.paired:
                raise ValueError(f"example {i}: {scheme} does not fit a {'paired' if triple.paired else 'unpaired'} example")
            anchors.append(_masked_pack(triple, budgets, (*base, i, 0), vocab_size))
            second = _masked_pack(triple, budgets, (*base, i, 1), vocab_size)
            positives.append(pack(swap_pl_ast(unpack(second)), budgets))
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return ContrastiveBatch(anchors, positives, list(schemes))


def loss_mcl(v: Tensor, v_pos: Tensor) -> Tensor:
    """Sum over i of l(x_i, x_i+) + l(x_i+, x_i), raw dot-product similarity.

    For each of the 2N inputs the candidates are its partner (the positive)
    and the 2N-2 inputs that belong to other examples.
    """
    if v.ndim != 2 or v.shape != v_pos.shape:
        raise nc.ShapeError(f"loss_mcl: anchor {v.shape} and positive {v_pos.shape} must match (N, P)")
    n = v.shape[0]
    if n < 2:
        raise ValueError("loss_mcl needs N >= 2")
    z = nc.concat([v, v_pos], axis=0)
    sims = z @ z.transpose()
    m = 2 * n
    cols = np.array([[c for c in range(m) if c != r] for r in range(m)])
    rows = np.repeat(np.arange(m)[:, None], m - 1, axis=1)
    logits = sims[rows, cols]
    partner = (np.arange(m) + n) % m
    target = np.where(partner < np.arange(m), partner, partner - 1)
    return -nc.log_softmax(logits)[np.arange(m), target].sum()


def pooled(hidden: Tensor, mask: np.ndarray, pooling: str = "cls") -> Tensor:
    """Sentence vector per row: the [CLS] state, or the mean over non-PAD positions."""
    if pooling == "cls":
        return hidden[:, 0, :]
    if pooling == "mean":
        weights = mask.astype(np.float64)
        weights = weights / weights.sum(axis=1, keepdims=True)
        return (hidden * Tensor(weights[:, :, None])).sum(axis=1)
    raise ValueError(f"unknown pooling {pooling!r}")
