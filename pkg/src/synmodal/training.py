"""Pre-training loop.

Each step draws one homogeneous batch (all paired or all unpaired), builds
the enabled objectives on it, sums them with the L2 term, backpropagates and
takes one Adam step. All randomness is derived from ``(seed, step)`` so a run
that is stopped and resumed replays the same stream as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from . import objectives as ob
from .assembly import Budgets, ModalTriple, PackedInput, Record, collate, pack, record_triple
from .encoder import (
    CheckpointError,
    EncoderConfig,
    check_compatible,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numcore import Tensor
from .tokenizer import Vocab

log = logging.getLogger(__name__)

OBJECTIVES = ("mmlm", "ip", "tep", "mcl")

# Streams drawn from SeedSequence([seed, purpose, ...]).
_INIT, _SCHEDULE, _STEP = 0, 1, 2
_MASK, _TEP, _MCL, _DROPOUT = range(4)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 200
    learning_rate: float = 1e-4
    l2_lambda: float = 1e-6
    seed: int = 0
    mmlm: bool = True
    ip: bool = True
    tep: bool = True
    mcl: bool = True
    scheme_mix: str = "alternate"
    checkpoint_every: int = 0
    nl_budget: int = 32
    pl_budget: int = 48
    ast_budget: int = 64
    tep_negatives: int = 1
    tep_full_pairs: bool = False
    reduction: str = "mean"
    pooling: str = "cls"
    projection_dim: int = 128
    grad_clip: float = 1.0
    warmup_steps: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or (self.mcl and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when the contrastive objective is enabled (>= 1 otherwise)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.steps < 0 or self.checkpoint_every < 0 or self.warmup_steps < 0:
            raise ValueError("steps, checkpoint_every and warmup_steps must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.active:
            raise ValueError("at least one objective must be enabled")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if self.scheme_mix not in ("alternate", "nl_vs_plast", "swap"):
            raise ValueError(f"unknown scheme_mix {self.scheme_mix!r}")
        if self.tep_negatives < 1:
            raise ValueError("tep_negatives must be at least 1")
        Budgets(self.nl_budget, self.pl_budget, self.ast_budget)

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(name for name in OBJECTIVES if getattr(self, name))

    @property
    def budgets(self) -> Budgets:
        return Budgets(self.nl_budget, self.pl_budget, self.ast_budget)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    step: int
    mmlm: float
    ip: float
    tep: float
    mcl: float
    l2: float
    total: float
    active: tuple[str, ...]
    grad_norm: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["active"] = list(self.active)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> LossReport:
        d = json.loads(line)
        d["active"] = tuple(d["active"])
        return cls(**d)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: nc.AdamState
    step: int
    encoder_config: EncoderConfig
    train_config: TrainConfig
    vocab: Vocab
    reports: list[LossReport] = field(default_factory=list)


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def init_state(vocab: Vocab, train_config: TrainConfig, encoder_config: EncoderConfig) -> TrainState:
    if encoder_config.vocab_size != len(vocab):
        raise ValueError(f"encoder vocab_size {encoder_config.vocab_size} != vocabulary size {len(vocab)}")
    if encoder_config.max_positions < train_config.budgets.max_length:
        raise ValueError(
            f"max_positions {encoder_config.max_positions} is shorter than the packed length "
            f"{train_config.budgets.max_length} allowed by the segment budgets"
        )
    rng = np.random.default_rng(_seed(train_config.seed, _INIT))
    params = init_params(encoder_config, rng)
    params.update(ob.init_head_params(encoder_config, train_config.projection_dim, rng))
    adam = nc.AdamState(
        lr=train_config.learning_rate,
        beta1=train_config.adam_beta1,
        beta2=train_config.adam_beta2,
        eps=train_config.adam_eps,
    )
    return TrainState(params, adam, 0, encoder_config, train_config, vocab)


# -- batch schedule -----------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Deterministic epoch-by-epoch batch order over paired and unpaired pools.

    Every epoch reshuffles each pool, cuts it into batches (the last one is
    filled by wrapping to the start of the shuffled pool), and interleaves
    paired and unpaired batches in proportion to their counts.
    """

    paired: tuple[int, ...]
    unpaired: tuple[int, ...]
    batch_size: int
    seed: int

    def _pool_batches(self, pool: tuple[int, ...], rng: np.random.Generator) -> list[list[int]]:
        if not pool:
            return []
        order = [pool[i] for i in rng.permutation(len(pool))]
        size = min(self.batch_size, len(order))
        n_batches = math.ceil(len(order) / size)
        cycled = order * 2
        return [cycled[k * size : (k + 1) * size] for k in range(n_batches)]

    @property
    def batches_per_epoch(self) -> int:
        def count(pool):
            return math.ceil(len(pool) / min(self.batch_size, len(pool))) if pool else 0

        return count(self.paired) + count(self.unpaired)

    def epoch(self, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng(_seed(self.seed, _SCHEDULE, epoch))
        paired = self._pool_batches(self.paired, rng)
        unpaired = self._pool_batches(self.unpaired, rng)
        keyed = [((k + 0.5) / len(paired), 0, b) for k, b in enumerate(paired)]
        keyed += [((k + 0.5) / len(unpaired), 1, b) for k, b in enumerate(unpaired)]
        keyed.sort(key=lambda item: (item[0], item[1]))
        return [b for _, _, b in keyed]

    def batch(self, step: int) -> tuple[int, list[int]]:
        """(epoch, example indices) of the batch used at ``step``."""
        per_epoch = self.batches_per_epoch
        epoch, k = divmod(step, per_epoch)
        return epoch, self.epoch(epoch)[k]


def make_schedule(triples: Sequence[ModalTriple], config: TrainConfig) -> Schedule:
    paired = tuple(i for i, t in enumerate(triples) if t.paired)
    unpaired = tuple(i for i, t in enumerate(triples) if not t.paired)
    if config.mcl:
        for name, pool in (("paired", paired), ("unpaired", unpaired)):
            if len(pool) == 1:
                log.warning("dropping the single %s example: a contrastive batch needs two", name)
        paired = paired if len(paired) != 1 else ()
        unpaired = unpaired if len(unpaired) != 1 else ()
    if not paired and not unpaired:
        raise ValueError("corpus has no usable examples")
    return Schedule(paired, unpaired, config.batch_size, config.seed)


# -- losses -------------------------------------------------------------------------


@dataclass
class BatchPlan:
    """Everything sampled for one step before any forward pass."""

    epoch: int
    packed: list[PackedInput]
    mask_plans: list[ob.MaskPlan]
    tep_plans: list[ob.TepPlan]
    contrastive: ob.ContrastiveBatch | None


def prepare_batch(
    triples: Sequence[ModalTriple],
    config: TrainConfig,
    vocab_size: int,
    epoch: int,
    step_seed: Sequence[int],
) -> BatchPlan:
    """Pack, mask and sample the TEP pairs and contrastive views for one batch.

    Inputs for MMLM, IP and TEP are the masked packs when MMLM is enabled and
    the plain packs otherwise.
    """
    budgets = config.budgets
    step_seed = tuple(step_seed)
    packed, mask_plans, tep_plans, contrastive = [], [], [], None
    if config.mmlm or config.ip or config.tep:
        packed = [pack(t, budgets) for t in triples]
        if config.mmlm:
            mask_plans = [ob.plan_mmlm(p, _seed(*step_seed, _MASK, i), vocab_size) for i, p in enumerate(packed)]
            packed = [ob.apply_mask(p, plan) for p, plan in zip(packed, mask_plans)]
        if config.tep:
            tep_plans = [
                ob.plan_tep(p, _seed(*step_seed, _TEP, i), config.tep_negatives, config.tep_full_pairs)
                for i, p in enumerate(packed)
            ]
    if config.mcl:
        schemes = [ob.scheme_for(t, epoch, config.scheme_mix) for t in triples]
        contrastive = ob.build_contrastive_batch(triples, schemes, (*step_seed, _MCL), vocab_size, budgets)
    return BatchPlan(epoch, packed, mask_plans, tep_plans, contrastive)


def compute_losses(
    params: Mapping[str, Tensor],
    encoder_config: EncoderConfig,
    config: TrainConfig,
    triples: Sequence[ModalTriple],
    epoch: int,
    step_seed: Sequence[int],
    *,
    dropout: bool = True,
) -> tuple[dict[str, Tensor], Tensor, Tensor]:
    """Per-objective losses, the L2 term and the total for one batch.

    MMLM, IP and TEP share a single forward pass over the masked batch; the
    contrastive objective runs two more (anchors, positives). Disabled
    objectives are not computed at all.
    """
    step_seed = tuple(step_seed)
    plan = prepare_batch(triples, config, encoder_config.vocab_size, epoch, step_seed)

    def rng(purpose: int) -> np.random.Generator | None:
        return np.random.default_rng(_seed(*step_seed, _DROPOUT, purpose)) if dropout else None

    losses: dict[str, Tensor] = {}
    if plan.packed:
        batch = collate(plan.packed)
        hidden = forward(params, encoder_config, batch, rng=rng(0)).hidden
        bsz, length, width = hidden.shape
        flat = hidden.reshape(bsz * length, width)
        if config.mmlm:
            rows = np.concatenate([np.asarray(pl.positions) + b * length for b, pl in enumerate(plan.mask_plans)])
            labels = np.concatenate([pl.labels for pl in plan.mask_plans])
            logits = ob.mlm_logits(params, flat[rows], encoder_config.layer_norm_eps)
            losses["mmlm"] = ob.loss_mmlm(logits, labels, config.reduction)
        if config.ip:
            rows = np.concatenate([np.asarray(p.pl_positions) + b * length for b, p in enumerate(plan.packed)])
            flags = np.concatenate([p.identifier_labels for p in plan.packed])
            losses["ip"] = ob.bce_with_logits(ob.ip_logits(params, flat[rows]), flags, config.reduction)
        if config.tep:
            merged = ob.TepPlan.concat([tp.shifted(b * length) for b, tp in enumerate(plan.tep_plans)])
            losses["tep"] = ob.loss_tep(flat, merged, config.reduction) if len(merged) else Tensor(0.0)
    if plan.contrastive is not None:
        anchors, positives = collate(plan.contrastive.anchors), collate(plan.contrastive.positives)
        h_a = forward(params, encoder_config, anchors, rng=rng(1)).hidden
        h_p = forward(params, encoder_config, positives, rng=rng(2)).hidden
        v = ob.project(params, ob.pooled(h_a, anchors.attention_mask, config.pooling))
        v_pos = ob.project(params, ob.pooled(h_p, positives.attention_mask, config.pooling))
        losses["mcl"] = ob.loss_mcl(v, v_pos)

    l2 = config.l2_lambda * nc.l2_penalty(params)
    total = l2
    for name in OBJECTIVES:
        if name in losses:
            total = total + losses[name]
    return losses, l2, total


def step_seed(config: TrainConfig, step: int) -> tuple[int, int, int]:
    return (config.seed, _STEP, step)


def _learning_rate(config: TrainConfig, step: int) -> float:
    if config.warmup_steps:
        return config.learning_rate * min(1.0, (step + 1) / config.warmup_steps)
    return config.learning_rate


def train_step(state: TrainState, triples: Sequence[ModalTriple], schedule: Schedule) -> LossReport:
    config = state.train_config
    epoch, indices = schedule.batch(state.step)
    batch = [triples[i] for i in indices]
    losses, l2, total = compute_losses(
        state.params, state.encoder_config, config, batch, epoch, step_seed(config, state.step)
    )
    nc.zero_grad(state.params)
    total.backward()
    norm = nc.clip_grad_norm(state.params, config.grad_clip) if config.grad_clip > 0 else 0.0
    nc.adam_step(state.params, state.adam, _learning_rate(config, state.step))
    report = LossReport(
        step=state.step,
        l2=l2.item(),
        total=total.item(),
        active=config.active,
        grad_norm=norm,
        **{name: (losses[name].item() if name in losses else 0.0) for name in OBJECTIVES},
    )
    state.step += 1
    state.reports.append(report)
    return report


# -- checkpoints ---------------------------------------------------------------------


def save_state(state: TrainState, path: str | Path) -> None:
    save_checkpoint(
        path,
        state.params,
        state.encoder_config,
        step=state.step,
        train_config=state.train_config.to_dict(),
        vocab=state.vocab.to_text(),
        adam_step=state.adam.step,
        adam_m=state.adam.m,
        adam_v=state.adam.v,
    )


def load_state(path: str | Path, encoder_config: EncoderConfig | None = None,
               train_config: TrainConfig | None = None) -> TrainState:
    """Restore parameters, optimizer moments and the step counter.

    If ``encoder_config`` is given the checkpoint must match it exactly;
    ``train_config`` replaces the stored one (for example to raise ``steps``).
    """
    doc = load_checkpoint(path)
    stored = doc["encoder_config"]
    for key in ("vocab", "train_config", "step"):
        if key not in doc:
            raise CheckpointError(f"{path} is not a training checkpoint (missing {key!r})")
    config = train_config or TrainConfig.from_dict(doc["train_config"])
    if encoder_config is not None:
        rng = np.random.default_rng(0)
        expected = init_params(encoder_config, rng)
        expected.update(ob.init_head_params(encoder_config, config.projection_dim, rng))
        check_compatible(doc["params"], expected)
        if encoder_config != stored:
            raise CheckpointError(f"checkpoint encoder config {stored} differs from requested {encoder_config}")
    adam = nc.AdamState(
        lr=config.learning_rate, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        step=int(doc.get("adam_step", 0)), m=doc.get("adam_m", {}), v=doc.get("adam_v", {}),
    )
    return TrainState(doc["params"], adam, int(doc["step"]), stored, config, Vocab.from_text(doc["vocab"]))


# -- driver -------------------------------------------------------------------------


def corpus_triples(records: Sequence[Record], vocab: Vocab) -> list[ModalTriple]:
    if not records:
        raise ValueError("training corpus is empty")
    return [record_triple(r, vocab) for r in records]


def run(
    state: TrainState,
    triples: Sequence[ModalTriple],
    *,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    on_report: Callable[[LossReport], None] | None = None,
) -> TrainState:
    """Advance ``state`` until ``train_config.steps`` steps have been taken.

    Reports are appended to ``log_path`` (JSONL); checkpoints go to
    ``out_dir/checkpoint-<step>.json`` at the configured cadence and to
    ``out_dir/checkpoint.json`` at the end.
    """
    config = state.train_config
    schedule = make_schedule(triples, config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        while state.step < config.steps:
            report = train_step(state, triples, schedule)
            if log_fh is not None:
                log_fh.write(report.to_json() + "\n")
                log_fh.flush()
            if on_report is not None:
                on_report(report)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(state, out / f"checkpoint-{state.step:06d}.json")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_state(state, out / "checkpoint.json")
    return state


def train(
    records: Sequence[Record],
    vocab: Vocab,
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    **kwargs,
) -> TrainState:
    """Initialise from the seed and run ``train_config.steps`` steps."""
    state = init_state(vocab, train_config, encoder_config)
    return run(state, corpus_triples(records, vocab), **kwargs)


def resume(checkpoint: str | Path, records: Sequence[Record], train_config: TrainConfig | None = None,
           encoder_config: EncoderConfig | None = None, **kwargs) -> TrainState:
    state = load_state(checkpoint, encoder_config, train_config)
    return run(state, corpus_triples(records, state.vocab), **kwargs)


def read_log(path: str | Path) -> list[LossReport]:
    return [LossReport.from_json(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
