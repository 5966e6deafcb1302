"""Cyclic two-role training loop.

One stage tunes the describer with the clipped-surrogate objective against
a frozen locator; the next tunes the locator by maximum likelihood on
pseudo-captions from a frozen describer. After every stage the trained
parameters are copied into the frozen role and the roles swap, with the
PPO-old and reference snapshots re-anchored to the freshly synchronized
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Var
from .evalharness import make_labeled_set, rec_accuracy, self_consistency_eval
from .geometry import CoordFormat, quantize
from .policy import (
    EOS,
    ROLE_DESCRIBE,
    ROLE_LOCATE,
    DecodingState,
    LossExpr,
    PolicyNetwork,
    PolicySnapshotSet,
    SequenceModel,
    backward,
    canonical_caption,
    describer_conditioning,
    sync_into,
)
from .refgame import TrainingUnit
from .rl import (
    PPOConfig,
    Trajectory,
    TrajectoryBatch,
    compute_advantages,
    compute_rewards,
    ppo_loss,
    reconstruction_iou_batch,
)

VARIANT_ITERATIVE = "iterative"
VARIANT_DESCRIBER_ONLY = "describer-only"
VARIANT_LOCATOR_ONLY = "locator-only"


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n, dtype=np.float64), np.zeros(n, dtype=np.float64))


def optimizer_step(
    params: np.ndarray,
    grads: np.ndarray,
    opt: OptimizerState,
    lr: float,
    weight_decay: float,
    grad_clip_norm: Optional[float] = None,
) -> np.ndarray:
    """One decoupled-weight-decay adaptive-moment update; returns new params."""
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    if grad_clip_norm is not None:
        norm = float(np.linalg.norm(grads))
        if norm > grad_clip_norm:
            grads = grads * (grad_clip_norm / norm)
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + opt.eps) - lr * weight_decay * params


# -- schedule --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    h_steps: int = 50            # steps per stage before roles switch
    num_switches: int = 6
    batch_size: int = 32
    lr_describer: float = 3e-4
    lr_locator: float = 1e-3
    weight_decay: float = 0.1
    ppo: PPOConfig = field(default_factory=PPOConfig)
    sup_mix_ratio: float = 0.0   # fraction of locator batches from labeled captions
    seed: int = 0
    grad_clip_norm: Optional[float] = None
    reset_ref_each_stage: bool = True

    def __post_init__(self) -> None:
        if self.h_steps < 1:
            raise ValueError("h_steps must be >= 1")
        if self.num_switches < 2:
            raise ValueError("num_switches must be >= 2")
        if self.lr_describer <= 0 or self.lr_locator <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.sup_mix_ratio <= 1.0):
            raise ValueError("sup_mix_ratio must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "h_steps": self.h_steps,
            "num_switches": self.num_switches,
            "batch_size": self.batch_size,
            "lr_describer": self.lr_describer,
            "lr_locator": self.lr_locator,
            "weight_decay": self.weight_decay,
            "ppo": self.ppo.to_dict(),
            "sup_mix_ratio": self.sup_mix_ratio,
            "seed": self.seed,
            "grad_clip_norm": self.grad_clip_norm,
            "reset_ref_each_stage": self.reset_ref_each_stage,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        d = dict(d)
        if "ppo" in d:
            d["ppo"] = PPOConfig.from_dict(d["ppo"])
        return cls(**d)


# -- locator instructions ---------------------------------------------------------


@dataclass(frozen=True)
class InstructionSequence:
    """Conditioning tokens plus generated tokens, with a mask selecting the
    positions that contribute to the likelihood loss."""

    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    cond_len: int

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("mask length must equal token length")
        if not any(self.loss_mask):
            raise ValueError("at least one position must contribute to the loss")
        if any(self.loss_mask[: self.cond_len]):
            raise ValueError("conditioning positions cannot carry loss")

    @property
    def target_tokens(self) -> tuple[int, ...]:
        return self.tokens[self.cond_len :]

    @property
    def target_mask(self) -> tuple[bool, ...]:
        return self.loss_mask[self.cond_len :]


def build_locator_instruction(
    caption: Sequence[int], unit: TrainingUnit, model: SequenceModel, fmt: CoordFormat
) -> InstructionSequence:
    """Instruction for one grounding example: caption conditioning followed
    by the gold box's coordinate tokens and EOS."""
    vocab = model.encoder.vocab
    q = quantize(unit.triplet.target, fmt.range_max)
    target = tuple(vocab.coord_token(v) for v in q.as_tuple()) + (EOS,)
    caption = tuple(caption)[: model.encoder.enc.cond_len]
    return InstructionSequence(
        tokens=caption + target,
        loss_mask=(False,) * len(caption) + (True,) * len(target),
        cond_len=len(caption),
    )


def mle_loss(
    live: PolicyNetwork,
    model: SequenceModel,
    states: Sequence[DecodingState],
    instructions: Sequence[InstructionSequence],
    theta: Optional[Var] = None,
) -> LossExpr:
    """Masked cross-entropy over the generated positions, averaged over all
    masked-in tokens of the batch."""
    if not states:
        raise ValueError("empty batch")
    expr_theta = live.params_var() if theta is None else theta
    flat, n_masked = _mle_term(live, expr_theta, model, states, instructions)
    return LossExpr(flat / n_masked, expr_theta, live)


def _mle_term(
    live: PolicyNetwork,
    theta: Var,
    model: SequenceModel,
    states: Sequence[DecodingState],
    instructions: Sequence[InstructionSequence],
) -> tuple[Var, int]:
    token_seqs = [ins.target_tokens for ins in instructions]
    flat, valid = model.score_batch_var(live, theta, states, token_seqs)
    lengths = np.array([len(t) for t in token_seqs])
    t_max = int(lengths.max())
    mask = np.zeros((len(states), t_max), dtype=np.float64)
    for i, ins in enumerate(instructions):
        mask[i, : lengths[i]] = np.asarray(ins.target_mask, dtype=np.float64)
    mask_flat = mask.T.ravel() * valid.astype(np.float64)
    n_masked = int(mask_flat.sum())
    return -((flat * mask_flat).sum()), n_masked


# -- batching helpers --------------------------------------------------------------


def _describer_states(units: Sequence[TrainingUnit], model: SequenceModel) -> list[DecodingState]:
    vocab = model.encoder.vocab
    return [
        DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        for u in units
    ]


def _canonical_for(unit: TrainingUnit, model: SequenceModel) -> tuple[int, ...]:
    vocab = model.encoder.vocab
    obj = next(o for o in unit.scene.objects if o.bbox == unit.triplet.target)
    return canonical_caption(obj.category, obj.color, obj.size_class, obj.bbox.center, vocab)


@dataclass
class StageMetrics:
    records: list[dict] = field(default_factory=list)
    sup_labels_used: int = 0


MetricSink = Callable[[dict], None]


# -- stages ------------------------------------------------------------------------


def describer_stage(
    snap: PolicySnapshotSet,
    units: Sequence[TrainingUnit],
    sched: TrainingSchedule,
    model: SequenceModel,
    fmt: CoordFormat,
    opt: OptimizerState,
    stage_rng: np.random.Generator,
    switch_index: int = 0,
    on_metric: Optional[MetricSink] = None,
) -> StageMetrics:
    """H outer steps of clipped-surrogate training against the frozen locator.

    Each outer step refreshes the PPO-old snapshot, samples captions, scores
    them under the old and reference policies, computes terminal IoUs through
    the frozen locator and greedy baselines from the reference policy, then
    takes ppo_epochs gradient passes.
    """
    if snap.live_role != ROLE_DESCRIBE:
        raise ValueError("snapshot set is not in the describer role")
    frozen_before = snap.frozen_counterpart.params.copy()
    metrics = StageMetrics()
    n = len(units)
    if n == 0:
        raise ValueError("empty dataset")
    for step in range(sched.h_steps):
        snap.refresh_old()
        idx = stage_rng.integers(0, n, size=sched.batch_size)
        batch = [units[int(i)] for i in idx]
        states = _describer_states(batch, model)
        targets = [u.triplet.target for u in batch]
        feats = [u.features for u in batch]

        sample_seed = int(stage_rng.integers(np.iinfo(np.int64).max))
        seqs = model.sample_batch(snap.live, states, seed=sample_seed)
        tokens = [s.tokens for s in seqs]
        old_scores = model.score_batch(snap.old, states, tokens)
        ref_scores = model.score_batch(snap.ref, states, tokens)

        ious, boxes = reconstruction_iou_batch(
            targets, tokens, snap.frozen_counterpart, feats, model, fmt
        )
        base_caps = model.greedy_batch(snap.ref, states)
        baselines, _ = reconstruction_iou_batch(
            targets, [c.tokens for c in base_caps], snap.frozen_counterpart, feats, model, fmt
        )

        trajectories = []
        for i, (st, sq) in enumerate(zip(states, seqs)):
            scored = sq.with_scores(logp_old=old_scores[i], logp_ref=ref_scores[i])
            rv = compute_rewards(
                scored, float(ious[i]), sched.ppo.kl_coef, baseline_reward=float(baselines[i])
            )
            adv = compute_advantages(rv)
            trajectories.append(Trajectory(st, scored, rv, adv, boxes[i] is not None, boxes[i]))
        batch_stats = TrajectoryBatch(trajectories)

        loss_value = float("nan")
        try:
            for _ in range(sched.ppo.ppo_epochs):
                expr = ppo_loss(snap.live, model, trajectories, sched.ppo)
                grads = backward(snap.live, expr)
                snap.live.params = optimizer_step(
                    snap.live.params, grads, opt, sched.lr_describer, sched.weight_decay,
                    sched.grad_clip_norm,
                )
                loss_value = expr.value
        except FloatingPointError as exc:
            raise RuntimeError(
                f"describer stage aborted at switch {switch_index} step {step}: {exc}"
            ) from exc

        record = {
            "stage": "describer",
            "switch": switch_index,
            "step": step,
            "mean_reward": batch_stats.mean_reward,
            "mean_abs_advantage": batch_stats.mean_abs_advantage,
            "ppo_loss": loss_value,
            "mle_loss": None,
            "parse_failure_rate": batch_stats.parse_failure_rate,
            "mean_terminal_iou": float(np.mean(ious)),
            "mean_baseline_iou": float(np.mean(baselines)),
        }
        metrics.records.append(record)
        if on_metric:
            on_metric(record)
    if not np.array_equal(frozen_before, snap.frozen_counterpart.params):
        raise AssertionError("frozen locator changed during the describer stage")
    return metrics


def locator_stage(
    snap: PolicySnapshotSet,
    units: Sequence[TrainingUnit],
    sched: TrainingSchedule,
    model: SequenceModel,
    fmt: CoordFormat,
    opt: OptimizerState,
    stage_rng: np.random.Generator,
    switch_index: int = 0,
    on_metric: Optional[MetricSink] = None,
) -> StageMetrics:
    """H steps of masked-likelihood grounding on pseudo-captions greedily
    decoded by the frozen describer; an optional fraction of each batch is
    replaced with labeled canonical captions."""
    if snap.live_role != ROLE_LOCATE:
        raise ValueError("snapshot set is not in the locator role")
    frozen_before = snap.frozen_counterpart.params.copy()
    metrics = StageMetrics()
    n = len(units)
    if n == 0:
        raise ValueError("empty dataset")
    n_sup = int(round(sched.sup_mix_ratio * sched.batch_size))
    for step in range(sched.h_steps):
        idx = stage_rng.integers(0, n, size=sched.batch_size)
        batch = [units[int(i)] for i in idx]
        pseudo = model.greedy_batch(
            snap.frozen_counterpart, _describer_states(batch, model)
        )
        captions = [p.tokens for p in pseudo]
        for j in range(n_sup):
            captions[j] = _canonical_for(batch[j], model)
        metrics.sup_labels_used += n_sup

        states = [
            DecodingState(u.features, ROLE_LOCATE, tuple(c)[: model.encoder.enc.cond_len])
            for u, c in zip(batch, captions)
        ]
        instructions = [
            build_locator_instruction(c, u, model, fmt) for c, u in zip(captions, batch)
        ]

        try:
            expr = mle_loss(snap.live, model, states, instructions)
            grads = backward(snap.live, expr)
            snap.live.params = optimizer_step(
                snap.live.params, grads, opt, sched.lr_locator, sched.weight_decay,
                sched.grad_clip_norm,
            )
        except FloatingPointError as exc:
            raise RuntimeError(
                f"locator stage aborted at switch {switch_index} step {step}: {exc}"
            ) from exc

        record = {
            "stage": "locator",
            "switch": switch_index,
            "step": step,
            "mean_reward": None,
            "mean_abs_advantage": None,
            "ppo_loss": None,
            "mle_loss": expr.value,
            "parse_failure_rate": None,
            "sup_labels_used": n_sup,
        }
        metrics.records.append(record)
        if on_metric:
            on_metric(record)
    if not np.array_equal(frozen_before, snap.frozen_counterpart.params):
        raise AssertionError("frozen describer changed during the locator stage")
    return metrics


def synchronize(snap: PolicySnapshotSet, reset_ref: bool = True) -> PolicySnapshotSet:
    """Copy the trained parameters into the frozen role, swap roles, and
    re-anchor the old (and by default the reference) snapshots."""
    sync_into(snap.live, snap.frozen_counterpart)
    snap.live, snap.frozen_counterpart = snap.frozen_counterpart, snap.live
    snap.live_role = ROLE_LOCATE if snap.live_role == ROLE_DESCRIBE else ROLE_DESCRIBE
    sync_into(snap.live, snap.old)
    if reset_ref:
        sync_into(snap.live, snap.ref)
    return snap


# -- full loop ----------------------------------------------------------------------


@dataclass
class SwitchResult:
    switch: int
    stage: str
    params: np.ndarray
    pr_at_05: Optional[float]
    mean_iou: Optional[float]
    rec_accuracy: Optional[float]


@dataclass
class TrainingResult:
    initial_pr_at_05: Optional[float]
    initial_rec_accuracy: Optional[float]
    switches: list[SwitchResult]
    metrics: list[dict]

    @property
    def final_pr_at_05(self) -> Optional[float]:
        return self.switches[-1].pr_at_05 if self.switches else self.initial_pr_at_05


def _eval_pair(snap: PolicySnapshotSet, heldout, model, fmt) -> tuple[Optional[float], Optional[float], Optional[float]]:
    describer = snap.live if snap.live_role == ROLE_DESCRIBE else snap.frozen_counterpart
    locator = snap.live if snap.live_role == ROLE_LOCATE else snap.frozen_counterpart
    summary, _ = self_consistency_eval(describer, locator, heldout, model, fmt)
    rec_summary, _ = rec_accuracy(locator, make_labeled_set(heldout, model), model, fmt)
    return summary.pr_at_05, summary.mean_iou, rec_summary.pr_at_05


def run_cycle_training(
    init: PolicyNetwork,
    train_units: Sequence[TrainingUnit],
    heldout_units: Sequence[TrainingUnit],
    sched: TrainingSchedule,
    model: SequenceModel,
    fmt: CoordFormat,
    variant: str = VARIANT_ITERATIVE,
    on_metric: Optional[MetricSink] = None,
    on_checkpoint: Optional[Callable[[SwitchResult], None]] = None,
) -> TrainingResult:
    """Alternate describer and locator stages with parameter synchronization
    for num_switches stages, evaluating held-out self-consistency after each.

    The one-sided variants keep the counterpart frozen at its initial
    parameters for the whole run and never synchronize, matching the
    iterative run's total number of update steps.
    """
    if not train_units:
        raise ValueError("dataset must be nonempty")
    if variant not in (VARIANT_ITERATIVE, VARIANT_DESCRIBER_ONLY, VARIANT_LOCATOR_ONLY):
        raise ValueError(f"unknown variant {variant!r}")

    first_role = ROLE_LOCATE if variant == VARIANT_LOCATOR_ONLY else ROLE_DESCRIBE
    snap = PolicySnapshotSet.from_initial(init, live_role=first_role)
    opt_describer = OptimizerState.for_params(init.params.size)
    opt_locator = OptimizerState.for_params(init.params.size)

    metrics: list[dict] = []

    def sink(rec: dict) -> None:
        metrics.append(rec)
        if on_metric:
            on_metric(rec)

    pr0, _, rec0 = _eval_pair(snap, heldout_units, model, fmt)
    switches: list[SwitchResult] = []
    seed_seq = np.random.SeedSequence(sched.seed)
    stage_seeds = seed_seq.generate_state(sched.num_switches, np.uint64)

    for k in range(sched.num_switches):
        stage_rng = np.random.default_rng(int(stage_seeds[k]))
        if snap.live_role == ROLE_DESCRIBE:
            describer_stage(
                snap, train_units, sched, model, fmt, opt_describer, stage_rng, k, sink
            )
            stage_name = "describer"
        else:
            locator_stage(
                snap, train_units, sched, model, fmt, opt_locator, stage_rng, k, sink
            )
            stage_name = "locator"

        if variant == VARIANT_ITERATIVE:
            synchronize(snap, reset_ref=sched.reset_ref_each_stage)
        else:
            # one-sided: no parameter exchange, but re-anchor old and ref so
            # the next stage's trust region starts fresh
            sync_into(snap.live, snap.old)
            if sched.reset_ref_each_stage:
                sync_into(snap.live, snap.ref)

        pr, mean_iou, rec = _eval_pair(snap, heldout_units, model, fmt)
        result = SwitchResult(
            switch=k + 1,
            stage=stage_name,
            params=snap.live.params.copy(),
            pr_at_05=pr,
            mean_iou=mean_iou,
            rec_accuracy=rec,
        )
        switches.append(result)
        if on_checkpoint:
            on_checkpoint(result)

    return TrainingResult(pr0, rec0, switches, metrics)


# -- supervised warm start ------------------------------------------------------------


def warm_start(
    net: PolicyNetwork,
    units: Sequence[TrainingUnit],
    model: SequenceModel,
    fmt: CoordFormat,
    steps: int = 800,
    describer_steps: Optional[int] = 120,
    batch_size: int = 32,
    lr: float = 3e-3,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> list[float]:
    """Supervised pretraining of both roles on canonical captions.

    The locator leg trains for the full step budget; the describer leg only
    for the first describer_steps (None trains it throughout). Capping the
    describer leg leaves caption quality as the system's bottleneck, which
    places held-out self-consistency in the desired starting band and leaves
    genuine headroom for the reinforcement stage.
    """
    rng = np.random.default_rng(seed)
    opt = OptimizerState.for_params(net.params.size)
    losses = []
    n = len(units)
    if describer_steps is None:
        describer_steps = steps
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        batch = [units[int(i)] for i in idx]
        captions = [_canonical_for(u, model) for u in batch]

        l_states = [
            DecodingState(u.features, ROLE_LOCATE, tuple(c)[: model.encoder.enc.cond_len])
            for u, c in zip(batch, captions)
        ]
        l_instructions = [
            build_locator_instruction(c, u, model, fmt) for c, u in zip(captions, batch)
        ]

        theta = net.params_var()
        l_term, l_n = _mle_term(net, theta, model, l_states, l_instructions)
        if step < describer_steps:
            d_states = _describer_states(batch, model)
            d_instructions = [
                InstructionSequence(
                    tokens=tuple(s.cond) + cap,
                    loss_mask=(False,) * len(s.cond) + (True,) * len(cap),
                    cond_len=len(s.cond),
                )
                for s, cap in zip(d_states, captions)
            ]
            d_term, d_n = _mle_term(net, theta, model, d_states, d_instructions)
            loss_var = d_term / d_n + l_term / l_n
        else:
            loss_var = l_term / l_n
        expr = LossExpr(loss_var, theta, net)
        grads = backward(net, expr)
        net.params = optimizer_step(net.params, grads, opt, lr, weight_decay)
        losses.append(expr.value)
    return losses
