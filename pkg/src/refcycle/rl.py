"""Reinforcement-learning pieces for the describer: the round-trip
reconstruction reward, the per-token KL-penalized reward vector, the
value-free advantage (suffix return minus a greedy-baseline return), and the
clipped-surrogate policy loss.

Only the live policy's current log-probs carry gradient; rewards,
advantages and old log-probs enter the loss as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff
from .autodiff import Var, minimum
from .geometry import BBox, CoordFormat, dequantize, iou, parse_bbox
from .policy import (
    EOS,
    ROLE_LOCATE,
    CaptionSequence,
    DecodingState,
    LossExpr,
    PolicyNetwork,
    SequenceModel,
    Vocabulary,
)


@dataclass(frozen=True)
class PPOConfig:
    clip_ratio: float = 0.2   # width of the trust region around ratio 1
    kl_coef: float = 0.01     # weight of the per-token log-ratio penalty
    ppo_epochs: int = 2       # gradient passes per collected batch

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_ratio < 1.0):
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.kl_coef < 0.0:
            raise ValueError("kl_coef must be >= 0")
        if self.ppo_epochs < 1:
            raise ValueError("ppo_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "clip_ratio": self.clip_ratio,
            "kl_coef": self.kl_coef,
            "ppo_epochs": self.ppo_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        return cls(
            clip_ratio=float(d.get("clip_ratio", cls.clip_ratio)),
            kl_coef=float(d.get("kl_coef", cls.kl_coef)),
            ppo_epochs=int(d.get("ppo_epochs", cls.ppo_epochs)),
        )


@dataclass(frozen=True)
class RewardVector:
    """Per-token rewards: the terminal entry carries the reconstruction IoU,
    every entry carries the KL penalty term."""

    per_token: np.ndarray
    terminal_iou: float
    baseline_reward: float

    @property
    def length(self) -> int:
        return self.per_token.shape[0]


@dataclass(frozen=True)
class Trajectory:
    state: DecodingState
    seq: CaptionSequence
    rewards: RewardVector
    advantages: np.ndarray
    parse_success: bool
    predicted_box: Optional[BBox]

    def __post_init__(self) -> None:
        if self.advantages.shape[0] != self.seq.length:
            raise ValueError("advantage vector length must equal sequence length")
        if not np.all(np.isfinite(self.advantages)):
            raise ValueError("advantages must be finite")


@dataclass
class TrajectoryBatch:
    items: list[Trajectory]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def mean_reward(self) -> float:
        return float(np.mean([t.rewards.per_token.sum() for t in self.items]))

    @property
    def mean_abs_advantage(self) -> float:
        return float(np.mean([np.abs(t.advantages).mean() for t in self.items]))

    @property
    def parse_failure_rate(self) -> float:
        return float(np.mean([not t.parse_success for t in self.items]))


# -- reconstruction reward -----------------------------------------------------


def render_coord_text(values: Sequence[int], fmt: CoordFormat) -> str:
    """Fill the textual template with raw integers. Unlike serialize_bbox
    this does not pre-validate: model output may be non-monotone, and the
    parse step is what decides validity."""
    x1, y1, x2, y2 = values
    return fmt.template.format(x1=x1, y1=y1, x2=x2, y2=y2)


def locator_tokens_to_box(
    tokens: Sequence[int], vocab: Vocabulary, fmt: CoordFormat
) -> Optional[BBox]:
    """Interpret locator output through the text contract: coordinate tokens
    are rendered into the template and re-extracted by the format's regex,
    so range and monotonicity violations fall out as parse failures."""
    if len(tokens) != 5 or tokens[4] != EOS:
        return None
    values = [vocab.coord_value(t) for t in tokens[:4]]
    if any(v is None for v in values):
        return None
    q = parse_bbox(render_coord_text(values, fmt), fmt)
    if q is None:
        return None
    return dequantize(q, fmt.range_max)


def reconstruction_iou_batch(
    targets: Sequence[BBox],
    captions: Sequence[Sequence[int]],
    locator: PolicyNetwork,
    features: Sequence[np.ndarray],
    model: SequenceModel,
    fmt: CoordFormat,
) -> tuple[np.ndarray, list[Optional[BBox]]]:
    """Greedy-decode the frozen locator on each (scene, caption) pair and
    score the predicted box against the target; parse failures score 0."""
    states = [
        DecodingState(f, ROLE_LOCATE, tuple(c)) for f, c in zip(features, captions)
    ]
    outs = model.greedy_batch(locator, states)
    ious = np.zeros(len(states), dtype=np.float64)
    boxes: list[Optional[BBox]] = []
    for i, out in enumerate(outs):
        box = locator_tokens_to_box(out.tokens, model.encoder.vocab, fmt)
        boxes.append(box)
        if box is not None:
            ious[i] = iou(targets[i], box)
    return ious, boxes


def reconstruction_iou(
    target: BBox,
    caption: Sequence[int],
    locator: PolicyNetwork,
    features: np.ndarray,
    model: SequenceModel,
    fmt: CoordFormat,
) -> tuple[float, Optional[BBox]]:
    ious, boxes = reconstruction_iou_batch([target], [caption], locator, [features], model, fmt)
    return float(ious[0]), boxes[0]


def compute_baseline(
    state: DecodingState,
    ref_policy: PolicyNetwork,
    locator: PolicyNetwork,
    target: BBox,
    model: SequenceModel,
    fmt: CoordFormat,
) -> float:
    """Return of the reference policy's greedy caption. Its KL term against
    the reference itself is identically zero, so the baseline reduces to the
    greedy caption's reconstruction IoU."""
    greedy = model.greedy_batch(ref_policy, [state])[0]
    value, _ = reconstruction_iou(target, greedy.tokens, locator, state.features, model, fmt)
    return value


# -- reward and advantage -------------------------------------------------------


def compute_rewards(
    seq: CaptionSequence, terminal_iou: float, kl_coef: float, baseline_reward: float = 0.0
) -> RewardVector:
    """Per-token reward: the terminal step carries the reconstruction IoU and
    every step pays the log-ratio penalty against the reference policy."""
    if seq.logp_ref is None:
        raise ValueError("sequence is missing reference log-probs")
    if seq.logp_live.shape != seq.logp_ref.shape:
        raise ValueError("live/reference log-prob length mismatch")
    per_token = -kl_coef * (seq.logp_live - seq.logp_ref)
    per_token[-1] += terminal_iou
    return RewardVector(per_token, terminal_iou, baseline_reward)


def compute_advantages(rv: RewardVector) -> np.ndarray:
    """Suffix-sum returns minus the greedy-baseline return."""
    suffix = np.cumsum(rv.per_token[::-1])[::-1]
    return suffix - rv.baseline_reward


# -- PPO surrogate ---------------------------------------------------------------


def ppo_surrogate(
    flat: Var, old_flat: np.ndarray, adv_flat: np.ndarray, valid: np.ndarray, cfg: PPOConfig
) -> Var:
    """Clipped-surrogate loss from flattened per-token quantities.

    Per token: -min(r * A, clip(r, 1-eps, 1+eps) * A) with
    r = exp(logp_now - logp_old); the result is the mean over valid tokens.
    Old log-probs and advantages enter as constants.
    """
    old_flat = old_flat.copy()
    adv_flat = adv_flat.copy()
    # invalid slots: force ratio to 1 and advantage to 0 so they contribute
    # exact zeros to the sum and nothing to the gradient
    old_flat[~valid] = flat.data[~valid]
    adv_flat[~valid] = 0.0

    with np.errstate(over="ignore"):
        ratio = (flat - old_flat).exp()
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite importance ratio; old log-probs degenerate")
    unclipped = ratio * adv_flat
    clipped = ratio.clip(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv_flat
    surrogate = minimum(unclipped, clipped) * valid.astype(np.float64)
    return -(surrogate.sum() / int(valid.sum()))


def ppo_loss(
    live: PolicyNetwork,
    model: SequenceModel,
    trajectories: Sequence[Trajectory],
    cfg: PPOConfig,
) -> LossExpr:
    """Differentiable clipped-surrogate loss, averaged over every token of
    every trajectory in the batch (pooled mean)."""
    if not trajectories:
        raise ValueError("empty trajectory batch")
    states = [t.state for t in trajectories]
    tokens = [t.seq.tokens for t in trajectories]
    for t in trajectories:
        if t.seq.logp_old is None:
            raise ValueError("trajectory is missing old log-probs")

    theta = live.params_var()
    flat, valid = model.score_batch_var(live, theta, states, tokens)

    # position-major alignment with the flattened score vector
    lengths = np.array([t.seq.length for t in trajectories])
    t_max = int(lengths.max())
    b = len(trajectories)
    old = np.zeros((b, t_max))
    adv = np.zeros((b, t_max))
    for i, t in enumerate(trajectories):
        old[i, : lengths[i]] = t.seq.logp_old
        adv[i, : lengths[i]] = t.advantages
    loss = ppo_surrogate(flat, old.T.ravel(), adv.T.ravel(), valid, cfg)
    return LossExpr(loss, theta, live)
