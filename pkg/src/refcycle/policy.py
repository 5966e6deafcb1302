"""Tiny shared sequence policy with two roles: a describer that turns a
target box into caption tokens, and a locator that turns a caption back into
coordinate tokens.

The network is a per-step MLP: each decoding step sees the pooled scene
grid, the conditioning tokens (box tokens for the describer, caption tokens
for the locator), a bag-of-words summary of the generated prefix, and a
positional one-hot. Everything is float64 so analytic gradients can be
checked against central finite differences.

Locator decoding is structurally constrained: four coordinate tokens, then
EOS. Teacher-forced scoring applies the same constraint, so log-probs
recorded while sampling always agree with re-scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff
from .autodiff import Var
from .geometry import BBox, quantize
from .refgame import SceneConfig, pool_features

ROLE_DESCRIBE = 0
ROLE_LOCATE = 1

PAD, BOS, EOS = 0, 1, 2

MASK_VALUE = -1e30

_CATEGORY_NAMES = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"]
_COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange"]
_SIZE_NAMES = ["small", "medium", "large"]
_SPATIAL_NAMES = [
    "top-left", "top", "top-right",
    "left", "middle", "right",
    "bottom-left", "bottom", "bottom-right",
]


def _named(names: list[str], prefix: str, n: int) -> list[str]:
    return [names[i] if i < len(names) else f"{prefix}{i}" for i in range(n)]


@dataclass(frozen=True)
class Vocabulary:
    """Dense token table: specials, attribute words, nine spatial words, and
    a contiguous block of coordinate tokens 0..coord_range."""

    n_categories: int
    n_colors: int
    n_sizes: int
    coord_range: int

    @property
    def category_offset(self) -> int:
        return 3

    @property
    def color_offset(self) -> int:
        return self.category_offset + self.n_categories

    @property
    def size_offset(self) -> int:
        return self.color_offset + self.n_colors

    @property
    def spatial_offset(self) -> int:
        return self.size_offset + self.n_sizes

    @property
    def coord_offset(self) -> int:
        return self.spatial_offset + 9

    @property
    def size(self) -> int:
        return self.coord_offset + self.coord_range + 1

    @classmethod
    def build(cls, cfg: SceneConfig, coord_range: Optional[int] = None) -> "Vocabulary":
        if coord_range is None:
            coord_range = cfg.grid_size * 4
        return cls(cfg.n_categories, cfg.n_colors, cfg.n_sizes, coord_range)

    # -- token constructors ------------------------------------------------

    def category_token(self, c: int) -> int:
        return self.category_offset + c

    def color_token(self, c: int) -> int:
        return self.color_offset + c

    def size_token(self, s: int) -> int:
        return self.size_offset + s

    def spatial_token(self, idx: int) -> int:
        return self.spatial_offset + idx

    def coord_token(self, v: int) -> int:
        if not (0 <= v <= self.coord_range):
            raise ValueError(f"coordinate {v} outside [0, {self.coord_range}]")
        return self.coord_offset + v

    def coord_value(self, tok: int) -> Optional[int]:
        if self.coord_offset <= tok < self.size:
            return tok - self.coord_offset
        return None

    def spatial_index_for_center(self, cx: float, cy: float) -> int:
        col = min(2, int(cx * 3))
        row = min(2, int(cy * 3))
        return row * 3 + col

    def surface(self, tok: int) -> str:
        if tok == PAD:
            return "<pad>"
        if tok == BOS:
            return "<bos>"
        if tok == EOS:
            return "<eos>"
        if tok < self.color_offset:
            return _named(_CATEGORY_NAMES, "object", self.n_categories)[tok - self.category_offset]
        if tok < self.size_offset:
            return _named(_COLOR_NAMES, "color", self.n_colors)[tok - self.color_offset]
        if tok < self.spatial_offset:
            return _named(_SIZE_NAMES, "size", self.n_sizes)[tok - self.size_offset]
        if tok < self.coord_offset:
            return _SPATIAL_NAMES[tok - self.spatial_offset]
        return f"<{tok - self.coord_offset}>"

    def render(self, tokens: Sequence[int]) -> str:
        return " ".join(self.surface(t) for t in tokens)

    def to_dict(self) -> dict:
        return {
            "n_categories": self.n_categories,
            "n_colors": self.n_colors,
            "n_sizes": self.n_sizes,
            "coord_range": self.coord_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(**{k: int(v) for k, v in d.items()})


def canonical_caption(
    category: int, color: int, size_class: int, center: tuple[float, float], vocab: Vocabulary
) -> tuple[int, ...]:
    """Deterministic labeled-style caption: attribute words plus two spatial
    words (a coarse 3x3 region and a refinement within it), ending with EOS."""
    cx, cy = center
    coarse = vocab.spatial_index_for_center(cx, cy)
    fine = vocab.spatial_index_for_center(cx * 3 % 1.0, cy * 3 % 1.0)
    return (
        vocab.category_token(category),
        vocab.color_token(color),
        vocab.size_token(size_class),
        vocab.spatial_token(coarse),
        vocab.spatial_token(fine),
        EOS,
    )


def describer_conditioning(target: BBox, vocab: Vocabulary) -> tuple[int, ...]:
    """Serialize the target box into four coordinate tokens."""
    q = quantize(target, vocab.coord_range)
    return tuple(vocab.coord_token(v) for v in q.as_tuple())


# -- architecture and encoding ------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    pooled_size: int = 4
    cond_len: int = 8
    max_steps: int = 8  # T_max

    def to_dict(self) -> dict:
        return {
            "pooled_size": self.pooled_size,
            "cond_len": self.cond_len,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: int(v) for k, v in d.items()})


class StateEncoder:
    """Fixed featurization of a decoding state into one input row."""

    def __init__(self, scene_cfg: SceneConfig, vocab: Vocabulary, enc: EncoderConfig = EncoderConfig()):
        self.scene_cfg = scene_cfg
        self.vocab = vocab
        self.enc = enc
        self.pooled_dim = enc.pooled_size * enc.pooled_size * scene_cfg.n_channels
        v = vocab.size
        self.off_role = 0
        self.off_pooled = 2
        self.off_cond = self.off_pooled + self.pooled_dim
        self.off_prefix = self.off_cond + enc.cond_len * v
        self.off_pos = self.off_prefix + v
        self.input_dim = self.off_pos + enc.max_steps
        self._mask_cache: dict[tuple[int, int], Optional[np.ndarray]] = {}

    def pool(self, features: np.ndarray) -> np.ndarray:
        return pool_features(features, self.enc.pooled_size)

    def cond_matrix(self, conds: Sequence[Sequence[int]]) -> np.ndarray:
        """Pad conditioning token lists to a (B, cond_len) int array, -1 padded."""
        out = np.full((len(conds), self.enc.cond_len), -1, dtype=np.int64)
        for i, c in enumerate(conds):
            c = list(c)[: self.enc.cond_len]
            out[i, : len(c)] = c
        return out

    def encode_rows(
        self,
        role: int,
        pooled: np.ndarray,
        cond: np.ndarray,
        prefix_counts: np.ndarray,
        t: int,
    ) -> np.ndarray:
        """Build input rows for a whole batch at decoding position t."""
        b = pooled.shape[0]
        v = self.vocab.size
        x = np.zeros((b, self.input_dim), dtype=np.float64)
        x[:, self.off_role + role] = 1.0
        x[:, self.off_pooled : self.off_pooled + self.pooled_dim] = pooled
        rows = np.arange(b)
        for p in range(self.enc.cond_len):
            toks = cond[:, p]
            valid = toks >= 0
            x[rows[valid], self.off_cond + p * v + toks[valid]] = 1.0
        x[:, self.off_prefix : self.off_prefix + v] = prefix_counts
        x[:, self.off_pos + t] = 1.0
        return x

    def logit_mask(self, role: int, t: int) -> Optional[np.ndarray]:
        """Additive mask constraining decoding; None means unconstrained.

        The locator emits coordinate tokens at the first four steps and EOS
        at the fifth; the describer is unconstrained.
        """
        key = (role, t)
        if key not in self._mask_cache:
            if role == ROLE_LOCATE:
                m = np.full(self.vocab.size, MASK_VALUE)
                if t < 4:
                    m[self.vocab.coord_offset : self.vocab.coord_offset + self.vocab.coord_range + 1] = 0.0
                else:
                    m[EOS] = 0.0
                self._mask_cache[key] = m
            else:
                self._mask_cache[key] = None
        return self._mask_cache[key]


@dataclass(frozen=True)
class ArchDescriptor:
    input_dim: int
    hidden: tuple[int, ...]
    vocab_size: int

    @property
    def n_params(self) -> int:
        total = 0
        prev = self.input_dim
        for h in (*self.hidden, self.vocab_size):
            total += prev * h + h
            prev = h
        return total

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "vocab_size": self.vocab_size}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(int(d["input_dim"]), tuple(int(h) for h in d["hidden"]), int(d["vocab_size"]))


@dataclass(frozen=True)
class DecodingState:
    """One decoding context: scene features, role, conditioning tokens, and
    the generated prefix so far."""

    features: np.ndarray
    role: int
    cond: tuple[int, ...]
    prefix: tuple[int, ...] = ()


@dataclass(frozen=True)
class CaptionSequence:
    """Generated tokens plus per-token log-probs under up to three policies."""

    tokens: tuple[int, ...]
    logp_live: np.ndarray
    logp_old: Optional[np.ndarray] = None
    logp_ref: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return len(self.tokens)

    def with_scores(self, logp_live=None, logp_old=None, logp_ref=None) -> "CaptionSequence":
        return replace(
            self,
            logp_live=self.logp_live if logp_live is None else logp_live,
            logp_old=self.logp_old if logp_old is None else logp_old,
            logp_ref=self.logp_ref if logp_ref is None else logp_ref,
        )


class PolicyNetwork:
    """MLP over encoded decoding states; parameters live in one flat f64
    vector so snapshots and optimizer state stay trivial."""

    def __init__(self, arch: ArchDescriptor, params: Optional[np.ndarray] = None):
        self.arch = arch
        if params is None:
            params = np.zeros(arch.n_params, dtype=np.float64)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self._layout = self._build_layout()

    def _build_layout(self) -> list[tuple[int, int, tuple[int, int]]]:
        layout = []
        off = 0
        prev = self.arch.input_dim
        for h in (*self.arch.hidden, self.arch.vocab_size):
            layout.append((off, off + prev * h, (prev, h)))
            off += prev * h
            layout.append((off, off + h, (h,)))
            off += h
            prev = h
        return layout

    @classmethod
    def initialize(cls, arch: ArchDescriptor, seed: int) -> "PolicyNetwork":
        rng = np.random.default_rng(seed)
        net = cls(arch)
        chunks = []
        prev = arch.input_dim
        for h in (*arch.hidden, arch.vocab_size):
            chunks.append(rng.normal(0.0, 1.0 / np.sqrt(prev), size=prev * h))
            chunks.append(np.zeros(h))
            prev = h
        net.params = np.concatenate(chunks)
        return net

    def clone(self) -> "PolicyNetwork":
        return PolicyNetwork(self.arch, self.params)

    # -- forward passes ----------------------------------------------------

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward: (B, input_dim) -> (B, vocab_size) logits."""
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ValueError(
                f"state encoding width {x.shape} does not match input_dim {self.arch.input_dim}"
            )
        h = x
        n_layers = len(self.arch.hidden) + 1
        for li in range(n_layers):
            w_lo, w_hi, w_shape = self._layout[2 * li]
            b_lo, b_hi, _ = self._layout[2 * li + 1]
            w = self.params[w_lo:w_hi].reshape(w_shape)
            b = self.params[b_lo:b_hi]
            h = (h @ w) + b
            if li < n_layers - 1:
                h = np.tanh(h)
        return h

    def params_var(self) -> Var:
        return Var(self.params.copy(), owner=self)

    def forward_var(self, theta: Var, x: np.ndarray) -> Var:
        """Tape forward mirroring forward_batch op for op, so values match
        the plain pass bitwise for identical parameters."""
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ValueError(
                f"state encoding width {x.shape} does not match input_dim {self.arch.input_dim}"
            )
        h: Var = Var(x)
        n_layers = len(self.arch.hidden) + 1
        for li in range(n_layers):
            w_lo, w_hi, w_shape = self._layout[2 * li]
            b_lo, b_hi, _ = self._layout[2 * li + 1]
            w = theta[w_lo:w_hi].reshape(*w_shape)
            b = theta[b_lo:b_hi]
            h = (h @ w) + b
            if li < n_layers - 1:
                h = h.tanh()
        return h

    def expression(self, builder: Callable[[Var], Var]) -> "LossExpr":
        theta = self.params_var()
        return LossExpr(builder(theta), theta, self)


@dataclass
class LossExpr:
    """A differentiable scalar: the graph output plus the parameter leaf it
    was built from."""

    var: Var
    theta: Var
    network: PolicyNetwork

    @property
    def value(self) -> float:
        return float(self.var.data)


def backward(p: PolicyNetwork, expr: LossExpr) -> np.ndarray:
    """Gradient of a scalar loss expression with respect to p's parameters."""
    if expr.network is not p:
        raise ValueError("loss expression was built from a different network")
    if expr.var.data.size != 1:
        raise ValueError("loss must be scalar")
    if not np.isfinite(expr.var.data):
        raise FloatingPointError(f"non-finite loss: {expr.var.data}")
    return autodiff.grad_of(expr.var, expr.theta)


def sync_into(src: PolicyNetwork, dst: PolicyNetwork) -> None:
    """Copy src parameters into dst (deep copy, architectures must match)."""
    if src.arch != dst.arch:
        raise ValueError("architecture mismatch")
    dst.params[:] = src.params


@dataclass
class PolicySnapshotSet:
    """The four parameter sets a training stage manipulates: the live
    network, its frozen counterpart, the PPO-old snapshot, and the stage
    reference used for the KL leash and the greedy baseline."""

    live: PolicyNetwork
    frozen_counterpart: PolicyNetwork
    old: PolicyNetwork
    ref: PolicyNetwork
    live_role: int = ROLE_DESCRIBE

    @classmethod
    def from_initial(cls, net: PolicyNetwork, live_role: int = ROLE_DESCRIBE) -> "PolicySnapshotSet":
        return cls(net.clone(), net.clone(), net.clone(), net.clone(), live_role)

    def refresh_old(self) -> None:
        sync_into(self.live, self.old)

    def stage_start_consistent(self) -> bool:
        return (
            np.array_equal(self.live.params, self.frozen_counterpart.params)
            and np.array_equal(self.live.params, self.old.params)
            and np.array_equal(self.live.params, self.ref.params)
        )


# -- batched decoding and scoring ---------------------------------------------


class SequenceModel:
    """Couples a network with the encoder so sampling, greedy decoding and
    teacher-forced scoring share one state-building code path."""

    def __init__(self, encoder: StateEncoder):
        self.encoder = encoder

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        v = self.encoder.vocab.size
        for t in tokens:
            if not (0 <= t < v):
                raise ValueError(f"token id {t} outside vocabulary of size {v}")

    def _prep(self, states: Sequence[DecodingState]):
        roles = {s.role for s in states}
        if len(roles) != 1:
            raise ValueError("a batch must share one role")
        role = roles.pop()
        pooled = np.stack([self.encoder.pool(s.features) for s in states])
        cond = self.encoder.cond_matrix([s.cond for s in states])
        return role, pooled, cond

    def _step_logprobs(self, net, role, pooled, cond, prefix_counts, t) -> np.ndarray:
        x = self.encoder.encode_rows(role, pooled, cond, prefix_counts, t)
        logits = net.forward_batch(x)
        mask = self.encoder.logit_mask(role, t)
        if mask is not None:
            logits = logits + mask
        # stable row-wise log-softmax, same formula as the tape op
        m = logits.max(axis=-1, keepdims=True)
        shifted = logits - m
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
        return logits - lse

    def sample_batch(
        self, net: PolicyNetwork, states: Sequence[DecodingState], seed: int
    ) -> list[CaptionSequence]:
        """Autoregressive multinomial sampling until EOS or the step cap."""
        role, pooled, cond = self._prep(states)
        rng = np.random.default_rng(seed)
        b = len(states)
        v = self.encoder.vocab.size
        t_max = self.encoder.enc.max_steps
        prefix = np.zeros((b, v), dtype=np.float64)
        tokens = np.zeros((b, t_max), dtype=np.int64)
        logps = np.zeros((b, t_max), dtype=np.float64)
        lengths = np.zeros(b, dtype=np.int64)
        alive = np.ones(b, dtype=bool)
        for t in range(t_max):
            logp = self._step_logprobs(net, role, pooled, cond, prefix, t)
            probs = np.exp(logp)
            u = rng.random(b)
            cum = np.cumsum(probs, axis=1)
            cum[:, -1] = 1.0 + 1e-12  # guard the top edge against rounding
            choice = (u[:, None] >= cum).sum(axis=1)
            rows = np.arange(b)
            tokens[alive, t] = choice[alive]
            logps[alive, t] = logp[rows, choice][alive]
            newly_done = alive & (choice == EOS)
            lengths[alive] += 1
            prefix[rows[alive], choice[alive]] += 1.0
            alive = alive & ~newly_done
            if not alive.any():
                break
        out = []
        for i in range(b):
            n = int(lengths[i])
            out.append(CaptionSequence(tuple(int(x) for x in tokens[i, :n]), logps[i, :n].copy()))
        return out

    def greedy_batch(self, net: PolicyNetwork, states: Sequence[DecodingState]) -> list[CaptionSequence]:
        """Deterministic argmax decoding; ties resolve to the lowest id."""
        role, pooled, cond = self._prep(states)
        b = len(states)
        v = self.encoder.vocab.size
        t_max = self.encoder.enc.max_steps
        prefix = np.zeros((b, v), dtype=np.float64)
        tokens = np.zeros((b, t_max), dtype=np.int64)
        logps = np.zeros((b, t_max), dtype=np.float64)
        lengths = np.zeros(b, dtype=np.int64)
        alive = np.ones(b, dtype=bool)
        for t in range(t_max):
            logp = self._step_logprobs(net, role, pooled, cond, prefix, t)
            choice = logp.argmax(axis=1)
            rows = np.arange(b)
            tokens[alive, t] = choice[alive]
            logps[alive, t] = logp[rows, choice][alive]
            newly_done = alive & (choice == EOS)
            lengths[alive] += 1
            prefix[rows[alive], choice[alive]] += 1.0
            alive = alive & ~newly_done
            if not alive.any():
                break
        out = []
        for i in range(b):
            n = int(lengths[i])
            out.append(CaptionSequence(tuple(int(x) for x in tokens[i, :n]), logps[i, :n].copy()))
        return out

    def score_batch(
        self, net: PolicyNetwork, states: Sequence[DecodingState], token_seqs: Sequence[Sequence[int]]
    ) -> list[np.ndarray]:
        """Teacher-forced per-token log-probs for given sequences.

        Processes the full batch at every position with the same shapes as
        the samplers, so scores of just-sampled sequences match the recorded
        values bit for bit.
        """
        for seq in token_seqs:
            self._check_tokens(seq)
        role, pooled, cond = self._prep(states)
        b = len(states)
        v = self.encoder.vocab.size
        lengths = np.array([len(s) for s in token_seqs], dtype=np.int64)
        if lengths.size and lengths.max() > self.encoder.enc.max_steps:
            raise ValueError("sequence longer than the decoder step cap")
        t_max = int(lengths.max()) if lengths.size else 0
        padded = np.zeros((b, max(t_max, 1)), dtype=np.int64)
        for i, seq in enumerate(token_seqs):
            padded[i, : len(seq)] = list(seq)
        prefix = np.zeros((b, v), dtype=np.float64)
        out = np.zeros((b, max(t_max, 1)), dtype=np.float64)
        rows = np.arange(b)
        for t in range(t_max):
            logp = self._step_logprobs(net, role, pooled, cond, prefix, t)
            out[:, t] = logp[rows, padded[:, t]]
            valid = lengths > t
            prefix[rows[valid], padded[valid, t]] += 1.0
        return [out[i, : lengths[i]].copy() for i in range(b)]

    def score_batch_var(
        self,
        net: PolicyNetwork,
        theta: Var,
        states: Sequence[DecodingState],
        token_seqs: Sequence[Sequence[int]],
    ) -> tuple[Var, np.ndarray]:
        """Differentiable teacher-forced scoring.

        Returns a flat Var of log-probs for the (sequence, position) grid in
        row-major order plus a boolean validity mask of the same length.
        Mirrors score_batch position by position so values agree bitwise.
        """
        for seq in token_seqs:
            self._check_tokens(seq)
        role, pooled, cond = self._prep(states)
        b = len(states)
        v = self.encoder.vocab.size
        lengths = np.array([len(s) for s in token_seqs], dtype=np.int64)
        t_max = int(lengths.max()) if lengths.size else 0
        padded = np.zeros((b, max(t_max, 1)), dtype=np.int64)
        for i, seq in enumerate(token_seqs):
            padded[i, : len(seq)] = list(seq)
        prefix = np.zeros((b, v), dtype=np.float64)
        rows = np.arange(b)
        per_step: list[Var] = []
        for t in range(t_max):
            x = self.encoder.encode_rows(role, pooled, cond, prefix, t)
            logits = net.forward_var(theta, x)
            mask = self.encoder.logit_mask(role, t)
            if mask is not None:
                logits = logits + mask
            logp = logits.log_softmax().gather(padded[:, t])
            per_step.append(logp)
            valid = lengths > t
            prefix[rows[valid], padded[valid, t]] += 1.0
        if not per_step:
            return Var(np.zeros(0)), np.zeros(0, dtype=bool)
        flat = autodiff.concat(per_step)  # position-major: (t0 rows..., t1 rows...)
        valid_mask = np.concatenate([lengths > t for t in range(t_max)])
        return flat, valid_mask


# -- single-state convenience wrappers ---------------------------------------


def forward_logits(p: PolicyNetwork, s: DecodingState, encoder: StateEncoder) -> np.ndarray:
    """Raw logits over the vocabulary for one decoding state."""
    pooled = encoder.pool(s.features)[None, :]
    cond = encoder.cond_matrix([s.cond])
    prefix = np.zeros((1, encoder.vocab.size), dtype=np.float64)
    for tok in s.prefix:
        prefix[0, tok] += 1.0
    t = len(s.prefix)
    if t >= encoder.enc.max_steps:
        raise ValueError("prefix length must stay below the step cap")
    x = encoder.encode_rows(s.role, pooled, cond, prefix, t)
    return p.forward_batch(x)[0]


def sample_sequence(
    p: PolicyNetwork, s0: DecodingState, seed: int, encoder: StateEncoder
) -> CaptionSequence:
    return SequenceModel(encoder).sample_batch(p, [s0], seed)[0]


def greedy_decode(p: PolicyNetwork, s0: DecodingState, encoder: StateEncoder) -> CaptionSequence:
    return SequenceModel(encoder).greedy_batch(p, [s0])[0]


def logprobs_of(
    p: PolicyNetwork, s0: DecodingState, tokens: Sequence[int], encoder: StateEncoder
) -> np.ndarray:
    return SequenceModel(encoder).score_batch(p, [s0], [tokens])[0]


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    net: PolicyNetwork,
    vocab: Vocabulary,
    scene_cfg: SceneConfig,
    enc_cfg: EncoderConfig,
    meta: Optional[dict] = None,
) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch.to_dict(),
        "vocab": vocab.to_dict(),
        "scene": scene_cfg.to_dict(),
        "encoder": enc_cfg.to_dict(),
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        np.savez(f, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), params=net.params)


@dataclass
class CheckpointBundle:
    net: PolicyNetwork
    vocab: Vocabulary
    scene_cfg: SceneConfig
    enc_cfg: EncoderConfig
    meta: dict = field(default_factory=dict)

    def encoder(self) -> StateEncoder:
        return StateEncoder(self.scene_cfg, self.vocab, self.enc_cfg)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"].tobytes()).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        arch = ArchDescriptor.from_dict(header["arch"])
        net = PolicyNetwork(arch, data["params"])
    return CheckpointBundle(
        net,
        Vocabulary.from_dict(header["vocab"]),
        SceneConfig.from_dict(header["scene"]),
        EncoderConfig.from_dict(header["encoder"]),
        header.get("meta", {}),
    )


def default_arch(encoder: StateEncoder, hidden: tuple[int, ...] = (64, 64)) -> ArchDescriptor:
    return ArchDescriptor(encoder.input_dim, hidden, encoder.vocab.size)
