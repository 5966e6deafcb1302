"""Self-consistency evaluation: box -> caption -> box round trips scored by
IoU with a strict 0.5 hit threshold (Pr@0.5), plus grounding accuracy on
labeled captions, report writing, and an audited, resumable client for
driving the same protocol against a remote vision-language endpoint.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import requests

from .geometry import BBox, CoordFormat, dequantize, iou, parse_bbox, quantize
from .policy import (
    ROLE_DESCRIBE,
    ROLE_LOCATE,
    DecodingState,
    PolicyNetwork,
    SequenceModel,
    canonical_caption,
    describer_conditioning,
)
from .refgame import SceneConfig, TrainingUnit
from .rl import locator_tokens_to_box

HIT_THRESHOLD = 0.5  # strict: a hit needs iou strictly above this


@dataclass(frozen=True)
class EvalRecord:
    unit_id: int | str
    input_box: BBox
    caption: str
    predicted_box: Optional[BBox]
    iou: float
    hit: bool
    source: str = "local"
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.predicted_box is None and self.iou != 0.0:
            raise ValueError("absent prediction must score 0")
        if self.hit != (self.iou > HIT_THRESHOLD):
            raise ValueError("hit flag inconsistent with iou")


@dataclass(frozen=True)
class EvalSummary:
    n: int
    pr_at_05: Optional[float]  # percentage; None when n == 0
    mean_iou: Optional[float]
    parse_failure_rate: Optional[float]
    per_source: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "pr_at_05": None if self.pr_at_05 is None else round(self.pr_at_05, 1),
            "mean_iou": None if self.mean_iou is None else round(self.mean_iou, 4),
            "parse_failure_rate": None
            if self.parse_failure_rate is None
            else round(self.parse_failure_rate, 4),
            "per_source": self.per_source,
        }
        return d


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    if not records:
        return EvalSummary(0, None, None, None, {})
    n = len(records)
    hits = sum(r.hit for r in records)
    per_source: dict = {}
    for src in sorted({r.source for r in records}):
        sub = [r for r in records if r.source == src]
        per_source[src] = {
            "n": len(sub),
            "pr_at_05": round(100.0 * sum(r.hit for r in sub) / len(sub), 1),
        }
    return EvalSummary(
        n=n,
        pr_at_05=100.0 * hits / n,
        mean_iou=float(np.mean([r.iou for r in records])),
        parse_failure_rate=float(np.mean([r.predicted_box is None for r in records])),
        per_source=per_source,
    )


# -- local evaluation ----------------------------------------------------------


def self_consistency_eval(
    describer: PolicyNetwork,
    locator: PolicyNetwork,
    units: Sequence[TrainingUnit],
    model: SequenceModel,
    fmt: CoordFormat,
) -> tuple[EvalSummary, list[EvalRecord]]:
    """Greedy box -> caption -> box round trip for every unit."""
    vocab = model.encoder.vocab
    d_states = [
        DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        for u in units
    ]
    captions = model.greedy_batch(describer, d_states)
    l_states = [
        DecodingState(u.features, ROLE_LOCATE, c.tokens) for u, c in zip(units, captions)
    ]
    outs = model.greedy_batch(locator, l_states)
    records = []
    for u, cap, out in zip(units, captions, outs):
        box = locator_tokens_to_box(out.tokens, vocab, fmt)
        value = iou(u.triplet.target, box) if box is not None else 0.0
        records.append(
            EvalRecord(
                unit_id=u.scene.scene_id,
                input_box=u.triplet.target,
                caption=vocab.render(cap.tokens),
                predicted_box=box,
                iou=value,
                hit=value > HIT_THRESHOLD,
            )
        )
    return summarize(records), records


def make_labeled_set(
    units: Sequence[TrainingUnit], model: SequenceModel
) -> list[tuple[TrainingUnit, tuple[int, ...], BBox]]:
    """Labeled grounding data: canonical captions paired with gold boxes."""
    vocab = model.encoder.vocab
    out = []
    for u in units:
        target = next(o for o in u.scene.objects if o.bbox == u.triplet.target)
        cap = canonical_caption(
            target.category, target.color, target.size_class, target.bbox.center, vocab
        )
        out.append((u, cap, target.bbox))
    return out


def rec_accuracy(
    locator: PolicyNetwork,
    labeled: Sequence[tuple[TrainingUnit, Sequence[int], BBox]],
    model: SequenceModel,
    fmt: CoordFormat,
) -> tuple[EvalSummary, list[EvalRecord]]:
    """Grounding accuracy: fraction of labeled captions whose predicted box
    exceeds IoU 0.5 against the gold box."""
    if not labeled:
        raise ValueError("labeled set must be nonempty")
    vocab = model.encoder.vocab
    states = [
        DecodingState(u.features, ROLE_LOCATE, tuple(cap)) for u, cap, _ in labeled
    ]
    outs = model.greedy_batch(locator, states)
    records = []
    for (u, cap, gold), out in zip(labeled, outs):
        box = locator_tokens_to_box(out.tokens, vocab, fmt)
        value = iou(gold, box) if box is not None else 0.0
        records.append(
            EvalRecord(
                unit_id=u.scene.scene_id,
                input_box=gold,
                caption=vocab.render(cap),
                predicted_box=box,
                iou=value,
                hit=value > HIT_THRESHOLD,
            )
        )
    return summarize(records), records


# -- reports -------------------------------------------------------------------


def _record_to_dict(r: EvalRecord) -> dict:
    return {
        "unit_id": r.unit_id,
        "source": r.source,
        "input_box": [round(v, 6) for v in r.input_box.as_tuple()],
        "caption": r.caption,
        "predicted_box": None
        if r.predicted_box is None
        else [round(v, 6) for v in r.predicted_box.as_tuple()],
        "iou": round(r.iou, 4),
        "hit": r.hit,
        "error": r.error,
    }


def write_report(summary: EvalSummary, records: Sequence[EvalRecord], path: str | Path) -> None:
    payload = {"summary": summary.to_dict(), "records": [_record_to_dict(r) for r in records]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# -- remote endpoint evaluation --------------------------------------------------


class RemoteAuthError(RuntimeError):
    """Endpoint rejected our credentials; aborting is the only safe move."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    reg_template: str = "[REG] describe the region {bbox}"
    rec_template: str = "[REC] locate the object described by: {caption}"
    coord_format: CoordFormat = CoordFormat()
    auth_env: Optional[str] = None  # name of an env var holding the token
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_concurrent: int = 4

    def __post_init__(self) -> None:
        if "{bbox}" not in self.reg_template:
            raise ValueError("reg_template must contain a {bbox} slot")
        if "{caption}" not in self.rec_template:
            raise ValueError("rec_template must contain a {caption} slot")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "reg_template": self.reg_template,
            "rec_template": self.rec_template,
            "coord_format": self.coord_format.to_dict(),
            "auth_env": self.auth_env,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "backoff_base": self.backoff_base,
            "max_concurrent": self.max_concurrent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        d = dict(d)
        if "coord_format" in d:
            d["coord_format"] = CoordFormat.from_dict(d["coord_format"])
        return cls(**d)


@dataclass(frozen=True)
class RemoteUnit:
    """One evaluation item for a remote endpoint: an image reference plus a
    gold box in normalized coordinates."""

    unit_id: str
    image_ref: str
    box: BBox
    source: str = "remote"

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "image_ref": self.image_ref,
            "box": list(self.box.as_tuple()),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RemoteUnit":
        return cls(d["unit_id"], d["image_ref"], BBox(*d["box"]), d.get("source", "remote"))


def sample_units(annotations, n: int, seed: int) -> list["RemoteUnit"]:
    """Seeded sampler over an AnnotationSet: at most one box per image."""
    rng = np.random.default_rng(seed)
    images = list(annotations.images)
    order = rng.permutation(len(images))
    units: list[RemoteUnit] = []
    for idx in order:
        if len(units) >= n:
            break
        img = images[idx]
        if not img.boxes:
            continue
        _, px_box = img.boxes[rng.integers(len(img.boxes))]
        box = BBox(
            px_box.x_min / img.width,
            px_box.y_min / img.height,
            px_box.x_max / img.width,
            px_box.y_max / img.height,
        )
        units.append(RemoteUnit(str(img.image_id), img.image_ref or str(img.image_id), box))
    return units


class AuditLog:
    """Append-only JSONL log of every request/response plus per-unit scores;
    the scores are what resume reads back."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def completed_units(self) -> dict[str, dict]:
        done = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if rec.get("kind") == "score":
                        done[rec["unit_id"]] = rec
        return done

    def append(self, record: dict) -> None:
        record = dict(record)
        record.setdefault("ts", time.time())
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
                f.flush()
                os.fsync(f.fileno())


def _auth_headers(cfg: EndpointConfig) -> dict:
    if cfg.auth_env:
        token = os.environ.get(cfg.auth_env)
        if token:
            return {"Authorization": f"Bearer {token}"}
    return {}


def _call_endpoint(
    cfg: EndpointConfig,
    prompt: str,
    image_ref: str,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One chat-style request with deterministic exponential backoff.

    Raises RemoteAuthError on 401/403 and RuntimeError after the retry
    budget is exhausted.
    """
    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt > 0:
            sleep(cfg.backoff_base * (2 ** (attempt - 1)))
        try:
            resp = requests.post(
                cfg.base_url,
                json={"prompt": prompt, "image": image_ref},
                headers=_auth_headers(cfg),
                timeout=cfg.timeout,
            )
        except requests.RequestException as exc:
            last_error = exc
            continue
        if resp.status_code in (401, 403):
            raise RemoteAuthError(f"endpoint returned {resp.status_code}")
        if resp.status_code == 429 or resp.status_code >= 500:
            last_error = RuntimeError(f"endpoint returned {resp.status_code}")
            continue
        if resp.status_code != 200:
            raise RuntimeError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
        return resp.json()["text"]
    raise RuntimeError(f"request failed after {cfg.max_retries + 1} attempts: {last_error}")


def _eval_one_remote(cfg: EndpointConfig, unit: RemoteUnit, audit: AuditLog) -> EvalRecord:
    fmt = cfg.coord_format
    bbox_text = fmt.template.format(
        **dict(
            zip(
                ("x1", "y1", "x2", "y2"),
                quantize(unit.box, fmt.range_max).as_tuple(),
            )
        )
    )
    try:
        reg_prompt = cfg.reg_template.format(bbox=bbox_text)
        caption = _call_endpoint(cfg, reg_prompt, unit.image_ref)
        audit.append(
            {"kind": "request", "unit_id": unit.unit_id, "leg": "reg", "prompt": reg_prompt, "response": caption}
        )
        rec_prompt = cfg.rec_template.format(caption=caption)
        answer = _call_endpoint(cfg, rec_prompt, unit.image_ref)
        audit.append(
            {"kind": "request", "unit_id": unit.unit_id, "leg": "rec", "prompt": rec_prompt, "response": answer}
        )
    except RemoteAuthError:
        raise
    except RuntimeError as exc:
        record = EvalRecord(
            unit_id=unit.unit_id,
            input_box=unit.box,
            caption="",
            predicted_box=None,
            iou=0.0,
            hit=False,
            source=unit.source,
            error=str(exc),
        )
        audit.append(_score_record(record))
        return record

    q = parse_bbox(answer, fmt)
    box = dequantize(q, fmt.range_max) if q is not None else None
    value = iou(unit.box, box) if box is not None else 0.0
    record = EvalRecord(
        unit_id=unit.unit_id,
        input_box=unit.box,
        caption=caption,
        predicted_box=box,
        iou=value,
        hit=value > HIT_THRESHOLD,
        source=unit.source,
    )
    audit.append(_score_record(record))
    return record


def _score_record(r: EvalRecord) -> dict:
    return {
        "kind": "score",
        "unit_id": r.unit_id,
        "caption": r.caption,
        "predicted_box": None if r.predicted_box is None else list(r.predicted_box.as_tuple()),
        "input_box": list(r.input_box.as_tuple()),
        "iou": r.iou,
        "hit": r.hit,
        "source": r.source,
        "error": r.error,
    }


def _record_from_score(rec: dict) -> EvalRecord:
    return EvalRecord(
        unit_id=rec["unit_id"],
        input_box=BBox(*rec["input_box"]),
        caption=rec.get("caption", ""),
        predicted_box=None if rec.get("predicted_box") is None else BBox(*rec["predicted_box"]),
        iou=rec["iou"],
        hit=rec["hit"],
        source=rec.get("source", "remote"),
        error=rec.get("error"),
    )


def remote_cycle_eval(
    cfg: EndpointConfig,
    units: Sequence[RemoteUnit],
    audit_path: str | Path,
    resume: bool = False,
) -> tuple[EvalSummary, list[EvalRecord]]:
    """Run the REG -> REC round trip against a remote endpoint.

    Every request/response and every unit score lands in the audit log;
    with resume=True, units that already have a score record are not
    re-requested. Transport failures degrade to zero-IoU records with an
    error tag; authentication failures abort the run.
    """
    audit = AuditLog(audit_path)
    done = audit.completed_units() if resume else {}
    by_id: dict[str, EvalRecord] = {uid: _record_from_score(rec) for uid, rec in done.items()}
    todo = [u for u in units if u.unit_id not in by_id]

    if todo:
        workers = min(cfg.max_concurrent, len(todo))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for record in pool.map(lambda u: _eval_one_remote(cfg, u, audit), todo):
                by_id[str(record.unit_id)] = record

    records = [by_id[u.unit_id] for u in units if u.unit_id in by_id]
    return summarize(records), records
