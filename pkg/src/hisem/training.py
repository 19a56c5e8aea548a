"""Curriculum training: warm-up with the routing branch detached, cosine
ramp-up of the routing loss afterwards, Adam updates.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import DatasetRecord, Vocabulary
from .decoder import CaptionBatch
from .model import HiSemModel
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class CurriculumConfig:
    epochs: int = 50
    warmup_epochs: int | None = None  # None -> 20% of epochs
    cls_weight: float = 0.8
    lr: float = 1e-4
    batch_size: int = 64
    clip_norm: float | None = 5.0
    seed: int = 0
    # path used to dispatch pairs during training: "gt" (label) or "pre" (router)
    train_routing: str = "gt"
    val_every: int = 10

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = int(round(0.2 * self.epochs))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if self.cls_weight < 0:
            raise ValueError("cls_weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.train_routing not in ("gt", "pre"):
            raise ValueError(f"train_routing must be 'gt' or 'pre', got {self.train_routing!r}")


def ramp_factor(epoch: float, cfg: CurriculumConfig) -> float:
    """0 during warm-up, then a half-cosine rise reaching 1 at ``epochs``."""
    total, warm = cfg.epochs, cfg.warmup_epochs
    if epoch > total:
        raise ValueError(f"epoch {epoch} is past the schedule end {total}")
    if epoch < warm:
        return 0.0
    return 0.5 * (1.0 - math.cos(math.pi * (epoch - warm) / (total - warm)))


def total_loss(l_cap: Tensor, l_cls: Tensor, epoch: int, cfg: CurriculumConfig, warmup_detach: bool = True) -> Tensor:
    """``l_cap + cls_weight * ramp(epoch) * l_cls``; the routing term is detached during warm-up."""
    if warmup_detach and epoch < cfg.warmup_epochs:
        l_cls = l_cls.detach()
    return l_cap + T.as_tensor(l_cls) * (cfg.cls_weight * ramp_factor(epoch, cfg))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            grads[name] = g
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                grads = {k: g * factor for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["optim.step"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"optim.m.{k}"])
            self.v[k] = np.array(state[f"optim.v.{k}"])


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    best_val_s_star_m: float | None = None

    COLUMNS = ("epoch", "caption_loss", "routing_loss", "alpha", "router_accuracy")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS + ("val_s_star_m",), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "best_val_s_star_m": self.best_val_s_star_m}, indent=2)


def encode_captions(records: Sequence[DatasetRecord], vocab: Vocabulary, max_len: int) -> CaptionBatch:
    """Training targets: the first reference caption of each record."""
    return CaptionBatch.from_sequences([vocab.encode(r.captions[0]) for r in records], max_len=None)


def _stack(records, attr):
    return np.stack([getattr(r, attr) for r in records])


def model_state(model: HiSemModel) -> dict[str, np.ndarray]:
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def load_model_state(model: HiSemModel, state: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})


def train_loop(
    model: HiSemModel,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    cfg: CurriculumConfig,
    out_dir=None,
    val_records: Sequence[DatasetRecord] | None = None,
    resume: dict[str, np.ndarray] | None = None,
    stop_epoch: int | None = None,
) -> TrainReport:
    """Train ``model`` in place; write checkpoints to ``out_dir`` when given.

    Each epoch shuffles with a generator seeded by ``(seed, epoch)``, so a run
    resumed from a checkpoint follows the uninterrupted trajectory exactly.
    ``stop_epoch`` ends the run early (the schedule still spans ``cfg.epochs``)
    and the checkpoint then records where to resume.
    """
    if not records:
        raise ValueError("training set is empty")
    params = dict(model.named_parameters())
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    report = TrainReport()
    start = 0
    if resume is not None:
        load_model_state(model, resume)
        opt.load_state(resume)
        start = int(resume["train.epoch"][0])
        report.rows = json.loads(bytes(resume["train.report"].astype(np.uint8)).decode()) if "train.report" in resume else []
        if "train.best" in resume:
            report.best_val_s_star_m = float(resume["train.best"][0])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    f1_all, f2_all = _stack(records, "f_t1"), _stack(records, "f_t2")
    labels_all = np.array([r.label for r in records])
    caps_all = encode_captions(records, vocab, model.cfg.max_len)
    n = len(records)

    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start, end):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        alpha = ramp_factor(epoch, cfg)
        cap_sum = cls_sum = 0.0
        correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            lens = caps_all.lengths[idx]
            caps = CaptionBatch(caps_all.ids[idx][:, : lens.max()], lens)
            override = labels_all[idx] if cfg.train_routing == "gt" else None
            opt.zero_grad()
            l_cap, l_cls, res = model.losses(
                f1_all[idx], f2_all[idx], caps, labels_all[idx], override, detach_route_logits=epoch < cfg.warmup_epochs
            )
            loss = total_loss(l_cap, l_cls, epoch, cfg)
            loss.backward()
            opt.step()
            cap_sum += l_cap.item() * idx.size
            cls_sum += l_cls.item() * idx.size
            predicted = np.argmax(res.route_logits.data, axis=-1)
            correct += int(np.sum(predicted == labels_all[idx]))
        row = {
            "epoch": epoch,
            "caption_loss": cap_sum / n,
            "routing_loss": cls_sum / n,
            "alpha": alpha,
            "router_accuracy": 100.0 * correct / n,
        }
        if val_records and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            from .evaluation import evaluate_records

            reports, _ = evaluate_records(model, val_records, vocab, routing="pre")
            score = reports["all"].s_star_m
            row["val_s_star_m"] = score
            if out_dir is not None and (report.best_val_s_star_m is None or score > report.best_val_s_star_m):
                report.best_val_s_star_m = score
                checkpoint.save(out_dir / "checkpoint_best.hsem", _full_state(model, opt, epoch + 1, report))
        report.rows.append(row)
        report.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d cap %.4f cls %.4f alpha %.3f acc %.1f", epoch, row["caption_loss"], row["routing_loss"],
                 alpha, row["router_accuracy"])

    if out_dir is not None:
        checkpoint.save(out_dir / "checkpoint.hsem", _full_state(model, opt, end, report))
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "timings.json").write_text(json.dumps({"epoch_seconds": report.wall_times}))
    return report


def _full_state(model: HiSemModel, opt: Adam, epochs_done: int, report: TrainReport) -> dict[str, np.ndarray]:
    state = model_state(model)
    state.update(opt.state())
    state["train.epoch"] = np.array([float(epochs_done)])
    # report rows ride along as utf-8 bytes so a resumed run can keep appending
    state["train.report"] = np.frombuffer(json.dumps(report.rows).encode(), dtype=np.uint8).astype(np.float64)
    if report.best_val_s_star_m is not None:
        state["train.best"] = np.array([report.best_val_s_star_m])
    return state


__all__ = [
    "Adam",
    "CurriculumConfig",
    "TrainReport",
    "load_model_state",
    "model_state",
    "ramp_factor",
    "total_loss",
    "train_loop",
]
