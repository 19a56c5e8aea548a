"""Run a trained model over dataset records and score its captions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import DatasetRecord, Vocabulary
from .hasd import RoutingDecision
from .metrics import MetricReport, stratified_evaluate
from .model import HiSemModel


def predict_records(
    model: HiSemModel,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    routing: str = "pre",
    batch_size: int = 64,
) -> tuple[list[str], list[RoutingDecision]]:
    """Greedy captions plus the routing decision for every record.

    ``routing="gt"`` forces each pair onto the path given by its label.
    """
    if routing not in ("pre", "gt"):
        raise ValueError(f"routing must be 'pre' or 'gt', got {routing!r}")
    captions: list[str] = []
    decisions: list[RoutingDecision] = []
    for s in range(0, len(records), batch_size):
        chunk = records[s : s + batch_size]
        f1 = np.stack([r.f_t1 for r in chunk])
        f2 = np.stack([r.f_t2 for r in chunk])
        override = np.array([r.label for r in chunk]) if routing == "gt" else None
        ids, dec = model.generate(f1, f2, override)
        captions.extend(vocab.decode(seq) for seq in ids)
        decisions.extend(dec)
    return captions, decisions


def evaluate_records(model, records, vocab, routing: str = "pre", batch_size: int = 64):
    """Three-stratum metric reports and the generated captions."""
    preds, decisions = predict_records(model, records, vocab, routing, batch_size)
    reports: dict[str, MetricReport] = stratified_evaluate(
        preds,
        [r.captions for r in records],
        [r.label for r in records],
        [int(d.path) for d in decisions],
    )
    return reports, preds
