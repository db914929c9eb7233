"""Split-level evaluation and the results-table report."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import ANSWERS, SplitManifest, World
from .metrics import RankedList, grounding_queries, recall_at_k, vqa_accuracy
from .model import MultiTaskModel

KS = (1, 5, 10)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def icr_score_matrix(model: MultiTaskModel, worlds: Sequence[World], chunk: int = 1024) -> np.ndarray:
    """``scores[i, j]`` = relevance of caption ``j`` to image ``i``."""
    n = len(worlds)
    with tn.no_grad():
        S0, I0, sb, ib = model.featurize([w.caption for w in worlds], worlds)
        img, cap = np.divmod(np.arange(n * n), n)
        out = np.empty(n * n)
        for sl in _chunks(n * n, chunk):
            out[sl] = model.icr_pair_scores(S0, I0, sb.mask, ib.mask, cap[sl], img[sl]).data
    return out.reshape(n, n)


def evaluate_icr(model: MultiTaskModel, worlds: Sequence[World], ks=KS) -> dict:
    """Image annotation (image queries captions) and image retrieval (caption queries images).

    Captions with identical text count as correct for each other's image.
    """
    scores = icr_score_matrix(model, worlds)
    text = [" ".join(w.caption) for w in worlds]
    same = np.array([[a == b for b in text] for a in text])
    annotation = [RankedList.from_scores(scores[i], np.flatnonzero(same[i])) for i in range(len(worlds))]
    retrieval = [RankedList.from_scores(scores[:, j], np.flatnonzero(same[:, j])) for j in range(len(worlds))]
    return {
        "annotation": {f"R@{k}": recall_at_k(annotation, k) for k in ks},
        "retrieval": {f"R@{k}": recall_at_k(retrieval, k) for k in ks},
    }


def vqa_predictions(model: MultiTaskModel, worlds: Sequence[World], batch: int = 256) -> np.ndarray:
    preds = []
    with tn.no_grad():
        for sl in _chunks(len(worlds), batch):
            scores = model.vqa_forward(worlds[sl]).data
            preds.append(np.argmax(scores, axis=1))  # first maximum = lowest index
    return np.concatenate(preds)


def evaluate_vqa(model: MultiTaskModel, worlds: Sequence[World]) -> dict:
    preds = vqa_predictions(model, worlds)
    acc = np.mean([vqa_accuracy(int(p), w.answer_annotations) for p, w in zip(preds, worlds)])
    return {"acc": float(acc)}


def grounding_scores(model: MultiTaskModel, worlds: Sequence[World], batch: int = 256) -> list[np.ndarray]:
    """Per world, the ``(H, T)`` phrase-region probabilities without padding."""
    out = []
    with tn.no_grad():
        for sl in _chunks(len(worlds), batch):
            part = worlds[sl]
            scores = model.vg_forward(part)[0].data
            for b, w in enumerate(part):
                out.append(scores[b, : len(w.phrases), : w.num_regions])
    return out


def evaluate_vg(model: MultiTaskModel, worlds: Sequence[World], ks=KS) -> dict:
    queries = []
    for w, s in zip(worlds, grounding_scores(model, worlds)):
        gold = [w.objects[o].box for o in w.phrase_objects]
        queries += grounding_queries(s, w.region_boxes, gold)
    return {f"R@{k}": recall_at_k(queries, k) for k in ks}


EVALUATORS = {"ICR": evaluate_icr, "VQA": evaluate_vqa, "VG": evaluate_vg}


def evaluate(model: MultiTaskModel, worlds: Sequence[World], tasks=("VQA", "ICR", "VG"),
             manifest: SplitManifest | None = None, split: str | None = None) -> dict:
    """Metrics for each task; refuses (task, split) pairs the manifest's regime forbids."""
    if manifest is not None and split is not None:
        for t in tasks:
            manifest.assert_can_evaluate(t, split)
    report: dict = {"split": split, "num_worlds": len(worlds)}
    for t in tasks:
        report[t] = EVALUATORS[t](model, worlds)
    return report


def format_report(report: dict, label: str = "model") -> str:
    """Results table: VQA Acc | ICR R@1 (annotation over retrieval) | VG R@1, then R@5/R@10 lines."""

    def pct(x):
        return f"{100 * x:6.2f}" if x is not None else "     -"

    vqa = report.get("VQA", {}).get("acc")
    icr = report.get("ICR")
    vg = report.get("VG")
    lines = [
        f"{'Task':<16}| VQA (Acc) | ICR (R@1) | VG (R@1) |",
        f"{label:<16}|   {pct(vqa)}  |   {pct(icr and icr['annotation']['R@1'])}  |  {pct(vg and vg['R@1'])}  |",
        f"{'':<16}|           |   {pct(icr and icr['retrieval']['R@1'])}  |          |",
    ]
    extra = []
    if icr:
        for d in ("annotation", "retrieval"):
            extra.append(f"ICR {d}: " + " ".join(f"{k}={pct(v).strip()}" for k, v in icr[d].items()))
    if vg:
        extra.append("VG: " + " ".join(f"{k}={pct(v).strip()}" for k, v in vg.items()))
    return "\n".join(lines + extra)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


def answer_name(i: int) -> str:
    return ANSWERS[i]
