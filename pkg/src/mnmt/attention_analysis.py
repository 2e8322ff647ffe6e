"""Norm-based analysis of encoder-decoder attention.

Contribution of source token i at target step t: ||sum_h alpha_{h,t,i} f_h(v_i)||.
Concentration of a contribution row is summarised by its coefficient of
variation (population std / mean), which is scale free and therefore
comparable across models.
"""

from __future__ import annotations

import html
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bias_eval import GenderDetector
from .probing import write_csv
from .toy_corpus import ChallengeSet, ToyGrammar
from .transformer import AttentionTrace

log = logging.getLogger(__name__)

ENTITY_STEP_FLAG = "entity-noun-step"


class DegenerateRowError(ValueError):
    pass


@dataclass(frozen=True)
class ContributionRow:
    step: int
    values: np.ndarray  # (src_len,) contribution norms
    layer: int
    sentence_id: int = 0


@dataclass(frozen=True)
class CvRecord:
    sentence_id: int
    layer: int
    model: str
    step: int | None  # None when the determiner step was not found
    cv: float | None
    flag: str = ""

    @property
    def missing(self) -> bool:
        return self.cv is None


class NormTrace:
    """Stored contribution norms standing in for a full trace: ``norms[layer]`` is (T, S)."""

    def __init__(self, norms: dict[int, np.ndarray]):
        self.norms = {int(k): np.asarray(v, dtype=np.float64) for k, v in norms.items()}

    @property
    def steps(self) -> int:
        return next(iter(self.norms.values())).shape[0] if self.norms else 0

    def contribution_norms(self, layer: int) -> np.ndarray:
        if layer not in self.norms:
            raise IndexError(f"layer {layer} was not stored")
        return self.norms[layer]


def contributions(
    trace: AttentionTrace | NormTrace, layer: int, t: int, sentence_id: int = 0, columns: slice | None = None
) -> ContributionRow:
    """Contribution norms of every source position at step ``t`` of 1-based ``layer``."""
    table = trace.contribution_norms(layer)  # checks the layer
    if not 0 <= t < table.shape[0]:
        raise IndexError(f"step {t} outside 0..{table.shape[0] - 1}")
    norms = table[t]
    if columns is not None:
        norms = norms[columns]
    return ContributionRow(t, norms, layer, sentence_id)


def coefficient_of_variation(row: ContributionRow | Sequence[float] | np.ndarray) -> float:
    c = np.asarray(row.values if isinstance(row, ContributionRow) else row, dtype=np.float64)
    if c.size == 0:
        raise DegenerateRowError("coefficient of variation of an empty row")
    mu = float(c.mean())
    if mu == 0.0:
        raise DegenerateRowError("coefficient of variation undefined for a zero-mean row")
    if c.min() == c.max():
        return 0.0  # mean and std of a constant row carry rounding noise otherwise
    return float(c.std() / mu)


def target_step(
    grammar: ToyGrammar, detector: GenderDetector, words: Sequence[str], owners: Sequence[int], lemma: str
) -> tuple[int | None, str]:
    """Decoding step that emits the gold entity's determiner.

    Languages without determiners use the step emitting the entity noun and
    return a flag saying so.
    """
    flag = "" if grammar.determiners else ENTITY_STEP_FLAG
    noun = None
    for j, w in enumerate(words):
        hit = detector.lookup(w)
        if hit is not None and hit[0] == lemma:
            noun = j
            break
    if noun is None:
        return None, flag
    word = noun
    if grammar.determiners:
        if noun == 0 or words[noun - 1] not in detector.determiners:
            return None, flag
        word = noun - 1
    for step, owner in enumerate(owners):
        if owner == word:
            return step, flag
    return None, flag


def cv_records(
    traces: Sequence[AttentionTrace | NormTrace],
    hypotheses: Sequence[str],
    owners: Sequence[Sequence[int]],
    challenge: ChallengeSet,
    grammar: ToyGrammar,
    layer: int,
    model: str,
    source_offset: int = 0,
) -> list[CvRecord]:
    """One c_v per sentence at its determiner step; columns before ``source_offset``
    (a target-language tag) are left out of the row."""
    detector = GenderDetector(grammar)
    out = []
    for i, (trace, hyp, own) in enumerate(zip(traces, hypotheses, owners)):
        step, flag = target_step(grammar, detector, hyp.split(), own, challenge[i].entity_lemma)
        cv = None
        if step is not None:
            row = contributions(trace, layer, step, i, slice(source_offset, None))
            try:
                cv = coefficient_of_variation(row)
            except DegenerateRowError:
                log.info("sentence %d: zero contribution row at step %d", i, step)
        out.append(CvRecord(i, layer, model, step, cv, flag))
    return out


def cv_series(
    assembly, challenge: ChallengeSet, layer: int, n: int, tgt: str, grammar: ToyGrammar, model: str = "", src: str = "en"
) -> list[CvRecord]:
    """c_v at the determiner step for the first ``n`` challenge sentences."""
    if n < 0 or n > len(challenge):
        raise ValueError(f"n={n} outside 0..{len(challenge)}")
    if n == 0:
        return []
    items = ChallengeSet(challenge.sentences[:n])
    sents = [s.sentence for s in items]
    hyps, traces = assembly.translate_corpus(src, tgt, sents, capture=True)
    tok = assembly.tokenizers[tgt]
    owners = [tok.piece_owners(tr.target_ids) for tr in traces]
    offset = len(assembly.source_prefix(src, tgt))
    return cv_records(traces, hyps, owners, items, grammar, layer, model or assembly.kind, offset)


CV_COLUMNS = ("sentence_id", "layer", "model", "step", "cv", "flag")


def write_cv_csv(path: str | Path, records: Sequence[CvRecord]) -> None:
    rows = [
        {
            "sentence_id": str(r.sentence_id),
            "layer": str(r.layer),
            "model": r.model,
            "step": "" if r.step is None else str(r.step),
            "cv": "" if r.cv is None else f"{r.cv:.6f}",
            "flag": r.flag,
        }
        for r in records
    ]
    write_csv(path, CV_COLUMNS, rows)


def read_cv_csv(path: str | Path) -> list[CvRecord]:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        return [
            CvRecord(
                int(r["sentence_id"]), int(r["layer"]), r["model"],
                int(r["step"]) if r["step"] else None, float(r["cv"]) if r["cv"] else None, r.get("flag", ""),
            )
            for r in csv.DictReader(fh)
        ]


def mean_cv(records: Sequence[CvRecord]) -> float:
    vals = [r.cv for r in records if r.cv is not None]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# SVG output
# ---------------------------------------------------------------------------

PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f")


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="sans-serif" font-size="11">'
    )
    return "\n".join([head, f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x: float, y: float, s: str, anchor: str = "start", rotate: float | None = None, size: int | None = None) -> str:
    rot = f' transform="rotate({rotate:.0f} {x:.1f} {y:.1f})"' if rotate is not None else ""
    fs = f' font-size="{size}"' if size else ""
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}"{fs}{rot}>{html.escape(s)}</text>'


def _write(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write figure {path}: {exc}") from exc


def heatmap_svg(matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str], title: str = "") -> str:
    """Rows are target steps, columns source tokens; shade is value / max(matrix)."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    cell, left, top = 28, 90, 100
    peak = float(m.max()) if m.size and m.max() > 0 else 1.0
    body = [_text(left, 16, title, size=13)] if title else []
    for j, lab in enumerate(col_labels):
        body.append(_text(left + j * cell + cell / 2, top - 6, lab, rotate=-60))
    for i, lab in enumerate(row_labels):
        body.append(_text(left - 6, top + i * cell + cell * 0.65, lab, anchor="end"))
        for j in range(cols):
            shade = m[i, j] / peak
            level = int(round(255 * (1.0 - shade)))
            body.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({level},{level},255)" stroke="#888" stroke-width="0.5" data-row="{i}" data-col="{j}" '
                f'data-value="{m[i, j]:.6g}"/>'
            )
    return _svg(left + cols * cell + 20, top + rows * cell + 20, body)


def export_heatmap(
    trace: AttentionTrace,
    layer: int,
    path: str | Path,
    source_tokens: Sequence[str] | None = None,
    target_tokens: Sequence[str] | None = None,
    title: str = "",
) -> None:
    m = trace.contribution_norms(layer)
    src = list(source_tokens) if source_tokens is not None else [str(i) for i in range(m.shape[1])]
    tgt = list(target_tokens) if target_tokens is not None else [str(t) for t in range(m.shape[0])]
    _write(path, heatmap_svg(m, tgt, src, title or f"layer {layer}"))


def bars_svg(groups: dict[str, Sequence[float | None]], title: str = "", ylabel: str = "") -> str:
    """Grouped bars: one colour per group, one bar per item (missing values leave a gap)."""
    names = list(groups)
    n_items = max((len(v) for v in groups.values()), default=0)
    vals = [v for g in groups.values() for v in g if v is not None and np.isfinite(v)]
    peak = max(vals) if vals else 1.0
    peak = peak if peak > 0 else 1.0
    left, top, plot_h = 50, 40, 200
    bar = 4 if n_items > 20 else 12
    group_w = bar * len(names) + 2
    width = left + max(n_items, 1) * group_w + 150
    body = [_text(left, 18, title, size=13)] if title else []
    body.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + n_items * group_w}" y2="{top + plot_h}" stroke="black"/>')
    body.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    body.append(_text(left - 6, top + 4, f"{peak:.3g}", anchor="end"))
    body.append(_text(left - 6, top + plot_h, "0", anchor="end"))
    if ylabel:
        body.append(_text(14, top + plot_h / 2, ylabel, anchor="middle", rotate=-90))
    for gi, name in enumerate(names):
        colour = PALETTE[gi % len(PALETTE)]
        for k, v in enumerate(groups[name]):
            if v is None or not np.isfinite(v):
                continue
            h = plot_h * v / peak
            x = left + k * group_w + gi * bar
            body.append(
                f'<rect x="{x}" y="{top + plot_h - h:.2f}" width="{bar}" height="{h:.2f}" fill="{colour}" '
                f'data-group="{html.escape(name)}" data-item="{k}" data-value="{v:.6g}"/>'
            )
        ly = top + 14 * gi
        lx = left + n_items * group_w + 20
        body.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{colour}"/>')
        body.append(_text(lx + 14, ly + 9, name))
    return _svg(width, top + plot_h + 30, body)


def export_cv_bars(records: Sequence[CvRecord], path: str | Path, title: str = "") -> None:
    """One bar per sentence, grouped by model (Fig. 5 layout)."""
    models: dict[str, dict[int, float | None]] = {}
    for r in records:
        models.setdefault(r.model, {})[r.sentence_id] = r.cv
    ids = sorted({r.sentence_id for r in records})
    groups = {m: [vals.get(i) for i in ids] for m, vals in models.items()}
    flags = sorted({r.flag for r in records if r.flag})
    if flags:
        title = f"{title} [{', '.join(flags)}]".strip()
    _write(path, bars_svg(groups, title, "c_v"))


def probe_bars_svg(results: dict[str, dict[str, tuple[float, float]]], title: str = "") -> str:
    """Mean probe accuracy with +/- one standard deviation whiskers (Fig. 1 layout).

    ``results[system][word_type] = (mean, std)`` in percent.
    """
    systems = list(results)
    types = sorted({t for r in results.values() for t in r})
    left, top, plot_h, bar = 50, 40, 200, 18
    group_w = bar * len(types) + 16
    width = left + len(systems) * group_w + 150
    body = [_text(left, 18, title, size=13)] if title else []
    body.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + len(systems) * group_w}" y2="{top + plot_h}" stroke="black"/>')
    for tick in (0, 50, 100):
        y = top + plot_h * (1 - tick / 100)
        body.append(_text(left - 6, y + 4, str(tick), anchor="end"))
        body.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + len(systems) * group_w}" y2="{y:.1f}" stroke="#ddd"/>')
    for si, system in enumerate(systems):
        x0 = left + si * group_w + 8
        body.append(_text(x0 + bar * len(types) / 2, top + plot_h + 14, system, anchor="middle"))
        for ti, wt in enumerate(types):
            if wt not in results[system]:
                continue
            mean, std = results[system][wt]
            h = plot_h * mean / 100
            x = x0 + ti * bar
            body.append(
                f'<rect x="{x}" y="{top + plot_h - h:.2f}" width="{bar - 2}" height="{h:.2f}" '
                f'fill="{PALETTE[ti % len(PALETTE)]}" data-system="{html.escape(system)}" data-type="{wt}" data-value="{mean:.4f}"/>'
            )
            cx = x + (bar - 2) / 2
            lo = top + plot_h * (1 - (mean - std) / 100)
            hi = top + plot_h * (1 - (mean + std) / 100)
            body.append(f'<line x1="{cx:.1f}" y1="{lo:.2f}" x2="{cx:.1f}" y2="{hi:.2f}" stroke="black"/>')
    for ti, wt in enumerate(types):
        lx = left + len(systems) * group_w + 20
        ly = top + 14 * ti
        body.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{PALETTE[ti % len(PALETTE)]}"/>')
        body.append(_text(lx + 14, ly + 9, wt))
    return _svg(width, top + plot_h + 30, body)


def export_probe_bars(results: dict[str, dict[str, tuple[float, float]]], path: str | Path, title: str = "") -> None:
    _write(path, probe_bars_svg(results, title))
