"""WinoMT-style gender accuracy (Acc, delta G, delta S) and corpus BLEU."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import DomainError
from .toy_corpus import SOMEONE, ChallengeSentence, ChallengeSet, ToyGrammar
from .transformer import AttentionTrace

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class GenderDetector:
    """Surface form -> (lemma, gender) for one target toy language.

    Masculine-only nouns map to gender ``None``; their gender is read off the
    determiner.
    """

    def __init__(self, grammar: ToyGrammar):
        self.code = grammar.code
        self.nouns: dict[str, tuple[str, str | None]] = {}
        for n in grammar.nouns.values():
            forms = {n.male: "male", n.female: "female"} if n.male != n.female else {n.male: None}
            for form, gender in forms.items():
                prev = self.nouns.get(form)
                if prev is not None and prev != (n.lemma, gender):
                    raise ValueError(f"{grammar.code}: form {form!r} is ambiguous between {prev} and {n.lemma}")
                self.nouns[form] = (n.lemma, gender)
        for gender, form in grammar.someone.items():
            self.nouns[form] = (SOMEONE, gender)
        self.determiners = {form: gender for gender, form in grammar.determiners.items()}

    def lookup(self, word: str) -> tuple[str, str | None] | None:
        return self.nouns.get(word)

    def entity_gender(self, words: Sequence[str], pos: int, window: int = 2) -> str | None:
        """Gender of the entity at word ``pos``: the noun form decides; the nearest
        determiner at most ``window`` words before it (or the aligned word itself)
        breaks masculine-only ties. ``None`` when nothing matches."""
        if not 0 <= pos < len(words):
            return None
        word = words[pos]
        if word in self.determiners:
            return self.determiners[word]
        hit = self.nouns.get(word)
        if hit is None:
            return None
        if hit[1] is not None:
            return hit[1]
        for j in range(pos - 1, max(pos - window, 0) - 1, -1):
            if words[j] in self.determiners:
                return self.determiners[words[j]]
        return None


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def align_entity(trace: AttentionTrace, source_index: int, layer: int = 1, exclude_last: bool = True) -> int:
    """Target step with the largest contribution norm from ``source_index``.

    The final EOS step is skipped when the trace contains one; ties go to the
    earliest step.
    """
    steps = trace.steps
    n_out = len(trace.target_ids)
    usable = n_out if exclude_last and steps > n_out else steps
    if usable == 0:
        raise AlignmentError("cannot align inside an empty translation")
    if not 0 <= source_index < trace.src_len:
        raise AlignmentError(f"source index {source_index} outside 0..{trace.src_len - 1}")
    norms = trace.contribution_norms(layer)[:usable, source_index]
    return int(np.argmax(norms))


Aligner = Callable[[int, ChallengeSentence, list[str]], "int | None"]


def lexicon_aligner(detector: GenderDetector) -> Aligner:
    """Word index of the first target word whose lemma is the gold entity lemma."""

    def align(i: int, item: ChallengeSentence, words: list[str]) -> int | None:
        for j, w in enumerate(words):
            hit = detector.lookup(w)
            if hit is not None and hit[0] == item.entity_lemma:
                return j
        return None

    return align


def trace_aligner(
    traces: Sequence[AttentionTrace],
    owners: Sequence[Sequence[int]],
    source_positions: Sequence[int],
    layer: int = 1,
) -> Aligner:
    """Attention-norm aligner. ``owners[i]`` maps each decoded step of sentence
    ``i`` to its output word (see ``SubwordTokenizer.piece_owners``)."""

    def align(i: int, item: ChallengeSentence, words: list[str]) -> int | None:
        try:
            step = align_entity(traces[i], source_positions[i], layer)
        except AlignmentError:
            return None
        own = owners[i]
        return own[step] if step < len(own) and own[step] >= 0 else None

    return align


# ---------------------------------------------------------------------------
# bias report
# ---------------------------------------------------------------------------


def _pct(correct: int, total: int) -> float:
    return 100.0 * correct / total if total else 0.0


@dataclass
class BiasReport:
    per_gender: dict[str, list[int]] = field(default_factory=lambda: {g: [0, 0] for g in ("male", "female", "neutral")})
    per_stereotype: dict[str, list[int]] = field(default_factory=lambda: {s: [0, 0] for s in ("pro", "anti", "neutral")})
    mispredicted: Counter = field(default_factory=Counter)
    entity_totals: Counter = field(default_factory=Counter)
    failures: list[int] = field(default_factory=list)  # sentences whose entity gender could not be read
    predictions: list[str | None] = field(default_factory=list)

    @property
    def correct(self) -> int:
        return sum(c for c, _ in self.per_gender.values())

    @property
    def total(self) -> int:
        return sum(t for _, t in self.per_gender.values())

    @property
    def accuracy(self) -> float:
        return _pct(self.correct, self.total)

    def acc(self, key: str) -> float:
        table = self.per_gender if key in self.per_gender else self.per_stereotype
        return _pct(*table[key])

    @property
    def delta_g(self) -> float:
        return self.acc("male") - self.acc("female")

    @property
    def delta_s(self) -> float:
        return self.acc("pro") - self.acc("anti")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "delta_g": self.delta_g,
            "delta_s": self.delta_s,
            "correct": self.correct,
            "total": self.total,
            "per_gender": {k: {"correct": c, "total": t} for k, (c, t) in self.per_gender.items()},
            "per_stereotype": {k: {"correct": c, "total": t} for k, (c, t) in self.per_stereotype.items()},
            "mispredicted": dict(sorted(self.mispredicted.items())),
            "entity_totals": dict(sorted(self.entity_totals.items())),
            "failures": list(self.failures),
        }


def score_bias(
    translations: Sequence[str], challenge: ChallengeSet, detector: GenderDetector, aligner: Aligner
) -> BiasReport:
    """Score one translation per challenge sentence. Unreadable entities count as wrong."""
    if len(translations) != len(challenge):
        raise ValueError(f"{len(translations)} translations for {len(challenge)} challenge sentences")
    rep = BiasReport()
    for i, (hyp, item) in enumerate(zip(translations, challenge)):
        words = hyp.split()
        pos = aligner(i, item, words)
        pred = detector.entity_gender(words, pos) if pos is not None else None
        if pred is None:
            rep.failures.append(i)
            log.debug("sentence %d: no gendered entity found in %r", i, hyp)
        ok = pred == item.gold_gender
        rep.predictions.append(pred)
        for table, key in ((rep.per_gender, item.gold_gender), (rep.per_stereotype, item.stereotype)):
            table[key][0] += ok
            table[key][1] += 1
        rep.entity_totals[item.entity_lemma] += 1
        if not ok:
            rep.mispredicted[item.entity_lemma] += 1
    if rep.failures:
        log.info("%d of %d entities could not be read and were scored incorrect", len(rep.failures), len(challenge))
    return rep


def top_errors(report: BiasReport, k: int = 20) -> list[tuple[str, int]]:
    """Entities by misprediction count (descending), ties alphabetical."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(report.mispredicted.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def high_error_entities(report: BiasReport, threshold: float = 0.35) -> list[tuple[str, float]]:
    """Entities mispredicted in at least ``threshold`` of the sentences containing them."""
    out = []
    for lemma, total in report.entity_totals.items():
        rate = report.mispredicted.get(lemma, 0) / total
        if rate >= threshold:
            out.append((lemma, rate))
    return sorted(out, key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class EvalScore:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> EvalScore:
    """Corpus BLEU on whitespace tokens: clipped counts, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise DomainError("BLEU of an empty corpus is undefined")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(match, total)]
    if hyp_len == 0:
        return EvalScore(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        return EvalScore(0.0, precisions, bp, hyp_len, ref_len)
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return EvalScore(score, precisions, bp, hyp_len, ref_len)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("system", "pair", "BLEU", "Acc", "ΔG", "ΔS")


def report_row(system: str, pair: str, bleu_score: float, report: BiasReport) -> dict:
    return {
        "system": system,
        "pair": pair,
        "BLEU": f"{bleu_score:.2f}",
        "Acc": f"{report.accuracy:.2f}",
        "ΔG": f"{report.delta_g:.1f}",
        "ΔS": f"{report.delta_s:.1f}",
    }


def write_report_csv(path: str | Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in REPORT_COLUMNS})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_report_json(path: str | Path, entries: dict) -> None:
    Path(path).write_text(json.dumps(entries, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
