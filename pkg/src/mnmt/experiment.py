"""Workspace pipeline: corpus -> BPE -> training -> translation -> scoring -> figures.

Every stage reads and writes plain files under one workspace directory:

    manifest.json
    corpus/<a>-<b>.{train,valid,test}.<lang>
    challenge/en.tsv
    bpe/<system>/<unit>/{bpe,vocab}.txt
    ckpt/<system>/...            (bilingual: ckpt/bilingual/<a>-<b>/...)
    translations/<system>/<a>-<b>.{challenge,test}.txt, .align.tsv, .contrib.json
    eval/report.{json,csv}
    probe/probe.csv, probe/control.csv, probe/summary.json, probe/errors/*.csv
    attn/cv.csv
    report/table1.csv, report/fig1_probe.svg, report/fig4_<system>.svg, report/fig5_<pair>_layer<k>.svg
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention_analysis as aa
from .assemblies import ConfigError, LanguageSet, ModelAssembly, TrainSchedule, _sub_seed, build_tokenizers, train
from .bias_eval import (
    GenderDetector,
    align_entity,
    bleu,
    high_error_entities,
    lexicon_aligner,
    report_row,
    score_bias,
    top_errors,
    write_report_csv,
    write_report_json,
    AlignmentError,
)
from .probing import PROBE_COLUMNS, ProbeProtocol, probe_features, probe_rows, run_probe_features, write_csv, write_probe_errors
from .tokenizer import BpeModel, SubwordTokenizer, Vocabulary
from .toy_corpus import (
    REPLICA,
    ChallengeSet,
    gen_challenge,
    gen_parallel,
    is_pronoun_adjacent,
    load_grammars,
    read_lines,
    write_lines,
)
from .transformer import PRESETS, AttentionTrace

log = logging.getLogger(__name__)

SYSTEM_KINDS = ("bilingual", "shared", "lang-spec")
SPLITS = ("train", "valid", "test")


class MissingInputError(FileNotFoundError):
    """An artifact a stage depends on has not been produced yet."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    train: int = 5000  # sentence pairs per language pair
    valid: int = 100
    test: int = 200
    skew: float = 0.7


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    warmup: int = 200
    batch_tokens: int = 400
    updates_per_direction: int = 500  # multilingual systems: total = this x directions
    bilingual_updates: int = 800
    patience: int = 5
    eval_every: int = 200


@dataclass(frozen=True)
class ProbeSpec:
    runs: int = 10
    train_size: int = 1000
    C: float = 1.0
    control: tuple[str, ...] = ("shared", "lang-spec")  # systems that also get a shuffled-label run


@dataclass(frozen=True)
class AnalysisSpec:
    layers: tuple[int, ...] = (1, 2)
    sentences: int = 100
    align_layer: int = 1
    heatmap_pair: str = "en-de"


@dataclass(frozen=True)
class ExperimentManifest:
    name: str = "desk"
    seed: int = 0
    preset: str = "desk"
    source: str = "en"
    languages: tuple[str, ...] = ("en", "de", "es", "fr")
    added_language: str = "ru"  # the second language set adds <source>-<added_language>
    language_sets: tuple[str, ...] = ("base", "ru")
    pairs: str = "en-centric"  # or "all": every ordered pair of the base languages
    systems: tuple[str, ...] = SYSTEM_KINDS
    bpe_merges: int = 1000
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}")
        unknown = [s for s in self.systems if s not in SYSTEM_KINDS]
        if unknown or len(set(self.systems)) != len(self.systems):
            raise ConfigError(f"systems must be distinct members of {SYSTEM_KINDS}, got {list(self.systems)}")
        for ls in self.language_sets:
            if ls not in ("base", "ru"):
                raise ConfigError(f"unknown language set {ls!r}")
        if self.pairs not in ("en-centric", "all"):
            raise ConfigError(f"pairs must be 'en-centric' or 'all', got {self.pairs!r}")
        if self.source not in self.languages:
            raise ConfigError(f"source language {self.source!r} missing from {list(self.languages)}")
        if self.added_language in self.languages:
            raise ConfigError("the added language must not already be a base language")
        if any(k not in (1, 2) for k in self.analysis.layers):
            raise ConfigError("analysis layers must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        subs = {"corpus": CorpusSpec, "train": TrainSpec, "probe": ProbeSpec, "analysis": AnalysisSpec}
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown manifest keys: {sorted(extra)}")
        kw = {}
        for k, v in d.items():
            if k in subs:
                sub_known = {f.name for f in fields(subs[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in manifest section {k!r}: {sorted(bad)}")
                kw[k] = subs[k](**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            else:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"manifest not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def default_manifest(preset: str = "desk", seed: int = 0) -> ExperimentManifest:
    if preset == "paper":
        return ExperimentManifest(
            name="paper",
            seed=seed,
            preset="paper",
            pairs="all",
            bpe_merges=32000,
            corpus=CorpusSpec(train=2_000_000, valid=3000, test=3000),
            train=TrainSpec(lr=1e-3, warmup=4000, batch_tokens=32000, updates_per_direction=200_000 // 12,
                            bilingual_updates=200_000, patience=10, eval_every=2000),
        )
    return ExperimentManifest(seed=seed, preset=preset)


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    name: str  # directory name under ckpt/, translations/, ...
    kind: str
    langset: LanguageSet
    updates: int
    unit: str = ""  # bilingual pair directory, e.g. "en-de"

    @property
    def label(self) -> str:
        """Row label in reports: bilingual systems are per pair."""
        return f"{self.name}_{self.unit}" if self.unit else self.name

    @property
    def ckpt_key(self) -> str:
        return f"{self.name}/{self.unit}" if self.unit else self.name


def language_set(m: ExperimentManifest, which: str) -> LanguageSet:
    base = list(m.languages)
    if m.pairs == "all":
        pairs = [(a, b) for a in base for b in base if a != b]
    else:
        pairs = [p for x in base if x != m.source for p in ((m.source, x), (x, m.source))]
    langs = base
    if which == "ru":
        x = m.added_language
        langs = base + [x]
        pairs += [(m.source, x), (x, m.source)]
    return LanguageSet(tuple(langs), tuple(pairs))


def targets(m: ExperimentManifest, which: str = "ru") -> list[str]:
    """Languages translated from the source and scored."""
    langs = [x for x in m.languages if x != m.source]
    if which == "ru" and "ru" in m.language_sets:
        langs.append(m.added_language)
    return langs


def systems(m: ExperimentManifest) -> list[SystemSpec]:
    out: list[SystemSpec] = []
    if "bilingual" in m.systems:
        for x in targets(m):
            pair = (m.source, x)
            out.append(SystemSpec("bilingual", "bilingual", LanguageSet(pair, (pair,)), m.train.bilingual_updates, f"{m.source}-{x}"))
    for kind in ("shared", "lang-spec"):
        if kind not in m.systems:
            continue
        for which in m.language_sets:
            ls = language_set(m, which)
            name = kind if which == "base" else f"{kind}_ru"
            out.append(SystemSpec(name, kind, ls, m.train.updates_per_direction * len(ls.pairs)))
    return out


def corpus_pairs(m: ExperimentManifest) -> list[tuple[str, str]]:
    """Unordered language pairs that need parallel data (stored once, used both ways)."""
    seen: list[tuple[str, str]] = []
    for which in m.language_sets:
        for a, b in language_set(m, which).pairs:
            key = (a, b) if (b, a) not in seen else (b, a)
            if key not in seen:
                seen.append(key)
    return seen


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self, root: str | Path, manifest: ExperimentManifest):
        self.root = Path(root)
        self.m = manifest
        self._grammars = None

    @classmethod
    def open(cls, root: str | Path, manifest: ExperimentManifest | None = None, seed: int | None = None) -> "Workspace":
        """Use ``manifest`` if given, else the workspace copy, else the desk default."""
        root = Path(root)
        if manifest is None:
            stored = root / "manifest.json"
            manifest = ExperimentManifest.load(stored) if stored.is_file() else default_manifest()
        if seed is not None:
            manifest = replace(manifest, seed=seed)
        return cls(root, manifest)

    @property
    def grammars(self):
        if self._grammars is None:
            self._grammars = load_grammars(sorted(set(self.m.languages) | {self.m.added_language}))
        return self._grammars

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise MissingInputError(f"missing input {path} (run the earlier pipeline stage first)")
        return path

    def corpus_file(self, a: str, b: str, split: str, lang: str) -> Path:
        return self.path("corpus", f"{a}-{b}.{split}.{lang}")

    def read_corpus(self, split: str, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], tuple[list[str], list[str]]]:
        stored = corpus_pairs(self.m)
        out = {}
        for s, t in pairs:
            a, b = (s, t) if (s, t) in stored else (t, s)
            side = {a: read_lines(self.need(self.corpus_file(a, b, split, a))), b: read_lines(self.need(self.corpus_file(a, b, split, b)))}
            out[(s, t)] = (side[s], side[t])
        return out

    def challenge(self) -> ChallengeSet:
        return ChallengeSet.load(self.need(self.path("challenge", f"{self.m.source}.tsv")))

    def translation_file(self, spec: SystemSpec, tgt: str, what: str) -> Path:
        return self.path("translations", spec.name, f"{self.m.source}-{tgt}.{what}")

    def load_system(self, spec: SystemSpec) -> ModelAssembly:
        root = self.path("ckpt", spec.name)
        path = root / spec.unit if spec.unit else root
        self.need(path / "assembly.json")
        return ModelAssembly.load(path)

    def system_targets(self, spec: SystemSpec) -> list[str]:
        return [t for s, t in spec.langset.pairs if s == self.m.source]


def _pool(jobs: int):
    return concurrent.futures.ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def _run_all(fn, items: list, jobs: int) -> list:
    """Apply ``fn`` to every item, in a bounded process pool when jobs > 1; results in input order."""
    pool = _pool(min(jobs, len(items)))
    if pool is None:
        return [fn(it) for it in items]
    with pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def gen_corpus(ws: Workspace) -> None:
    m = ws.m
    ws.m.save(ws.path("manifest.json"))
    sizes = {"train": m.corpus.train, "valid": m.corpus.valid, "test": m.corpus.test}
    for a, b in corpus_pairs(m):
        for split in SPLITS:
            seed = _sub_seed(m.seed, f"corpus.{a}-{b}.{split}")
            src, tgt = gen_parallel(ws.grammars, (a, b), sizes[split], seed, m.corpus.skew)
            write_lines(ws.corpus_file(a, b, split, a), src)
            write_lines(ws.corpus_file(a, b, split, b), tgt)
        log.info("corpus %s-%s: %d/%d/%d sentence pairs", a, b, sizes["train"], sizes["valid"], sizes["test"])
    cs = gen_challenge(ws.grammars[m.source], REPLICA, _sub_seed(m.seed, "challenge"))
    ws.path("challenge").mkdir(parents=True, exist_ok=True)
    cs.save(ws.path("challenge", f"{m.source}.tsv"))
    log.info("challenge set: %d sentences", len(cs))


def _tokenizer_dirs(spec: SystemSpec, root: Path) -> dict[str, Path]:
    if spec.kind == "lang-spec":
        return {lang: root / lang for lang in spec.langset.languages}
    unit = spec.unit or "shared"
    return {lang: root / unit for lang in spec.langset.languages}


def learn_bpe(ws: Workspace) -> None:
    for spec in systems(ws.m):
        corpora = ws.read_corpus("train", spec.langset.pairs)
        toks = build_tokenizers(spec.kind, spec.langset, corpora, ws.m.bpe_merges)
        for lang, d in _tokenizer_dirs(spec, ws.path("bpe", spec.name)).items():
            d.mkdir(parents=True, exist_ok=True)
            toks[lang].bpe.save(d / "bpe.txt")
            toks[lang].vocab.save(d / "vocab.txt")
        log.info("bpe %s: vocab sizes %s", spec.label, {k: len(v.vocab) for k, v in sorted(toks.items())})


def _load_tokenizers(ws: Workspace, spec: SystemSpec) -> dict[str, SubwordTokenizer]:
    cache: dict[Path, SubwordTokenizer] = {}
    out = {}
    for lang, d in _tokenizer_dirs(spec, ws.path("bpe", spec.name)).items():
        if d not in cache:
            cache[d] = SubwordTokenizer(BpeModel.load(ws.need(d / "bpe.txt")), Vocabulary.load(ws.need(d / "vocab.txt")))
        out[lang] = cache[d]
    return out


def _train_one(args: tuple[Path, dict, str]) -> dict:
    root, manifest, key = args
    ws = Workspace(root, ExperimentManifest.from_dict(manifest))
    spec = next(s for s in systems(ws.m) if s.ckpt_key == key)
    m = ws.m
    toks = _load_tokenizers(ws, spec)
    asm = ModelAssembly(spec.kind, spec.langset, PRESETS[m.preset], toks, seed=_sub_seed(m.seed, f"init.{spec.ckpt_key}"))
    sched = TrainSchedule(
        lr=m.train.lr,
        warmup=m.train.warmup,
        batch_tokens=m.train.batch_tokens,
        max_updates=spec.updates,
        patience=m.train.patience,
        eval_every=m.train.eval_every,
        seed=_sub_seed(m.seed, f"train.{spec.ckpt_key}"),
    )
    corpora = ws.read_corpus("train", spec.langset.pairs)
    valid = ws.read_corpus("valid", spec.langset.pairs)
    result = train(asm, corpora, sched, valid, log_every=max(1, m.train.eval_every))
    asm.save(ws.path("ckpt", spec.name))
    info = {"system": spec.label, "parameters": asm.num_parameters(), **result.to_dict()}
    ckpt_dir = ws.path("ckpt", spec.name, spec.unit) if spec.unit else ws.path("ckpt", spec.name)
    _write_json(ckpt_dir / "train.json", info)
    log.info("trained %s: best valid %.4f at step %d", spec.label, result.best_valid, result.best_step)
    return info


def train_systems(ws: Workspace, only: str | None = None, jobs: int = 1) -> list[dict]:
    specs = [s for s in systems(ws.m) if only is None or s.kind == only or s.name == only]
    if not specs:
        raise ConfigError(f"no system matches {only!r} in this manifest")
    # longest first keeps a worker pool busy
    order = sorted(specs, key=lambda s: -s.updates)
    args = [(ws.root, ws.m.to_dict(), s.ckpt_key) for s in order]
    return _run_all(_train_one, args, jobs)


def _align_rows(
    asm: ModelAssembly, src: str, tgt: str, items: Sequence, traces: Sequence[AttentionTrace], layer: int, offset: int = 0
) -> list[str]:
    """One ``sentence_id, source_position, step, word`` row per sentence; -1 where alignment fails."""
    tok = asm.tokenizers[tgt]
    rows = []
    for i, (item, tr) in enumerate(zip(items, traces)):
        pos = asm.source_position(src, tgt, item.sentence, item.entity_index)
        try:
            step = align_entity(tr, pos, layer)
            owners = tok.piece_owners(tr.target_ids)
            word = owners[step] if step < len(owners) else -1
        except AlignmentError:
            step, word = -1, -1
        rows.append(f"{i + offset}\t{pos}\t{step}\t{word}")
    return rows


def _contrib_json(asm: ModelAssembly, src: str, tgt: str, traces: Sequence[AttentionTrace], layers: Sequence[int]) -> dict:
    src_tok, tgt_tok = asm.tokenizers[src], asm.tokenizers[tgt]
    out = []
    for i, tr in enumerate(traces):
        out.append({
            "id": i,
            "source": src_tok.vocab.decode(tr.source_ids),
            "target": tgt_tok.vocab.decode(tr.target_ids) + ["</s>"] * (tr.steps - len(tr.target_ids)),
            "owners": tgt_tok.piece_owners(tr.target_ids),
            "norms": {str(k): tr.contribution_norms(k).tolist() for k in layers},
        })
    return {"source_offset": len(asm.source_prefix(src, tgt)), "sentences": out}


def translate(ws: Workspace, only: str | None = None, batch_size: int = 256) -> None:
    m = ws.m
    challenge = ws.challenge()
    sents = [s.sentence for s in challenge]
    n_keep = min(m.analysis.sentences, len(challenge))
    for spec in systems(ws.m):
        if only is not None and spec.kind != only and spec.name != only:
            continue
        asm = ws.load_system(spec)
        for tgt in ws.system_targets(spec):
            hyps: list[str] = []
            align = ["sentence_id\tsource_position\tstep\tword"]
            kept: list[AttentionTrace] = []
            for start in range(0, len(sents), batch_size):
                part = ChallengeSet(challenge.sentences[start : start + batch_size])
                h, traces = asm.translate_corpus(m.source, tgt, [s.sentence for s in part], capture=True, batch_size=batch_size)
                hyps += h
                align += _align_rows(asm, m.source, tgt, part, traces, m.analysis.align_layer, start)
                kept += traces[: max(0, n_keep - start)]
            write_lines(ws.translation_file(spec, tgt, "challenge.txt"), hyps)
            write_lines(ws.translation_file(spec, tgt, "align.tsv"), align)
            _write_json(ws.translation_file(spec, tgt, "contrib.json"), _contrib_json(asm, m.source, tgt, kept, m.analysis.layers))
            test_src, _ = ws.read_corpus("test", [(m.source, tgt)])[(m.source, tgt)]
            test_hyps, _ = asm.translate_corpus(m.source, tgt, test_src, batch_size=batch_size)
            write_lines(ws.translation_file(spec, tgt, "test.txt"), test_hyps)
            log.info("translated %s %s-%s", spec.label, m.source, tgt)


def bleu_scores(ws: Workspace) -> dict[str, float]:
    out = {}
    for spec in systems(ws.m):
        for tgt in ws.system_targets(spec):
            hyps = read_lines(ws.need(ws.translation_file(spec, tgt, "test.txt")))
            _, refs = ws.read_corpus("test", [(ws.m.source, tgt)])[(ws.m.source, tgt)]
            out[f"{spec.label}/{ws.m.source}-{tgt}"] = bleu(hyps, refs).bleu
    return out


def _read_alignment(path: Path) -> list[int | None]:
    rows = read_lines(path)[1:]
    out = []
    for r in rows:
        word = int(r.split("\t")[3])
        out.append(word if word >= 0 else None)
    return out


def eval_bias(ws: Workspace) -> dict:
    m = ws.m
    challenge = ws.challenge()
    src_grammar = ws.grammars[m.source]
    adjacent = [i for i, s in enumerate(challenge) if is_pronoun_adjacent(src_grammar, s)]
    adj_set = ChallengeSet([challenge[i] for i in adjacent])
    bleus = bleu_scores(ws)
    entries: dict[str, dict] = {}
    rows = []
    for spec in systems(ws.m):
        for tgt in ws.system_targets(spec):
            key = f"{spec.label}/{m.source}-{tgt}"
            det = GenderDetector(ws.grammars[tgt])
            hyps = read_lines(ws.need(ws.translation_file(spec, tgt, "challenge.txt")))
            rep = score_bias(hyps, challenge, det, lexicon_aligner(det))
            adj = score_bias([hyps[i] for i in adjacent], adj_set, det, lexicon_aligner(det))
            attn = _read_alignment(ws.need(ws.translation_file(spec, tgt, "align.tsv")))
            lex = lexicon_aligner(det)
            found = [(i, lex(i, s, h.split())) for i, (s, h) in enumerate(zip(challenge, hyps))]
            comparable = [(i, j) for i, j in found if j is not None]
            agree = sum(attn[i] == j for i, j in comparable)
            entries[key] = {
                **rep.to_dict(),
                "system": spec.label,
                "pair": f"{m.source}-{tgt}",
                "bleu": bleus[key],
                "adjacent_accuracy": adj.accuracy,
                "adjacent_total": adj.total,
                "attention_alignment_agreement": 100.0 * agree / len(comparable) if comparable else 0.0,
                "top_errors": [list(e) for e in top_errors(rep, 20)],
                "high_error_entities": [[w, r] for w, r in high_error_entities(rep)],
            }
            rows.append(report_row(spec.label, f"{m.source}-{tgt}", bleus[key], rep))
    ws.path("eval").mkdir(parents=True, exist_ok=True)
    write_report_json(ws.path("eval", "report.json"), entries)
    write_report_csv(ws.path("eval", "report.csv"), rows)
    return entries


def probe(ws: Workspace) -> dict:
    m = ws.m
    challenge = ws.challenge()
    rows, control_rows, summary = [], [], {}
    for spec in systems(ws.m):
        asm = ws.load_system(spec)
        for wt in ("determiner", "occupation"):
            x, y, words = probe_features(asm, challenge, wt, m.source)
            proto = ProbeProtocol(wt, train_size=m.probe.train_size, runs=m.probe.runs, seed=_sub_seed(m.seed, f"probe.{spec.label}.{wt}"), C=m.probe.C)
            res = run_probe_features(x, y, words, proto, spec.label)
            rows += probe_rows(res)
            write_probe_errors(ws.path("probe", "errors", f"{spec.label}_{wt}.csv"), res)
            entry = {"mean": res.mean, "std": res.std, "max_kkt_gap": max(res.kkt_gaps), "train_balance": res.train_balance}
            if spec.name in m.probe.control and wt == "determiner":
                ctl = run_probe_features(x, y, words, proto, spec.label, shuffle_labels=True)
                control_rows += probe_rows(ctl)
                entry["control_mean"], entry["control_std"] = ctl.mean, ctl.std
            summary[f"{spec.label}/{wt}"] = entry
            log.info("probe %s %s: %.2f +/- %.2f", spec.label, wt, res.mean, res.std)
    write_csv(ws.path("probe", "probe.csv"), PROBE_COLUMNS, rows)
    write_csv(ws.path("probe", "control.csv"), PROBE_COLUMNS, control_rows)
    _write_json(ws.path("probe", "summary.json"), summary)
    return summary


def analyze_attn(ws: Workspace, layers: Sequence[int] | None = None) -> list[aa.CvRecord]:
    m = ws.m
    challenge = ws.challenge()
    records: list[aa.CvRecord] = []
    for spec in systems(ws.m):
        for tgt in ws.system_targets(spec):
            data = json.loads(ws.need(ws.translation_file(spec, tgt, "contrib.json")).read_text(encoding="utf-8"))
            sents = data["sentences"]
            traces = [aa.NormTrace(e["norms"]) for e in sents]
            hyps = read_lines(ws.need(ws.translation_file(spec, tgt, "challenge.txt")))[: len(sents)]
            owners = [e["owners"] for e in sents]
            items = ChallengeSet(challenge.sentences[: len(sents)])
            for layer in layers or m.analysis.layers:
                records += aa.cv_records(
                    traces, hyps, owners, items, ws.grammars[tgt], layer, f"{spec.name}/{m.source}-{tgt}", data["source_offset"]
                )
    aa.write_cv_csv(ws.path("attn", "cv.csv"), records)
    return records


# ---------------------------------------------------------------------------
# report (reads artifact files only)
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def report(ws: Workspace) -> list[Path]:
    m = ws.m
    out_dir = ws.path("report")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    table = _read_csv(ws.need(ws.path("eval", "report.csv")))
    table.sort(key=lambda r: (r["pair"], r["system"]))
    write_report_csv(out_dir / "table1.csv", table)
    written.append(out_dir / "table1.csv")

    probe_rows_ = _read_csv(ws.need(ws.path("probe", "probe.csv")))
    accs: dict[str, dict[str, list[float]]] = {}
    for r in probe_rows_:
        accs.setdefault(r["system"], {}).setdefault(r["word_type"], []).append(float(r["accuracy"]))
    stats = {
        sysname: {wt: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0) for wt, v in by.items()}
        for sysname, by in accs.items()
    }
    aa.export_probe_bars(stats, out_dir / "fig1_probe.svg", "probe accuracy (%) on source embeddings")
    written.append(out_dir / "fig1_probe.svg")

    pair = m.analysis.heatmap_pair
    tgt = pair.split("-")[1]
    for spec in systems(ws.m):
        if spec.unit and spec.unit != pair:
            continue
        path = ws.translation_file(spec, tgt, "contrib.json")
        if not path.is_file():
            continue
        data = json.loads(path.read_text(encoding="utf-8"))
        if not data["sentences"]:
            continue
        first = data["sentences"][0]
        layer = str(max(m.analysis.layers))
        mat = np.asarray(first["norms"][layer])
        fig = out_dir / f"fig4_{spec.name}.svg"
        aa._write(fig, aa.heatmap_svg(mat, first["target"], first["source"], f"{spec.label} {pair} layer {layer}"))
        written.append(fig)

    recs = aa.read_cv_csv(ws.need(ws.path("attn", "cv.csv")))
    by_pair: dict[tuple[str, int], list[aa.CvRecord]] = {}
    for r in recs:
        system, p = r.model.split("/")
        by_pair.setdefault((p, r.layer), []).append(r)
    for (p, layer), group in sorted(by_pair.items()):
        fig = out_dir / f"fig5_{p}_layer{layer}.svg"
        aa.export_cv_bars(group, fig, f"c_v at the determiner step, {p}, layer {layer}")
        written.append(fig)
    return written


def pipeline(ws: Workspace, jobs: int = 1) -> None:
    gen_corpus(ws)
    learn_bpe(ws)
    train_systems(ws, jobs=jobs)
    translate(ws)
    eval_bias(ws)
    probe(ws)
    analyze_attn(ws)
    report(ws)


def summary_stats(ws: Workspace) -> dict:
    """Headline numbers used by the acceptance checks: adjacency accuracy per system,
    probe means, and mean layer-1 c_v per system over all scored pairs."""
    rep = json.loads(ws.need(ws.path("eval", "report.json")).read_text(encoding="utf-8"))
    probe_sum = json.loads(ws.need(ws.path("probe", "summary.json")).read_text(encoding="utf-8"))
    recs = aa.read_cv_csv(ws.need(ws.path("attn", "cv.csv")))
    cv: dict[str, dict[int, list[aa.CvRecord]]] = {}
    for r in recs:
        cv.setdefault(r.model.split("/")[0], {}).setdefault(r.layer, []).append(r)
    return {
        "adjacent_accuracy": {k: v["adjacent_accuracy"] for k, v in rep.items()},
        "accuracy": {k: v["accuracy"] for k, v in rep.items()},
        "probe": probe_sum,
        "mean_cv": {s: {layer: aa.mean_cv(v) for layer, v in by.items()} for s, by in cv.items()},
    }
