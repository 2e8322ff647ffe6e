"""Bilingual, Shared and Language-Specific translation systems and their training.

* bilingual: one encoder/decoder for a single ordered pair.
* shared: one encoder/decoder for every pair; the target language is
  requested by a ``<2xx>`` tag prepended to the source.
* lang-spec: one encoder and one decoder per language, no parameters shared;
  a pair is served by ``encoders[src]`` with ``decoders[tgt]``.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, no_grad
from .tokenizer import BpeModel, SubwordTokenizer, Vocabulary, bpe_learn, build_vocab, lang_tag
from .transformer import (
    AttentionTrace,
    Decoder,
    Encoder,
    TransformerConfig,
    greedy_translate_batch,
    seq2seq_loss,
)

log = logging.getLogger(__name__)

KINDS = ("bilingual", "shared", "lang-spec")
Pair = tuple[str, str]
Corpora = dict[Pair, tuple[Sequence[str], Sequence[str]]]


class ConfigError(ValueError):
    pass


class RoutingError(KeyError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LanguageSet:
    languages: tuple[str, ...]
    pairs: tuple[Pair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        if len(self.languages) < 2:
            raise ConfigError("a language set needs at least 2 languages")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"duplicate language in {self.languages}")
        if not self.pairs:
            raise ConfigError("a language set needs at least one pair")
        if len(set(self.pairs)) != len(self.pairs):
            raise ConfigError("duplicate pair in language set")
        for s, t in self.pairs:
            if s == t:
                raise ConfigError(f"pair {s}-{t} translates into itself")
            for lang in (s, t):
                if lang not in self.languages:
                    raise ConfigError(f"pair {s}-{t} uses undeclared language {lang!r}")

    @classmethod
    def all_pairs(cls, languages: Sequence[str], extra: Sequence[Pair] = ()) -> "LanguageSet":
        """Every ordered pair among ``languages`` plus ``extra`` pairs."""
        base = [p for p in permutations(languages, 2)]
        return cls(tuple(dict.fromkeys([*languages, *(x for p in extra for x in p)])), tuple(base + list(extra)))


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 1e-3
    warmup: int = 200
    batch_tokens: int = 400
    max_updates: int = 1500
    patience: int = 5
    eval_every: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.batch_tokens < 1:
            raise ConfigError("batch_tokens must be >= 1")
        if self.max_updates < 0 or self.patience < 1 or self.eval_every < 1:
            raise ConfigError("max_updates >= 0, patience >= 1 and eval_every >= 1 required")

    def lr_at(self, step: int) -> float:
        """Linear warmup then inverse square-root decay; peaks at ``lr`` when step == warmup."""
        if step < 1:
            return 0.0
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))


class Adam:
    """Adam over one module's parameters, with its own step counter."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _sub_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2**63)


def default_vocab_regime(kind: str) -> str:
    return "per-language" if kind == "lang-spec" else "joint"


def build_tokenizers(
    kind: str, langset: LanguageSet, corpora: Corpora, num_merges: int, regime: str | None = None
) -> dict[str, SubwordTokenizer]:
    """One tokenizer per language. ``joint`` shares a single BPE model and
    vocabulary across all languages (with target tags for shared systems);
    ``per-language`` learns one of each per language."""
    regime = regime or default_vocab_regime(kind)
    texts: dict[str, list[str]] = {lang: [] for lang in langset.languages}
    for s, t in langset.pairs:
        if (s, t) not in corpora:
            raise ConfigError(f"no corpus for pair {s}-{t}")
        src, tgt = corpora[(s, t)]
        texts[s].extend(src)
        texts[t].extend(tgt)
    tags = [lang_tag(lang) for lang in langset.languages] if kind == "shared" else []
    if regime == "joint":
        lines = [line for lang in langset.languages for line in texts[lang]]
        bpe = bpe_learn(lines, num_merges)
        vocab = build_vocab((bpe_segment(bpe, line) for line in lines), tags)
        tok = SubwordTokenizer(bpe, vocab)
        return {lang: tok for lang in langset.languages}
    if regime == "per-language":
        if kind == "shared":
            raise ConfigError("a shared system needs the joint vocabulary regime")
        out = {}
        for lang in langset.languages:
            if not texts[lang]:
                raise ConfigError(f"language {lang!r} appears in no pair")
            bpe = bpe_learn(texts[lang], num_merges)
            out[lang] = SubwordTokenizer(bpe, build_vocab(bpe_segment(bpe, line) for line in texts[lang]))
        return out
    raise ConfigError(f"unknown vocabulary regime {regime!r}")


def bpe_segment(bpe: BpeModel, line: str) -> list[str]:
    return [piece for word in line.split() for piece in bpe.apply(word)]


class ModelAssembly:
    def __init__(
        self,
        kind: str,
        langset: LanguageSet,
        config: TransformerConfig,
        tokenizers: dict[str, SubwordTokenizer],
        seed: int = 0,
        regime: str | None = None,
    ):
        if kind not in KINDS:
            raise ConfigError(f"unknown system kind {kind!r}; expected one of {', '.join(KINDS)}")
        if kind == "bilingual" and (len(langset.languages) != 2 or len(langset.pairs) != 1):
            raise ConfigError("a bilingual system needs exactly 2 languages and a single pair")
        missing = [lang for lang in langset.languages if lang not in tokenizers]
        if missing:
            raise ConfigError(f"no tokenizer for {missing}")
        self.kind = kind
        self.langset = langset
        self.config = config
        self.tokenizers = dict(tokenizers)
        self.seed = seed
        self.regime = regime or default_vocab_regime(kind)
        self.step = 0
        self.encoders: dict[str, Encoder] = {}
        self.decoders: dict[str, Decoder] = {}
        if kind == "lang-spec":
            for lang in langset.languages:
                v = len(self.tokenizers[lang].vocab)
                cfg = config.with_vocab(v, v)
                self.encoders[lang] = Encoder(cfg, _sub_seed(seed, f"enc.{lang}"), f"enc.{lang}")
                self.decoders[lang] = Decoder(cfg, _sub_seed(seed, f"dec.{lang}"), f"dec.{lang}")
        else:
            unit = self.unit_names()[0]
            s, t = langset.pairs[0]
            cfg = config.with_vocab(len(self.tokenizers[s].vocab), len(self.tokenizers[t].vocab))
            self.encoders[unit] = Encoder(cfg, _sub_seed(seed, f"enc.{unit}"), f"enc.{unit}")
            self.decoders[unit] = Decoder(cfg, _sub_seed(seed, f"dec.{unit}"), f"dec.{unit}")
        self.optimizers: dict[str, Adam] = {}

    # -- structure ----------------------------------------------------------
    def unit_names(self) -> list[str]:
        if self.kind == "lang-spec":
            return list(self.langset.languages)
        if self.kind == "shared":
            return ["shared"]
        s, t = self.langset.pairs[0]
        return [f"{s}-{t}"]

    def modules(self) -> list[Encoder | Decoder]:
        out: list[Encoder | Decoder] = []
        for unit in self.unit_names():
            out += [self.encoders[unit], self.decoders[unit]]
        return out

    def num_parameters(self) -> int:
        return sum(m.num_parameters() for m in self.modules())

    def supports(self, src: str, tgt: str) -> bool:
        try:
            self.route(src, tgt)
        except RoutingError:
            return False
        return True

    def route(self, src: str, tgt: str) -> tuple[Encoder, Decoder]:
        for lang in (src, tgt):
            if lang not in self.langset.languages:
                raise RoutingError(f"language {lang!r} is not part of this {self.kind} system")
        if src == tgt:
            raise RoutingError(f"cannot route {src}-{tgt}")
        if self.kind == "lang-spec":
            return self.encoders[src], self.decoders[tgt]
        if self.kind == "bilingual" and (src, tgt) != self.langset.pairs[0]:
            s, t = self.langset.pairs[0]
            raise RoutingError(f"bilingual {s}-{t} system cannot translate {src}-{tgt}")
        unit = self.unit_names()[0]
        return self.encoders[unit], self.decoders[unit]

    def source_prefix(self, src: str, tgt: str) -> list[int]:
        """Ids placed before the source subwords (the target tag for shared systems)."""
        if self.kind == "shared":
            return [self.tokenizers[src].vocab.stoi[lang_tag(tgt)]]
        return []

    def encode_source(self, src: str, tgt: str, sentence: str) -> list[int]:
        self.route(src, tgt)
        return self.source_prefix(src, tgt) + self.tokenizers[src].encode(sentence)

    def source_position(self, src: str, tgt: str, sentence: str, word_index: int) -> int:
        """Encoder position of the first subword of word ``word_index``."""
        offset = len(self.source_prefix(src, tgt))
        return offset + self.tokenizers[src].first_subword_index(word_index, sentence)

    def encode_target(self, tgt: str, sentence: str) -> list[int]:
        return self.tokenizers[tgt].encode(sentence)

    # -- inference ------------------------------------------------------------
    def translate_corpus(
        self,
        src: str,
        tgt: str,
        sentences: Sequence[str],
        capture: bool = False,
        batch_size: int = 256,
        max_len: int | None = None,
    ) -> tuple[list[str], list[AttentionTrace | None]]:
        """Greedy translations (detokenised words joined by spaces) plus optional traces."""
        enc, dec = self.route(src, tgt)
        ids = [self.encode_source(src, tgt, s) for s in sentences]
        tok = self.tokenizers[tgt]
        hyps: list[str] = []
        traces: list[AttentionTrace | None] = []
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            for out, trace in greedy_translate_batch(enc, dec, chunk, max_len=max_len, capture=capture):
                hyps.append(tok.decode(out))
                traces.append(trace)
        return hyps, traces

    def encoder_states(self, src: str, tgt: str, sentences: Sequence[str], batch_size: int = 256) -> list[np.ndarray]:
        """Eval-mode contextual vectors (S, d) per sentence, encoded for the ``src``-``tgt`` route."""
        from .transformer import encode

        enc, _ = self.route(src, tgt)
        out: list[np.ndarray] = []
        for start in range(0, len(sentences), batch_size):
            chunk = [self.encode_source(src, tgt, s) for s in sentences[start : start + batch_size]]
            states = encode(enc, chunk)
            out.extend(states.sentence(b).copy() for b in range(len(chunk)))
        return out

    # -- persistence ----------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "languages": list(self.langset.languages),
            "pairs": [list(p) for p in self.langset.pairs],
            "model": asdict(self.config),
            "regime": self.regime,
            "seed": self.seed,
            "step": self.step,
            "units": self.unit_names(),
        }

    def _tokenizer_dir(self, root: Path, lang: str) -> Path:
        if self.kind == "lang-spec":
            return root / lang
        return root / self.unit_names()[0]

    def save(self, root: str | Path) -> None:
        """Layout: ``root/<unit>/{encoder,decoder}.bin`` plus ``bpe.txt``/``vocab.txt``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for lang in self.langset.languages:
            d = self._tokenizer_dir(root, lang)
            d.mkdir(parents=True, exist_ok=True)
            self.tokenizers[lang].bpe.save(d / "bpe.txt")
            self.tokenizers[lang].vocab.save(d / "vocab.txt")
        for unit in self.unit_names():
            enc, dec = self.encoders[unit], self.decoders[unit]
            src_langs = [unit] if self.kind == "lang-spec" else [p[0] for p in self.langset.pairs]
            tgt_langs = [unit] if self.kind == "lang-spec" else [p[1] for p in self.langset.pairs]
            extra = {"step": self.step}
            enc.save(root / unit / "encoder.bin", {**extra, "vocab_sha256": self.tokenizers[src_langs[0]].vocab.digest()})
            dec.save(root / unit / "decoder.bin", {**extra, "vocab_sha256": self.tokenizers[tgt_langs[0]].vocab.digest()})
        self.manifest_path(root).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def manifest_path(self, root: str | Path) -> Path:
        """Bilingual systems keep their manifest inside the pair directory so that
        several pairs can share one ``ckpt/bilingual`` root."""
        root = Path(root)
        return root / self.unit_names()[0] / "assembly.json" if self.kind == "bilingual" else root / "assembly.json"

    @classmethod
    def load(cls, path: str | Path) -> "ModelAssembly":
        """Load from a system root, or from a bilingual pair directory."""
        path = Path(path)
        meta = json.loads((path / "assembly.json").read_text(encoding="utf-8"))
        root = path.parent if meta["kind"] == "bilingual" else path
        langset = LanguageSet(tuple(meta["languages"]), tuple(tuple(p) for p in meta["pairs"]))
        base = TransformerConfig(**meta["model"])
        toks: dict[str, SubwordTokenizer] = {}
        cache: dict[Path, SubwordTokenizer] = {}
        for lang in langset.languages:
            d = root / lang if meta["kind"] == "lang-spec" else root / meta["units"][0]
            if d not in cache:
                cache[d] = SubwordTokenizer(BpeModel.load(d / "bpe.txt"), Vocabulary.load(d / "vocab.txt"))
            toks[lang] = cache[d]
        asm = cls(meta["kind"], langset, base, toks, seed=meta["seed"], regime=meta["regime"])
        for unit in asm.unit_names():
            enc = Encoder.load(root / unit / "encoder.bin")
            dec = Decoder.load(root / unit / "decoder.bin")
            for mine, theirs in ((asm.encoders[unit], enc), (asm.decoders[unit], dec)):
                if mine.config != theirs.config:
                    raise ConfigError(f"{root / unit}: checkpoint config does not match assembly.json")
                mine.load_arrays(theirs.state_arrays())
        asm.step = meta["step"]
        return asm


def build(
    kind: str,
    langset: LanguageSet,
    config: TransformerConfig,
    corpora: Corpora,
    num_merges: int = 1000,
    seed: int = 0,
    regime: str | None = None,
) -> ModelAssembly:
    """Learn the vocabulary regime's tokenizers from ``corpora`` and initialise parameters."""
    if kind not in KINDS:
        raise ConfigError(f"unknown system kind {kind!r}; expected one of {', '.join(KINDS)}")
    if kind == "bilingual" and len(langset.languages) != 2:
        raise ConfigError(f"a bilingual system takes exactly 2 languages, got {len(langset.languages)}")
    toks = build_tokenizers(kind, langset, corpora, num_merges, regime)
    return ModelAssembly(kind, langset, config, toks, seed=seed, regime=regime)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _Batcher:
    """Endless shuffled token-budget batches over one pair's encoded corpus."""

    def __init__(self, data: list[tuple[list[int], list[int]]], batch_tokens: int, seed: int):
        if not data:
            raise ConfigError("empty training corpus")
        self.data = data
        self.batch_tokens = batch_tokens
        self.rng = np.random.default_rng(seed)
        self.order: list[int] = []
        self.pos = 0

    def next(self) -> tuple[list[list[int]], list[list[int]]]:
        src, tgt = [], []
        used = 0
        while True:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.data)).tolist()
                self.pos = 0
            s, t = self.data[self.order[self.pos]]
            cost = max(len(s), len(t) + 1)
            if src and used + cost > self.batch_tokens:
                return src, tgt
            src.append(s)
            tgt.append(t)
            used += cost
            self.pos += 1


def pair_schedule(pairs: Sequence[Pair], steps: int) -> list[Pair]:
    """Round-robin pair order for updates 1..steps."""
    return [pairs[(s - 1) % len(pairs)] for s in range(1, steps + 1)]


@dataclass
class TrainResult:
    steps: int
    train_loss: list[tuple[int, float]] = field(default_factory=list)
    valid_loss: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_valid: float = math.inf
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _encode_pairs(asm: ModelAssembly, corpora: Corpora, pairs: Sequence[Pair]) -> dict[Pair, list]:
    out = {}
    for s, t in pairs:
        if (s, t) not in corpora:
            raise ConfigError(f"no corpus for pair {s}-{t}")
        src, tgt = corpora[(s, t)]
        if len(src) != len(tgt):
            raise ConfigError(f"{s}-{t}: {len(src)} source vs {len(tgt)} target lines")
        out[(s, t)] = [(asm.encode_source(s, t, a), asm.encode_target(t, b)) for a, b in zip(src, tgt)]
    return out


def validation_loss(asm: ModelAssembly, data: dict[Pair, list], batch: int = 128) -> float:
    """Token-weighted mean cross-entropy over all validation pairs, dropout off."""
    total, count = 0.0, 0
    with no_grad():
        for (s, t), rows in data.items():
            enc, dec = asm.route(s, t)
            for start in range(0, len(rows), batch):
                chunk = rows[start : start + batch]
                n = sum(len(b) + 1 for _, b in chunk)
                loss = seq2seq_loss(enc, dec, [a for a, _ in chunk], [b for _, b in chunk])
                total += float(loss.data) * n
                count += n
    return total / max(count, 1)


def train(
    asm: ModelAssembly,
    corpora: Corpora,
    schedule: TrainSchedule,
    valid: Corpora | None = None,
    log_every: int = 100,
) -> TrainResult:
    """Adam with warmup/inverse-sqrt LR, round-robin over pairs, early stopping on validation loss.

    The parameters with the best validation loss are restored at the end.
    """
    pairs = asm.langset.pairs
    data = _encode_pairs(asm, corpora, pairs)
    vdata = _encode_pairs(asm, valid, pairs) if valid else None
    batchers = {p: _Batcher(data[p], schedule.batch_tokens, _sub_seed(schedule.seed, "-".join(p))) for p in pairs}
    for m in asm.modules():
        if m.name not in asm.optimizers:
            asm.optimizers[m.name] = Adam(m.params, schedule.beta1, schedule.beta2, schedule.eps)
    result = TrainResult(steps=0)
    best_state: dict[str, dict[str, np.ndarray]] | None = None
    bad = 0
    running = []
    for step in range(1, schedule.max_updates + 1):
        pair = pairs[(step - 1) % len(pairs)]
        enc, dec = asm.route(*pair)
        src, tgt = batchers[pair].next()
        for m in (enc, dec):
            m.zero_grad()
        loss = seq2seq_loss(enc, dec, src, tgt, drop_seed=schedule.seed, step=step)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"training loss became {value} at step {step} (pair {pair[0]}-{pair[1]})")
        loss.backward()
        # each module follows the schedule on its own update count, so a
        # language-specific decoder visited every sixth step still warms up and decays
        for m in (enc, dec):
            opt = asm.optimizers[m.name]
            lr = schedule.lr_at(opt.t + 1)
            opt.step(lr)
        asm.step += 1
        result.steps = step
        running.append(value)
        if step % log_every == 0:
            mean = float(np.mean(running))
            result.train_loss.append((step, mean))
            log.info("%s step %d loss %.4f lr %.2e", asm.kind, step, mean, lr)
            running = []
        if vdata and (step % schedule.eval_every == 0 or step == schedule.max_updates):
            vl = validation_loss(asm, vdata)
            result.valid_loss.append((step, vl))
            log.info("%s step %d valid %.4f", asm.kind, step, vl)
            if vl < result.best_valid:
                result.best_valid, result.best_step = vl, step
                best_state = {m.name: {k: v.copy() for k, v in m.state_arrays().items()} for m in asm.modules()}
                bad = 0
            else:
                bad += 1
                if bad >= schedule.patience:
                    result.stopped_early = True
                    log.info("%s early stop at step %d (best %d)", asm.kind, step, result.best_step)
                    break
    if best_state is not None:
        for m in asm.modules():
            m.load_arrays(best_state[m.name])
    return result
