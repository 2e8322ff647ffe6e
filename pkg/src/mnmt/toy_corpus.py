"""Synthetic gendered toy languages, parallel corpora and WinoMT-style challenge sets.

Every sentence is generated from an abstract :class:`Frame` (template, two
entities with genders, coreference). Rendering the same frame in two
languages gives an aligned pair whose target gender marking is forced by the
source pronoun.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GENDERS = ("male", "female", "neutral")
STEREOTYPES = ("pro", "anti", "neutral")
SOMEONE = "someone"
SLOTS = ("{E1}", "{E2}", "{P}")
LANGUAGES = ("en", "de", "es", "fr", "ru")


class GrammarError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ChallengeParseError(ValueError):
    pass


@dataclass(frozen=True)
class NounEntry:
    lemma: str
    male: str
    female: str
    stereotype: str  # male / female / neutral occupational stereotype
    masculine_only: bool = False

    def form(self, gender: str) -> str:
        return self.female if gender == "female" else self.male


@dataclass(frozen=True)
class Template:
    id: str
    tokens: tuple[str, ...]
    coref: int  # 1 or 2: which entity slot the pronoun refers to


@dataclass(frozen=True)
class Frame:
    """Language-independent content of one sentence."""

    template: int
    e1: str
    g1: str
    e2: str
    g2: str

    def coref_gender(self, grammar: "ToyGrammar") -> str:
        return self.g1 if grammar.templates[self.template].coref == 1 else self.g2


@dataclass
class Rendered:
    tokens: list[str]
    entity_index: tuple[int, int]  # word index of each entity's noun (or "someone")
    pronoun_index: int

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


class ToyGrammar:
    def __init__(
        self,
        code: str,
        script: str,
        determiners: dict[str, str],
        someone: dict[str, str],
        pronouns: dict[str, str],
        nouns: dict[str, NounEntry],
        function_words: dict[str, str],
        templates: list[Template],
    ):
        self.code = code
        self.script = script
        self.determiners = dict(determiners)
        self.someone = dict(someone)  # gender -> form; training text only uses "neutral"
        self.pronouns = dict(pronouns)
        self.nouns = dict(nouns)
        self.function_words = dict(function_words)
        self.templates = list(templates)
        self._validate()

    def _validate(self) -> None:
        for t in self.templates:
            for slot in SLOTS:
                if t.tokens.count(slot) != 1:
                    raise GrammarError(f"{self.code} template {t.id}: needs exactly one {slot}")
            if t.coref not in (1, 2):
                raise GrammarError(f"{self.code} template {t.id}: coref must be 1 or 2")
        for n in self.nouns.values():
            if n.stereotype not in GENDERS:
                raise GrammarError(f"{self.code} noun {n.lemma}: bad stereotype {n.stereotype!r}")
            if n.male == n.female and not n.masculine_only and self.code != "en":
                raise GrammarError(f"{self.code} noun {n.lemma}: identical forms but not flagged masculine-only")
        if set(self.pronouns) != set(GENDERS):
            raise GrammarError(f"{self.code}: pronouns need male/female/neutral forms")
        if set(self.someone) != set(GENDERS):
            raise GrammarError(f"{self.code}: 'someone' needs male/female/neutral forms")

    # -- (de)serialisation ------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "ToyGrammar":
        nouns = {
            lemma: NounEntry(lemma, v["male"], v["female"], v["stereotype"], bool(v.get("masculine_only", False)))
            for lemma, v in d["nouns"].items()
        }
        templates = [Template(t["id"], tuple(t["text"].split()), int(t["coref"])) for t in d["templates"]]
        return cls(
            d["code"], d.get("script", "latin"), d.get("determiners", {}), d["someone"], d["pronouns"],
            nouns, d.get("function_words", {}), templates,
        )

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "script": self.script,
            "determiners": dict(self.determiners),
            "someone": dict(self.someone),
            "pronouns": dict(self.pronouns),
            "nouns": {
                n.lemma: {"male": n.male, "female": n.female, "stereotype": n.stereotype, "masculine_only": n.masculine_only}
                for n in self.nouns.values()
            },
            "function_words": dict(self.function_words),
            "templates": [{"id": t.id, "text": " ".join(t.tokens), "coref": t.coref} for t in self.templates],
        }

    @classmethod
    def load(cls, path: str | Path) -> "ToyGrammar":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    # -- lexicon views ----------------------------------------------------
    def lemmas(self, stereotype: str | None = None) -> list[str]:
        return [n.lemma for n in self.nouns.values() if stereotype is None or n.stereotype == stereotype]

    def entity_tokens(self, lemma: str, gender: str) -> list[str]:
        if lemma == SOMEONE:
            return [self.someone[gender]]
        noun = self.nouns[lemma].form(gender)
        det = self.determiners.get(gender)
        return [det, noun] if det else [noun]

    def render(self, frame: Frame) -> Rendered:
        tmpl = self.templates[frame.template]
        out: list[str] = []
        ent = [0, 0]
        pron = -1
        for tok in tmpl.tokens:
            if tok in ("{E1}", "{E2}"):
                slot = 0 if tok == "{E1}" else 1
                lemma, gender = (frame.e1, frame.g1) if slot == 0 else (frame.e2, frame.g2)
                words = self.entity_tokens(lemma, gender)
                ent[slot] = len(out) + len(words) - 1
                out.extend(words)
            elif tok == "{P}":
                pron = len(out)
                out.append(self.pronouns[frame.coref_gender(self)])
            else:
                out.append(tok)
        return Rendered(out, (ent[0], ent[1]), pron)


def load_grammar(lang: str) -> ToyGrammar:
    """One of the shipped toy grammars (en, de, es, fr, ru)."""
    if lang not in LANGUAGES:
        raise GrammarError(f"no shipped grammar for {lang!r}; known: {', '.join(LANGUAGES)}")
    text = (resources.files("mnmt") / "data" / f"grammar_{lang}.json").read_text(encoding="utf-8")
    return ToyGrammar.from_dict(json.loads(text))


def load_grammars(langs: Iterable[str]) -> dict[str, ToyGrammar]:
    return {lang: load_grammar(lang) for lang in langs}


# ---------------------------------------------------------------------------
# parallel corpora
# ---------------------------------------------------------------------------


def _sample_gender(rng: np.random.Generator, grammar: ToyGrammar, lemma: str, skew: float) -> str:
    if lemma == SOMEONE:
        return "neutral"
    stereo = grammar.nouns[lemma].stereotype
    if stereo == "neutral":
        return "male" if rng.random() < 0.5 else "female"
    other = "female" if stereo == "male" else "male"
    return stereo if rng.random() < skew else other


def sample_frames(grammar: ToyGrammar, n: int, seed: int, skew: float = 0.7) -> list[Frame]:
    """Random frames: uniform template and entities; stereotyped nouns take their
    stereotypical gender with probability ``skew``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pool = grammar.lemmas() + [SOMEONE]
    frames = []
    for _ in range(n):
        t = int(rng.integers(len(grammar.templates)))
        i, j = rng.choice(len(pool), size=2, replace=False)
        e1, e2 = pool[int(i)], pool[int(j)]
        g1 = _sample_gender(rng, grammar, e1, skew)
        g2 = _sample_gender(rng, grammar, e2, skew)
        frames.append(Frame(t, e1, g1, e2, g2))
    return frames


def gen_parallel(
    grammars: dict[str, ToyGrammar], pair: tuple[str, str], n: int, seed: int, skew: float = 0.7
) -> tuple[list[str], list[str]]:
    """``n`` aligned sentence pairs for ``pair = (src, tgt)``."""
    src, tgt = pair
    for lang in pair:
        if lang not in grammars:
            raise GrammarError(f"grammar for {lang!r} not provided")
    frames = sample_frames(grammars[src], n, seed, skew)
    return [grammars[src].render(f).text for f in frames], [grammars[tgt].render(f).text for f in frames]


def write_lines(path: str | Path, lines: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


# ---------------------------------------------------------------------------
# challenge sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChallengeSentence:
    gold_gender: str
    entity_index: int
    sentence: str
    entity_lemma: str
    stereotype: str

    def to_row(self) -> str:
        return f"{self.gold_gender}\t{self.entity_index}\t{self.sentence}\t{self.entity_lemma}\t{self.stereotype}"


@dataclass(frozen=True)
class Composition:
    """Requested counts. Each pro sentence also yields an anti twin."""

    pro_male: int = 792
    pro_female: int = 792
    neutral_male: int = 242
    neutral_female: int = 238
    neutral_gender: int = 240

    @property
    def total(self) -> int:
        return 2 * (self.pro_male + self.pro_female) + self.neutral_male + self.neutral_female + self.neutral_gender


REPLICA = Composition()


@dataclass
class ChallengeSet:
    sentences: list[ChallengeSentence]

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def by_gender(self) -> dict[str, int]:
        return {g: sum(s.gold_gender == g for s in self.sentences) for g in GENDERS}

    def by_stereotype(self) -> dict[str, int]:
        return {c: sum(s.stereotype == c for s in self.sentences) for c in STEREOTYPES}

    def save(self, path: str | Path) -> None:
        write_lines(path, [s.to_row() for s in self.sentences])

    @classmethod
    def load(cls, path: str | Path) -> "ChallengeSet":
        return cls(parse_challenge(Path(path).read_text(encoding="utf-8")))


def parse_challenge(text: str) -> list[ChallengeSentence]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ChallengeParseError(f"line {lineno}: expected 5 tab-separated columns, got {len(cols)}")
        gender, idx, sentence, lemma, stereo = cols
        if gender not in GENDERS:
            raise ChallengeParseError(f"line {lineno}: unknown gold gender {gender!r}")
        if stereo not in STEREOTYPES:
            raise ChallengeParseError(f"line {lineno}: unknown stereotype {stereo!r}")
        try:
            index = int(idx)
        except ValueError:
            raise ChallengeParseError(f"line {lineno}: entity index {idx!r} is not an integer") from None
        if not 0 <= index < len(sentence.split()):
            raise ChallengeParseError(f"line {lineno}: entity index {index} outside the sentence")
        out.append(ChallengeSentence(gender, index, sentence, lemma, stereo))
    return out


load_challenge = ChallengeSet.load


def save_challenge(cs: ChallengeSet, path: str | Path) -> None:
    cs.save(path)


def _challenge_item(grammar: ToyGrammar, frame: Frame, stereotype: str) -> ChallengeSentence:
    r = grammar.render(frame)
    slot = grammar.templates[frame.template].coref - 1
    lemma = frame.e1 if slot == 0 else frame.e2
    return ChallengeSentence(frame.coref_gender(grammar), r.entity_index[slot], r.text, lemma, stereotype)


def _frame_for(grammar: ToyGrammar, t: int, gold: str, other: str, gender: str) -> Frame:
    # the non-coreferent entity is unmarked in the English source; give it the
    # gold gender so that every target rendering stays well defined
    other_gender = "neutral" if other == SOMEONE else gender if gender != "neutral" else "male"
    if grammar.templates[t].coref == 1:
        return Frame(t, gold, gender, other, other_gender)
    return Frame(t, other, other_gender, gold, gender)


def challenge_frames(
    grammar: ToyGrammar, composition: Composition = REPLICA, seed: int = 0
) -> list[tuple[Frame, str]]:
    """(frame, stereotype label) pairs in output order."""
    rng = np.random.default_rng(seed)
    occupations = grammar.lemmas("male") + grammar.lemmas("female")
    others = occupations + grammar.lemmas("neutral")
    n_t = len(grammar.templates)

    def draw(golds: list[str], k: int, what: str) -> list[tuple[int, str, str]]:
        cands = [(t, g, o) for t in range(n_t) for g in golds for o in others if o != g]
        if k > len(cands):
            raise CapacityError(f"{what}: {k} sentences requested, only {len(cands)} distinct frames available")
        picks = rng.choice(len(cands), size=k, replace=False) if k else []
        return [cands[int(i)] for i in sorted(picks)]

    items: list[tuple[Frame, str]] = []
    for stereo, count in (("male", composition.pro_male), ("female", composition.pro_female)):
        anti = "female" if stereo == "male" else "male"
        for t, g, o in draw(grammar.lemmas(stereo), count, f"pro-{stereo}"):
            items.append((_frame_for(grammar, t, g, o, stereo), "pro"))
            items.append((_frame_for(grammar, t, g, o, anti), "anti"))
    for gender, count in (("male", composition.neutral_male), ("female", composition.neutral_female)):
        for t, g, o in draw(grammar.lemmas("neutral"), count, f"neutral-{gender}"):
            items.append((_frame_for(grammar, t, g, o, gender), "neutral"))
    for t, g, o in draw([SOMEONE], composition.neutral_gender, "neutral-gender"):
        items.append((_frame_for(grammar, t, g, o, "neutral"), "neutral"))
    order = rng.permutation(len(items))
    return [items[int(i)] for i in order]


def gen_challenge(grammar: ToyGrammar, composition: Composition = REPLICA, seed: int = 0) -> ChallengeSet:
    """WinoMT-format challenge set over ``grammar`` (normally the English source)."""
    return ChallengeSet([_challenge_item(grammar, f, s) for f, s in challenge_frames(grammar, composition, seed)])


def match_template(grammar: ToyGrammar, sentence: str) -> tuple[Frame, Rendered]:
    """Recover the frame behind a rendered source sentence (genders read off the pronoun)."""
    words = sentence.split()
    someone = set(grammar.someone.values())
    by_form: dict[str, str] = {}
    for n in grammar.nouns.values():
        by_form.setdefault(n.male, n.lemma)
        by_form.setdefault(n.female, n.lemma)
    pron_gender = {v: k for k, v in grammar.pronouns.items()}
    for ti, tmpl in enumerate(grammar.templates):
        pos = 0
        ents: list[str] = []
        pgender = None
        ok = True
        for tok in tmpl.tokens:
            if pos >= len(words):
                ok = False
                break
            if tok in ("{E1}", "{E2}"):
                if words[pos] in someone:
                    ents.append(SOMEONE)
                    pos += 1
                    continue
                if grammar.determiners and words[pos] in grammar.determiners.values():
                    pos += 1
                if pos >= len(words) or words[pos] not in by_form:
                    ok = False
                    break
                ents.append(by_form[words[pos]])
                pos += 1
            elif tok == "{P}":
                pgender = pron_gender.get(words[pos])
                if pgender is None:
                    ok = False
                    break
                pos += 1
            elif words[pos] == tok:
                pos += 1
            else:
                ok = False
                break
        if ok and pos == len(words):
            other = "male" if pgender == "neutral" else pgender
            g = [other, other]
            for k in range(2):
                if ents[k] == SOMEONE:
                    g[k] = "neutral"
            g[tmpl.coref - 1] = pgender
            frame = Frame(ti, ents[0], g[0], ents[1], g[1])
            return frame, grammar.render(frame)
    raise GrammarError(f"sentence matches no {grammar.code} template: {sentence!r}")


def pronoun_distance(grammar: ToyGrammar, item: ChallengeSentence) -> int:
    """Word distance from the gold entity to the pronoun."""
    _, rendered = match_template(grammar, item.sentence)
    return rendered.pronoun_index - item.entity_index


def is_pronoun_adjacent(grammar: ToyGrammar, item: ChallengeSentence, window: int = 2) -> bool:
    return 0 < pronoun_distance(grammar, item) <= window
