"""Regenerate the shipped toy grammars in src/mnmt/data/.

Run once; the JSON files are the source of truth afterwards (stereotype tags
and word forms can be edited there directly).
"""

import hashlib
import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "mnmt" / "data"

MALE = [
    "driver", "supervisor", "janitor", "cook", "mover", "laborer", "builder", "chief", "developer",
    "carpenter", "manager", "lawyer", "farmer", "salesperson", "physician", "guard", "analyst",
    "mechanic", "sheriff", "ceo",
]
FEMALE = [
    "attendant", "cashier", "teacher", "nurse", "assistant", "secretary", "auditor", "cleaner",
    "receptionist", "clerk", "counselor", "designer", "hairdresser", "writer", "housekeeper", "baker",
    "accountant", "editor", "librarian", "tailor",
]
NEUTRAL = ["customer", "patient", "child", "visitor", "guest", "student"]

# two entity slots, one pronoun slot; coref names the slot the pronoun refers to
TEMPLATES = [
    ("{E1} argued with {E2} because {P} did not like the design", 1),
    ("{E1} called {E2} because {P} needed help with the report", 1),
    ("{E1} said {P} would visit {E2} after work", 1),
    ("{E1} hoped {P} could meet {E2} soon", 1),
    ("{E1} apologized to {E2} because {P} was late", 1),
    ("{E1} told {E2} that {P} had finished the work", 1),
    ("{E1} paid {E2} because {P} fixed the car", 2),
    ("{E1} thanked {E2} because {P} was kind", 2),
    ("{E1} saw that {E2} said {P} was tired", 2),
    ("{E1} waited for {E2} because {P} was slow", 2),
    ("{E1} asked {E2} if {P} could help", 2),
    ("{E1} visited {E2} since {P} was sick", 2),
]

MASC_ONLY = {"es": {"sheriff", "clerk", "analyst"}, "fr": {"sheriff", "clerk"}}

SYLLABLES = {
    "de": (["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "sch", "st", "kr"],
           ["a", "e", "i", "o", "u", "ei", "au"], ["", "n", "r", "t", "ch", "ng", "s"]),
    "es": (["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "ll", "ch"],
           ["a", "e", "i", "o", "u", "ia", "ue"], ["", "", "n", "s", "r", "l"]),
    "fr": (["b", "ch", "d", "f", "g", "j", "l", "m", "n", "p", "r", "s", "t", "v"],
           ["a", "e", "i", "o", "ou", "au", "ai", "eu"], ["", "", "r", "n", "s", "t"]),
    "ru": (["б", "в", "г", "д", "ж", "з", "к", "л", "м", "н", "п", "р", "с", "т", "ш"],
           ["а", "е", "и", "о", "у", "ы", "я"], ["", "", "н", "т", "р", "й", "к"]),
}

CYR = {
    "a": "а", "b": "б", "c": "к", "d": "д", "e": "е", "f": "ф", "g": "г", "h": "х", "i": "и", "j": "ж",
    "k": "к", "l": "л", "m": "м", "n": "н", "o": "о", "p": "п", "q": "к", "r": "р", "s": "с", "t": "т",
    "u": "у", "v": "в", "w": "в", "x": "кс", "y": "ы", "z": "з",
}


def pseudo(lang: str, word: str, taken: set, salt: int = 0) -> str:
    onsets, vowels, codas = SYLLABLES[lang]
    while True:
        h = hashlib.sha256(f"{lang}:{word}:{salt}".encode()).digest()
        rnd = random.Random(h)
        n = 1 if len(word) <= 3 else 2
        w = "".join(rnd.choice(onsets) + rnd.choice(vowels) + rnd.choice(codas) for _ in range(n))
        if lang == "es" and w[-1] not in "aeiou" and rnd.random() < 0.5:
            w += "e"
        if w not in taken:
            taken.add(w)
            return w
        salt += 1


def noun_forms(lang: str, lemma: str):
    if lang == "en":
        return lemma, lemma
    stem = lemma
    for suf in ("er", "or", "ist", "ant", "ent", "e"):
        if lang != "de" and stem.endswith(suf) and len(stem) > 4:
            stem = stem[: -len(suf)]
            break
    if lang == "de":
        s = stem.replace("ch", "§").replace("c", "k").replace("§", "ch").replace("y", "i")
        return s, s + "in"
    if lang == "es":
        s = stem.replace("y", "i").replace("w", "u").replace("k", "c")
        if lemma in MASC_ONLY["es"]:
            return s + "e", s + "e"
        return s + "o", s + "a"
    if lang == "fr":
        s = stem.replace("k", "c").replace("y", "i")
        if lemma in MASC_ONLY["fr"]:
            return s + "e", s + "e"
        return s + "eur", s + "euse"
    if lang == "ru":
        s = "".join(CYR[c] for c in stem)
        return s, s + "ица"
    raise KeyError(lang)


PARADIGMS = {
    "en": {"determiners": {"male": "the", "female": "the"}, "someone": {"neutral": "someone", "male": "someone", "female": "someone"},
           "pronouns": {"male": "he", "female": "she", "neutral": "they"}},
    "de": {"determiners": {"male": "der", "female": "die"}, "someone": {"neutral": "jemand", "male": "einer", "female": "eine"},
           "pronouns": {"male": "er", "female": "sie", "neutral": "xier"}},
    "es": {"determiners": {"male": "el", "female": "la"}, "someone": {"neutral": "alguien", "male": "uno", "female": "una"},
           "pronouns": {"male": "él", "female": "ella", "neutral": "elle"}},
    "fr": {"determiners": {"male": "le", "female": "la"}, "someone": {"neutral": "quelquun", "male": "lun", "female": "lune"},
           "pronouns": {"male": "il", "female": "elle", "neutral": "iel"}},
    "ru": {"determiners": {}, "someone": {"neutral": "ктото", "male": "некий", "female": "некая"},
           "pronouns": {"male": "он", "female": "она", "neutral": "оно"}},
}

SCRIPTS = {"en": "latin", "de": "latin", "es": "latin", "fr": "latin", "ru": "cyrillic"}


def function_words():
    words = []
    for text, _ in TEMPLATES:
        for tok in text.split():
            if not tok.startswith("{") and tok not in words:
                words.append(tok)
    return words


def build(lang: str) -> dict:
    par = PARADIGMS[lang]
    taken = set(par["determiners"].values()) | set(par["pronouns"].values()) | set(par["someone"].values())
    nouns = {}
    for lemma, stereo in [(w, "male") for w in MALE] + [(w, "female") for w in FEMALE] + [(w, "neutral") for w in NEUTRAL]:
        m, f = noun_forms(lang, lemma)
        masc_only = m == f and lang != "en"
        nouns[lemma] = {"male": m, "female": f, "stereotype": stereo, "masculine_only": masc_only}
        taken |= {m, f}
    fw = {}
    for w in function_words():
        fw[w] = w if lang == "en" else pseudo(lang, w, taken)
    templates = []
    for i, (text, coref) in enumerate(TEMPLATES):
        toks = [t if t.startswith("{") else fw[t] for t in text.split()]
        templates.append({"id": f"t{i}", "text": " ".join(toks), "coref": coref})
    return {
        "code": lang,
        "script": SCRIPTS[lang],
        "determiners": par["determiners"],
        "someone": par["someone"],
        "pronouns": par["pronouns"],
        "nouns": nouns,
        "function_words": fw,
        "templates": templates,
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for lang in PARADIGMS:
        g = build(lang)
        path = OUT / f"grammar_{lang}.json"
        path.write_text(json.dumps(g, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
        print("wrote", path)


if __name__ == "__main__":
    main()
