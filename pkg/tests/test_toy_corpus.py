import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnmt.toy_corpus import (
    GENDERS,
    LANGUAGES,
    REPLICA,
    SOMEONE,
    CapacityError,
    ChallengeParseError,
    ChallengeSentence,
    ChallengeSet,
    Composition,
    Frame,
    GrammarError,
    ToyGrammar,
    challenge_frames,
    gen_challenge,
    gen_parallel,
    load_grammar,
    load_grammars,
    match_template,
    parse_challenge,
    pronoun_distance,
    read_lines,
    sample_frames,
    write_lines,
)

GRAMMARS = load_grammars(LANGUAGES)
EN = GRAMMARS["en"]


@pytest.fixture(scope="module")
def challenge():
    return gen_challenge(EN, REPLICA, seed=0)


# ---------------------------------------------------------------------------
# grammars
# ---------------------------------------------------------------------------


def test_shipped_grammars_are_parallel():
    for lang, g in GRAMMARS.items():
        assert g.code == lang
        assert set(g.nouns) == set(EN.nouns)
        assert len(g.templates) == len(EN.templates)
        for a, b in zip(g.templates, EN.templates):
            assert a.coref == b.coref
        assert {n.stereotype for n in g.nouns.values()} == set(GENDERS)


def test_unknown_grammar():
    with pytest.raises(GrammarError, match="xx"):
        load_grammar("xx")


def test_german_feminine_rendering():
    de = GRAMMARS["de"]
    frame = Frame(0, "driver", "female", "baker", "male")
    r = de.render(frame)
    assert r.tokens[:2] == ["die", "driverin"]
    assert r.entity_index == (1, r.tokens.index(de.nouns["baker"].male))
    assert r.tokens[r.pronoun_index] == "sie"


def test_russian_has_no_determiners():
    ru = GRAMMARS["ru"]
    assert ru.script == "cyrillic"
    assert ru.entity_tokens("driver", "female") == [ru.nouns["driver"].female]


def test_masculine_only_nouns():
    flagged = {lang: sorted(n.lemma for n in g.nouns.values() if n.masculine_only) for lang, g in GRAMMARS.items()}
    assert flagged["es"] and flagged["fr"]
    for lang, lemmas in flagged.items():
        g = GRAMMARS[lang]
        for lemma in lemmas:
            n = g.nouns[lemma]
            assert n.male == n.female
            # the determiner still marks gender
            assert g.entity_tokens(lemma, "female")[0] == g.determiners["female"]


def test_someone_is_gender_neutral_in_english():
    assert set(EN.someone.values()) == {"someone"}
    de = GRAMMARS["de"]
    assert de.entity_tokens(SOMEONE, "female") == [de.someone["female"]]


def test_grammar_validation():
    d = EN.to_dict()
    d["templates"][0]["text"] = "{E1} likes {E1} {P}"
    with pytest.raises(GrammarError, match="exactly one"):
        ToyGrammar.from_dict(d)
    d = GRAMMARS["de"].to_dict()
    d["nouns"]["driver"]["female"] = d["nouns"]["driver"]["male"]
    with pytest.raises(GrammarError, match="masculine-only"):
        ToyGrammar.from_dict(d)
    d = EN.to_dict()
    del d["pronouns"]["neutral"]
    with pytest.raises(GrammarError, match="pronouns"):
        ToyGrammar.from_dict(d)


def test_grammar_round_trip(tmp_path):
    for g in GRAMMARS.values():
        g.save(tmp_path / "g.json")
        assert ToyGrammar.load(tmp_path / "g.json").to_dict() == g.to_dict()


# ---------------------------------------------------------------------------
# parallel corpora
# ---------------------------------------------------------------------------


def test_parallel_corpus_is_seeded():
    a = gen_parallel(GRAMMARS, ("en", "de"), 50, seed=4)
    b = gen_parallel(GRAMMARS, ("en", "de"), 50, seed=4)
    c = gen_parallel(GRAMMARS, ("en", "de"), 50, seed=5)
    assert a == b
    assert a != c
    assert len(a[0]) == len(a[1]) == 50


def test_parallel_pairs_share_frames():
    src, tgt = gen_parallel(GRAMMARS, ("en", "fr"), 100, seed=1)
    frames = sample_frames(EN, 100, seed=1)
    for f, s, t in zip(frames, src, tgt):
        assert s == EN.render(f).text
        assert t == GRAMMARS["fr"].render(f).text


def test_skew_is_respected():
    frames = sample_frames(EN, 20000, seed=0, skew=0.7)
    hits = total = 0
    for f in frames:
        for lemma, g in ((f.e1, f.g1), (f.e2, f.g2)):
            if lemma == SOMEONE:
                assert g == "neutral"
                continue
            stereo = EN.nouns[lemma].stereotype
            if stereo != "neutral":
                total += 1
                hits += g == stereo
    assert abs(hits / total - 0.7) < 0.01


def test_sampling_arguments():
    with pytest.raises(ValueError):
        sample_frames(EN, 0, seed=0)
    with pytest.raises(ValueError):
        sample_frames(EN, 5, seed=0, skew=1.5)
    with pytest.raises(GrammarError):
        gen_parallel({"en": EN}, ("en", "de"), 5, seed=0)


def test_lines_round_trip(tmp_path):
    lines = ["a b", "ктото он", ""]
    write_lines(tmp_path / "x" / "f.txt", lines)
    assert read_lines(tmp_path / "x" / "f.txt") == lines


# ---------------------------------------------------------------------------
# challenge set
# ---------------------------------------------------------------------------


def test_replica_composition(challenge):
    assert REPLICA.total == 3888
    assert len(challenge) == 3888
    assert challenge.by_gender() == {"male": 1826, "female": 1822, "neutral": 240}
    assert challenge.by_stereotype() == {"pro": 1584, "anti": 1584, "neutral": 720}


def test_pro_and_anti_twins_differ_only_in_pronoun():
    items = challenge_frames(EN, REPLICA, seed=0)
    pro = {}
    anti = {}
    for frame, label in items:
        gold = frame.e1 if EN.templates[frame.template].coref == 1 else frame.e2
        other = frame.e2 if gold == frame.e1 else frame.e1
        key = (frame.template, gold, other)
        if label == "pro":
            pro[key] = frame
        elif label == "anti":
            anti[key] = frame
    assert pro.keys() == anti.keys()
    for key in pro:
        a, b = EN.render(pro[key]).tokens, EN.render(anti[key]).tokens
        diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
        assert len(a) == len(b)
        assert len(diff) == 1
        assert {a[diff[0]], b[diff[0]]} == {"he", "she"}


def test_gold_gender_matches_pronoun(challenge):
    pron = {v: k for k, v in EN.pronouns.items()}
    for item in challenge:
        frame, rendered = match_template(EN, item.sentence)
        assert pron[rendered.tokens[rendered.pronoun_index]] == item.gold_gender
        slot = EN.templates[frame.template].coref - 1
        assert rendered.entity_index[slot] == item.entity_index
        assert (frame.e1, frame.e2)[slot] == item.entity_lemma


def test_stereotype_labels_follow_lexicon(challenge):
    for item in challenge:
        if item.entity_lemma == SOMEONE:
            assert item.gold_gender == "neutral"
            assert item.stereotype == "neutral"
            continue
        stereo = EN.nouns[item.entity_lemma].stereotype
        if stereo == "neutral":
            assert item.stereotype == "neutral"
        else:
            assert item.stereotype == ("pro" if item.gold_gender == stereo else "anti")


def test_challenge_is_seeded(challenge):
    again = gen_challenge(EN, REPLICA, seed=0)
    assert again.sentences == challenge.sentences
    other = gen_challenge(EN, REPLICA, seed=1)
    assert other.sentences != challenge.sentences


def test_capacity_error():
    with pytest.raises(CapacityError, match="pro-male"):
        gen_challenge(EN, Composition(pro_male=10**6))


def test_tsv_round_trip(tmp_path, challenge):
    challenge.save(tmp_path / "en.tsv")
    back = ChallengeSet.load(tmp_path / "en.tsv")
    assert back.sentences == challenge.sentences


def test_tsv_fixture_and_empty_file(tmp_path):
    text = (
        "male\t1\tthe developer argued with the nurse because he was late\tdeveloper\tpro\n"
        "female\t1\tthe developer argued with the nurse because she was late\tdeveloper\tanti\n"
        "neutral\t0\tsomeone argued with the nurse because they was late\tsomeone\tneutral\n"
    )
    rows = parse_challenge(text)
    assert [r.gold_gender for r in rows] == ["male", "female", "neutral"]
    assert rows[0] == ChallengeSentence("male", 1, "the developer argued with the nurse because he was late", "developer", "pro")
    assert rows[2].to_row() + "\n" == text.splitlines(keepends=True)[2]
    (tmp_path / "empty.tsv").write_text("", encoding="utf-8")
    assert len(ChallengeSet.load(tmp_path / "empty.tsv")) == 0


@pytest.mark.parametrize(
    "row, message",
    [
        ("male\t1\tthe cook\tcook", "line 2: expected 5"),
        ("boy\t1\tthe cook\tcook\tpro", "line 2: unknown gold gender"),
        ("male\t1\tthe cook\tcook\tmaybe", "line 2: unknown stereotype"),
        ("male\tx\tthe cook\tcook\tpro", "line 2: entity index 'x'"),
        ("male\t5\tthe cook\tcook\tpro", "line 2: entity index 5 outside"),
    ],
)
def test_tsv_parse_errors(row, message):
    good = "male\t1\tthe cook\tcook\tpro"
    with pytest.raises(ChallengeParseError, match=message):
        parse_challenge(good + "\n" + row + "\n")


def test_pronoun_distance(challenge):
    dists = {pronoun_distance(EN, item) for item in challenge}
    assert all(d != 0 for d in dists)
    assert min(d for d in dists if d > 0) >= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(LANGUAGES))
def test_match_template_inverts_render(seed, lang):
    g = GRAMMARS[lang]
    for frame in sample_frames(g, 3, seed):
        if frame.coref_gender(g) == "neutral":
            continue
        back, rendered = match_template(EN, EN.render(frame).text)
        assert back.template == frame.template
        assert (back.e1, back.e2) == (frame.e1, frame.e2)
        assert rendered.tokens == EN.render(frame).tokens


def test_match_template_rejects_foreign_text():
    with pytest.raises(GrammarError):
        match_template(EN, "this is not a template sentence")


def test_frames_render_with_all_languages(challenge):
    frames = challenge_frames(EN, Composition(10, 10, 5, 5, 5), seed=3)
    for frame, _ in frames:
        lens = {lang: len(g.render(frame).tokens) for lang, g in GRAMMARS.items()}
        assert all(n >= len(EN.templates[frame.template].tokens) for n in lens.values())
    assert np.all([f.coref_gender(EN) in GENDERS for f, _ in frames])
