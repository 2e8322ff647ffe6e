from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnmt.tokenizer import (
    BASE_SPECIALS,
    END_OF_WORD,
    UNK_ID,
    BpeError,
    BpeModel,
    SubwordTokenizer,
    Vocabulary,
    bpe_apply,
    bpe_learn,
    build_vocab,
    join_subwords,
    lang_tag,
    piece_word_index,
)

W = END_OF_WORD


def brute_force_bpe(words: list[str], num_merges: int) -> list[tuple[str, str]]:
    """Recount every pair from scratch after each merge."""
    segs = [list(w[:-1]) + [w[-1] + W] for w in words]
    merges = []
    for _ in range(num_merges):
        counts = Counter(p for s in segs for p in zip(s, s[1:]))
        if not counts:
            break
        best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        merges.append(best)
        new = []
        for s in segs:
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                    out.append(s[i] + s[i + 1])
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            new.append(out)
        segs = new
    return merges


def test_learn_single_merge_hand_count():
    assert bpe_learn(["aaab"], 1).merges == [("a", "a")]


def test_zero_merges_is_character_segmentation():
    model = bpe_learn(["hello world"], 0)
    assert len(model) == 0
    assert bpe_apply(model, "cat") == ["c", "a", "t" + W]


def test_low_lower_matches_brute_force():
    assert bpe_learn(["low lower"], 2).merges == brute_force_bpe(["low", "lower"], 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcde", min_size=1, max_size=7), min_size=1, max_size=12), st.integers(0, 15))
def test_learn_matches_brute_force(words, k):
    assert bpe_learn([" ".join(words)], k).merges == brute_force_bpe(words, k)


def test_learn_empty_corpus_is_error():
    with pytest.raises(BpeError):
        bpe_learn(["", "   "], 5)


def test_learn_returns_min_of_requested_and_available():
    model = bpe_learn(["ab"], 50)
    assert model.merges == [("a", "b" + W)]


def test_apply_leftmost_first():
    model = BpeModel([("a", "a")])
    assert bpe_apply(model, "aaab") == ["aa", "a", "b" + W]


def test_apply_lowest_rank_first():
    model = BpeModel([("b", "c"), ("a", "b")])
    # (b, c) outranks (a, b), and once applied leaves no (a, b) pair behind
    assert bpe_apply(model, "abcd") == ["a", "bc", "d" + W]


def test_duplicate_merges_rejected():
    with pytest.raises(BpeError):
        BpeModel([("a", "b"), ("a", "b")])


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyzäöüéñ", min_size=1, max_size=15))
def test_round_trip(word):
    model = bpe_learn(["the quick brown fox jumps over the lazy dog ñandú über café"], 30)
    assert join_subwords(bpe_apply(model, word)) == [word]


def test_round_trip_thousand_random_words():
    import random

    rnd = random.Random(0)
    model = bpe_learn(["alpha beta gamma delta epsilon zeta eta theta"], 25)
    for _ in range(1000):
        w = "".join(rnd.choice("abdeghilmnoptz") for _ in range(rnd.randint(1, 12)))
        assert "".join(p.replace(W, "") for p in bpe_apply(model, w)) == w


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abcdef", min_size=1, max_size=10))
def test_segment_count_non_increasing_in_merges(word):
    corpus = ["abc abd bcd cde def fab ace bdf"] * 3
    lengths = [len(bpe_apply(bpe_learn(corpus, k), word)) for k in range(0, 12)]
    assert all(a >= b for a, b in zip(lengths, lengths[1:]))


def test_serialization_deterministic_and_round_trips(tmp_path):
    corpus = ["der fahrer sagte er sei müde", "die fahrerin sagte sie sei müde"]
    a, b = bpe_learn(corpus, 20), bpe_learn(corpus, 20)
    assert a.dumps() == b.dumps()
    assert a.dumps().splitlines()[0] == "bpe v1 20"
    a.save(tmp_path / "bpe.txt")
    assert BpeModel.load(tmp_path / "bpe.txt").merges == a.merges


def test_bad_header():
    with pytest.raises(BpeError):
        BpeModel.loads("merges 3\na b\n")


# -- vocabulary ----------------------------------------------------------------


def test_empty_corpus_vocab_is_specials_only():
    v = build_vocab([], [lang_tag("de")])
    assert v.itos == list(BASE_SPECIALS) + ["<2de>"]


def test_duplicates_deduplicated():
    v = build_vocab([["x", "x", "y"], ["x"]])
    assert v.itos[len(BASE_SPECIALS) :] == ["x", "y"]


def test_id_assignment_matches_sort_oracle():
    sents = [["b", "a", "c", "a"], ["c", "d", "b"], ["e"]]
    counts = Counter(t for s in sents for t in s)
    oracle = sorted(counts, key=lambda t: (-counts[t], t))
    assert build_vocab(sents).itos[len(BASE_SPECIALS) :] == oracle


def test_vocab_bijective_and_round_trip(tmp_path):
    v = build_vocab([["a" + W, "b", "c" + W]], ["<2es>", "<2fr>"])
    assert all(v.stoi[t] == i for i, t in enumerate(v.itos))
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").itos == v.itos
    assert v.specials == list(BASE_SPECIALS) + ["<2es>", "<2fr>"]


def test_learned_vocab_never_produces_unk_on_training_corpus():
    corpus = ["la conductora dijo que ella estaba cansada", "el conductor dijo que él estaba cansado"]
    bpe = bpe_learn(corpus, 15)
    tok = SubwordTokenizer(bpe, build_vocab(tok for line in corpus for tok in [sum((bpe_apply(bpe, w) for w in line.split()), [])]))
    for line in corpus:
        assert UNK_ID not in tok.encode(line)
        assert tok.decode(tok.encode(line)) == line


# -- word bookkeeping -------------------------------------------------------------


def test_first_subword_index_and_owners():
    bpe = BpeModel([("t", "h"), ("th", "e" + W)])
    corpus = ["the cat", "the"]
    vocab = build_vocab([[p for w in s.split() for p in bpe_apply(bpe, w)] for s in corpus])
    tok = SubwordTokenizer(bpe, vocab)
    sentence = "the cat the"
    # the -> 1 piece, cat -> 3 pieces
    assert tok.word_starts(sentence) == [0, 1, 4]
    assert tok.first_subword_index(2, sentence) == 4
    ids = tok.encode(sentence)
    assert tok.piece_owners(ids) == [0, 1, 1, 1, 2]
    assert piece_word_index(tok.segment(sentence)) == [0, 1, 1, 1, 2]
    with pytest.raises(IndexError):
        tok.first_subword_index(3, sentence)


def test_piece_owners_skip_specials():
    vocab = build_vocab([["a" + W]], ["<2de>"])
    tok = SubwordTokenizer(BpeModel([]), vocab)
    ids = [vocab.stoi["<2de>"], vocab.stoi["a" + W], UNK_ID]
    assert tok.piece_owners(ids) == [-1, 0, 1]
    assert tok.decode_words(ids) == ["a", "<unk>"]
