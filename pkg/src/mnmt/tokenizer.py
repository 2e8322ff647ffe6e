"""Byte-pair-encoding subword learner/applier and vocabularies with specials."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

END_OF_WORD = "</w>"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
BASE_SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class BpeError(ValueError):
    pass


def lang_tag(lang: str) -> str:
    """Special token that asks a shared decoder for ``lang`` output."""
    return f"<2{lang}>"


def _word_symbols(word: str) -> list[str]:
    chars = list(word)
    chars[-1] = chars[-1] + END_OF_WORD
    return chars


def _merge_word(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)
    alphabet: tuple[str, ...] = ()
    marker: str = END_OF_WORD

    def __post_init__(self) -> None:
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise BpeError("duplicate merge pair in BPE model")
        self._cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.merges)

    def apply(self, word: str) -> list[str]:
        return bpe_apply(self, word)

    def dumps(self) -> str:
        lines = [f"bpe v1 {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("bpe v1 "):
            raise BpeError("missing 'bpe v1 <n>' header")
        n = int(lines[0].split()[2])
        merges = []
        for lineno, line in enumerate(lines[1 : n + 1], start=2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise BpeError(f"line {lineno}: expected '<left> <right>'")
            merges.append((parts[0], parts[1]))
        if len(merges) != n:
            raise BpeError(f"header announces {n} merges, found {len(merges)}")
        alphabet = sorted({c for pair in merges for sym in pair for c in sym.replace(END_OF_WORD, "")})
        return cls(merges, tuple(alphabet))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def bpe_learn(corpus: Iterable[str], num_merges: int) -> BpeModel:
    """Learn up to ``num_merges`` merges from whitespace-tokenised ``corpus`` lines.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smallest pair. Learning stops early once every word is a single symbol.
    """
    if num_merges < 0:
        raise BpeError("num_merges must be >= 0")
    freqs: Counter[str] = Counter()
    for line in corpus:
        freqs.update(line.split())
    if not freqs:
        raise BpeError("cannot learn BPE from an empty corpus")

    words = sorted(freqs)
    counts = [freqs[w] for w in words]
    symbols = [_word_symbols(w) for w in words]
    alphabet = tuple(sorted({c for w in words for c in w}))

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}
    for idx, syms in enumerate(symbols):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += counts[idx]
            pair_words.setdefault(pair, set()).add(idx)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        live = [(pair, c) for pair, c in pair_counts.items() if c > 0]
        if not live:
            break
        best = min(live, key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for idx in sorted(pair_words.pop(best, ())):
            old = symbols[idx]
            new = _merge_word(old, best)
            if new == old:
                continue
            c = counts[idx]
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= c
            for pair in zip(new, new[1:]):
                pair_counts[pair] += c
                if pair != best:
                    pair_words.setdefault(pair, set()).add(idx)
            symbols[idx] = new
        pair_counts.pop(best, None)
    return BpeModel(merges, alphabet)


def bpe_apply(model: BpeModel, word: str) -> list[str]:
    """Segment ``word`` by replaying merges, lowest rank first, leftmost first."""
    if not word:
        raise BpeError("cannot segment an empty word")
    cached = model._cache.get(word)
    if cached is not None:
        return list(cached)
    syms = _word_symbols(word)
    ranks = model.ranks
    while len(syms) > 1:
        best_rank = None
        best_pos = -1
        for i in range(len(syms) - 1):
            r = ranks.get((syms[i], syms[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_pos = r, i
        if best_rank is None:
            break
        syms[best_pos : best_pos + 2] = [syms[best_pos] + syms[best_pos + 1]]
    model._cache[word] = tuple(syms)
    return syms


def join_subwords(pieces: Sequence[str]) -> list[str]:
    """Reassemble marker-terminated subwords into words."""
    words: list[str] = []
    buf = ""
    for piece in pieces:
        if piece.endswith(END_OF_WORD):
            words.append(buf + piece[: -len(END_OF_WORD)])
            buf = ""
        else:
            buf += piece
    if buf:
        words.append(buf)
    return words


class Vocabulary:
    """Dense token/id bijection; specials take the lowest ids."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")
        for i, tok in enumerate(BASE_SPECIALS):
            if self.itos[i] != tok:
                raise ValueError(f"special {tok} must have id {i}")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def specials(self) -> list[str]:
        return [t for t in self.itos if t.startswith("<") and t.endswith(">") and END_OF_WORD not in t]

    def dumps(self) -> str:
        return "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not _:
                raise ValueError(f"vocab line {lineno}: expected '<token>\\t<id>'")
            rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError("vocab ids must be dense from 0")
        return cls([t for _, t in rows])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def build_vocab(segmented: Iterable[Sequence[str]], specials: Sequence[str] = ()) -> Vocabulary:
    """Ids: base specials, extra specials, then tokens by descending count, then lexicographic."""
    counts: Counter[str] = Counter()
    for sent in segmented:
        counts.update(sent)
    head = list(BASE_SPECIALS) + [s for s in specials if s not in BASE_SPECIALS]
    reserved = set(head)
    rest = sorted((t for t in counts if t not in reserved), key=lambda t: (-counts[t], t))
    return Vocabulary(head + rest)


class SubwordTokenizer:
    """BPE segmentation plus a vocabulary: text <-> ids with word bookkeeping."""

    def __init__(self, bpe: BpeModel, vocab: Vocabulary):
        self.bpe = bpe
        self.vocab = vocab

    def segment(self, sentence: str) -> list[str]:
        pieces: list[str] = []
        for word in sentence.split():
            pieces.extend(bpe_apply(self.bpe, word))
        return pieces

    def encode(self, sentence: str) -> list[int]:
        return self.vocab.encode(self.segment(sentence))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode_words(ids))

    def decode_words(self, ids: Iterable[int]) -> list[str]:
        pieces = []
        for i in ids:
            tok = self.vocab.token(i)
            if i == UNK_ID:
                pieces.append(UNK + END_OF_WORD)
            elif not (tok.startswith("<") and tok.endswith(">")) or tok.endswith(END_OF_WORD):
                pieces.append(tok)
        return join_subwords(pieces)

    def piece_owners(self, ids: Sequence[int]) -> list[int]:
        """Index (into ``decode_words(ids)``) of the word each id belongs to; -1 for dropped specials."""
        owners, w = [], 0
        for i in ids:
            tok = self.vocab.token(i)
            if i == UNK_ID:
                owners.append(w)
                w += 1
            elif not (tok.startswith("<") and tok.endswith(">")) or tok.endswith(END_OF_WORD):
                owners.append(w)
                if tok.endswith(END_OF_WORD):
                    w += 1
            else:
                owners.append(-1)
        return owners

    def word_starts(self, sentence: str) -> list[int]:
        """Subword position of each word's first piece."""
        starts, pos = [], 0
        for word in sentence.split():
            starts.append(pos)
            pos += len(bpe_apply(self.bpe, word))
        return starts

    def first_subword_index(self, word_index: int, sentence: str) -> int:
        starts = self.word_starts(sentence)
        if not 0 <= word_index < len(starts):
            raise IndexError(f"word index {word_index} outside sentence of {len(starts)} words")
        return starts[word_index]


def piece_word_index(pieces: Sequence[str]) -> list[int]:
    """Map each subword position to the index of the word it belongs to."""
    out, w = [], 0
    for piece in pieces:
        out.append(w)
        if piece.endswith(END_OF_WORD):
            w += 1
    return out
