"""RBF-kernel SVM probes of encoder states for gender information.

The solver is SMO with second-order working-set selection on a precomputed
kernel matrix, the scheme used by LIBSVM.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import DomainError, ShapeError
from .toy_corpus import ChallengeSet

log = logging.getLogger(__name__)

WORD_TYPES = ("determiner", "occupation")
_TAU = 1e-12


class ExtractionError(ValueError):
    pass


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"kernel inputs have dimensions {a.shape[1]} and {b.shape[1]}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(x: np.ndarray) -> float:
    """1 / (n_features * var(X)), falling back to 1 / n_features for constant data."""
    var = float(np.var(x))
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0 / x.shape[1]


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # (n_sv, dim)
    alpha: np.ndarray  # (n_sv,) dual coefficients, 0 < alpha <= C
    labels: np.ndarray  # (n_sv,) in {-1, +1}
    bias: float
    gamma: float
    C: float
    iterations: int = 0
    kkt_gap: float = 0.0
    support_index: np.ndarray | None = None  # rows of the training data

    @property
    def dual_coef(self) -> np.ndarray:
        return self.alpha * self.labels

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.support_vectors.shape[1]:
            raise ShapeError(f"model expects dimension {self.support_vectors.shape[1]}, got {x.shape[1]}")
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias


def _violation(alpha, grad, y, C):
    """max over I_up minus min over I_low of -y*G (the maximal violating pair gap)."""
    yg = -y * grad
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    m = yg[up].max() if up.any() else -np.inf
    mm = yg[low].min() if low.any() else np.inf
    return float(m - mm), up, low, yg


def smo_solve(K: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-3, max_iter: int = 1_000_000):
    """Dual solution (alpha, bias, iterations, gap) for a precomputed kernel matrix."""
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a with Q = yy' * K
    diag = np.diag(K).copy()
    it = 0
    while True:
        gap, up, low, yg = _violation(alpha, grad, y, C)
        if gap < tol or it >= max_iter:
            break
        up_idx = np.flatnonzero(up)
        i = int(up_idx[np.argmax(yg[up_idx])])  # first index on ties
        gmax = yg[i]
        cand = np.flatnonzero(low & (yg < gmax))
        b = gmax - yg[cand]
        a = diag[i] + diag[cand] - 2.0 * K[i, cand]
        a = np.where(a > 0, a, _TAU)
        j = int(cand[np.argmin(-(b * b) / a)])
        ai_old, aj_old = alpha[i], alpha[j]
        yi, yj = y[i], y[j]
        quad = max(diag[i] + diag[j] - 2.0 * K[i, j], _TAU)
        if yi != yj:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        grad += y * (K[:, i] * (yi * (ai - ai_old)) + K[:, j] * (yj * (aj - aj_old)))
        it += 1
    # bias from free vectors, else the midpoint of the feasible interval
    yg = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(-yg[free].mean())
    else:
        _, up, low, _ = _violation(alpha, grad, y, C)
        ub = yg[low].min() if low.any() else 0.0
        lb = yg[up].max() if up.any() else 0.0
        rho = float(-(ub + lb) / 2.0)
    return alpha, -rho, it, gap


def svm_train(
    x: np.ndarray, y: np.ndarray, C: float = 1.0, gamma: float | None = None, tol: float = 1e-3
) -> SvmModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"expected X (n, dim) and y (n,), got {x.shape} and {y.shape}")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise DomainError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise DomainError("SVM training needs both classes")
    g = default_gamma(x) if gamma is None else float(gamma)
    K = rbf_kernel(x, x, g)
    alpha, bias, it, gap = smo_solve(K, y, C, tol)
    sv = alpha > 0
    return SvmModel(x[sv].copy(), alpha[sv].copy(), y[sv].copy(), bias, g, C, it, gap, np.flatnonzero(sv))


def svm_predict(model: SvmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels in {-1, +1} (0 margin maps to +1) and raw margins."""
    margin = model.decision(x)
    return np.where(margin >= 0, 1, -1), margin


def kkt_violation(model: SvmModel, x: np.ndarray, y: np.ndarray) -> float:
    """Maximal violating-pair gap of ``model`` as a solution on training data (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.zeros(len(y))
    if model.support_index is not None:
        alpha[model.support_index] = model.alpha
    else:
        # support vectors are copies of training rows; match them back
        index = {(row.tobytes(), lab): k for k, (row, lab) in enumerate(zip(x, y))}
        for sv, a, lab in zip(model.support_vectors, model.alpha, model.labels):
            alpha[index[(sv.tobytes(), lab)]] += a
    K = rbf_kernel(x, x, model.gamma)
    grad = y * (K @ (alpha * y)) - 1.0
    gap, *_ = _violation(alpha, grad, y, model.C)
    return gap


# ---------------------------------------------------------------------------
# probing protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeProtocol:
    word_type: str = "determiner"
    train_size: int = 1000
    test_size: int | None = None  # None: everything not used for training
    runs: int = 10
    seed: int = 0
    C: float = 1.0
    gamma: float | None = None
    tol: float = 1e-3

    def __post_init__(self) -> None:
        if self.word_type not in WORD_TYPES:
            raise ValueError(f"word_type must be one of {WORD_TYPES}")
        if self.runs < 1 or self.train_size < 2:
            raise ValueError("runs >= 1 and train_size >= 2 required")


@dataclass
class ProbeResult:
    system: str
    word_type: str
    accuracies: list[float]
    train_balance: list[float]  # fraction of male labels in each run's train set
    errors: Counter = field(default_factory=Counter)
    kkt_gaps: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    def top_errors(self, k: int = 20) -> list[tuple[str, int]]:
        return sorted(self.errors.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def word_position(challenge_item, word_type: str) -> int:
    """Source word index probed for ``word_type``: the entity noun or the word before it."""
    if word_type == "occupation":
        return challenge_item.entity_index
    if challenge_item.entity_index == 0:
        raise ExtractionError(f"no determiner before the entity in {challenge_item.sentence!r}")
    return challenge_item.entity_index - 1


def extract_embedding(assembly, sentence: str, word: str | int, src: str = "en", tgt: str | None = None) -> np.ndarray:
    """Encoder state at the first subword of ``word`` (a word or a word index)."""
    words = sentence.split()
    if isinstance(word, str):
        if word not in words:
            raise ExtractionError(f"{word!r} does not occur in {sentence!r}")
        index = words.index(word)
    else:
        index = int(word)
        if not 0 <= index < len(words):
            raise ExtractionError(f"word index {index} outside {sentence!r}")
    tgt = tgt or default_probe_target(assembly, src)
    states = assembly.encoder_states(src, tgt, [sentence])[0]
    return states[assembly.source_position(src, tgt, sentence, index)].copy()


def default_probe_target(assembly, src: str = "en") -> str:
    """Route used to encode probe sentences: the first pair leaving ``src``."""
    for s, t in assembly.langset.pairs:
        if s == src:
            return t
    raise ExtractionError(f"system has no pair with source {src!r}")


def probe_features(
    assembly, challenge: ChallengeSet, word_type: str, src: str = "en", tgt: str | None = None
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(X, y, entity lemmas) over the binary-gender sentences of ``challenge``."""
    tgt = tgt or default_probe_target(assembly, src)
    items = [s for s in challenge if s.gold_gender in ("male", "female")]
    sentences = [s.sentence for s in items]
    states = assembly.encoder_states(src, tgt, sentences)
    rows = []
    for item, st in zip(items, states):
        pos = assembly.source_position(src, tgt, item.sentence, word_position(item, word_type))
        rows.append(st[pos])
    x = np.asarray(rows)
    y = np.array([1.0 if s.gold_gender == "male" else -1.0 for s in items])
    return x, y, [s.entity_lemma for s in items]


def run_probe_features(
    x: np.ndarray, y: np.ndarray, words: Sequence[str], protocol: ProbeProtocol, system: str = "", shuffle_labels: bool = False
) -> ProbeResult:
    n = len(y)
    test_size = protocol.test_size if protocol.test_size is not None else n - protocol.train_size
    if protocol.train_size + test_size > n:
        raise ValueError(f"train {protocol.train_size} + test {test_size} exceeds {n} labelled sentences")
    rng = np.random.default_rng(protocol.seed)
    labels = rng.permutation(y) if shuffle_labels else y
    res = ProbeResult(system, protocol.word_type, [], [])
    for run in range(protocol.runs):
        order = rng.permutation(n)
        tr = order[: protocol.train_size]
        te = order[protocol.train_size : protocol.train_size + test_size]
        if len(np.unique(labels[tr])) < 2:
            raise DomainError(f"run {run}: training sample holds a single class")
        model = svm_train(x[tr], labels[tr], protocol.C, protocol.gamma, protocol.tol)
        pred, _ = svm_predict(model, x[te])
        res.accuracies.append(100.0 * float(np.mean(pred == labels[te])))
        res.train_balance.append(float(np.mean(labels[tr] > 0)))
        res.kkt_gaps.append(model.kkt_gap)
        for k in te[pred != labels[te]]:
            res.errors[words[int(k)]] += 1
    return res


def run_probe(
    assembly,
    challenge: ChallengeSet,
    protocol: ProbeProtocol,
    system: str = "",
    src: str = "en",
    tgt: str | None = None,
    shuffle_labels: bool = False,
) -> ProbeResult:
    x, y, words = probe_features(assembly, challenge, protocol.word_type, src, tgt)
    return run_probe_features(x, y, words, protocol, system, shuffle_labels)


PROBE_COLUMNS = ("system", "word_type", "run", "accuracy")


def probe_rows(result: ProbeResult) -> list[dict]:
    return [
        {"system": result.system, "word_type": result.word_type, "run": str(r), "accuracy": f"{acc:.4f}"}
        for r, acc in enumerate(result.accuracies)
    ]


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in columns})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_probe_errors(path: str | Path, result: ProbeResult, k: int = 20) -> None:
    rows = [{"rank": str(i), "word": w, "count": str(c)} for i, (w, c) in enumerate(result.top_errors(k), start=1)]
    write_csv(path, ("rank", "word", "count"), rows)
