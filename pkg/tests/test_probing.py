import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnmt.assemblies import LanguageSet, build
from mnmt.probing import (
    ExtractionError,
    ProbeProtocol,
    default_gamma,
    default_probe_target,
    extract_embedding,
    kkt_violation,
    probe_features,
    probe_rows,
    rbf_kernel,
    run_probe,
    run_probe_features,
    svm_predict,
    svm_train,
    word_position,
    write_probe_errors,
)
from mnmt.tensor import DomainError, ShapeError
from mnmt.toy_corpus import REPLICA, Composition, gen_challenge, gen_parallel, load_grammars
from mnmt.transformer import PRESETS, TransformerConfig


def _blobs(n, dim=3, sep=2.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x = rng.normal(size=(n, dim)) + sep * y[:, None] * np.eye(dim)[0]
    return x, y


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


def test_rbf_kernel_values():
    a = np.array([[0.0, 0.0], [1.0, 1.0]])
    k = rbf_kernel(a, a, 0.5)
    assert k[0, 0] == 1.0
    assert k[0, 1] == pytest.approx(math.exp(-1.0))
    with pytest.raises(ShapeError):
        rbf_kernel(a, np.zeros((1, 3)), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.floats(0.01, 10.0), st.integers(0, 10**6))
def test_rbf_kernel_is_psd(n, dim, gamma, seed):
    x = np.random.default_rng(seed).normal(size=(n, dim))
    k = rbf_kernel(x, x, gamma)
    np.testing.assert_allclose(k, k.T, rtol=0, atol=1e-15)
    assert np.linalg.eigvalsh(k).min() > -1e-9


def test_default_gamma():
    x = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert default_gamma(x) == pytest.approx(1.0 / (2 * 1.0))
    assert default_gamma(np.ones((3, 4))) == 0.25


# ---------------------------------------------------------------------------
# SMO solver
# ---------------------------------------------------------------------------


def test_two_point_closed_form():
    # symmetric problem: alpha1 = alpha2 = a maximises 2a - a^2 (1 - k), so a = 1 / (1 - k), bias 0
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    y = np.array([1.0, -1.0])
    gamma = 0.5
    k = math.exp(-gamma)
    m = svm_train(x, y, C=10.0, gamma=gamma, tol=1e-10)
    np.testing.assert_allclose(m.alpha, [1 / (1 - k)] * 2, rtol=1e-8)
    assert abs(m.bias) < 1e-8
    np.testing.assert_allclose(m.decision(x), y, atol=1e-8)


def test_two_point_box_constraint():
    x = np.array([[0.0], [0.1]])
    y = np.array([1.0, -1.0])
    m = svm_train(x, y, C=1.0, gamma=1.0, tol=1e-10)
    # 1 / (1 - exp(-0.01)) ~ 100 is clipped to C
    np.testing.assert_allclose(m.alpha, [1.0, 1.0])


def test_xor_is_separable():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    m = svm_train(x, y, C=100.0, gamma=2.0)
    pred, _ = svm_predict(m, x)
    assert pred.tolist() == y.tolist()


def test_kkt_conditions_hold():
    x, y = _blobs(200, sep=1.0)
    m = svm_train(x, y, C=1.0, tol=1e-4)
    assert kkt_violation(m, x, y) < 1e-4
    assert np.all((m.alpha > 0) & (m.alpha <= 1.0 + 1e-12))
    # equality constraint of the dual
    assert abs(float(m.alpha @ m.labels)) < 1e-9


def test_matches_sklearn():
    svm = pytest.importorskip("sklearn.svm")
    x, y = _blobs(150, sep=0.8, seed=3)
    gamma = default_gamma(x)
    ours = svm_train(x, y, C=1.0, gamma=gamma, tol=1e-6)
    ref = svm.SVC(C=1.0, kernel="rbf", gamma=gamma, tol=1e-6).fit(x, y)
    probe = np.random.default_rng(9).normal(size=(50, 3))
    np.testing.assert_allclose(ours.decision(probe), ref.decision_function(probe), atol=1e-4)
    assert len(ours.alpha) == ref.support_.size


def test_brute_force_predict():
    x, y = _blobs(60, seed=2)
    m = svm_train(x, y)
    q = np.random.default_rng(1).normal(size=(10, 3))
    want = []
    for row in q:
        s = m.bias
        for sv, a, lab in zip(m.support_vectors, m.alpha, m.labels):
            s += a * lab * math.exp(-m.gamma * float(((row - sv) ** 2).sum()))
        want.append(s)
    labels, margin = svm_predict(m, q)
    np.testing.assert_allclose(margin, want, rtol=1e-12, atol=1e-12)
    assert labels.tolist() == [1 if v >= 0 else -1 for v in want]


def test_duplicate_points():
    x = np.array([[0.0], [0.0], [1.0], [1.0], [0.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0, -1.0])
    m = svm_train(x, y, C=1.0, gamma=1.0, tol=1e-8)
    assert kkt_violation(m, x, y) < 1e-6
    pred, _ = svm_predict(m, np.array([[1.0]]))
    assert pred.tolist() == [-1]


def test_permutation_invariance():
    x, y = _blobs(80, sep=0.7, seed=4)
    order = np.random.default_rng(0).permutation(80)
    a = svm_train(x, y, tol=1e-8)
    b = svm_train(x[order], y[order], tol=1e-8)
    q = np.random.default_rng(5).normal(size=(20, 3))
    np.testing.assert_allclose(a.decision(q), b.decision(q), atol=1e-6)


def test_training_input_errors():
    x = np.zeros((4, 2))
    with pytest.raises(DomainError, match="both classes"):
        svm_train(x, np.ones(4))
    with pytest.raises(DomainError, match="-1 or \\+1"):
        svm_train(x, np.array([0.0, 1.0, 1.0, -1.0]))
    with pytest.raises(ShapeError):
        svm_train(x, np.ones(3))
    m = svm_train(np.array([[0.0], [1.0]]), np.array([1.0, -1.0]))
    with pytest.raises(ShapeError):
        m.decision(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def test_probe_protocol_on_separable_features():
    x, y = _blobs(400, sep=3.0, seed=6)
    words = [f"w{i % 7}" for i in range(400)]
    res = run_probe_features(x, y, words, ProbeProtocol(train_size=100, runs=4, seed=1), "toy")
    assert len(res.accuracies) == 4
    assert res.mean > 95.0
    assert all(0.3 < b < 0.7 for b in res.train_balance)
    assert sum(res.errors.values()) == sum(round((100 - a) * 3) for a in res.accuracies)
    again = run_probe_features(x, y, words, ProbeProtocol(train_size=100, runs=4, seed=1), "toy")
    assert again.accuracies == res.accuracies


def test_shuffled_labels_control_is_chance():
    x, y = _blobs(600, sep=3.0, seed=7)
    res = run_probe_features(x, y, ["w"] * 600, ProbeProtocol(train_size=200, runs=5, seed=2), shuffle_labels=True)
    assert abs(res.mean - 50.0) < 8.0


def test_protocol_validation():
    with pytest.raises(ValueError):
        ProbeProtocol(word_type="verb")
    with pytest.raises(ValueError):
        ProbeProtocol(runs=0)
    x, y = _blobs(10)
    with pytest.raises(ValueError, match="exceeds"):
        run_probe_features(x, y, ["w"] * 10, ProbeProtocol(train_size=8, test_size=5))


def test_single_class_sample_is_an_error():
    x = np.random.default_rng(0).normal(size=(20, 2))
    y = np.array([1.0] * 19 + [-1.0])
    with pytest.raises(DomainError, match="single class"):
        run_probe_features(x, y, ["w"] * 20, ProbeProtocol(train_size=2, runs=50))


def test_result_files(tmp_path):
    x, y = _blobs(100, sep=0.5, seed=8)
    res = run_probe_features(x, y, [f"w{i % 3}" for i in range(100)], ProbeProtocol(train_size=40, runs=2), "sys")
    rows = probe_rows(res)
    assert [r["run"] for r in rows] == ["0", "1"]
    assert rows[0]["accuracy"] == f"{res.accuracies[0]:.4f}"
    write_probe_errors(tmp_path / "e.csv", res, k=2)
    lines = (tmp_path / "e.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "rank,word,count"
    assert len(lines) <= 3


# ---------------------------------------------------------------------------
# extraction from a model
# ---------------------------------------------------------------------------

TINY = TransformerConfig(layers=1, heads=2, model_dim=16, ff_dim=16, dropout=0.0, max_len=64)


@pytest.fixture(scope="module")
def grammars():
    return load_grammars(["en", "de", "es"])


@pytest.fixture(scope="module")
def tiny_shared(grammars):
    pairs = (("en", "de"), ("en", "es"))
    corp = {p: gen_parallel(grammars, p, 100, seed=0) for p in pairs}
    return build("shared", LanguageSet(("en", "de", "es"), pairs), TINY, corp, 50, seed=0)


def test_word_position(grammars):
    ch = gen_challenge(grammars["en"], Composition(2, 2, 1, 1, 1), seed=0)
    for item in ch:
        assert word_position(item, "occupation") == item.entity_index
        if item.entity_index > 0:
            assert word_position(item, "determiner") == item.entity_index - 1
    first = next(i for i in ch if i.entity_index == 0)
    with pytest.raises(ExtractionError):
        word_position(first, "determiner")


def test_extract_embedding(tiny_shared):
    sent = "the driver argued with the baker because he did not like the design"
    by_word = extract_embedding(tiny_shared, sent, "driver")
    by_index = extract_embedding(tiny_shared, sent, 1)
    np.testing.assert_array_equal(by_word, by_index)
    assert by_word.shape == (TINY.model_dim,)
    states = tiny_shared.encoder_states("en", "de", [sent])[0]
    # position 0 holds the <2de> tag
    np.testing.assert_array_equal(by_word, states[1 + tiny_shared.tokenizers["en"].first_subword_index(1, sent)])
    with pytest.raises(ExtractionError):
        extract_embedding(tiny_shared, sent, "pilot")
    with pytest.raises(ExtractionError):
        extract_embedding(tiny_shared, sent, 40)


def test_probe_target_route(tiny_shared):
    assert default_probe_target(tiny_shared, "en") == "de"
    with pytest.raises(ExtractionError):
        default_probe_target(tiny_shared, "de")


def test_probe_features_exclude_neutral(tiny_shared, grammars):
    ch = gen_challenge(grammars["en"], Composition(5, 5, 3, 3, 4), seed=1)
    x, y, words = probe_features(tiny_shared, ch, "occupation")
    assert len(y) == len(ch) - 4
    assert x.shape == (len(y), TINY.model_dim)
    assert set(words) <= set(grammars["en"].nouns)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="random encoder states already mix in the pronoun; see decisions ledger")
def test_untrained_model_probe_is_near_chance(grammars):
    # an untrained desk model is expected by the protocol to score within three
    # standard deviations of 50%; measured it scores above 90% on determiners
    pairs = (("en", "de"), ("en", "es"))
    corp = {p: gen_parallel(grammars, p, 300, seed=1) for p in pairs}
    asm = build("shared", LanguageSet(("en", "de", "es"), pairs), PRESETS["desk"], corp, 200, seed=0)
    ch = gen_challenge(grammars["en"], REPLICA, seed=0)
    res = run_probe(asm, ch, ProbeProtocol(word_type="determiner", runs=3))
    assert abs(res.mean - 50.0) <= 3 * max(res.std, 1.0)
