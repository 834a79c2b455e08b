import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daca import concept
from daca.classification import ClassifierHead, predict_label_prob
from daca.concept import (DegenerateEmbeddingError, PeerSet, concept_loss, contrastive_loss,
                          pair_extremes, sample_all_peers, sample_peers, select_extremes,
                          similarity, source_pair_concept_loss)
from daca.tensor import Mlp, finite_diff_check


def identity(n=2):
    return Mlp([np.eye(n)], [np.zeros(n)])


def random_head(seed, dim=2, hidden=4):
    rng = np.random.default_rng(seed)
    return ClassifierHead(Mlp.init([dim, hidden], rng, "tanh", "tanh"), Mlp.init([hidden, 1], rng))


def fixed_prob_head(dim):
    """Prediction is sigmoid of the first feature; lets a test choose p exactly."""
    fh = Mlp([np.eye(dim)], [np.zeros(dim)])
    w = np.zeros((dim, 1))
    w[0, 0] = 1.0
    return ClassifierHead(fh, Mlp([w], [np.zeros(1)]))


def logit(p):
    return math.log(p / (1 - p))


def test_similarity_examples():
    x = np.array([0.3, -1.2])
    assert similarity(identity(), x, x) == pytest.approx(1.0, abs=1e-15)
    assert similarity(identity(), x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert similarity(identity(), np.array([1.0, 2.0]), np.array([-2.0, 1.0])) == 0.0


def test_similarity_of_zero_embedding_is_an_error():
    with pytest.raises(DegenerateEmbeddingError):
        similarity(identity(), np.zeros(2), np.ones(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_similarity_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    fs = Mlp.init([3, 5, 4], rng, "tanh")
    a, b = rng.normal(size=3), rng.normal(size=3)
    s = similarity(fs, a, b)
    assert s == similarity(fs, b, a)
    assert -1.0 <= s <= 1.0


def test_forced_peer_selection():
    labels = np.array([1, 1, 0, 0, 0])
    ps = sample_peers(0, labels, 3, np.random.default_rng(0))
    assert ps.positive == 1 and sorted(ps.negatives) == [2, 3, 4]


def test_anchor_never_its_own_positive():
    labels = np.random.default_rng(0).integers(0, 2, 40)
    rng = np.random.default_rng(1)
    for _ in range(20):
        for ps in sample_all_peers(labels, 2, rng):
            assert ps.positive != ps.anchor
            assert labels[ps.positive] == labels[ps.anchor]
            assert all(labels[n] != labels[ps.anchor] for n in ps.negatives)
            assert len(set(ps.negatives)) == 2


def test_peers_deterministic_under_seed():
    labels = np.array([0, 1, 0, 1, 1, 0, 0])
    a = sample_all_peers(labels, 2, np.random.default_rng(5))
    b = sample_all_peers(labels, 2, np.random.default_rng(5))
    assert a == b


def test_thin_pool_skips_anchor():
    labels = np.array([1, 0, 0])
    assert sample_peers(0, labels, 1, np.random.default_rng(0)) is None   # no positive
    assert sample_peers(1, labels, 2, np.random.default_rng(0)) is None   # too few negatives
    assert [p.anchor for p in sample_all_peers(labels, 1, np.random.default_rng(0))] == [1, 2]


def test_peer_selection_is_uniform():
    labels = np.array([0, 0, 0, 0, 1])
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_peers(0, labels, 1, rng).positive for _ in range(3000)], minlength=4)
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] / 3000 - 1 / 3) < 0.03)


def peer_pool(sim_pos, sim_negs):
    """Unit vectors whose cosine to the anchor e1 is as given."""
    def unit(c):
        return np.array([c, math.sqrt(max(0.0, 1 - c * c))])
    X = np.array([[1.0, 0.0], unit(sim_pos)] + [unit(c) for c in sim_negs])
    return X, [PeerSet(0, 1, tuple(range(2, 2 + len(sim_negs))))]


def test_infonce_equal_similarities_is_ln2():
    X, peers = peer_pool(0.3, [0.3])
    assert contrastive_loss(identity(), X, peers, 0.5)[0] == pytest.approx(math.log(2), abs=1e-12)


def test_infonce_hand_value():
    X, peers = peer_pool(1.0, [-1.0])
    loss, _ = contrastive_loss(identity(), X, peers, 0.5)
    assert loss == pytest.approx(math.log1p(math.exp(-4)), abs=1e-12)
    assert loss == pytest.approx(0.01815, abs=5e-6)


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_infonce_uniform_softmax(m):
    X, peers = peer_pool(0.1, [0.1] * m)
    assert contrastive_loss(identity(), X, peers, 0.7)[0] == pytest.approx(math.log(1 + m), abs=1e-12)


def test_infonce_decreases_in_positive_similarity():
    losses = [contrastive_loss(identity(), *peer_pool(c, [0.2, -0.4]), 0.5)[0]
              for c in np.linspace(-0.9, 1.0, 20)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert all(v > 0 for v in losses)


def test_infonce_rejects_bad_temperature():
    X, peers = peer_pool(0.5, [0.1])
    for tau in (0.0, 1.0, -0.3):
        with pytest.raises(ValueError):
            contrastive_loss(identity(), X, peers, tau)


def test_infonce_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    fs = Mlp.init([3, 6, 4], rng, "tanh")
    X = rng.normal(size=(10, 3))
    peers = sample_all_peers(np.arange(10) % 2, 3, rng)
    _, g = contrastive_loss(fs, X, peers, 0.4)
    assert finite_diff_check(lambda: contrastive_loss(fs, X, peers, 0.4, reduce=False)[0],
                             fs.arrays(), g) <= 1e-4


def test_extremes_cosine_example():
    targets = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    ep = select_extremes(identity(), np.array([1.0, 0.0]), targets)
    assert (ep.nearest, ep.farthest) == (0, 2)
    assert ep.sim_nearest == 1.0 and ep.sim_farthest == -1.0


def test_extremes_single_target():
    ep = select_extremes(identity(), np.array([1.0, 0.5]), np.array([[0.2, 0.9]]))
    assert ep.nearest == ep.farthest == 0


def test_extremes_tie_goes_to_lower_index():
    targets = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 2.0], [0.0, -3.0]])
    ep = select_extremes(identity(), np.array([1.0, 0.0]), targets)
    assert ep.nearest == 0 and ep.farthest == 0
    ep = select_extremes(identity(), np.array([0.0, 1.0]), targets)
    assert ep.nearest == 0 and ep.farthest == 1


def test_extremes_empty_candidates():
    with pytest.raises(ValueError):
        select_extremes(identity(), np.ones(2), np.zeros((0, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_extremes_match_bruteforce_scan(seed):
    rng = np.random.default_rng(seed)
    fs = Mlp.init([3, 4, 3], rng, "tanh")
    anchor, targets = rng.normal(size=3), rng.normal(size=(int(rng.integers(1, 12)), 3))
    ep = select_extremes(fs, anchor, targets)
    sims = [similarity(fs, anchor, t) for t in targets]
    best = max(range(len(sims)), key=lambda i: (sims[i], -i))
    worst = min(range(len(sims)), key=lambda i: (sims[i], i))
    assert (ep.nearest, ep.farthest) == (best, worst)
    assert all(sims[ep.nearest] + 1e-12 >= s >= sims[ep.farthest] - 1e-12 for s in sims)


def test_concept_loss_hand_value():
    head = fixed_prob_head(2)
    xa, xc, xd = ([[logit(p), 0.0]] for p in (0.8, 0.6, 0.1))
    loss, _, _ = concept_loss(head, np.array(xa), np.array(xc), np.array(xd))
    assert loss == pytest.approx(0.2 ** 2 - 0.7 ** 2, abs=1e-12)
    assert loss == pytest.approx(-0.45, abs=1e-12)


def test_concept_loss_zero_when_predictions_agree():
    head = random_head(0)
    x = np.array([[0.4, -0.3]])
    loss, gh, gy = concept_loss(head, x, x.copy(), x.copy())
    assert loss == 0.0
    assert all(not g.any() for g in gh + gy)


def test_concept_loss_extreme_values():
    head = fixed_prob_head(2)
    lo, hi = np.array([[-40.0, 0.0]]), np.array([[40.0, 0.0]])
    loss, _, _ = concept_loss(head, lo, lo, hi)
    assert loss == pytest.approx(-1.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_concept_loss_per_anchor_bounded(seed):
    rng = np.random.default_rng(seed)
    head = random_head(seed % 1000)
    X = rng.normal(scale=3.0, size=(3, 6, 2))
    terms = concept_loss(head, *X, reduce=False)[0]
    assert np.all((terms >= -1) & (terms <= 1))


def test_concept_loss_gradient_matches_finite_differences():
    head = random_head(3, dim=3)
    rng = np.random.default_rng(4)
    args = [rng.normal(size=(5, 3)) for _ in range(3)]
    _, gh, gy = concept_loss(head, *args)
    assert finite_diff_check(lambda: concept_loss(head, *args, reduce=False)[0],
                             head.fh.arrays() + head.fy.arrays(), gh + gy) <= 1e-4


def test_concept_loss_sends_no_gradient_to_similarity_net():
    # the loss signature only takes the classifier head; selection is an input
    rng = np.random.default_rng(0)
    fs = Mlp.init([2, 3], rng)
    before = [a.copy() for a in fs.arrays()]
    Xs, Xt = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    c, d, _ = concept.extreme_indices(concept.embed(fs, Xs), concept.embed(fs, Xt))
    concept_loss(random_head(1), Xs, Xt[c], Xt[d])
    assert all(np.array_equal(a, b) for a, b in zip(fs.arrays(), before))


def test_pair_loss_single_source_is_zero():
    head = random_head(0)
    Xs = [np.random.default_rng(0).normal(size=(4, 2))]
    loss, gh, gy = source_pair_concept_loss(head, Xs, pair_extremes(identity(), Xs))
    assert loss == 0.0 and all(not g.any() for g in gh + gy)


def test_pair_loss_identical_sources_is_zero():
    # each anchor's nearest neighbour is itself, and a constant head equalises the rest
    head = ClassifierHead(Mlp([np.eye(2)], [np.zeros(2)]), Mlp([np.zeros((2, 1))], [np.array([0.3])]))
    X = np.random.default_rng(0).normal(size=(4, 2))
    Xs = [X, X.copy()]
    loss, _, _ = source_pair_concept_loss(head, Xs, pair_extremes(identity(), Xs))
    assert loss == 0.0


def test_pair_loss_matches_enumeration():
    rng = np.random.default_rng(2)
    Xs = [rng.normal(size=(2, 2)), rng.normal(size=(2, 2))]
    head = random_head(5)
    fs = Mlp.init([2, 3], rng, "tanh")
    got, _, _ = source_pair_concept_loss(head, Xs, pair_extremes(fs, Xs), weight=0.5)

    def p(x):
        return predict_label_prob(head, x)

    want = 0.0
    for j, n in itertools.permutations(range(2)):
        for xa in Xs[j]:
            sims = [similarity(fs, xa, t) for t in Xs[n]]
            c, d = Xs[n][int(np.argmax(sims))], Xs[n][int(np.argmin(sims))]
            want += (p(xa) - p(c)) ** 2 - (p(xa) - p(d)) ** 2
    assert got == pytest.approx(0.5 * want, rel=1e-12, abs=1e-15)


def test_pair_loss_normalisation():
    rng = np.random.default_rng(3)
    Xs = [rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), rng.normal(size=(2, 2))]
    head, fs = random_head(1), Mlp.init([2, 3], rng, "tanh")
    ext = pair_extremes(fs, Xs)
    raw = 0.0
    for (j, n), (c, d) in ext.items():
        raw += concept_loss(head, Xs[j], Xs[n][c], Xs[n][d])[0] / len(Xs[j])
    got = source_pair_concept_loss(head, Xs, ext, weight=1 / 6, normalize=True)[0]
    assert len(ext) == 6
    assert got == pytest.approx(raw / 6, rel=1e-12)
