import math

import numpy as np
import pytest

from daca import tensor
from daca.covariate import domain_loss, predict_domain_prob
from daca.gradcheck import check_domain, random_setup
from daca.tensor import PROB_EPS, Mlp


def zero_head(dim, bias=0.0):
    return Mlp([np.zeros((dim, 1))], [np.array([bias])])


def random_batch(seed, n_src=6, n_tgt=4, dim=3):
    rng = np.random.default_rng(seed)
    fh = Mlp.init([dim, 5, 4], rng, "tanh", output="tanh")
    fd = Mlp.init([4, 3, 1], rng, "tanh")
    X = rng.normal(size=(n_src + n_tgt, dim))
    d = np.r_[np.zeros(n_src), np.ones(n_tgt)]
    return fh, fd, X, d


def test_zero_head_is_one_half():
    assert predict_domain_prob(zero_head(4), np.arange(4.0)) == 0.5


def test_negative_bias_means_source():
    assert predict_domain_prob(zero_head(4, -10.0), np.ones(4)) <= 1e-4


def test_domain_prob_reproducible():
    fd = Mlp.init([3, 4, 1], np.random.default_rng(0))
    h = np.random.default_rng(1).normal(size=(5, 3))
    assert predict_domain_prob(fd, h).tobytes() == predict_domain_prob(fd, h).tobytes()


def test_all_half_gives_n_ln2():
    fh = Mlp([np.eye(2)], [np.zeros(2)])
    X = np.random.default_rng(0).normal(size=(7, 2))
    d = np.r_[np.zeros(4), np.ones(3)]
    loss, _, _ = domain_loss(fh, zero_head(2), X, d)
    assert loss == pytest.approx(7 * math.log(2), abs=1e-13)


def test_perfect_classifier_is_clamped_near_zero():
    # F_d reads the first feature with a huge weight: sources negative, targets positive
    fh = Mlp([np.eye(2)], [np.zeros(2)])
    fd = Mlp([np.array([[1e3], [0.0]])], [np.zeros(1)])
    X = np.array([[-1.0, 0.0], [-2.0, 1.0], [1.0, 0.0]])
    loss, _, _ = domain_loss(fh, fd, X, [0, 0, 1])
    assert loss == pytest.approx(3 * -math.log(1 - PROB_EPS), rel=1e-6)


def test_single_domain_batch_rejected():
    fh, fd, X, _ = random_batch(0)
    with pytest.raises(ValueError):
        domain_loss(fh, fd, X, np.zeros(len(X)))


@pytest.mark.parametrize("seed", range(10))
def test_reversal_is_exact_negation(seed):
    fh, fd, X, d = random_batch(seed)
    _, gh_rev, gd_rev = domain_loss(fh, fd, X, d, reverse=True)
    _, gh, gd = domain_loss(fh, fd, X, d, reverse=False)
    for a, b in zip(gh_rev, gh):
        assert np.array_equal(a, -b)
    for a, b in zip(gd_rev, gd):
        assert np.array_equal(a, b)


def test_descent_on_domain_head_does_not_increase_loss():
    fh, fd, X, d = random_batch(11)
    before, _, gd = domain_loss(fh, fd, X, d)
    for p, g in zip(fd.arrays(), gd):
        p -= 1e-4 * g
    after, _, _ = domain_loss(fh, fd, X, d)
    assert after <= before


def test_sign_bug_in_reversal_is_caught(monkeypatch):
    s = random_setup(np.random.default_rng(3))
    assert check_domain(s, 1e-5) <= 1e-4
    monkeypatch.setattr(tensor, "reverse_gradient", lambda g: g)
    assert check_domain(s, 1e-5) > 1e-4
