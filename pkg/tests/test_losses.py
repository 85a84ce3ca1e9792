import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meep import losses as L
from meep.tensor_core import make_rng, softmax_channels
from oracles import central_diff, rel_error


def logits_for(probs_fg):
    """Logits of shape [1, 2, 1, n] realising the given foreground probabilities."""
    p = np.asarray(probs_fg, dtype=np.float64)
    z = np.stack([np.zeros_like(p), np.log(p) - np.log1p(-p)])
    return z.reshape(1, 2, 1, -1)


def probs_map(rows):
    """[n, K] list of per-pixel probabilities -> [1, K, 1, n] map."""
    return np.asarray(rows, dtype=np.float64).T.reshape(1, len(rows[0]), 1, len(rows))


# -- cross entropy ---------------------------------------------------------

def test_ce_examples():
    perfect = np.zeros((1, 2, 2, 2))
    perfect[:, 1] = 200.0
    assert L.cross_entropy(perfect, np.ones((1, 2, 2), int)).value == pytest.approx(0.0, abs=1e-12)
    assert L.cross_entropy(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2), int)).value == pytest.approx(math.log(2))
    # p_true = (0.9, 0.5)
    z = logits_for([0.9, 0.5])
    expected = -(math.log(0.9) + math.log(0.5)) / 2
    assert L.cross_entropy(z, np.array([[[1, 1]]])).value == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.3993, abs=1e-4)


def test_label_range_checked():
    with pytest.raises(ValueError):
        L.cross_entropy(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        L.soft_dice(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), -1))


# -- soft dice -------------------------------------------------------------

def test_dice_examples():
    labels = np.array([[[1, 1, 0, 0]]])
    assert L.soft_dice(np.zeros((1, 2, 1, 4)), labels).value == pytest.approx(1 / 3, abs=1e-6)
    exact = np.where(labels[:, None] == np.arange(2)[None, :, None, None], 60.0, 0.0)
    assert L.soft_dice(exact, labels).value < 1e-6


def test_dice_fd_4x4():
    rng = make_rng(4)
    z = rng.normal(size=(1, 2, 4, 4))
    y = rng.integers(0, 2, size=(1, 4, 4))
    res = L.soft_dice(z, y)
    num = central_diff(lambda: L.soft_dice(z, y).value, z)
    np.testing.assert_allclose(res.grad_logits.ravel(), num, atol=1e-6)


# -- focal -----------------------------------------------------------------

def test_focal_gamma_zero_is_ce():
    rng = make_rng(1)
    z = rng.normal(size=(2, 3, 4, 4))
    y = rng.integers(0, 3, size=(2, 4, 4))
    f, c = L.focal_loss(z, y, 0.0), L.cross_entropy(z, y)
    assert f.value == pytest.approx(c.value, rel=1e-14)
    np.testing.assert_allclose(f.grad_logits, c.grad_logits, rtol=1e-12, atol=1e-16)


def test_focal_examples():
    assert L.focal_loss(np.zeros((1, 2, 1, 1)), np.ones((1, 1, 1), int), 2.0).value == pytest.approx(0.25 * math.log(2))
    sure = np.array([0.0, 800.0]).reshape(1, 2, 1, 1)
    r = L.focal_loss(sure, np.ones((1, 1, 1), int), 2.0)
    assert r.value == 0.0 and np.all(np.isfinite(r.grad_logits))
    with pytest.raises(ValueError):
        L.focal_loss(sure, np.ones((1, 1, 1), int), -1.0)


# -- misclassified set -----------------------------------------------------

def test_misclassified_examples():
    onehot = probs_map([[1, 0], [0, 1]])
    m = L.misclassified_set(onehot, np.array([[[0, 1]]]))
    assert m.count == 0 and not m.mask.any()
    wrong = L.misclassified_set(onehot, np.array([[[1, 0]]]))
    assert wrong.count == 2
    p = probs_map([[0.4, 0.6], [0.6, 0.4], [0.5, 0.5]])
    m = L.misclassified_set(p, np.array([[[0, 1, 1]]]))
    assert m.mask.tolist() == [[[True, True, True]]] and m.count == 3


# -- entropy / KL terms ----------------------------------------------------

def test_entropy_examples():
    one = np.ones((1, 1, 1), bool)
    assert L.entropy_term(probs_map([[0.5, 0.5]]), one).value == pytest.approx(math.log(2))
    assert L.entropy_term(probs_map([[0.5, 0.5]]), ~one).value == 0.0
    h09 = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    both = L.entropy_term(probs_map([[0.9, 0.1], [0.5, 0.5]]), np.ones((1, 1, 2), bool)).value
    assert both == pytest.approx((h09 + math.log(2)) / 2, rel=1e-14)
    assert both == pytest.approx(0.5091, abs=1e-4)


def test_kl_examples():
    one = np.ones((1, 1, 1), bool)
    u = L.kl_uniform_term(probs_map([[1 / 3] * 3]), one)
    assert u.value == pytest.approx(math.log(3), rel=1e-14) and abs(u.kl_value) < 1e-12
    r = L.kl_uniform_term(probs_map([[0.9, 0.1]]), one)
    assert r.value == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.1)), rel=1e-14)
    assert r.value == pytest.approx(1.2040, abs=1e-4)
    assert r.kl_value == pytest.approx(0.5108, abs=1e-4)
    assert L.kl_uniform_term(probs_map([[0.9, 0.1]]), ~one).value == 0.0


def _random_simplex(seed, k, n=16):
    rng = make_rng(seed)
    z = rng.normal(size=(1, k, 1, n)) * rng.uniform(0.1, 6)
    return softmax_channels(z)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 5))
def test_regularizer_bounds_and_kl_identity(seed, k):
    p = _random_simplex(seed, k)
    mask = make_rng(seed + 1).random((1, 1, p.shape[3])) < 0.6
    h = L.entropy_term(p, mask).value
    assert -1e-15 <= h <= math.log(k) + 1e-12
    kl = L.kl_uniform_term(p, mask)
    assert kl.kl_value >= -1e-12
    if mask.any():
        pts = p[0, :, 0][:, mask[0, 0]]  # [K, n_masked]
        direct = np.mean([sum((1 / k) * math.log((1 / k) / pk) for pk in col) for col in pts.T])
        assert abs(kl.kl_value - direct) < 1e-12


@pytest.mark.parametrize("k", [2, 3])
@pytest.mark.parametrize("reg", ["entropy", "kl"])
def test_regularizer_gradients(k, reg):
    rng = make_rng(k)
    z = rng.normal(size=(2, k, 4, 4))
    mask = rng.random((2, 4, 4)) < 0.5
    fn = L.entropy_term if reg == "entropy" else L.kl_uniform_term
    g = fn(softmax_channels(z), mask).grad_logits
    num = central_diff(lambda: fn(softmax_channels(z), mask).value, z)
    assert rel_error(g, num) < 1e-7


def test_neg_entropy_step_pushes_toward_uniform():
    for fg in (0.95, 0.7, 0.2):
        z = logits_for([fg])
        mask = np.ones((1, 1, 1), bool)
        g = -L.entropy_term(softmax_channels(z), mask).grad_logits  # gradient of -H
        before = softmax_channels(z).max()
        after = softmax_channels(z - 0.05 * g).max()
        assert after < before


def test_confidence_penalty_is_all_pixel_entropy():
    rng = make_rng(8)
    z = rng.normal(size=(1, 2, 4, 4))
    y = rng.integers(0, 2, size=(1, 4, 4))
    spec = L.ObjectiveSpec("ce", "confidence_penalty", beta=0.2)
    combined = L.combined_objective(spec, z, y)
    h = L.entropy_term(softmax_channels(z), np.ones((1, 4, 4), bool))
    assert combined.value == pytest.approx(L.cross_entropy(z, y).value - 0.2 * h.value, rel=1e-14)
    # MEEP-H with an all-true mask is the same objective
    meep = L.combined_objective(L.ObjectiveSpec("ce", "meep_h", lam=0.2), z, y, mask=np.ones((1, 4, 4), bool))
    assert meep.value == pytest.approx(combined.value, rel=1e-14)
    np.testing.assert_allclose(meep.grad_logits, combined.grad_logits, rtol=1e-13)


# -- combined objective ----------------------------------------------------

@pytest.mark.parametrize("reg", L.REGULARIZERS)
def test_zero_weight_equals_base(reg):
    rng = make_rng(2)
    z = rng.normal(size=(1, 2, 4, 4))
    y = rng.integers(0, 2, size=(1, 4, 4))
    spec = L.ObjectiveSpec("dice", reg, lam=0.0, beta=0.0)
    a, b = L.combined_objective(spec, z, y), L.soft_dice(z, y)
    assert a.value == b.value and a.grad_logits.tobytes() == b.grad_logits.tobytes()


def test_meep_with_no_errors_equals_base():
    y = np.array([[[0, 1], [1, 0]]])
    z = np.where(y[:, None] == np.arange(2)[None, :, None, None], 3.0, 0.0)
    for reg in ("meep_h", "meep_kl"):
        a = L.combined_objective(L.ObjectiveSpec("ce", reg, lam=0.7), z, y)
        b = L.cross_entropy(z, y)
        assert a.value == b.value and np.array_equal(a.grad_logits, b.grad_logits)


def test_dice_plus_kl_composition():
    rng = make_rng(44)
    z = rng.normal(size=(1, 2, 4, 4))
    y = rng.integers(0, 2, size=(1, 4, 4))
    p = softmax_channels(z)
    mask = np.argmax(p, axis=1) != y
    assert mask.any()
    kl_direct = -np.mean([0.5 * (math.log(p[0, 0, i, j]) + math.log(p[0, 1, i, j])) for i, j in zip(*np.nonzero(mask[0]))])
    r = L.combined_objective(L.ObjectiveSpec("dice", "meep_kl", lam=0.5), z, y)
    assert r.value == pytest.approx(L.soft_dice(z, y).value + 0.5 * kl_direct, rel=1e-13)


def test_regularizer_signs():
    # both MEEP variants must lower the objective when masked pixels move toward uniform
    y = np.array([[[1]]])
    conf = logits_for([0.05])  # confidently wrong
    softer = logits_for([0.3])
    for reg in ("meep_h", "meep_kl"):
        spec = L.ObjectiveSpec("dice", reg, lam=1.0)
        mask = np.ones((1, 1, 1), bool)
        reg_only = lambda z: L.combined_objective(spec, z, y, mask=mask).value - L.soft_dice(z, y).value
        assert reg_only(softer) < reg_only(conf)


def test_objective_spec_json():
    spec = L.ObjectiveSpec("focal", "meep_kl", lam=0.3, beta=0.2, focal_gamma=2.0)
    d = spec.to_json()
    assert set(d) == {"base", "regularizer", "lambda", "beta", "focal_gamma"}
    assert L.ObjectiveSpec.from_json(d) == spec
    with pytest.raises(ValueError):
        L.ObjectiveSpec("dice", "meep_h", lam=-1)
    with pytest.raises(ValueError):
        L.ObjectiveSpec("bce")
    with pytest.raises(ValueError):
        L.ObjectiveSpec.from_json({"base": "ce", "weight": 1})


@pytest.mark.parametrize("base", L.BASES)
@pytest.mark.parametrize("reg", L.REGULARIZERS)
@pytest.mark.parametrize("k", [2, 3])
def test_objective_gradients(base, reg, k):
    from oracles import objective_gradcheck

    spec = L.ObjectiveSpec(base, reg, lam=0.5, beta=0.2)
    logit_err, param_err = objective_gradcheck(spec, k, seed=100 + k)
    assert logit_err < 1e-5
    assert param_err < 1e-5
