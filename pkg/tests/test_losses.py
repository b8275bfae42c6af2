import numpy as np
import pytest
from hypothesis import given, strategies as st

from img2st import autograd as ag
from img2st.losses import (
    LossConfig,
    contrastive_loss,
    contrastive_loss_grad,
    regression_loss,
    regression_loss_grad,
    total_loss,
)
from oracles import info_nce_naive, info_nce_regions_naive, l_reg_naive


@given(seed=st.integers(0, 2**31), n=st.integers(1, 3), c=st.integers(1, 4), s=st.integers(1, 5))
def test_regression_loss_matches_loop(seed, n, c, s):
    r = np.random.default_rng(seed)
    pred, truth = r.normal(size=(n, c, s, s)), r.normal(size=(n, c, s, s))
    mask = r.uniform(size=(n, s, s)) > 0.3
    mask[0, 0, 0] = True
    assert regression_loss(pred, truth, mask) == pytest.approx(l_reg_naive(pred, truth, mask), rel=1e-12)


def test_regression_loss_ignores_masked_cells(rng):
    pred, truth = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 1] = False
    moved = pred.copy()
    moved[:, 1, 1] += 100
    assert regression_loss(pred, truth, mask) == regression_loss(moved, truth, mask)
    assert regression_loss(truth, truth) == 0.0
    with pytest.raises(ValueError):
        regression_loss(pred, truth, np.zeros((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        regression_loss(pred, truth[:1])


def test_regression_grad_finite_differences(rng):
    pred, truth = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
    mask = rng.uniform(size=(2, 3, 3)) > 0.4
    mask[0, 0, 0] = True
    assert ag.gradcheck(lambda: (lambda l, g: (l, [g]))(*regression_loss_grad(pred, truth, mask)),
                        [pred]) < 1e-7


@pytest.mark.parametrize("tau", [0.07, 0.5, 1.0])
def test_info_nce_matches_brute_force(rng, tau):
    img, exp = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    mask = rng.uniform(size=(2, 3, 3)) > 0.3
    mask[:, 0, :2] = True
    got = contrastive_loss(img, exp, mask, LossConfig(tau=tau))
    assert got == pytest.approx(info_nce_regions_naive(img, exp, mask, tau), rel=1e-10)


def test_info_nce_batch_scope(rng):
    img, exp = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    cells_i = img.transpose(0, 2, 3, 1).reshape(-1, 3)
    cells_e = exp.transpose(0, 2, 3, 1).reshape(-1, 3)
    got = contrastive_loss(img, exp, None, LossConfig(tau=0.2, negative_scope="batch"))
    assert got == pytest.approx(info_nce_naive(cells_i, cells_e, 0.2), rel=1e-10)


@pytest.mark.parametrize("scope", ["region", "batch"])
def test_info_nce_gradient(rng, scope):
    img, exp = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    mask = rng.uniform(size=(2, 3, 3)) > 0.3
    mask[:, 0, :2] = True
    cfg = LossConfig(tau=0.1, negative_scope=scope)

    def closure():
        loss, g = contrastive_loss_grad(img, exp, mask, cfg)
        return loss, [g]

    assert ag.gradcheck(closure, [img]) < 1e-6


def test_info_nce_limits(rng):
    e = rng.normal(size=(4, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    # matched pairs score lower than a mismatched pairing
    aligned = contrastive_loss(e.T.reshape(3, 2, 2), e.T.reshape(3, 2, 2), None, LossConfig(tau=0.07))
    shuffled = contrastive_loss(e.T.reshape(3, 2, 2), e[::-1].T.reshape(3, 2, 2), None, LossConfig(tau=0.07))
    assert aligned < shuffled
    # identical embeddings everywhere: every logit equal, loss = log n
    same = np.ones((3, 2, 2))
    assert contrastive_loss(same, same) == pytest.approx(np.log(4))


def test_info_nce_errors(rng):
    img = rng.normal(size=(2, 2, 2))
    with pytest.raises(ValueError, match="zero norm"):
        bad = img.copy()
        bad[:, 0, 0] = 0
        contrastive_loss(bad, img)
    one = np.zeros((2, 2), dtype=bool)
    one[0, 0] = True
    with pytest.raises(ValueError, match="2 valid"):
        contrastive_loss(img, img, one)
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(negative_scope="global")


def test_total_loss_identity(rng):
    pred, truth = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    ie, ee = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    for lam in (0.0, 0.25, 1.0):
        out = total_loss(pred, truth, ie, ee, config=LossConfig(lam=lam))
        assert out.l_total == out.l_reg + lam * out.l_contrast
        assert out.valid_cell_count == 9
