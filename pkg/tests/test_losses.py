import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmatch.errors import ConfigError, DimensionError, NormalizationError
from xmatch.gradcheck import grad_check
from xmatch.losses import (
    LossConfig,
    build_match_matrix,
    cmpc_directional,
    cmpc_loss,
    cmpm_directional,
    cmpm_loss,
    matching_probabilities,
    total_loss,
)
from xmatch.tensor import Tensor

# frozen from tests/oracles/reference_values.py
ORTHONORMAL_PAIR_LOSS = 4.371880945683
UNIT_PROJECTION_CE = 0.313261687518


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


@st.composite
def batches(draw, max_n=16, dim=6, classes=5):
    n = draw(st.integers(2, max_n))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    return rng.standard_normal((n, dim)), rng.standard_normal((n, dim)), rng.standard_normal((dim, classes)), labels


def test_match_matrix_for_repeated_label():
    m, q = build_match_matrix([3, 3, 7])
    np.testing.assert_array_equal(m, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(q[0], [0.5, 0.5, 0.0])


def test_match_matrix_extremes():
    _, q = build_match_matrix([1, 2, 3])
    np.testing.assert_array_equal(q, np.eye(3))
    _, q = build_match_matrix([4, 4, 4, 4])
    np.testing.assert_array_equal(q, np.full((4, 4), 0.25))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_match_matrix_structure(labels):
    m, q = build_match_matrix(labels)
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.diag(m) == 1)
    np.testing.assert_allclose(q.sum(axis=1), 1.0)


def test_single_pair_loss():
    v = f64([[0.3, -1.2, 0.5]])
    ipt, tpi = cmpm_directional(v, v, [0])
    assert ipt.item() == pytest.approx(math.log(1 / (1 + 1e-8)), abs=1e-12)
    assert tpi.item() == pytest.approx(math.log(1 / (1 + 1e-8)), abs=1e-12)


def test_orthonormal_pair():
    e = f64(np.eye(2))
    p = matching_probabilities(e, e).data
    np.testing.assert_allclose(p, [[0.731058578630, 0.268941421370], [0.268941421370, 0.731058578630]], atol=1e-12)
    ipt, tpi = cmpm_directional(e, e, [0, 1])
    assert ipt.item() == pytest.approx(ORTHONORMAL_PAIR_LOSS, abs=1e-6)
    assert tpi.item() == pytest.approx(ORTHONORMAL_PAIR_LOSS, abs=1e-6)


def test_unit_projection_classification():
    v = f64([[1.0, 0.0]])
    img, txt = cmpc_directional(v, v, f64(np.eye(2)), [0])
    assert img.item() == pytest.approx(UNIT_PROJECTION_CE, abs=1e-9)
    assert txt.item() == pytest.approx(UNIT_PROJECTION_CE, abs=1e-9)


def test_orthogonal_pair_gives_uniform_classification():
    v, t = f64([[1.0, 0.0, 0.0]]), f64([[0.0, 2.0, 0.0]])
    w = f64(np.random.default_rng(0).standard_normal((3, 7)))
    img, txt = cmpc_directional(v, t, w, [4])
    assert img.item() == pytest.approx(math.log(7), abs=1e-12)
    assert txt.item() == pytest.approx(math.log(7), abs=1e-12)


@given(batches())
def test_matching_probabilities_are_distributions(b):
    v, t, _, _ = b
    p = matching_probabilities(f64(v), f64(t)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p > 0) and np.all(p < 1)


@given(batches())
def test_matching_loss_lower_bound(b):
    v, t, _, labels = b
    bound = -math.log(1 + len(labels) * 1e-8)
    for part in cmpm_directional(f64(v), f64(t), labels):
        assert part.item() >= bound - 1e-12


@given(batches(), st.floats(0.01, 100))
def test_matching_loss_ignores_text_scale(b, alpha):
    v, t, _, labels = b
    ipt = cmpm_directional(f64(v), f64(t), labels)[0].item()
    assert cmpm_directional(f64(v), f64(t * alpha), labels)[0].item() == pytest.approx(ipt, abs=1e-6)


@given(batches(), st.floats(0.01, 100))
def test_classification_ignores_column_and_partner_scale(b, alpha):
    v, t, w, labels = b
    base = cmpc_loss(f64(v), f64(t), f64(w), labels).item()
    scales = np.random.default_rng(0).uniform(0.1, 10, w.shape[1])
    assert cmpc_loss(f64(v), f64(t), f64(w * scales), labels).item() == pytest.approx(base, abs=1e-6)
    img = cmpc_directional(f64(v), f64(t), f64(w), labels)[0].item()
    assert cmpc_directional(f64(v), f64(t * alpha), f64(w), labels)[0].item() == pytest.approx(img, abs=1e-6)


@given(batches(), st.randoms(use_true_random=False))
def test_losses_ignore_batch_order(b, rnd):
    v, t, w, labels = b
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    assert cmpm_loss(f64(v[perm]), f64(t[perm]), labels[perm]).item() == pytest.approx(
        cmpm_loss(f64(v), f64(t), labels).item(), abs=1e-9
    )
    assert cmpc_loss(f64(v[perm]), f64(t[perm]), f64(w), labels[perm]).item() == pytest.approx(
        cmpc_loss(f64(v), f64(t), f64(w), labels).item(), abs=1e-9
    )


def test_total_loss_switches():
    rng = np.random.default_rng(2)
    v, t, w = f64(rng.standard_normal((5, 4))), f64(rng.standard_normal((5, 4))), f64(rng.standard_normal((4, 3)))
    labels = np.array([0, 1, 2, 0, 1])
    a = cmpm_loss(v, t, labels).item()
    b = cmpc_loss(v, t, w, labels).item()
    assert total_loss(v, t, w, labels, LossConfig(cmpc=False)).item() == a
    assert total_loss(v, t, w, labels, LossConfig(cmpm=False)).item() == b
    assert total_loss(v, t, w, labels).item() == pytest.approx(a + b, abs=1e-12)
    with pytest.raises(ConfigError):
        total_loss(v, t, w, labels, LossConfig(cmpm=False, cmpc=False))


def test_invalid_inputs():
    with pytest.raises(ConfigError):
        LossConfig(eps=0.0)
    v = f64(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        cmpm_loss(v, f64(np.ones((3, 3))), [0, 1, 2])
    with pytest.raises(DimensionError):
        cmpc_loss(v, v, f64(np.ones((3, 2))), [0, 5])
    with pytest.raises(NormalizationError):
        cmpm_loss(v, f64(np.zeros((2, 3))), [0, 1])
    with pytest.raises(NormalizationError):
        cmpc_loss(v, v, f64(np.zeros((3, 2))), [0, 1])


def test_loss_gradients():
    rng = np.random.default_rng(7)
    labels = np.array([0, 2, 2, 1])
    v, t, w = f64(rng.standard_normal((4, 5))), f64(rng.standard_normal((4, 5))), f64(rng.standard_normal((5, 3)))
    assert grad_check(lambda: cmpm_loss(v, t, labels), [v, t]) <= 1e-4
    assert grad_check(lambda: cmpc_loss(v, t, w, labels), [v, t, w]) <= 1e-4
