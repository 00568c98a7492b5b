import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfmask.masks import (AttentionMaskNet, MaskPair, VectorMask, full_dataset_mask, mask_alt_design,
                          mask_from_batch, mask_from_vector, mask_to_gray, read_mask_csv, softmax_backward,
                          write_mask_csv, write_pgm)
from cfmask.tensor import Rng, ShapeError


def random_net(d=6, hidden=5, seed=0):
    r = Rng(seed)
    net = AttentionMaskNet(d, hidden, r.derive("net"))
    net.dense1.b[...] = r.normal(size=hidden)
    net.dense2.W[...] = r.normal(size=net.dense2.W.shape)
    net.dense2.b[...] = r.normal(size=d)
    return net


def tie_free(v):
    return np.unique(v).size == v.size


# -- MaskPair ---------------------------------------------------------------

def test_reference_pair():
    pair = MaskPair.from_logits([2.0, 0.0, -2.0])
    expected = [0.86681333219733487114, 0.11731042782619836253, 0.015876239976466766323]
    np.testing.assert_allclose(pair.m, expected, rtol=1e-14)
    np.testing.assert_allclose(pair.m_comp, expected[::-1], rtol=1e-14)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-30, 30)))
def test_pair_contract(z):
    pair = MaskPair.from_logits(z)
    for v in (pair.m, pair.m_comp):
        assert abs(v.sum() - 1) <= 1e-12
        assert np.all((v >= 0) & (v <= 1))
    # logits closer than float resolution give tied masks; the ordering claim needs distinct values
    if tie_free(pair.m) and tie_free(pair.m_comp):
        order = np.argsort(-pair.m, kind="stable")
        np.testing.assert_array_equal(np.argsort(-pair.m_comp, kind="stable"), order[::-1])


def test_rank_opposition_many_vectors():
    r = Rng(1)
    for d in (3, 10, 500):
        for _ in range(1000):
            z = r.normal(scale=3.0, size=d)
            pair = MaskPair.from_logits(z)
            assert np.array_equal(np.argsort(-pair.m_comp, kind="stable"),
                                  np.argsort(-pair.m, kind="stable")[::-1])


def test_vector_mask_examples():
    pair = mask_from_vector(np.array([1.0, 2.0, 3.0]))
    assert pair.m.argmax() == 2 and pair.m_comp.argmax() == 0
    flat = mask_from_vector(np.full(4, 0.7))
    np.testing.assert_allclose(flat.m, 0.25, rtol=1e-15)
    np.testing.assert_allclose(flat.m_comp, 0.25, rtol=1e-15)
    with pytest.raises(ValueError):
        mask_from_vector(np.array([0.0, np.nan]))


def test_vector_mask_init():
    v = VectorMask(7, Rng(3))
    assert v.logits.shape == (7,)
    assert np.all((v.logits >= 0) & (v.logits < 1))


# -- attention mask net --------------------------------------------------------

def test_zero_second_layer_gives_uniform_equal_masks():
    net = AttentionMaskNet(5, rng=Rng(0))
    pair = mask_from_batch(net, Rng(1).normal(size=(8, 5)))
    np.testing.assert_array_equal(pair.logits, np.zeros(5))
    np.testing.assert_array_equal(pair.m, pair.m_comp)
    np.testing.assert_allclose(pair.m, 0.2, rtol=1e-15)


def test_all_zero_parameters_uniform():
    net = AttentionMaskNet(4, 3, Rng(0))
    for p in net.params().values():
        p[...] = 0
    pair = mask_from_batch(net, Rng(1).normal(size=(3, 4)))
    np.testing.assert_allclose(pair.m, 0.25, rtol=1e-15)


def test_duplicating_rows_leaves_mask_unchanged():
    net = random_net()
    x = Rng(2).normal(size=(5, 6))
    a = mask_from_batch(net, x)
    b = mask_from_batch(net, np.vstack([x, x]))
    np.testing.assert_allclose(b.logits, a.logits, rtol=0, atol=1e-14)


def test_mask_net_errors():
    net = AttentionMaskNet(4, rng=Rng(0))
    with pytest.raises(ValueError):
        mask_from_batch(net, np.zeros((0, 4)))
    with pytest.raises(ShapeError):
        mask_from_batch(net, np.zeros((2, 5)))


def test_every_parameter_moves_both_masks():
    net = random_net(d=4, hidden=3, seed=5)
    x = Rng(6).normal(size=(5, 4))
    base = mask_from_batch(net, x)
    for name, p in net.params().items():
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + 1e-4
            moved = mask_from_batch(net, x)
            p.flat[i] = old
            assert np.any(moved.m != base.m), (name, i)
            assert np.any(moved.m_comp != base.m_comp), (name, i)


def test_mask_net_backward_matches_finite_differences():
    from cfmask import gradcheck
    assert gradcheck.check_mask_net(seed=3).max_rel_error < 1e-5


def test_softmax_backward_is_jvp():
    s = MaskPair.from_logits([0.3, -1.0, 2.0]).m
    ds = np.array([1.0, 0.0, 0.0])
    jac = np.diag(s) - np.outer(s, s)
    np.testing.assert_allclose(softmax_backward(s, ds), jac.T @ ds, rtol=1e-14)


# -- full-dataset mask ---------------------------------------------------------

def test_full_dataset_single_batch_matches():
    net = random_net()
    x = Rng(7).normal(size=(9, 6))
    a, b = full_dataset_mask(net, x), mask_from_batch(net, x)
    np.testing.assert_array_equal(a.m, b.m)


def test_full_dataset_chunked_agrees():
    net = random_net()
    x = Rng(8).normal(size=(103, 6))
    whole = full_dataset_mask(net, x, chunk_size=10_000)
    chunked = full_dataset_mask(net, x, chunk_size=7)
    np.testing.assert_allclose(chunked.logits, whole.logits, rtol=0, atol=1e-12)
    np.testing.assert_allclose(chunked.m, whole.m, rtol=0, atol=1e-12)


def test_full_dataset_row_permutation_invariant():
    net = random_net()
    x = Rng(9).normal(size=(50, 6))
    perm = Rng(10).permutation(50)
    np.testing.assert_allclose(full_dataset_mask(net, x[perm]).m, full_dataset_mask(net, x).m, atol=1e-14)


def test_full_dataset_empty():
    with pytest.raises(ValueError):
        full_dataset_mask(random_net(), np.zeros((0, 6)), chunk_size=2)


# -- alternative design ---------------------------------------------------------

def test_alt_design_examples():
    np.testing.assert_allclose(mask_alt_design(np.full(4, 0.25)), 0.1875, rtol=1e-15)
    np.testing.assert_array_equal(mask_alt_design(np.array([1.0, 0, 0, 0])), [0, 0.25, 0.25, 0.25])
    with pytest.raises(ValueError):
        mask_alt_design(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        mask_alt_design(np.array([1.5, -0.5]))


@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-20, 20)))
def test_alt_design_spread_bounded(z):
    m = MaskPair.from_logits(z).m
    alt = mask_alt_design(m)
    d = m.size
    assert np.ptp(alt) <= 1 / d + 1e-15
    # same ordering as the complementary mask (reversed m), up to ties
    assert np.all(np.diff(alt[np.argsort(m, kind="stable")]) <= 1e-15)


# -- export -----------------------------------------------------------------------

def test_mask_csv_round_trip(tmp_path):
    pair = MaskPair.from_logits(Rng(0).normal(size=12))
    path = tmp_path / "mask.csv"
    write_mask_csv(path, pair)
    text = path.read_text()
    assert text.startswith("index,m,m_comp\n0,")
    m, mc = read_mask_csv(path)
    assert m.tobytes() == pair.m.tobytes() and mc.tobytes() == pair.m_comp.tobytes()


def test_gray_uniform_and_range():
    assert np.all(mask_to_gray(np.full(6, 1 / 6), 2, 3) == 128)
    g = mask_to_gray(np.arange(6.0), 2, 3)
    assert g.min() == 0 and g.max() == 255 and g.shape == (2, 3)


def test_pgm_layout(tmp_path):
    path = tmp_path / "h.pgm"
    write_pgm(path, Rng(0).random(784), 28, 28)
    data = path.read_bytes()
    header = b"P5\n28 28\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 784
    with pytest.raises(ShapeError):
        write_pgm(tmp_path / "bad.pgm", np.ones(784), 27, 28)
