import numpy as np
import pytest

from shira.adapters import (
    IntegrityError,
    LoraAdapter,
    ModelAdapter,
    SparseAdapter,
    apply_model_adapter,
    apply_sparse,
    delta_dense,
    extract_sparse,
    fuse_lora,
    lora_delta,
)
from shira.linalg import SeededRng, ShapeError, numerical_rank, rand_matrix
from shira.masks import Mask, MaskBudget, make_random_mask
from shira.nn import init_mlp

from conftest import bits


def test_extract_identical_gives_zero_values():
    w = rand_matrix(SeededRng(0), 6, 5)
    mask = make_random_mask((6, 5), MaskBudget(0.3), SeededRng(1))
    s = extract_sparse(w, w.copy(), mask)
    assert s.nnz == mask.nnz and np.all(s.values == 0)


def test_extract_single_coordinate():
    w = np.zeros((3, 3))
    new = w.copy()
    new[1, 2] += 0.5
    s = extract_sparse(w, new, Mask.from_coords(3, 3, [(1, 2)]))
    assert s.values.tolist() == [0.5] and s.coords.tolist() == [[1, 2]]


def test_extract_detects_off_mask_change():
    w = rand_matrix(SeededRng(0), 4, 4)
    new = w.copy()
    new[0, 0] = np.nextafter(new[0, 0], np.inf)
    with pytest.raises(IntegrityError, match=r"\(0, 0\)"):
        extract_sparse(w, new, Mask.from_coords(4, 4, [(1, 1)]))


def test_extract_compares_values_so_signed_zero_passes():
    w = np.zeros((2, 2))
    new = w.copy()
    new[1, 1] = -0.0
    extract_sparse(w, new, Mask.from_coords(2, 2, [(0, 0)]))


def test_extract_then_apply_reconstructs_bit_exact():
    rng = SeededRng(3)
    w = rand_matrix(rng, 32, 32)
    mask = make_random_mask((32, 32), MaskBudget(0.05), rng.spawn(1))
    new = w.copy()
    new.reshape(-1)[mask.index] += 0.01 * rng.gaussian(mask.nnz)
    s = extract_sparse(w, new, mask)
    assert np.array_equal(bits(apply_sparse(w, s)), bits(new))


def test_apply_sparse_alpha_semantics():
    w = np.array([[-0.0, 1.0], [2.0, 3.0]])
    s = SparseAdapter.from_coords(2, 2, [(0, 1), (1, 0)], [0.5, -1.0])
    assert np.array_equal(bits(apply_sparse(w, s, 0.0)), bits(w))
    two = apply_sparse(w, s, 2.0)
    assert two.tolist() == [[0.0, 2.0], [0.0, 3.0]]
    back = apply_sparse(apply_sparse(w, s, 1.0), s, -1.0)
    np.testing.assert_array_equal(back, w)


def test_apply_sparse_shape_check():
    with pytest.raises(ShapeError):
        apply_sparse(np.zeros((3, 3)), SparseAdapter(2, 2, np.array([0]), np.array([1.0])))


def test_sparse_adapter_validation():
    with pytest.raises(ValueError):
        SparseAdapter(2, 2, np.array([2, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ShapeError):
        SparseAdapter(2, 2, np.array([0, 1]), np.array([1.0]))
    dense_idx = np.arange(3)
    with pytest.raises(ValueError, match="density"):
        SparseAdapter(2, 2, dense_idx, np.ones(3), meta={"label": "shira"})
    assert SparseAdapter(2, 2, dense_idx, np.ones(3)).density == 0.75


def test_fuse_lora_zero_factor_is_identity():
    w = rand_matrix(SeededRng(1), 5, 4)
    a = LoraAdapter(rand_matrix(SeededRng(2), 5, 2), np.zeros((2, 4)))
    assert np.array_equal(fuse_lora(w, a), w)


def test_fuse_lora_rank_one():
    u, v = np.array([[1.0], [2.0], [-1.0]]), np.array([[0.5, 3.0, 1.0]])
    w = np.eye(3)
    a = LoraAdapter(u, v, alpha_lora=2.0)
    np.testing.assert_allclose(fuse_lora(w, a, 0.5), w + 0.5 * 2.0 * u @ v, rtol=0, atol=1e-15)
    assert numerical_rank(lora_delta(a)) == 1


def test_fuse_lora_matches_loop_oracle():
    rng = SeededRng(5)
    w, a, b = rand_matrix(rng, 64, 64), rand_matrix(rng, 64, 4), rand_matrix(rng, 4, 64)
    expect = w.copy()
    for i in range(64):
        for j in range(64):
            expect[i, j] += 1.5 * 2.0 * sum(a[i, t] * b[t, j] for t in range(4))
    np.testing.assert_allclose(fuse_lora(w, LoraAdapter(a, b, 2.0), 1.5), expect, rtol=1e-12, atol=1e-12)


def test_lora_rank_bound_and_validation():
    rng = SeededRng(6)
    for r in (1, 3, 5):
        a = LoraAdapter(rand_matrix(rng, 20, r), rand_matrix(rng, r, 12))
        assert numerical_rank(delta_dense(a)) <= r
    with pytest.raises(ShapeError):
        LoraAdapter(np.ones((4, 2)), np.ones((3, 4)))
    with pytest.raises(ShapeError):
        LoraAdapter(np.ones((2, 3)), np.ones((3, 5)))


def test_delta_dense_sparse():
    assert np.array_equal(delta_dense(SparseAdapter(3, 2, np.array([], dtype=np.int64), np.array([]))), np.zeros((3, 2)))
    s = SparseAdapter.from_coords(2, 3, [(1, 2)], [4.0])
    assert delta_dense(s).tolist() == [[0, 0, 0], [0, 0, 4.0]]


def test_model_adapter_checks_architecture():
    model = init_mlp(SeededRng(0), [4, 5, 3])
    good = ModelAdapter({1: SparseAdapter(3, 5, np.array([0]), np.array([1.0]))}, "sparse")
    good.check(model)
    out = apply_model_adapter(model, good)
    assert out.layers[1].weight[0, 0] == model.layers[1].weight[0, 0] + 1.0
    assert out.layers[0].weight is not model.layers[0].weight
    with pytest.raises(ShapeError):
        ModelAdapter({0: SparseAdapter(3, 5, np.array([0]), np.array([1.0]))}, "sparse").check(model)
    with pytest.raises(ShapeError):
        ModelAdapter({5: SparseAdapter(3, 5, np.array([0]), np.array([1.0]))}, "sparse").check(model)
    with pytest.raises(TypeError):
        ModelAdapter({0: LoraAdapter(np.ones((5, 1)), np.ones((1, 4)))}, "sparse")
