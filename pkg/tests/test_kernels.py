import numpy as np
import pytest

from meltgraph import _kernels_py, kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_segment_sum_matches_loop(impl, rng):
    values = rng.standard_normal((7, 3))
    seg = np.array([2, 0, 2, 1, 0, 2, 0])
    expected = np.zeros((4, 3))
    for v, s in zip(values, seg):
        expected[s] += v
    np.testing.assert_array_equal(impl.segment_sum(values, seg, 4), expected)


def test_segment_sum_one_dimensional(impl):
    out = impl.segment_sum(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 0]), 3)
    np.testing.assert_array_equal(out, [3.0, 3.0, 0.0])


def test_segment_max_empty_segment_is_zero(impl):
    out = impl.segment_max(np.array([[-3.0], [-1.0]]), np.array([0, 0]), 2)
    np.testing.assert_array_equal(out, [[-1.0], [0.0]])


def test_knn_brute_force(impl, rng):
    pts = rng.uniform(size=(40, 2))
    got = impl.knn(pts, 5)
    for i in range(40):
        d = ((pts - pts[i]) ** 2).sum(axis=1)
        order = sorted((d[j], j) for j in range(40) if j != i)
        assert [j for _, j in order[:5]] == got[i].tolist()


def test_knn_ties_go_to_lower_index(impl):
    pts = np.zeros((4, 2))
    np.testing.assert_array_equal(impl.knn(pts, 2), [[1, 2], [0, 2], [0, 1], [0, 1]])


@compiled
def test_backends_agree_on_attention(rng):
    n, d, e, heads = 9, 8, 30, 2
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    etab = rng.standard_normal((2, d))
    etype = rng.integers(0, 2, e)
    src, dst = rng.integers(0, n, e), rng.integers(0, n, e)
    py_out, py_alpha = _kernels_py.attention_forward(q, k, v, etab, etype, src, dst, heads)
    c_out, c_alpha = BACKENDS["cython"].attention_forward(q, k, v, etab, etype, src, dst, heads)
    np.testing.assert_allclose(c_out, py_out, atol=1e-13)
    np.testing.assert_allclose(c_alpha, py_alpha, atol=1e-13)
    g = rng.standard_normal((n, d))
    for a, b in zip(
        _kernels_py.attention_backward(g, q, k, v, etab, etype, py_alpha, src, dst, heads),
        BACKENDS["cython"].attention_backward(g, q, k, v, etab, etype, py_alpha, src, dst, heads),
    ):
        np.testing.assert_allclose(b, a, atol=1e-12)


@compiled
def test_compiled_rejects_bad_segment():
    with pytest.raises(IndexError):
        BACKENDS["cython"].segment_sum(np.ones((2, 1)), np.array([0, 5]), 2)
