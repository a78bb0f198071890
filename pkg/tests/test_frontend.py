import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dydec.audio import AudioClip
from dydec.autodiff import GradTape, Var
from dydec.egnorm import EgNormParams
from dydec.filterbank import init_dyadic_tree, materialize_kernel
from dydec.frontend import conv_same, decompose, run_cascade


def naive_conv_same(x, k):
    # Independent O(N*L) reference with explicit left-to-right accumulation.
    n, length = len(x), len(k)
    half = (length - 1) // 2
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for m in range(length):
            j = i + half - m
            if 0 <= j < n:
                acc += x[j] * k[m]
        out[i] = acc
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=64)
    k = np.zeros(9)
    k[4] = 1.0
    np.testing.assert_array_equal(conv_same(x, k), x)


def test_conv_impulse_reproduces_kernel():
    k = np.random.default_rng(1).normal(size=11)
    x = np.zeros(31)
    x[15] = 1.0
    out = conv_same(x, k)
    np.testing.assert_allclose(out[10:21], k, atol=1e-15)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.normal(size=200)
        k = rng.normal(size=33)
        np.testing.assert_allclose(conv_same(x, k), naive_conv_same(x, k), atol=1e-12)


def test_conv_rejects_even_kernel():
    with pytest.raises(ValueError):
        conv_same(np.ones(10), np.ones(4))


def _identity_egnorm(tree):
    for d in range(1, tree.depth + 1):
        for i in range(2**d):
            tree.egnorm[d - 1][i] = EgNormParams(sigma=0.5, alpha=0.0, delta=2.0, gamma=1.0)


def test_decompose_shapes_default_tree():
    tree = init_dyadic_tree(6, 12000.0, kernel_len=65)
    clip = AudioClip(np.random.default_rng(3).normal(size=9600), 24000)
    tf = decompose(clip, tree)
    assert tf.values.shape == (64, 9600 // 32)
    assert tf.frame_rate == 750.0


def test_decompose_zero_clip_zero_map():
    tree = init_dyadic_tree(4, 12000.0, kernel_len=65)
    tf = decompose(AudioClip(np.zeros(1600), 24000), tree)
    np.testing.assert_array_equal(tf.values, 0.0)


def test_decompose_depth1_identity_egnorm_matches_direct_conv():
    tree = init_dyadic_tree(1, 12000.0, kernel_len=65, downsample_depths=frozenset())
    _identity_egnorm(tree)
    x = np.random.default_rng(4).normal(size=512)
    tf = decompose(AudioClip(x, 24000), tree)
    for i in (0, 1):
        kern = materialize_kernel(tree.node(1, i))
        np.testing.assert_allclose(tf.values[i], conv_same(x, kern) + x, atol=1e-12)


def test_decompose_validates_rate_and_length():
    tree = init_dyadic_tree(3, 12000.0, kernel_len=65)
    with pytest.raises(ValueError):
        decompose(AudioClip(np.zeros(1600), 22050), tree)
    with pytest.raises(ValueError):
        decompose(AudioClip(np.zeros(1601), 24000), tree)


def test_leaf_ordering_by_initial_f_low():
    tree = init_dyadic_tree(5, 12000.0, kernel_len=65)
    f_lows = [leaf.f_low for leaf in tree.leaves()]
    assert f_lows == sorted(f_lows)


def test_modes_produce_identical_shapes():
    tree = init_dyadic_tree(4, 12000.0, kernel_len=65)
    x = np.random.default_rng(5).normal(size=(2, 1600))
    dyadic = run_cascade(None, Var(x), tree, mode="dyadic")
    single = run_cascade(None, Var(x), tree, mode="single_scale")
    assert dyadic.data.shape == single.data.shape == (2, 16, 100)
    assert not np.allclose(dyadic.data, single.data)


def test_single_scale_matches_direct_leaf_convolution():
    tree = init_dyadic_tree(2, 12000.0, kernel_len=65)
    _identity_egnorm(tree)
    x = np.random.default_rng(6).normal(size=512)
    out = run_cascade(None, Var(x[None, :]), tree, mode="single_scale")
    from dydec.filterbank import SincBandPass

    for i in range(4):
        leaf = tree.node(2, i)
        base_leaf = SincBandPass(leaf.f_low, leaf.f_high, leaf.kernel_len, 24000.0)
        expected = (conv_same(x, materialize_kernel(base_leaf)) + x)[::4]
        np.testing.assert_allclose(out.data[0, i], expected, atol=1e-12)


def test_unknown_mode_and_norm_rejected():
    tree = init_dyadic_tree(2, 12000.0, kernel_len=65)
    with pytest.raises(ValueError):
        run_cascade(None, Var(np.zeros((1, 64))), tree, mode="bogus")
    with pytest.raises(ValueError):
        run_cascade(None, Var(np.zeros((1, 64))), tree, norm="bogus")


@given(st.integers(1, 4), st.sampled_from([256, 512, 1024]))
@settings(max_examples=20, deadline=None)
def test_shape_law(depth, n):
    tree = init_dyadic_tree(depth, 12000.0, kernel_len=33)
    out = run_cascade(None, Var(np.zeros((1, n))), tree)
    assert out.data.shape == (1, 2**depth, n // 2**tree.n_decimations)


def test_cascade_gradient_flows_to_node_params():
    # End-to-end FD check through the cascade for one cutoff and one sigma.
    tree = init_dyadic_tree(2, 12000.0, kernel_len=33)
    rng = np.random.default_rng(8)
    x = rng.normal(0, 0.4, size=(1, 256))

    def loss_for_tree(t):
        out = run_cascade(None, Var(x), t)
        return float(np.sum(out.data**2))

    tape = GradTape()
    xvar = Var(x)
    pvars = []
    for d in range(1, 3):
        row = []
        for i in range(2**d):
            filt = tree.node(d, i)
            eg = tree.egnorm_at(d, i)
            row.append(
                {
                    "f_low": Var(filt.f_low, requires_grad=True),
                    "f_high": Var(filt.f_high, requires_grad=True),
                    "sigma": Var(eg.sigma, requires_grad=True),
                    "alpha": Var(eg.alpha, requires_grad=True),
                    "delta": Var(eg.delta, requires_grad=True),
                    "gamma": Var(eg.gamma, requires_grad=True),
                }
            )
        pvars.append(row)
    out = run_cascade(tape, xvar, tree, pvars=pvars)
    loss = tape.record(np.sum(out.data**2), (out,), lambda g: (g * 2 * out.data,))
    tape.backward(loss)

    h = 1e-2
    tree.node(2, 1).f_high += h
    plus = loss_for_tree(tree)
    tree.node(2, 1).f_high -= 2 * h
    minus = loss_for_tree(tree)
    tree.node(2, 1).f_high += h
    fd = (plus - minus) / (2 * h)
    analytic = float(pvars[1][1]["f_high"].grad)
    assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3

    h = 1e-5
    eg = tree.egnorm_at(1, 0)
    eg.sigma += h
    plus = loss_for_tree(tree)
    eg.sigma -= 2 * h
    minus = loss_for_tree(tree)
    eg.sigma += h
    fd = (plus - minus) / (2 * h)
    analytic = float(pvars[0][0]["sigma"].grad)
    assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3
