import numpy as np
import pytest

from mrfuse import tensor as T
from mrfuse.mrf import (MRFKernel, SimplexError, build_mrf_net, format_kernel, mrf_message_linear,
                        mrf_message_net, mrf_overhead_ratio, mrf_param_count, neighbour_offsets,
                        project_zero_center, zero_mrf_net)
from mrfuse.tensor import GradTape, Tensor, precision
from mrfuse.unet import UNetConfig

from oracles import central_difference, relative_error


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


def random_simplex(rng, k, spatial):
    r = rng.random((k,) + spatial) + 1e-3
    return r / r.sum(axis=0, keepdims=True)


def test_zero_kernel_zero_message():
    R = Tensor(random_simplex(np.random.default_rng(0), 3, (4, 4, 4)))
    assert not mrf_message_linear(MRFKernel.zeros(3), R).data.any()


def test_centre_forced_to_zero():
    w = np.random.default_rng(0).normal(size=(2, 2, 3, 3, 3))
    kernel = MRFKernel(Tensor(w))
    assert not kernel.log_weights.data[:, :, 1, 1, 1].any()


def test_uniform_r_uniform_kernel_interior():
    k = 3
    w = np.random.default_rng(1).normal(size=(k, k, 1, 1, 1)) * np.ones((k, k, 3, 3, 3))
    kernel = MRFKernel(Tensor(w))
    R = Tensor(np.full((k, 5, 5, 5), 1.0 / k))
    msg = mrf_message_linear(kernel, R).data
    expected = kernel.log_weights.data.sum(axis=(1, 2, 3, 4)) / k
    np.testing.assert_allclose(msg[:, 1:-1, 1:-1, 1:-1], expected[:, None, None, None] * np.ones((1, 3, 3, 3)))


def test_three_voxel_line_loop_oracle():
    w = np.zeros((2, 2, 3, 3, 3))
    w[:, :, 0, 1, 1] = [[0.5, -1.0], [0.25, 2.0]]  # delta = (-1, 0, 0)
    w[:, :, 2, 1, 1] = [[1.5, 0.1], [-0.7, 0.3]]   # delta = (+1, 0, 0)
    R = np.array([[0.2, 0.8], [0.6, 0.4], [0.9, 0.1]]).T.reshape(2, 3, 1, 1)
    msg = mrf_message_linear(MRFKernel(Tensor(w)), Tensor(R)).data
    expected = np.zeros((2, 3))
    for i in range(3):
        for k in range(2):
            for d, a in ((-1, 0), (1, 2)):
                if 0 <= i + d < 3:
                    for l in range(2):
                        expected[k, i] += w[k, l, a, 1, 1] * R[l, i + d, 0, 0]
    np.testing.assert_allclose(msg.reshape(2, 3), expected, atol=1e-14)


def test_simplex_violation_rejected():
    with pytest.raises(SimplexError):
        mrf_message_linear(MRFKernel.zeros(2), Tensor(np.full((2, 2, 2, 2), 0.7)))
    with pytest.raises(SimplexError):
        mrf_message_net(zero_mrf_net(2), Tensor(np.full((2, 2, 2, 2), 0.7)))


def test_linear_in_r():
    rng = np.random.default_rng(2)
    kernel = MRFKernel(Tensor(rng.normal(size=(3, 3, 3, 3, 3))))
    r1 = random_simplex(rng, 3, (4, 3, 5))
    r2 = random_simplex(rng, 3, (4, 3, 5))
    a = 0.3
    mixed = mrf_message_linear(kernel, Tensor(a * r1 + (1 - a) * r2)).data
    parts = a * mrf_message_linear(kernel, Tensor(r1)).data + (1 - a) * mrf_message_linear(kernel, Tensor(r2)).data
    np.testing.assert_allclose(mixed, parts, rtol=1e-5, atol=1e-12)


def test_translation_equivariance():
    rng = np.random.default_rng(3)
    kernel = MRFKernel(Tensor(rng.normal(size=(2, 2, 3, 3, 3))))
    R = random_simplex(rng, 2, (6, 6, 6))
    shifted = np.concatenate([np.full((2, 1, 6, 6), 0.5), R[:, :-1]], axis=1)
    m = mrf_message_linear(kernel, Tensor(R)).data
    ms = mrf_message_linear(kernel, Tensor(shifted)).data
    np.testing.assert_allclose(ms[:, 2:-1, 1:-1, 1:-1], m[:, 1:-2, 1:-1, 1:-1], atol=1e-12)


def test_agreement_kernel_favours_dominant_class():
    kernel = MRFKernel.agreement(3, beta=0.8, offsets="face")
    R = np.full((3, 5, 5, 5), 0.1)
    R[2] = 0.8  # class 2 dominates the neighbourhood
    msg = mrf_message_linear(kernel, Tensor(R)).data[:, 2, 2, 2]
    assert msg.argmax() == 2 and msg[2] > msg[0] and msg[2] > msg[1]


# --- MRF net ----------------------------------------------------------------

def test_net_zero_params_zero_message():
    R = Tensor(random_simplex(np.random.default_rng(0), 4, (3, 3, 3)))
    assert not mrf_message_net(zero_mrf_net(4), R).data.any()


def test_net_shape():
    R = Tensor(random_simplex(np.random.default_rng(0), 4, (5, 4, 3)))
    assert mrf_message_net(build_mrf_net(4, 0), R).shape == (4, 5, 4, 3)


def test_net_built_with_zero_centres():
    params = build_mrf_net(4, 1)
    assert not params.w1.data[:, :, 1, 1, 1].any()
    assert not params.b1.data.any() and not params.b2.data.any()


def test_net_gradients_finite_differences():
    rng = np.random.default_rng(4)
    params = build_mrf_net(2, 5, init_scale=1.0)
    params.b1.data[:] = rng.normal(size=4) * 0.1
    R_data = random_simplex(rng, 2, (4, 4, 4))
    probe = rng.normal(size=(2, 4, 4, 4))

    def value():
        return float((mrf_message_net(params, Tensor(R_data)).data * probe).sum())

    R = Tensor(R_data, requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(T.mul(mrf_message_net(params, R), Tensor(probe)))
    tape.backward(loss)
    for name, t in params.named_parameters() + [("R", R)]:
        # a probe on R must stay within the simplex tolerance
        h = 1e-6 if name == "R" else 1e-5
        for i, num in central_difference(value, t.data, h=h).items():
            if name == "w1" and i % 27 == 13:
                continue  # centre taps are projected, not free parameters
            assert relative_error(t.grad.reshape(-1)[i], num) < 1e-4, (name, i)


def test_projection_idempotent_and_restoring():
    params = build_mrf_net(3, 2)
    params.w1.data[:, :, 1, 1, 1] = 0.37
    other = params.w1.data.copy()
    project_zero_center(params)
    once = params.w1.data.copy()
    project_zero_center(params)
    np.testing.assert_array_equal(once, params.w1.data)
    assert not once[:, :, 1, 1, 1].any()
    other[:, :, 1, 1, 1] = 0
    np.testing.assert_array_equal(once, other)


def test_no_self_contribution_at_delta_voxel():
    rng = np.random.default_rng(6)
    kernel = MRFKernel(Tensor(rng.normal(size=(2, 2, 3, 3, 3))))
    base = np.zeros((2, 5, 5, 5))
    base[1] = 1.0
    delta = base.copy()
    delta[:, 2, 2, 2] = [1.0, 0.0]
    m_base = mrf_message_linear(kernel, Tensor(base)).data[:, 2, 2, 2]
    m_delta = mrf_message_linear(kernel, Tensor(delta)).data[:, 2, 2, 2]
    np.testing.assert_array_equal(m_base, m_delta)
    params = build_mrf_net(2, 0, init_scale=1.0)
    n_base = mrf_message_net(params, Tensor(base)).data[:, 2, 2, 2]
    n_delta = mrf_message_net(params, Tensor(delta)).data[:, 2, 2, 2]
    np.testing.assert_allclose(n_base, n_delta, atol=1e-15)


# --- counting ---------------------------------------------------------------

def test_net_count_k4():
    # (4*16*27 - 4*16) + 16 + (16*4 + 4)
    assert mrf_param_count(build_mrf_net(4, 0)) == 1748
    assert mrf_param_count(build_mrf_net(4, 0), include_center=True) == 1748 + 64


def test_overhead_ratio_decreases_in_j():
    params = build_mrf_net(4, 0)
    ratios = [mrf_overhead_ratio(params, UNetConfig(j=j, k=4)) for j in range(1, 7)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert ratios[0] < 0.025
    assert mrf_overhead_ratio(params, UNetConfig(j=1, k=4), include_center=True) < 0.025


def test_neighbourhoods():
    assert len(neighbour_offsets("full")) == 26
    assert len(neighbour_offsets("face")) == 6
    assert len(neighbour_offsets("odd")) == 14


def test_format_kernel_lists_every_offset():
    text = format_kernel(MRFKernel.agreement(2, 1.0))
    assert text.count("delta") == 26
