import numpy as np
import pytest

from evpoint.network import (
    CELL,
    DESC_DIM,
    DUSTBIN,
    LAYER_SPECS,
    ConvParams,
    WeightSet,
    _conv_backward,
    _conv_forward,
    _maxpool2,
    _maxpool2_backward,
    accumulate_grads,
    backward,
    dense_descriptors,
    detector_heatmap,
    forward,
    forward_frame,
    frame_to_tensor,
    init_weights,
    interpolation_matrix,
    l2_normalize_backward,
    l2_normalize_cells,
    pixel_to_cell,
    sgd_step,
    softmax_channels,
    zero_grads,
)


def tiny_conv(cin, cout, k, rng, dtype=np.float64):
    w = rng.normal(size=(cout, cin, k, k)).astype(dtype)
    b = rng.normal(size=cout).astype(dtype)
    return ConvParams(w, b)


def central_diff(f, arr, index, h=1e-6):
    orig = arr[index]
    arr[index] = orig + h
    hi = f()
    arr[index] = orig - h
    lo = f()
    arr[index] = orig
    return (hi - lo) / (2 * h)


def test_layer_specs_fixed_architecture():
    specs = {name: (cin, cout, k) for name, cin, cout, k in LAYER_SPECS}
    assert specs["conv1a"] == (1, 64, 3)
    assert specs["conv4b"] == (128, 128, 3)
    assert specs["cPa"] == (128, 256, 3)
    assert specs["semi"] == (256, DUSTBIN + 1, 1)
    assert specs["dDa"] == (128, 256, 3)
    assert specs["desc"] == (256, DESC_DIM, 1)
    assert len(LAYER_SPECS) == 12


def test_init_weights_statistics():
    w = init_weights(np.random.default_rng(0))
    p = w["conv3a"]
    assert p.w.dtype == np.float32
    assert (p.b == 0).all()
    std = np.sqrt(2.0 / (64 * 9))
    assert abs(p.w.std() - std) < 0.05 * std
    assert abs(p.w.mean()) < 0.05 * std


def test_init_weights_deterministic():
    a = init_weights(np.random.default_rng(9))
    b = init_weights(np.random.default_rng(9))
    assert all((a[n].w == b[n].w).all() for n, *_ in LAYER_SPECS)


def test_weightset_validation():
    rng = np.random.default_rng(0)
    good = {
        name: ConvParams(
            rng.normal(size=(cout, cin, k, k)).astype(np.float32),
            np.zeros(cout, dtype=np.float32),
        )
        for name, cin, cout, k in LAYER_SPECS
    }
    WeightSet(dict(good))

    missing = dict(good)
    del missing["cPa"]
    with pytest.raises(ValueError, match="cPa"):
        WeightSet(missing)

    bad_shape = dict(good)
    bad_shape["semi"] = ConvParams(
        np.zeros((65, 256, 3, 3), dtype=np.float32), np.zeros(65, dtype=np.float32)
    )
    with pytest.raises(ValueError, match="semi"):
        WeightSet(bad_shape)

    bad_bias = dict(good)
    bad_bias["desc"] = ConvParams(good["desc"].w, np.zeros(8, dtype=np.float32))
    with pytest.raises(ValueError, match="desc"):
        WeightSet(bad_bias)

    nans = dict(good)
    nans["conv1a"] = ConvParams(np.full_like(good["conv1a"].w, np.nan), good["conv1a"].b)
    with pytest.raises(ValueError, match="conv1a"):
        WeightSet(nans)

    extra = dict(good)
    extra["boost"] = good["conv1a"]
    with pytest.raises(ValueError, match="boost"):
        WeightSet(extra)


def test_frame_to_tensor_scales_to_unit_range():
    frame = np.array([[0, 255], [51, 102]], dtype=np.uint8)
    t = frame_to_tensor(frame)
    assert t.shape == (1, 1, 2, 2)
    assert t.dtype == np.float32
    assert np.allclose(t[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    with pytest.raises(ValueError):
        frame_to_tensor(np.zeros((2, 2, 3), dtype=np.uint8))


def test_forward_output_shapes(random_weights):
    frame = np.zeros((240, 320), dtype=np.uint8)
    semi, desc = forward_frame(random_weights, frame)
    assert semi.shape == (65, 30, 40)
    assert desc.shape == (256, 30, 40)
    assert semi.dtype == np.float32


def test_forward_rejects_bad_inputs(random_weights):
    with pytest.raises(ValueError):
        forward(random_weights, np.zeros((1, 2, 16, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        forward(random_weights, np.zeros((1, 1, 20, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        forward(random_weights, np.zeros((1, 1, 16), dtype=np.float32))


def test_forward_float64_input_stays_float64(random_weights):
    x = np.random.default_rng(0).uniform(size=(1, 1, 16, 16))
    out, cache = forward(random_weights, x)
    assert out.semi.dtype == np.float64
    assert out.desc_raw.dtype == np.float64
    assert cache["encoded"].dtype == np.float64


def test_forward_batch_matches_single(random_weights):
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
    b = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
    both, _ = forward(random_weights, np.concatenate([a, b]))
    one, _ = forward(random_weights, a)
    two, _ = forward(random_weights, b)
    assert np.allclose(both.semi[0], one.semi[0], atol=1e-6)
    assert np.allclose(both.semi[1], two.semi[0], atol=1e-6)


def test_conv_forward_hand_value():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    p = ConvParams(np.ones((1, 1, 3, 3)), np.array([1.0]))
    y = _conv_forward(p, x)
    # zero padding: the center sees all nine values, a corner sees four
    assert y[0, 0, 1, 1] == 36.0 + 1.0
    assert y[0, 0, 0, 0] == (0 + 1 + 3 + 4) + 1.0


def test_conv_backward_finite_difference():
    rng = np.random.default_rng(3)
    p = tiny_conv(2, 3, 3, rng)
    x = rng.normal(size=(1, 2, 5, 5))
    gy = rng.normal(size=(1, 3, 5, 5))

    def loss():
        return float((_conv_forward(p, x) * gy).sum())

    gx, gw, gb = _conv_backward(p, x, gy)
    for index in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 0, 2, 1)]:
        fd = central_diff(loss, p.w, index)
        assert abs(fd - gw[index]) <= 1e-6 * max(1.0, abs(fd))
    for index in [(0, 0, 2, 2), (0, 1, 4, 0)]:
        fd = central_diff(loss, x, index)
        assert abs(fd - gx[index]) <= 1e-6 * max(1.0, abs(fd))
    fd = central_diff(loss, p.b, (1,))
    assert abs(fd - gb[1]) <= 1e-6 * max(1.0, abs(fd))


def test_maxpool_first_maximum_wins_ties():
    x = np.full((1, 1, 2, 2), 5.0)
    y, idx = _maxpool2(x)
    assert y[0, 0, 0, 0] == 5.0
    assert idx[0, 0, 0, 0] == 0  # row-major first entry of the block
    g = _maxpool2_backward(idx, x.shape, np.ones_like(y))
    assert (g == [[1.0, 0.0], [0.0, 0.0]]).all()


def test_maxpool_routes_gradient_to_argmax():
    x = np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)
    y, idx = _maxpool2(x)
    assert y[0, 0, 0, 0] == 4.0
    g = _maxpool2_backward(idx, x.shape, np.full((1, 1, 1, 1), 7.0))
    assert (g == [[0.0, 0.0], [7.0, 0.0]]).all()


def test_network_backward_finite_difference():
    rng = np.random.default_rng(7)
    w32 = init_weights(rng)
    weights = WeightSet(
        {n: ConvParams(p.w.astype(np.float64), p.b.astype(np.float64))
         for n, p in w32.items()}
    )
    x = rng.uniform(size=(1, 1, 16, 16))
    gs = rng.normal(size=(1, 65, 2, 2))
    gd = rng.normal(size=(1, 256, 2, 2))

    def loss():
        out, _ = forward(weights, x)
        return float((out.semi * gs).sum() + (out.desc_raw * gd).sum())

    out, cache = forward(weights, x)
    grads = backward(weights, cache, gs, gd)
    for name in ("conv1a", "conv4b", "cPa", "semi", "dDa", "desc"):
        arr = weights[name].w
        flat = rng.choice(arr.size, size=3, replace=False)
        for f in flat:
            index = np.unravel_index(f, arr.shape)
            fd = central_diff(loss, arr, index)
            got = grads[name].w[index]
            assert abs(fd - got) <= 1e-4 * max(1.0, abs(fd), abs(got))


def test_backward_none_head_gradient_is_zero(random_weights):
    x = np.random.default_rng(0).uniform(size=(1, 1, 16, 16)).astype(np.float32)
    _, cache = forward(random_weights, x)
    gs = np.ones((1, 65, 2, 2), dtype=np.float32)
    grads = backward(random_weights, cache, gs, None)
    assert (grads["dDa"].w == 0).all()
    assert (grads["desc"].w == 0).all()
    assert (grads["conv1a"].w != 0).any()


def test_sgd_step_applies_learning_rate(random_weights):
    grads = zero_grads()
    grads["conv1a"].w[0, 0, 0, 0] = 2.0
    stepped = sgd_step(random_weights, grads, lr=0.5)
    delta = random_weights["conv1a"].w[0, 0, 0, 0] - stepped["conv1a"].w[0, 0, 0, 0]
    assert delta == pytest.approx(1.0, abs=1e-6)
    same = sgd_step(random_weights, zero_grads(), lr=1.0)
    assert all((same[n].w == random_weights[n].w).all() for n, *_ in LAYER_SPECS)
    assert stepped["conv1a"].w.dtype == np.float32


def test_sgd_step_rejects_non_finite_gradients(random_weights):
    grads = zero_grads()
    grads["semi"].b[3] = np.inf
    with pytest.raises(ValueError, match="semi"):
        sgd_step(random_weights, grads, lr=0.1)


def test_accumulate_grads_scales():
    acc = zero_grads()
    g = zero_grads()
    g["conv2a"].w[1, 1, 1, 1] = 3.0
    accumulate_grads(acc, g, scale=0.5)
    accumulate_grads(acc, g)
    assert acc["conv2a"].w[1, 1, 1, 1] == pytest.approx(4.5)


def test_softmax_channels_is_stable_and_normalized():
    z = np.array([[1e4, -1e4], [1e4 + 1, 0.0]], dtype=np.float64)
    p = softmax_channels(z, axis=0)
    assert np.isfinite(p).all()
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)
    assert p[1, 0] > p[0, 0]


def test_detector_heatmap_uniform_logits():
    hm = detector_heatmap(np.zeros((65, 3, 5), dtype=np.float32))
    assert hm.shape == (24, 40)
    assert np.allclose(hm, 1.0 / 65.0, atol=1e-9)


def test_detector_heatmap_channel_tiling():
    semi = np.zeros((65, 2, 2), dtype=np.float32)
    k, ci, cj = 10, 1, 0
    semi[k, ci, cj] = 50.0
    hm = detector_heatmap(semi)
    # channel k fills pixel (8 i + k // 8, 8 j + k % 8) of its cell
    py, px = CELL * ci + k // CELL, CELL * cj + k % CELL
    assert hm[py, px] > 0.99
    mask = np.ones_like(hm, dtype=bool)
    mask[py, px] = False
    assert hm[mask].max() < 0.02


def test_detector_heatmap_cell_sums_complement_dustbin():
    rng = np.random.default_rng(5)
    semi = rng.normal(size=(65, 4, 6)).astype(np.float32)
    hm = detector_heatmap(semi)
    p = softmax_channels(semi.astype(np.float64), axis=0)
    sums = hm.reshape(4, CELL, 6, CELL).sum(axis=(1, 3))
    assert np.allclose(sums, 1.0 - p[DUSTBIN], atol=1e-9)


def test_detector_heatmap_rejects_bad_shape():
    with pytest.raises(ValueError):
        detector_heatmap(np.zeros((64, 2, 2), dtype=np.float32))


def test_interpolation_matrix_rows_sum_to_one():
    coords = np.array([-1.0, -0.25, 0.0, 0.4, 1.5, 3.7, 4.0, 5.5])
    mat = interpolation_matrix(coords, 5)
    assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-6)


def test_interpolation_matrix_exact_at_nodes():
    mat = interpolation_matrix(np.array([0.0, 2.0, 4.0]), 5)
    for row, node in zip(mat, (0, 2, 4)):
        assert row[node] == pytest.approx(1.0, abs=1e-6)
        assert np.abs(np.delete(row, node)).max() < 1e-6


def test_interpolation_reproduces_linear_ramp_interior():
    nodes = np.arange(8, dtype=np.float64)
    coords = np.linspace(1.0, 6.0, 21)
    mat = interpolation_matrix(coords, 8)
    assert np.allclose(mat @ nodes, coords, atol=1e-5)


def test_pixel_to_cell_centers():
    assert pixel_to_cell(3.5) == 0.0
    assert pixel_to_cell(11.5) == 1.0
    assert np.allclose(pixel_to_cell(np.array([3.5 + 8 * 3])), [3.0])


def test_dense_descriptors_unit_norm_and_shape():
    rng = np.random.default_rng(11)
    raw = rng.normal(size=(16, 3, 4)).astype(np.float32)
    dense = dense_descriptors(raw)
    assert dense.shape == (24, 32, 16)
    norms = np.sqrt((dense.astype(np.float64) ** 2).sum(axis=2))
    assert np.allclose(norms, 1.0, atol=1e-5)


def test_dense_descriptors_constant_field_is_constant():
    raw = np.zeros((4, 2, 2), dtype=np.float32)
    raw[1] = 3.0
    raw[3] = -4.0
    dense = dense_descriptors(raw)
    expected = np.array([0.0, 0.6, 0.0, -0.8])
    assert np.allclose(dense, expected[None, None, :], atol=1e-6)


def test_l2_normalize_cells_unit_norm():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(8, 3, 3))
    unit, norms = l2_normalize_cells(d)
    assert np.allclose(np.sqrt((unit**2).sum(axis=0)), 1.0, atol=1e-12)
    assert np.allclose(unit * norms, d, atol=1e-12)


def test_l2_normalize_backward_finite_difference():
    rng = np.random.default_rng(4)
    d = rng.normal(size=(6, 2, 2))
    g_unit = rng.normal(size=(6, 2, 2))

    def loss():
        unit, _ = l2_normalize_cells(d)
        return float((unit * g_unit).sum())

    unit, norms = l2_normalize_cells(d)
    gd = l2_normalize_backward(unit, norms, g_unit)
    for index in [(0, 0, 0), (3, 1, 0), (5, 1, 1)]:
        fd = central_diff(loss, d, index)
        assert abs(fd - gd[index]) <= 1e-6 * max(1.0, abs(fd))
