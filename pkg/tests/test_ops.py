import numpy as np
import pytest

from heimdal import ops
from heimdal.errors import ShapeError
from heimdal.ops import ConvSpec


def conv_naive(x, w, b, spec):
    """Loop reference for grouped 2-D cross-correlation (small cases)."""
    n, ci, f, t = x.shape
    co = w.shape[0]
    g = spec.groups
    cig, cog = ci // g, co // g
    (kf, kt), (sf, st) = spec.kernel, spec.stride
    (df, dt), (pf, pt) = spec.dilation, spec.padding
    fo = (f + 2 * pf - df * (kf - 1) - 1) // sf + 1
    to = (t + 2 * pt - dt * (kt - 1) - 1) // st + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    y = np.zeros((n, co, fo, to), dtype=np.float64)
    for b_i in range(n):
        for o in range(co):
            grp = o // cog
            for i in range(fo):
                for j in range(to):
                    acc = 0.0
                    for c in range(cig):
                        for a in range(kf):
                            for e in range(kt):
                                acc += (w[o, c, a, e]
                                        * xp[b_i, grp * cig + c,
                                             i * sf + a * df,
                                             j * st + e * dt])
                    y[b_i, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return y


def fd_scalar_check(f, x, analytic, rng, h=1e-3, samples=8, tol=1e-3):
    """Central finite differences on sampled coordinates of x.

    f maps the (mutated in place) array x to a python float; analytic is
    the claimed gradient of f at the unperturbed x. Coordinates are drawn
    from the dominant gradient entries: in float32 the difference quotient
    carries an absolute noise floor of roughly eps*|f|/h, so tiny
    components are not measurable at any relative tolerance (float64
    inputs make the same check tight everywhere).
    """
    flat = x.reshape(-1)
    grad = np.asarray(analytic).reshape(-1)
    eligible = np.flatnonzero(np.abs(grad) >= 0.3 * np.abs(grad).max())
    count = min(samples, eligible.size)
    idx = rng.choice(eligible, size=count, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        a = float(grad[i])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
        worst = max(worst, rel)
    assert worst < tol, f"max relative FD error {worst}"
    return worst


def random_conv_case(rng, dtype=np.float32, max_batch=3):
    g = int(rng.choice([1, 2]))
    cig = int(rng.integers(1, 3))
    cog = int(rng.integers(1, 3))
    ci, co = g * cig, g * cog
    kf = int(rng.integers(1, 4))
    kt = int(rng.integers(1, 4))
    df = int(rng.integers(1, 3))
    dt = int(rng.integers(1, 3))
    sf = int(rng.integers(1, 3))
    st = int(rng.integers(1, 3))
    pf = int(rng.integers(0, 2))
    f = df * (kf - 1) + 1 + int(rng.integers(0, 4))
    t = dt * (kt - 1) + 1 + int(rng.integers(0, 5))
    n = int(rng.integers(1, max_batch))
    spec = ConvSpec(kernel=(kf, kt), stride=(sf, st), dilation=(df, dt),
                    padding=(pf, 0), groups=g)
    x = rng.normal(0, 1, (n, ci, f, t)).astype(dtype)
    w = rng.normal(0, 0.5, (co, cig, kf, kt)).astype(dtype)
    b = rng.normal(0, 0.1, (co,)).astype(dtype)
    return x, w, b, spec


class TestConvForward:
    def test_extent_formula_cases(self):
        # the three shipped-geometry checks: 131->127, 16(+2pad,/2)->8,
        # and dilation-2 123->119
        spec = ConvSpec(kernel=(5, 5), stride=(2, 1), padding=(2, 0))
        assert spec.out_extent(1, 131) == 127
        assert spec.out_extent(0, 16) == 8
        spec2 = ConvSpec(kernel=(3, 3), dilation=(1, 2))
        assert spec2.out_extent(1, 123) == 119

    def test_matches_naive(self, rng):
        for _ in range(20):
            x, w, b, spec = random_conv_case(rng)
            got = ops.conv2d_forward(x, w, b, spec)
            want = conv_naive(x, w, b, spec)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_depthwise_equals_per_channel(self, rng):
        c, f, t = 4, 6, 8
        x = rng.normal(0, 1, (2, c, f, t)).astype(np.float32)
        w = rng.normal(0, 1, (c, 1, 3, 3)).astype(np.float32)
        b = np.zeros(c, dtype=np.float32)
        spec = ConvSpec(kernel=(3, 3), groups=c)
        got = ops.conv2d_forward(x, w, b, spec)
        single = ConvSpec(kernel=(3, 3))
        for ch in range(c):
            want = ops.conv2d_forward(x[:, ch:ch + 1], w[ch:ch + 1],
                                      b[ch:ch + 1], single)
            np.testing.assert_allclose(got[:, ch:ch + 1], want, atol=1e-5)

    def test_nonpositive_extent_names_axis(self):
        spec = ConvSpec(kernel=(5, 1))
        x = np.zeros((1, 1, 3, 4), dtype=np.float32)
        w = np.zeros((1, 1, 5, 1), dtype=np.float32)
        with pytest.raises(ShapeError, match="frequency"):
            ops.conv2d_forward(x, w, None, spec)
        spec_t = ConvSpec(kernel=(1, 9))
        w_t = np.zeros((1, 1, 1, 9), dtype=np.float32)
        with pytest.raises(ShapeError, match="time"):
            ops.conv2d_forward(x, w_t, None, spec_t)

    def test_3d_in_3d_out(self, rng):
        x = rng.normal(0, 1, (2, 4, 6)).astype(np.float32)
        w = rng.normal(0, 1, (3, 2, 1, 3)).astype(np.float32)
        y = ops.conv2d_forward(x, w, np.zeros(3, np.float32),
                               ConvSpec(kernel=(1, 3)))
        assert y.shape == (3, 4, 4)


class TestConvBackward:
    def test_zero_grad_out(self, rng):
        x, w, b, spec = random_conv_case(rng)
        y = ops.conv2d_forward(x, w, b, spec)
        gx, gw, gb = ops.conv2d_backward(np.zeros_like(y), x, w, spec)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_scatter(self, rng):
        # 1x1x1x3 input, kernel (1,3): grad_input is grad_out scattered
        # through the kernel taps
        x = rng.normal(0, 1, (1, 1, 1, 3)).astype(np.float32)
        w = np.array([[[[0.0, 1.0, 0.0]]]], dtype=np.float32)
        spec = ConvSpec(kernel=(1, 3))
        y = ops.conv2d_forward(x, w, None, spec)
        assert y.shape == (1, 1, 1, 1)
        gx, gw, gb = ops.conv2d_backward(np.ones_like(y), x, w, spec)
        np.testing.assert_allclose(gx[0, 0, 0], [0.0, 1.0, 0.0])
        np.testing.assert_allclose(gw[0, 0, 0], x[0, 0, 0])

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3),
                                           (np.float64, 1e-8)])
    def test_finite_differences_50_seeds(self, dtype, tol):
        worst = 0.0
        for seed in range(50):
            local = np.random.default_rng(seed)
            x, w, b, spec = random_conv_case(local, dtype=dtype, max_batch=2)
            v = local.normal(0, 1, ops.conv2d_forward(x, w, b, spec).shape)
            v = v.astype(dtype)

            def scalar():
                y = ops.conv2d_forward(x, w, b, spec)
                return float(np.sum(y.astype(np.float64) * v))

            gx, gw, gb = ops.conv2d_backward(v, x, w, spec)
            worst = max(worst, fd_scalar_check(scalar, x, gx, local, tol=tol))
            worst = max(worst, fd_scalar_check(scalar, w, gw, local, tol=tol))
            worst = max(worst, fd_scalar_check(scalar, b, gb, local, tol=tol))
        print(f"conv2d max FD rel err over 50 seeds ({np.dtype(dtype).name}): "
              f"{worst:.2e}")

    def test_shape_mismatch(self, rng):
        x, w, b, spec = random_conv_case(rng)
        y = ops.conv2d_forward(x, w, b, spec)
        bad = np.zeros(y.shape[:-1] + (y.shape[-1] + 1,), dtype=np.float32)
        with pytest.raises(ShapeError):
            ops.conv2d_backward(bad, x, w, spec)


class TestBatchnorm:
    def _params(self, c, rng=None, random=False):
        if random and rng is not None:
            scale = rng.uniform(0.5, 2.0, c).astype(np.float32)
            shift = rng.normal(0, 0.5, c).astype(np.float32)
        else:
            scale = np.ones(c, dtype=np.float32)
            shift = np.zeros(c, dtype=np.float32)
        return scale, shift, np.zeros(c, np.float32), np.ones(c, np.float32)

    def test_zero_variance_channel_outputs_shift(self):
        x = np.full((2, 3, 4, 5), 7.0, dtype=np.float32)
        scale, shift, rm, rv = self._params(3)
        shift[:] = [1.0, -2.0, 0.5]
        y, _ = ops.batchnorm_forward(x, scale, shift, rm, rv, "train")
        for c in range(3):
            np.testing.assert_allclose(y[:, c], shift[c], atol=1e-6)

    def test_normalized_input_passthrough(self, rng):
        x = rng.normal(0, 1, (4, 3, 8, 16)).astype(np.float32)
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(
            axis=(0, 2, 3), keepdims=True)
        x = x.astype(np.float32)
        scale, shift, rm, rv = self._params(3)
        y, _ = ops.batchnorm_forward(x, scale, shift, rm, rv, "train")
        assert np.abs(y - x).max() < 1e-4

    def test_infer_stateless(self, rng):
        x = rng.normal(0, 1, (2, 3, 4, 5)).astype(np.float32)
        scale, shift, rm, rv = self._params(3, rng, random=True)
        y1, _ = ops.batchnorm_forward(x, scale, shift, rm, rv, "infer")
        y2, _ = ops.batchnorm_forward(x, scale, shift, rm, rv, "infer")
        np.testing.assert_array_equal(y1, y2)

    def test_running_stats_update(self, rng):
        x = rng.normal(3.0, 2.0, (8, 2, 4, 16)).astype(np.float32)
        scale, shift, rm, rv = self._params(2)
        ops.batchnorm_forward(x, scale, shift, rm, rv, "train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)),
                                   rtol=1e-4)
        np.testing.assert_allclose(
            rv, 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-4)

    @pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-3, 1e-3),
                                             (np.float64, 1e-5, 1e-8)])
    def test_finite_differences(self, rng, dtype, h, tol):
        x = rng.normal(0, 1, (2, 2, 3, 4)).astype(dtype)
        scale, shift, rm, rv = (a.astype(dtype) for a in
                                self._params(2, rng, random=True))
        v = rng.normal(0, 1, x.shape).astype(dtype)

        def scalar():
            y, _ = ops.batchnorm_forward(x, scale, shift, rm.copy(),
                                         rv.copy(), "train")
            return float(np.sum(y.astype(np.float64) * v))

        y, cache = ops.batchnorm_forward(x, scale, shift, rm.copy(),
                                         rv.copy(), "train")
        gx, gscale, gshift = ops.batchnorm_backward(v, cache)
        fd_scalar_check(scalar, x, gx, rng, h=h, samples=10, tol=tol)
        fd_scalar_check(scalar, scale, gscale, rng, h=h, samples=2, tol=tol)
        fd_scalar_check(scalar, shift, gshift, rng, h=h, samples=2, tol=tol)


class TestSubspectral:
    def _norm_ref(self, x):
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        return (x - mean) / np.sqrt(var + ops.BN_EPS)

    def test_groups1_equals_batchnorm(self, rng):
        x = rng.normal(0, 1, (2, 3, 4, 5)).astype(np.float32)
        c = 3
        args = (np.ones(c, np.float32), np.zeros(c, np.float32),
                np.zeros(c, np.float32), np.ones(c, np.float32))
        y_bn, _ = ops.batchnorm_forward(x, *args, "train")
        y_ssn, _ = ops.subspectral_forward(x, *(a.copy() for a in args), 1,
                                           "train")
        np.testing.assert_allclose(y_ssn, y_bn, atol=1e-6)

    @pytest.mark.parametrize("groups,freq", [(8, 8), (2, 8), (4, 8)])
    def test_matches_per_band_reference(self, rng, groups, freq):
        c = 3
        x = rng.normal(0, 1, (4, c, freq, 6)).astype(np.float32)
        n_params = c * groups
        y, _ = ops.subspectral_forward(
            x, np.ones(n_params, np.float32), np.zeros(n_params, np.float32),
            np.zeros(n_params, np.float32), np.ones(n_params, np.float32),
            groups, "train")
        band = freq // groups
        for g in range(groups):
            sl = slice(g * band, (g + 1) * band)
            np.testing.assert_allclose(y[:, :, sl], self._norm_ref(x[:, :, sl]),
                                       atol=1e-5)

    def test_indivisible_freq_rejected(self, rng):
        x = np.zeros((1, 2, 5, 4), dtype=np.float32)
        p = np.ones(6, np.float32)
        with pytest.raises(ShapeError):
            ops.subspectral_forward(x, p, p.copy(), p.copy(), p.copy(), 3,
                                    "train")

    @pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-3, 1e-3),
                                             (np.float64, 1e-5, 1e-8)])
    def test_finite_differences(self, rng, dtype, h, tol):
        c, groups = 2, 2
        x = rng.normal(0, 1, (2, c, 4, 3)).astype(dtype)
        n = c * groups
        scale = rng.uniform(0.5, 1.5, n).astype(dtype)
        shift = rng.normal(0, 0.3, n).astype(dtype)
        rm, rv = np.zeros(n, dtype), np.ones(n, dtype)
        v = rng.normal(0, 1, x.shape).astype(dtype)

        def scalar():
            y, _ = ops.subspectral_forward(x, scale, shift, rm.copy(),
                                           rv.copy(), groups, "train")
            return float(np.sum(y.astype(np.float64) * v))

        _, cache = ops.subspectral_forward(x, scale, shift, rm.copy(),
                                           rv.copy(), groups, "train")
        gx, gscale, gshift = ops.subspectral_backward(v, cache)
        fd_scalar_check(scalar, x, gx, rng, h=h, samples=10, tol=tol)
        fd_scalar_check(scalar, scale, gscale, rng, h=h, samples=3, tol=tol)


class TestPointwiseOps:
    def test_swish_zero(self):
        y, _ = ops.swish_forward(np.array([0.0], dtype=np.float32))
        assert y[0] == 0.0

    def test_swish_fd(self, rng):
        x = rng.normal(0, 2, (64,)).astype(np.float32)
        v = rng.normal(0, 1, (64,)).astype(np.float32)

        def scalar():
            y, _ = ops.swish_forward(x)
            return float(np.sum(y.astype(np.float64) * v))

        _, cache = ops.swish_forward(x)
        fd_scalar_check(scalar, x, ops.swish_backward(v, cache), rng)

    def test_relu_fd_away_from_kink(self, rng):
        signs = rng.choice([-1.0, 1.0], 64)
        x = (signs * rng.uniform(0.25, 2.0, 64)).astype(np.float32)
        v = rng.normal(0, 1, (64,)).astype(np.float32)

        def scalar():
            y, _ = ops.relu_forward(x)
            return float(np.sum(y.astype(np.float64) * v))

        _, mask = ops.relu_forward(x)
        fd_scalar_check(scalar, x, ops.relu_backward(v, mask), rng)

    def test_time_trim(self):
        x = np.arange(10, dtype=np.float32).reshape(1, 1, 1, 10)
        y, cache = ops.time_trim_forward(x, 2, 2)
        np.testing.assert_array_equal(y[0, 0, 0], np.arange(2, 8))
        gx = ops.time_trim_backward(np.ones_like(y), cache)
        np.testing.assert_array_equal(gx[0, 0, 0],
                                      [0, 0, 1, 1, 1, 1, 1, 1, 0, 0])

    def test_overtrim_rejected(self):
        x = np.zeros((1, 1, 1, 4), dtype=np.float32)
        with pytest.raises(ShapeError):
            ops.time_trim_forward(x, 2, 2)

    def test_broadcast_matches_loop(self, rng):
        x = rng.normal(0, 1, (2, 3, 4, 5)).astype(np.float32)
        pooled, _ = ops.freq_avgpool_forward(x)
        got = ops.freq_broadcast_add(pooled, x)
        want = np.empty_like(x)
        for n in range(2):
            for c in range(3):
                for f in range(4):
                    for t in range(5):
                        acc = 0.0
                        for ff in range(4):
                            acc += x[n, c, ff, t]
                        want[n, c, f, t] = x[n, c, f, t] + acc / 4.0
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_avgpool_fd(self, rng):
        x = rng.normal(0, 1, (2, 3, 4, 5)).astype(np.float32)
        v = rng.normal(0, 1, (2, 3, 1, 5)).astype(np.float32)

        def scalar():
            y, _ = ops.freq_avgpool_forward(x)
            return float(np.sum(y.astype(np.float64) * v))

        _, cache = ops.freq_avgpool_forward(x)
        fd_scalar_check(scalar, x, ops.freq_avgpool_backward(v, cache), rng)

    def test_dropout_infer_identity(self, rng):
        x = rng.normal(0, 1, (2, 3, 4, 5)).astype(np.float32)
        y, cache = ops.channel_dropout_forward(x, 0.5, "infer")
        assert y is x and cache is None

    def test_dropout_train_zeroes_channels(self):
        x = np.ones((4, 8, 2, 3), dtype=np.float32)
        rng = np.random.default_rng(3)
        y, cache = ops.channel_dropout_forward(x, 0.5, "train", rng)
        factor, _ = cache
        # whole channels are either 0 or 1/(1-p)
        per_channel = y.reshape(4, 8, -1)
        for n in range(4):
            for c in range(8):
                vals = np.unique(per_channel[n, c])
                assert len(vals) == 1 and vals[0] in (0.0, 2.0)
        gy = np.ones_like(y)
        gx = ops.channel_dropout_backward(gy, cache)
        np.testing.assert_array_equal(gx, np.broadcast_to(factor, x.shape))

    def test_dropout_deterministic_per_seed(self):
        x = np.ones((2, 16, 1, 1), dtype=np.float32)
        y1, _ = ops.channel_dropout_forward(x, 0.3, "train",
                                            np.random.default_rng(7))
        y2, _ = ops.channel_dropout_forward(x, 0.3, "train",
                                            np.random.default_rng(7))
        np.testing.assert_array_equal(y1, y2)


class TestDtypePreservation:
    def test_float64_shadow_path(self, rng):
        x, w, b, spec = random_conv_case(rng, dtype=np.float64)
        y = ops.conv2d_forward(x, w, b, spec)
        assert y.dtype == np.float64
        gx, gw, gb = ops.conv2d_backward(y, x, w, spec)
        assert gx.dtype == np.float64
