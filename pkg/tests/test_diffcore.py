"""Autodiff engine tests: op values against numpy, gradients against
central differences, forward mode against directional finite differences.

The gradient oracles never trust the engine: every expected derivative
comes from (f(x+h) - f(x-h)) / 2h on the scalarized loss, or from a
hand-written closed form.
"""
from __future__ import annotations

import numpy as np
import pytest

from asrf.diffcore import graph, nn, optim, serialize, checks
from asrf.diffcore.graph import Node


def fd_input(f, x0, h=1e-6, rng=None, entries=8):
    """Max rel error of d(sum f)/dx vs central differences at random entries."""
    x0 = np.asarray(x0, dtype=np.float64)
    xn = graph.param(x0.copy())
    y = graph.nsum(f(xn))
    graph.backward(y)
    g = xn.grad.copy()
    rng = rng or np.random.default_rng(0)
    idxs = rng.choice(x0.size, size=min(entries, x0.size), replace=False)
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idxs:
        keep = flat[i]
        flat[i] = keep + h
        lp = float(graph.nsum(f(graph.constant(x0))).value)
        flat[i] = keep - h
        lm = float(graph.nsum(f(graph.constant(x0))).value)
        flat[i] = keep
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), 1e-6)
        worst = max(worst, abs(g.reshape(-1)[i] - fd) / denom)
    return worst


class TestOpValues:
    def test_arithmetic_matches_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(4, 5)) + 3.0
        na, nb = graph.constant(a), graph.constant(b)
        assert np.array_equal((na + nb).value, a + b)
        assert np.array_equal((na - nb).value, a - b)
        assert np.array_equal((na * nb).value, a * b)
        assert np.array_equal((na / nb).value, a / b)
        assert np.array_equal((-na).value, -a)
        assert np.array_equal((na ** 3).value, a ** 3)

    def test_unary_matches_numpy(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.1, 2.0, size=(3, 4))
        nx = graph.constant(x)
        assert np.array_equal(graph.exp(nx).value, np.exp(x))
        assert np.array_equal(graph.log(nx).value, np.log(x))
        assert np.array_equal(graph.sqrt(nx).value, np.sqrt(x))
        assert np.array_equal(graph.sin(nx).value, np.sin(x))
        assert np.array_equal(graph.cos(nx).value, np.cos(x))

    def test_softplus_is_logaddexp(self):
        # large |x| must not overflow: softplus(800) == 800, softplus(-800) == 0
        x = np.array([-800.0, -5.0, 0.0, 5.0, 800.0])
        out = graph.softplus(graph.constant(x)).value
        assert np.array_equal(out, np.logaddexp(0.0, x))
        assert out[-1] == 800.0 and out[0] == 0.0

    def test_sigmoid_saturates_without_overflow(self):
        x = np.array([-800.0, 0.0, 800.0])
        out = graph.sigmoid(graph.constant(x)).value
        assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0

    def test_matmul_reduction_layout(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.allclose(graph.matmul(graph.constant(a), graph.constant(b)).value,
                           a @ b, atol=0, rtol=0)

    def test_cumsum_gather_concat_getitem(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 3))
        nx = graph.constant(x)
        assert np.array_equal(graph.cumsum(nx, axis=1).value, np.cumsum(x, axis=1))
        idx = np.array([4, 0, 0, 2])
        assert np.array_equal(graph.gather(nx, idx).value, x[idx])
        cat = graph.concat([nx, nx * 2.0], axis=1)
        assert np.array_equal(cat.value, np.concatenate([x, 2 * x], axis=1))
        assert np.array_equal(nx[:, 1:3].value, x[:, 1:3])


class TestGradients:
    """Backprop vs central differences; tolerance 1e-6 on smooth ops."""

    CASES = [
        ("add_broadcast", lambda x: x + graph.constant(np.arange(3.0))),
        ("mul", lambda x: x * x),
        ("div", lambda x: x / (x * x + 1.0)),
        ("power", lambda x: (x + 2.0) ** 3),
        ("exp", graph.exp),
        ("log_shifted", lambda x: graph.log(x * x + 1.0)),
        ("sqrt_shifted", lambda x: graph.sqrt(x * x + 0.5)),
        ("sin", graph.sin),
        ("cos", graph.cos),
        ("sigmoid", graph.sigmoid),
        ("softplus", graph.softplus),
        ("cumsum", lambda x: graph.cumsum(x, axis=0)),
        ("reshape", lambda x: graph.reshape(x * 2.0, (6, 2))),
        ("getitem", lambda x: x[1:3, :2] * 3.0),
        ("mean_axis", lambda x: graph.nmean(x * x, axis=1)),
    ]

    @pytest.mark.parametrize("name,f", CASES, ids=[c[0] for c in CASES])
    def test_op_gradient(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = rng.uniform(0.2, 1.5, size=(4, 3))
        assert fd_input(f, x, rng=rng) < 1e-6

    def test_relu_gradient_off_kink(self):
        # central differences are only valid away from the kink
        x = np.array([[-1.0, -0.3, 0.4], [2.0, -2.0, 0.7]])
        assert fd_input(graph.relu, x) < 1e-6

    def test_matmul_gradient_both_args(self):
        rng = np.random.default_rng(7)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = graph.param(a0.copy()), graph.param(b0.copy())
        graph.backward(graph.nsum(graph.matmul(a, b) ** 2))
        y0 = np.sum((a0 @ b0) ** 2)
        h = 1e-6
        for arr, node in ((a0, a), (b0, b)):
            ij = (1, 1)
            keep = arr[ij]
            arr[ij] = keep + h
            yp = np.sum((a0 @ b0) ** 2)
            arr[ij] = keep - h
            ym = np.sum((a0 @ b0) ** 2)
            arr[ij] = keep
            fd = (yp - ym) / (2 * h)
            assert abs(node.grad[ij] - fd) / max(abs(fd), 1e-6) < 1e-6
        assert y0 > 0  # sanity: loss not degenerate

    def test_gather_accumulates_duplicate_rows(self):
        # d/dx sum(gather(x, [0,0,2])) puts weight 2 on row 0, 1 on row 2
        x = graph.param(np.ones((3, 2)))
        graph.backward(graph.nsum(graph.gather(x, np.array([0, 0, 2]))))
        assert np.array_equal(x.grad, np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]))

    def test_unbroadcast_sums_over_expanded_axes(self):
        # (4,3) + (3,) : the (3,) side's grad is the column sum
        b = graph.param(np.zeros(3))
        a = graph.constant(np.arange(12.0).reshape(4, 3))
        graph.backward(graph.nsum((a + b) * 2.0))
        assert np.array_equal(b.grad, np.full(3, 8.0))

    def test_broadcast_to_gradient(self):
        x = graph.param(np.array([[1.0], [2.0]]))
        graph.backward(graph.nsum(graph.broadcast_to(x, (2, 5))))
        assert np.array_equal(x.grad, np.full((2, 1), 5.0))

    def test_detach_blocks_gradient(self):
        x = graph.param(np.array([3.0]))
        graph.backward(graph.nsum(graph.detach(x) * x))
        assert np.array_equal(x.grad, np.array([3.0]))  # only the live branch

    def test_diamond_graph_accumulates_once_per_path(self):
        # y = u*u with u = x+x: dy/dx = 2u * 2 = 8x
        x = graph.param(np.array([1.5]))
        u = x + x
        graph.backward(graph.nsum(u * u))
        assert np.allclose(x.grad, 8 * 1.5, rtol=0, atol=1e-12)


class TestForwardMode:
    def test_jvp_matches_directional_fd(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(5,))
        v = rng.normal(size=(5,))

        def f(xn):
            return graph.sin(xn) * graph.exp(xn * 0.3) + xn ** 2

        xn = graph.constant(x0)
        (tan,) = graph.jvp([f(xn)], xn, v)
        h = 1e-6
        fd = (f(graph.constant(x0 + h * v)).value -
              f(graph.constant(x0 - h * v)).value) / (2 * h)
        assert np.max(np.abs(tan.value - fd)) < 1e-6

    def test_jvp_through_gather_concat(self):
        rng = np.random.default_rng(12)
        x0 = rng.normal(size=(4, 2))
        v = rng.normal(size=(4, 2))

        def f(xn):
            g = graph.gather(xn, np.array([2, 0, 3]))
            return graph.nsum(graph.concat([g, g * 2.0], axis=1) ** 2, axis=1)

        xn = graph.constant(x0)
        (tan,) = graph.jvp([f(xn)], xn, v)
        h = 1e-6
        fd = (f(graph.constant(x0 + h * v)).value -
              f(graph.constant(x0 - h * v)).value) / (2 * h)
        assert np.max(np.abs(tan.value - fd)) < 1e-5

    def test_forward_derivative_of_scalar_path(self):
        # d/dt [t^3 + sin t] = 3t^2 + cos t
        out = graph.forward_derivative(lambda t: t ** 3 + graph.sin(t), 0.7)
        assert np.allclose(out, 3 * 0.7 ** 2 + np.cos(0.7), atol=1e-12)


class TestNN:
    def test_positional_encoding_layout(self):
        x = np.array([[0.25, -0.5]])
        out = nn.positional_encoding(graph.constant(x), 2, include_input=True).value
        expect = [0.25, -0.5]
        for k in range(2):
            w = 2.0 ** k * np.pi
            expect += [np.sin(0.25 * w), np.sin(-0.5 * w)]
            expect += [np.cos(0.25 * w), np.cos(-0.5 * w)]
        # layout is [x, sin_0, cos_0, sin_1, cos_1] blocks of input width
        assert out.shape == (1, 2 * (1 + 2 * 2))
        assert np.allclose(out[0, :2], expect[:2], atol=0)
        assert np.allclose(out[0, 2:4], [np.sin(0.25 * np.pi), np.sin(-0.5 * np.pi)], atol=1e-15)
        assert np.allclose(out[0, 4:6], [np.cos(0.25 * np.pi), np.cos(-0.5 * np.pi)], atol=1e-15)

    def test_positional_encoding_rejects_empty(self):
        with pytest.raises(ValueError):
            nn.positional_encoding(graph.constant(np.zeros((1, 2))), 0)

    def test_mlp_matches_manual_forward(self):
        rng = np.random.default_rng(5)
        store = nn.ParamStore()
        spec = nn.MlpSpec(in_dim=3, widths=(8, 8))
        nn.init_mlp(store, "m", spec, rng)
        x = rng.normal(size=(6, 3))
        out = nn.mlp_forward(spec, store, "m", graph.constant(x)).value

        h = x
        for i in range(2):
            h = h @ store[f"m/W{i}"].value + store[f"m/b{i}"].value
            h = np.maximum(h, 0.0)
        assert np.array_equal(out, h)

    def test_mlp_skip_concat(self):
        rng = np.random.default_rng(6)
        store = nn.ParamStore()
        spec = nn.MlpSpec(in_dim=3, widths=(8, 8, 8), skip_at=(1,), skip_dim=3)
        nn.init_mlp(store, "m", spec, rng)
        x = rng.normal(size=(2, 3))
        out = nn.mlp_forward(spec, store, "m", graph.constant(x),
                             skip=graph.constant(x)).value
        h = np.maximum(x @ store["m/W0"].value + store["m/b0"].value, 0.0)
        h = np.concatenate([h, x], axis=1)
        h = np.maximum(h @ store["m/W1"].value + store["m/b1"].value, 0.0)
        h = np.maximum(h @ store["m/W2"].value + store["m/b2"].value, 0.0)
        assert np.array_equal(out, h)

    def test_mlp_gradient(self):
        rng = np.random.default_rng(8)
        store = nn.ParamStore()
        spec = nn.MlpSpec(in_dim=2, widths=(6, 6))
        nn.init_mlp(store, "m", spec, rng)
        x = rng.normal(size=(5, 2))

        def build():
            return graph.nsum(nn.mlp_forward(spec, store, "m", graph.constant(x)) ** 2)

        # h=1e-6 keeps central differences off relu kink crossings
        assert checks.grad_check_params(build, store, rng, h=1e-6) < 1e-5

    def test_param_store_is_ordered_and_strict(self):
        store = nn.ParamStore()
        store.add("b", np.zeros(2))
        store.add("a", np.zeros(3))
        assert list(store.names()) == ["b", "a"]  # insertion order, not sorted
        with pytest.raises(ValueError):
            store.add("a", np.zeros(3))
        with pytest.raises(KeyError):
            store["missing"]

    def test_param_store_state_round_trip(self):
        store = nn.ParamStore()
        store.add("w", np.arange(6.0).reshape(2, 3))
        st = store.state()
        st["w"][0, 0] = 99.0  # state() must be a copy
        assert store["w"].value[0, 0] == 0.0
        store.load_state({"w": np.full((2, 3), 7.0)})
        assert np.all(store["w"].value == 7.0)
        with pytest.raises(ValueError):
            store.load_state({"w": np.zeros((3, 2))})


class TestAdam:
    def test_matches_reference_implementation(self):
        """Hand-rolled Adam (Kingma-Ba with bias correction) over 5 steps."""
        w0 = np.array([1.0, -2.0, 0.5])
        store = nn.ParamStore()
        store.add("w", w0.copy())
        st = optim.AdamState(lr=0.1)

        m = np.zeros(3)
        v = np.zeros(3)
        ref = w0.copy()
        for t in range(1, 6):
            g = 2.0 * ref  # loss = sum(w^2) on the reference track
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            ref = ref - 0.1 * mh / (np.sqrt(vh) + 1e-8)

            store.zero_grad()
            loss = graph.nsum(store["w"] * store["w"])
            graph.backward(loss)
            optim.adam_step(store, st)
        assert np.allclose(store["w"].value, ref, rtol=0, atol=1e-12)

    def test_parameter_groups_use_their_own_lr(self):
        store = nn.ParamStore()
        store.add("a", np.array([1.0]))
        store.add("b", np.array([1.0]))
        fast, slow = optim.AdamState(lr=0.1), optim.AdamState(lr=0.001)
        for _ in range(3):
            store.zero_grad()
            graph.backward(graph.nsum(store["a"] * store["a"] + store["b"] * store["b"]))
            optim.adam_step(store, fast, ["a"])
            optim.adam_step(store, slow, ["b"])
        assert abs(1.0 - store["a"].value[0]) > abs(1.0 - store["b"].value[0]) * 10

    def test_unused_param_with_no_grad_stays_put_on_fresh_state(self):
        store = nn.ParamStore()
        store.add("used", np.array([1.0]))
        store.add("idle", np.array([1.0]))
        st = optim.AdamState(lr=0.1)
        store.zero_grad()
        graph.backward(graph.nsum(store["used"] * store["used"]))
        optim.adam_step(store, st)
        assert store["idle"].value[0] == 1.0
        assert store["used"].value[0] != 1.0


class TestSerialize:
    def test_round_trip_preserves_shapes_and_bits(self, tmp_path):
        rng = np.random.default_rng(9)
        arrays = {
            "scalar": np.array(3.25),
            "vec": rng.normal(size=(7,)),
            "mat": rng.normal(size=(3, 4)),
            "deep/nested/name": rng.normal(size=(2, 2, 2)),
        }
        p = tmp_path / "x.ckpt"
        serialize.write_checkpoint(p, arrays)
        back = serialize.read_checkpoint(p)
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(back[k], arrays[k])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            serialize.read_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "t.ckpt"
        serialize.write_checkpoint(p, {"w": np.ones(4)})
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            serialize.read_checkpoint(p)
