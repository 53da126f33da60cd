import warnings
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spidernet import architectures as A
from spidernet.architectures import Network, NetworkSpec, count_connections, shape_trace
from spidernet.engine import ShapeError


def brute_skip_count(n):
    """Enumerate the fully connected DAG on blocks 1..n and drop the n-1 chain edges."""
    edges = [(i, j) for j in range(1, n + 1) for i in range(1, j)]
    return sum(1 for i, j in edges if j != i + 1)


class TestSpiderNetTopology:
    def test_six_blocks_has_ten_skips(self):
        assert count_connections(A.build_spidernet(6))[1] == 10

    def test_eight_blocks_has_twenty_one_skips(self):
        assert count_connections(A.build_spidernet(8, input_length=256))[1] == 21

    @pytest.mark.parametrize("n", range(2, 11))
    def test_skip_formula(self, n):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = A.build_spidernet(n, input_length=128)
        assert count_connections(spec)[1] == comb(n, 2) - (n - 1) == brute_skip_count(n)
        assert A.spidernet_skip_count(n) == n * (n - 1) // 2 - (n - 1)

    def test_edge_structure(self):
        spec = A.build_spidernet(6)
        input_edges = [e for e in spec.edges if e[0] == A.INPUT]
        assert input_edges == [(0, 1)]
        for j in range(2, 7):
            for i in range(1, j):
                assert (i, j) in spec.edges
        assert all(s < d for s, d in spec.edges)

    def test_pool_counts_and_gap(self):
        spec = A.build_spidernet(6)
        assert [b.n_pool for b in spec.blocks] == [5, 4, 3, 2, 1, 1]
        assert [b.has_gap for b in spec.blocks] == [False] * 5 + [True]

    def test_dropout_schedule_values(self):
        rates = [b.input_dropout for b in A.build_spidernet(6).blocks]
        assert rates[3] == 0.256
        assert rates[4] == 0.625
        assert rates[:3] == [0.0, 0.0, 0.0] and rates[5] == 0.0

    def test_dropout_schedule_variants(self):
        assert A.dropout_schedule(6, "zero") == (0.0,) * 6
        assert A.dropout_schedule(6, 0.25) == (0.25,) * 6
        assert A.dropout_schedule(10, "exp")[8] == 0.9  # 0.001 * 9**4 is capped
        with pytest.raises(ValueError):
            A.dropout_schedule(3, [0.1, 0.2])

    def test_too_few_blocks(self):
        with pytest.raises(ValueError):
            A.build_spidernet(1)

    def test_short_input_warns(self):
        with pytest.warns(UserWarning):
            A.build_spidernet(8, input_length=64)

    def test_skip_ablation_changes_block_input(self):
        spec = A.build_spidernet(6)
        base = shape_trace(spec)
        for edge in spec.edges:
            if edge[1] == edge[0] + 1:
                continue
            ablated = A.with_edges(spec, [e for e in spec.edges if e != edge])
            trace = shape_trace(ablated)
            assert trace[edge[1]][0] != base[edge[1]][0]

    def test_skip_ablation_keeps_conv_parameter_count(self):
        # each block convolves its concatenation as one channel, so input width is not a weight dimension
        spec = A.build_spidernet(6)
        ablated = A.with_edges(spec, [e for e in spec.edges if e != (1, 6)])
        assert Network(spec).n_params == Network(ablated).n_params


class TestBaselines:
    def test_cnn8_has_no_skips(self):
        spec = A.build_cnn1d(8)
        assert count_connections(spec) == (9, 0)
        assert spec.edges == tuple((i, i + 1) for i in range(9))

    def test_cnn_depths(self):
        for n in (3, 6, 8):
            A.build_cnn1d(n)
        with pytest.raises(ValueError):
            A.build_cnn1d(5)

    def test_cnn3_shape_oracle(self):
        # conv k=3 valid then pool 2/2, three times from L=128: 126->63, 61->30, 28->14
        trace = shape_trace(A.build_cnn1d(3, filters=10, kernel=3, input_length=128))
        assert [t[1] for t in trace[1:4]] == [(10, 63), (10, 30), (10, 14)]
        assert trace[-1] == ((140,), (2,))

    def test_densenet_private_settings(self):
        spec = A.build_densenet1d(block_sizes=(4, 4), growth_k=5, initial_filters=5, input_length=163)
        trace = shape_trace(spec)
        assert count_connections(spec)[1] == 0
        # stem 5 ch; block adds 4*5 -> 25; transition halves to 12; block adds 20 -> 32
        assert [t[1][0] for t in trace[1:-1]] == [5, 25, 12, 32]
        Network(spec).forward(np.zeros((2, 163)))

    def test_densenet_growth_rule(self):
        spec = A.build_densenet1d(block_sizes=(3, 2), growth_k=4, initial_filters=6, theta=1.0, input_length=100)
        trace = shape_trace(spec)
        assert trace[2][1][0] == 6 + 4 * 3
        assert trace[3][1][0] == trace[2][1][0]  # theta=1 keeps channels
        assert trace[4][1][0] == trace[3][1][0] + 4 * 2

    @pytest.mark.parametrize("theta", [0.0, -0.5, 1.5])
    def test_densenet_theta_bounds(self, theta):
        with pytest.raises(ValueError):
            A.build_densenet1d(theta=theta)

    def test_fdensenet_topology(self):
        spec = A.build_fdensenet(3)
        assert count_connections(spec) == (5, 2)
        assert [b.n_convs for b in spec.blocks] == [3, 3]
        assert spec.blocks[1].input_dropout > 0 and spec.head.input_dropout > 0
        trace = shape_trace(spec)
        assert all(min(s) >= 1 for t in trace for s in t)

    def test_fdensenet_depths(self):
        A.build_fdensenet(4)
        with pytest.raises(ValueError):
            A.build_fdensenet(5)

    def test_build_dispatch(self):
        assert A.build("spidernet").arch_kind == "spidernet"
        assert A.build("cnn").arch_kind == "cnn1d"
        with pytest.raises(ValueError):
            A.build("resnet")


ALL_SPECS = {
    "spidernet6": lambda: A.build_spidernet(6, input_length=40),
    "spidernet3": lambda: A.build_spidernet(3, filters=4, hidden=8, input_length=16),
    "cnn3": lambda: A.build_cnn1d(3, filters=4, hidden=8, input_length=40),
    "densenet": lambda: A.build_densenet1d(block_sizes=(2, 2), growth_k=3, hidden=8, input_length=40),
    "fdensenet": lambda: A.build_fdensenet(3, filters=4, kernel=3, hidden=8, input_length=40),
}


@pytest.mark.parametrize("name", sorted(ALL_SPECS))
class TestExecution:
    def test_trace_matches_forward(self, name):
        spec = ALL_SPECS[name]()
        net = Network(spec, seed=1)
        net.forward(np.random.default_rng(0).standard_normal((3, spec.input_length)))
        assert net.last_shapes == [(tuple(a), tuple(b)) for a, b in shape_trace(spec)]

    def test_rows_sum_to_one(self, name):
        spec = ALL_SPECS[name]()
        net = Network(spec, seed=1)
        p = A.forward(net, np.random.default_rng(0).standard_normal((5, 1, spec.input_length)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_input_gives_even_odds(self, name):
        spec = ALL_SPECS[name]()
        p = A.forward(Network(spec, seed=3), np.zeros((4, 1, spec.input_length)))
        np.testing.assert_allclose(p, 0.5, atol=1e-12)

    def test_recompute_is_bitwise_identical(self, name):
        spec = ALL_SPECS[name]()
        net = Network(spec, seed=1)
        x = np.random.default_rng(0).standard_normal((4, spec.input_length))
        assert net.forward(x).tobytes() == net.forward(x).tobytes()

    def test_row_permutation_equivariance(self, name):
        spec = ALL_SPECS[name]()
        net = Network(spec, seed=1)
        x = np.random.default_rng(0).standard_normal((6, spec.input_length))
        perm = np.random.default_rng(1).permutation(6)
        np.testing.assert_allclose(net.forward(x)[perm], net.forward(x[perm]), atol=1e-12)

    def test_network_gradient(self, name):
        spec = ALL_SPECS[name]()
        net = Network(spec, seed=2)
        rng = np.random.default_rng(4)
        for p in net.params:
            if p.decay_group == "bias":
                p.value[...] = rng.normal(0, 0.3, p.value.shape)
        x = rng.standard_normal((3, spec.input_length))
        r = rng.standard_normal((3, 2))
        f = lambda: float(np.sum(net.forward(x) * r))
        net.zero_grad()
        net.forward(x)
        gx = net.backward(r)[:, 0, :]
        probe = [(x, gx)] + [(p.value, p.grad.copy()) for p in net.params[:4]]
        h = 1e-5
        for arr, analytic in probe:
            flat, g = arr.reshape(-1), analytic.reshape(-1)
            for i in rng.choice(flat.size, size=min(flat.size, 15), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8) < 1e-4 or abs(num - g[i]) < 1e-9

    def test_length_mismatch(self, name):
        spec = ALL_SPECS[name]()
        with pytest.raises(ShapeError):
            Network(spec).forward(np.zeros((2, spec.input_length + 1)))

    def test_spec_json_roundtrip(self, name):
        spec = ALL_SPECS[name]()
        assert NetworkSpec.from_json(spec.to_json()) == spec


def test_checkpoint_roundtrip(tmp_path):
    spec = A.build_spidernet(3, filters=4, hidden=8, input_length=16)
    net = Network(spec, seed=5)
    bn = net.batchnorms()[0]
    bn.running_mean[...] = 0.7
    path = A.save_checkpoint(tmp_path / "c.npz", net, {"note": "x"})
    loaded, extra = A.load_checkpoint(path)
    x = np.random.default_rng(0).standard_normal((3, 16))
    assert extra == {"note": "x"}
    assert loaded.forward(x).tobytes() == net.forward(x).tobytes()
    np.testing.assert_array_equal(loaded.batchnorms()[0].running_mean, 0.7)


def test_invalid_edges():
    spec = A.build_spidernet(3, input_length=16)
    with pytest.raises(ValueError):
        A.with_edges(spec, list(spec.edges) + [(3, 2)])
    with pytest.raises(ValueError):
        A.with_edges(spec, [e for e in spec.edges if e[1] != 2])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), length=st.integers(8, 200), kernel=st.integers(1, 9))
def test_shapes_stay_positive(n, length, kernel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = A.build_spidernet(n, kernel=kernel, input_length=length)
    for in_shape, out_shape in shape_trace(spec):
        assert min(in_shape) >= 1 and min(out_shape) >= 1


def touched_columns(net):
    """Columns whose large perturbation changes the logits (eval mode)."""
    L = net.spec.input_length
    base = net.forward(np.zeros((1, L)))
    out = []
    for i in range(L):
        x = np.zeros((2, L))
        x[0, i], x[1, i] = 1e3, -1e3
        if not np.allclose(net.forward(x), base, rtol=0, atol=1e-9):
            out.append(i)
    return out


class TestInputCoverage:
    @pytest.mark.parametrize("build,length", [
        (lambda L: A.build_spidernet(6, input_length=L), 23),
        (lambda L: A.build_spidernet(6, input_length=L), 40),
        (lambda L: A.build_spidernet(4, input_length=L, kernel=5), 29),
        (lambda L: A.build_cnn1d(3, input_length=L), 22),
    ])
    def test_perturbation_oracle(self, build, length):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = build(length)
            net = Network(spec, seed=0)
            assert touched_columns(net) == list(range(A.input_coverage(spec)))
            padded = build(length + A.input_padding(spec))
            assert A.input_coverage(padded) >= length

    def test_known_values(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert A.input_coverage(A.build_spidernet(6, input_length=23)) == 18
            assert A.input_padding(A.build_spidernet(6, input_length=23)) == 11
            assert A.input_padding(A.build_spidernet(6, input_length=34)) == 0

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 8), length=st.integers(4, 200), kernel=st.integers(1, 7))
    def test_padding_is_minimal(self, n, length, kernel):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = A.build_spidernet(n, input_length=length, kernel=kernel)
            pad = A.input_padding(spec)
            assert A.input_coverage(spec, length + pad) >= length
            assert pad == 0 or A.input_coverage(spec, length + pad - 1) < length
