import numpy as np
import pytest

from bitcn import tensor as tn
from bitcn.checkpoint import (check_compatible, load_checkpoint, read_checkpoint, restore_rng,
                              save_checkpoint)
from bitcn.distributions import t3_nll
from bitcn.errors import CheckpointError, ShapeError
from bitcn.gradcheck import check_gradients
from bitcn.model import (BiTCN, HyperParams, InputDims, TemporalBlock, TemporalStack, conv_kernel_parameters,
                         count_parameters, largest_divisor_at_most, receptive_field)
from bitcn.tensor import Tensor, no_grad


def tiny_hp(**kw):
    base = dict(d_hidden=4, n_layers=2, kernel_size=3, dropout=0.0, groups=2, t0=6, horizon=3, t_cov=12)
    base.update(kw)
    return HyperParams(**base)


def inputs(hp, dims, b=2, seed=0, T=None):
    rng = np.random.default_rng(seed)
    T = hp.window if T is None else T
    y = rng.normal(size=(T, b, 1))
    cov = rng.normal(size=(hp.t_cov, b, dims.d_cov))
    cat = np.stack([rng.integers(0, c, size=(hp.t_cov, b)) for c in dims.cardinalities], axis=-1)
    return y, cov, cat.reshape(hp.t_cov, b, len(dims.cardinalities))


@pytest.fixture
def dims():
    return InputDims(d_cov=3, cardinalities=(5,), embedding_dims=(2,))


def stack_output(stack, x):
    with no_grad():
        return stack(Tensor(x)).data


class TestHyperParams:
    def test_defaults(self):
        hp = HyperParams()
        assert (hp.d_hidden, hp.n_layers, hp.kernel_size, hp.dropout) == (12, 5, 9, 0.1)
        assert hp.forward_layers == 6 and hp.window == 192

    def test_groups_fall_back_to_divisor(self):
        assert HyperParams(d_hidden=10, groups=4).groups == 2
        assert largest_divisor_at_most(12, 5) == 4

    @pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(t_cov=100), dict(distribution="cauchy"),
                                    dict(join="mul"), dict(epsilon=0.0), dict(d_hidden=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            HyperParams(**kw)

    def test_dict_round_trip(self):
        hp = HyperParams(d_hidden=8, forward_module=False)
        assert HyperParams.from_dict(hp.to_dict()) == hp

    @pytest.mark.parametrize("k,n,rf", [(9, 5, 249), (3, 8, 511), (9, 6, 505), (2, 1, 2)])
    def test_receptive_field_formula(self, k, n, rf):
        assert receptive_field(k, n) == rf


class TestTemporalBlock:
    def test_zero_dense_gives_identity_and_zero_skip(self):
        block = TemporalBlock(4, 3, 2, "backward", 1, 0.0, np.random.default_rng(0))
        block.dense.g.data[:] = 0.0
        x = np.random.default_rng(1).normal(size=(7, 2, 4))
        with no_grad():
            h, o = block(Tensor(x))
        assert np.array_equal(h.data, x)
        assert np.array_equal(o.data, np.zeros((7, 2, 4)))

    def test_shapes_and_dilation(self):
        block = TemporalBlock(6, 3, 3, "forward", 3, 0.1, np.random.default_rng(0))
        assert block.conv.spec.dilation == 4 and block.conv.spec.out_channels == 24
        h, o = block(Tensor(np.ones((5, 2, 6))))
        assert h.shape == o.shape == (5, 2, 6)

    def test_rejects_wrong_width(self):
        block = TemporalBlock(4, 3, 1, "backward", 1, 0.0, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            block(Tensor(np.ones((5, 2, 3))))


class TestStacks:
    @pytest.mark.parametrize("k,n", [(9, 5), (3, 8)])
    def test_receptive_field_by_perturbation(self, k, n):
        rf = receptive_field(k, n)
        stack = TemporalStack.build(n, 2, k, "backward", 1, 0.0, np.random.default_rng(k))
        T = rf + 20
        x = np.random.default_rng(0).normal(size=(T, 1, 2))
        base = stack_output(stack, x)[-1]
        inside, outside = x.copy(), x.copy()
        inside[T - rf] += 1.0
        outside[T - rf - 1] += 1.0
        assert not np.array_equal(stack_output(stack, inside)[-1], base)
        assert np.array_equal(stack_output(stack, outside)[-1], base)

    @pytest.mark.parametrize("direction", ["backward", "forward"])
    def test_direction_isolation(self, direction):
        stack = TemporalStack.build(3, 4, 3, direction, 2 if direction == "forward" else 1, 0.0,
                                    np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 2, 4))
        base = stack_output(stack, x)
        for p in rng.integers(0, 30, size=10):
            y = x.copy()
            y[p] += rng.normal(size=(2, 4))
            out = stack_output(stack, y)
            untouched = slice(0, p) if direction == "backward" else slice(p + 1, None)
            assert np.array_equal(out[untouched], base[untouched])

    def test_grouped_forward_kernel_parameters(self):
        rng = np.random.default_rng(0)
        full = TemporalStack.build(6, 12, 9, "forward", 1, 0.0, rng)
        grouped = TemporalStack.build(6, 12, 9, "forward", 4, 0.0, rng)
        assert conv_kernel_parameters(grouped) * 4 == conv_kernel_parameters(full)


class TestBiTCN:
    def test_output_shapes_and_positivity(self, dims):
        hp = tiny_hp()
        model = BiTCN(hp, dims, np.random.default_rng(0))
        mu, sigma = model(*inputs(hp, dims))
        assert mu.shape == sigma.shape == (hp.window, 2, 1)
        assert np.all(sigma.data >= hp.epsilon) and np.all(mu.data >= 0)

    @pytest.mark.parametrize("T,T_c,b", [(9, 9, 1), (9, 12, 3), (4, 12, 2), (1, 20, 5)])
    def test_shape_grid(self, dims, T, T_c, b):
        hp = tiny_hp(t_cov=max(T_c, 9))
        model = BiTCN(hp, dims, np.random.default_rng(0))
        rng = np.random.default_rng(0)
        mu, sigma = model(rng.normal(size=(T, b, 1)), rng.normal(size=(T_c, b, 3)), np.zeros((T_c, b, 1), int))
        assert mu.shape == sigma.shape == (T, b, 1)

    def test_shape_errors(self, dims):
        hp = tiny_hp()
        model = BiTCN(hp, dims)
        y, cov, cat = inputs(hp, dims)
        with pytest.raises(ShapeError):
            model(y[:, :, :0], cov, cat)
        with pytest.raises(ShapeError):
            model(y, cov[:4], cat[:4])
        with pytest.raises(ShapeError):
            model(y, cov[:, :, :2], cat)

    def test_zeroed_body_gives_softplus_of_head_biases(self, dims):
        hp = tiny_hp()
        model = BiTCN(hp, dims, np.random.default_rng(0))
        for name, p in model.named_parameters():
            if name.endswith(".g") or (name.endswith(".b") and not name.startswith("head")):
                p.data[:] = 0.0
        model.head_mu.b.data[:] = 0.3
        model.head_sigma.b.data[:] = -1.2
        mu, sigma = model(*inputs(hp, dims))
        # hand-derived with the same float64 primitives, so equality is exact
        assert np.all(mu.data == np.log1p(np.exp(0.3)))
        assert np.all(sigma.data == np.log1p(np.exp(-1.2)) + hp.epsilon)

    @pytest.mark.parametrize("forward_module", [True, False])
    def test_matches_hand_wired_composition(self, dims, forward_module):
        hp = tiny_hp(forward_module=forward_module)
        model = BiTCN(hp, dims, np.random.default_rng(3))
        y, cov, cat = inputs(hp, dims, seed=4)
        T = hp.window
        emb = tn.embedding(cat[..., 0], model.embeddings[0])
        lag_in = tn.concat_channels(Tensor(y), Tensor(cov[:T]), tn.slice_time(emb, 0, T))
        o = model.backward_stack(tn.affine(lag_in, model.proj_lag.W, model.proj_lag.b))
        if forward_module:
            cov_in = tn.concat_channels(Tensor(cov), emb)
            o_cov = model.forward_stack(tn.affine(cov_in, model.proj_cov.W, model.proj_cov.b))
            o = tn.concat_channels(tn.slice_time(o_cov, 0, T), o)
        mu = tn.softplus(tn.affine(o, model.head_mu.W, model.head_mu.b))
        sigma = tn.softplus(tn.affine(o, model.head_sigma.W, model.head_sigma.b)).data + hp.epsilon
        got_mu, got_sigma = model(y, cov, cat)
        np.testing.assert_array_equal(got_mu.data, mu.data)
        np.testing.assert_array_equal(got_sigma.data, sigma)

    def test_ablated_is_causal_in_covariates(self, dims):
        hp = tiny_hp(forward_module=False)
        model = BiTCN(hp, dims, np.random.default_rng(0))
        y, cov, cat = inputs(hp, dims)
        base = model(y, cov, cat)[0].data
        cov2 = cov.copy()
        cov2[5] += 3.0
        assert np.array_equal(model(y, cov2, cat)[0].data[:5], base[:5])

    def test_full_model_sees_future_covariates(self, dims):
        hp = tiny_hp()
        model = BiTCN(hp, dims, np.random.default_rng(0))
        y, cov, cat = inputs(hp, dims)
        base = model(y, cov, cat)[0].data
        cov2 = cov.copy()
        cov2[5] += 3.0
        assert not np.array_equal(model(y, cov2, cat)[0].data[:5], base[:5])

    def test_prefix_outputs_match_full_window(self, dims):
        hp = tiny_hp()
        model = BiTCN(hp, dims, np.random.default_rng(0))
        y, cov, cat = inputs(hp, dims)
        full_mu, full_sigma = model(y, cov, cat)
        cache = model.encode_covariates(cov, cat)
        mu, sigma = model(y[:5], cov, cat, cache=cache)
        # same values up to BLAS blocking at a different row count
        np.testing.assert_allclose(mu.data, full_mu.data[:5], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(sigma.data, full_sigma.data[:5], rtol=1e-12, atol=1e-15)

    def test_additive_join_and_linear_mu(self, dims):
        hp = tiny_hp(join="add", softplus_mu=False)
        model = BiTCN(hp, dims, np.random.default_rng(0))
        assert model.head_mu.W.shape == (hp.d_hidden, 1)
        mu, _ = model(*inputs(hp, dims))
        assert np.any(mu.data < 0)

    def test_dropout_only_in_training(self, dims):
        hp = tiny_hp(dropout=0.5)
        model = BiTCN(hp, dims, np.random.default_rng(0))
        args = inputs(hp, dims)
        assert np.array_equal(model(*args)[0].data, model(*args)[0].data)
        a = model(*args, training=True, rng=np.random.default_rng(1))[0].data
        assert not np.array_equal(a, model(*args)[0].data)

    @pytest.mark.parametrize("seed", range(3))
    def test_end_to_end_gradients(self, dims, seed):
        hp = tiny_hp(forward_module=seed != 1)
        model = BiTCN(hp, dims, np.random.default_rng(seed))
        y, cov, cat = inputs(hp, dims, b=2, seed=seed)
        target = Tensor(np.abs(np.random.default_rng(seed + 10).normal(size=(hp.horizon, 2, 1))))

        def loss():
            mu, sigma = model(y, cov, cat)
            return t3_nll(target, tn.slice_time(mu, hp.t0, hp.horizon), tn.slice_time(sigma, hp.t0, hp.horizon))

        assert max(check_gradients(loss, model.parameters())) < 1e-4


class TestParameterCounts:
    @pytest.mark.parametrize("d_h,n", [(4, 2), (12, 5), (8, 3)])
    def test_ablation_is_smaller(self, dims, d_h, n):
        full = BiTCN(HyperParams(d_hidden=d_h, n_layers=n), dims)
        ablated = BiTCN(HyperParams(d_hidden=d_h, n_layers=n, forward_module=False), dims)
        assert count_parameters(ablated) < count_parameters(full)

    def test_doubling_hidden_more_than_doubles(self, dims):
        small = count_parameters(BiTCN(HyperParams(d_hidden=12), dims))
        assert count_parameters(BiTCN(HyperParams(d_hidden=24), dims)) > 2 * small

    def test_default_budget_near_49k(self):
        # hourly data with two calendar Fourier pairs and a 20-series id embedding
        model = BiTCN(HyperParams(), InputDims(d_cov=4, cardinalities=(20,)))
        assert 45_000 < count_parameters(model) < 55_000

    def test_state_dict_round_trip(self, dims):
        a, b = BiTCN(tiny_hp(), dims, np.random.default_rng(0)), BiTCN(tiny_hp(), dims, np.random.default_rng(1))
        b.load_state_dict(a.state_dict())
        args = inputs(tiny_hp(), dims)
        assert np.array_equal(a(*args)[0].data, b(*args)[0].data)
        with pytest.raises(KeyError):
            b.load_state_dict({})


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, dims, tmp_path):
        hp = tiny_hp()
        model = BiTCN(hp, dims, np.random.default_rng(0))
        rng = np.random.default_rng(7)
        rng.random(3)
        save_checkpoint(tmp_path / "m.ckpt", model, epoch=4, rng=rng, extra={"seed": 3})
        ckpt = read_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.epoch == 4 and ckpt.extra == {"seed": "3"}
        assert ckpt.model.hp == hp and ckpt.model.dims == dims
        args = inputs(hp, dims)
        assert np.array_equal(ckpt.model(*args)[0].data, model(*args)[0].data)
        assert restore_rng(ckpt.rng_state).random() == rng.random()

    def test_optimizer_state_saved(self, dims, tmp_path):
        from bitcn.training import AdamState

        model = BiTCN(tiny_hp(), dims)
        state = AdamState(step=3, m={"head_mu.b": np.array([0.5])}, v={"head_mu.b": np.array([0.25])})
        save_checkpoint(tmp_path / "m.ckpt", model, optimizer=state)
        ckpt = read_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.optimizer_step == 3
        assert ckpt.optimizer["adam.m.head_mu.b"][0] == 0.5

    def test_same_model_same_bytes(self, dims, tmp_path):
        model = BiTCN(tiny_hp(), dims, np.random.default_rng(0))
        save_checkpoint(tmp_path / "a", model)
        save_checkpoint(tmp_path / "b", model)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
    def test_corruption_detected(self, dims, tmp_path, damage):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, BiTCN(tiny_hp(), dims))
        data = bytearray(path.read_bytes())
        if damage == "flip":
            data[len(data) // 2] ^= 0xFF
        elif damage == "truncate":
            data = data[:-100]
        else:
            data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            read_checkpoint(tmp_path / "nope.ckpt")

    def test_mismatch_names_field(self, dims, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", BiTCN(tiny_hp(), dims))
        with pytest.raises(CheckpointError, match="d_hidden"):
            load_checkpoint(tmp_path / "m.ckpt", tiny_hp(d_hidden=6))
        check_compatible(tiny_hp(), tiny_hp())
