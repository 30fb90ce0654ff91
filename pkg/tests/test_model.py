import math

import numpy as np
import pytest

from tempsweep.base import DecoderConfig
from tempsweep.base.exceptions import ConfigError, ModelError, NumericalOverflow, ParamsFormatError
from tempsweep.corpus import BOS, EOS, Sentence
from tempsweep.decoding import sample
from tempsweep.metrics import entropy_rate
from tempsweep.model import (
    ORACLE_HIDDEN_DIM,
    LstmLmParams,
    ModelDims,
    RnnState,
    batch_discriminate,
    conditional_dist,
    disc_loss_and_gradients,
    discriminate,
    entropy,
    forward_step,
    init_params,
    load_params,
    make_oracle,
    params_from_bytes,
    save_params,
    sequence_nll,
    zero_discriminator,
    zero_params,
)
from tempsweep.optim import Adam, clip_by_global_norm, global_norm

from .utils import random_rows, toy_discriminator, toy_model


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestConditionalDist:
    def test_uniform(self):
        assert conditional_dist([0.0, 0.0, 0.0], 1.0) == pytest.approx([1 / 3] * 3, abs=1e-15)

    def test_closed_form(self):
        assert conditional_dist([math.log(2), 0.0], 1.0) == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_argmax_limit(self):
        assert conditional_dist([1.0, 0.9, -3.0], 0.0).tolist() == [1.0, 0.0, 0.0]

    def test_argmax_ties_lowest_id(self):
        assert conditional_dist([0.5, 2.0, 2.0], 0.0).tolist() == [0.0, 1.0, 0.0]

    def test_negative_alpha_failed(self):
        with pytest.raises(ConfigError):
            conditional_dist([0.0, 1.0], -0.1)

    @pytest.mark.parametrize("alpha", [0.05, 0.5, 1.0, 3.0])
    def test_sums_to_one_and_scales(self, alpha):
        logits = np.random.default_rng(0).normal(size=(4, 9)) * 5
        probs = conditional_dist(logits, alpha)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert np.allclose(probs, conditional_dist(logits / alpha, 1.0), atol=1e-12)

    def test_entropy_increases_with_alpha(self):
        logits = np.array([2.0, 1.0, 0.5, -1.0])
        alphas = [0.1, 0.3, 0.7, 1.0, 2.0, 5.0]
        dists = [conditional_dist(logits, alpha) for alpha in alphas]
        entropies = [float(entropy(p)) for p in dists]
        tops = [float(p[0]) for p in dists]
        assert all(a < b for a, b in zip(entropies, entropies[1:]))
        assert all(a > b for a, b in zip(tops, tops[1:]))

    def test_random_logits(self):
        rng = np.random.default_rng(17)
        alphas = [0.1, 0.5, 1.0, 2.0]
        for logits in rng.normal(scale=2.0, size=(1000, 10)):
            entropies = [float(entropy(conditional_dist(logits, alpha))) for alpha in alphas]
            assert all(a < b for a, b in zip(entropies, entropies[1:]))
            for alpha in alphas:
                assert np.allclose(
                    conditional_dist(logits, alpha), conditional_dist(logits / alpha, 1.0), atol=1e-12
                )


class TestParams:
    def test_init_deterministic(self):
        dims = ModelDims(8, 4, 6, 2)
        assert init_params(dims, 3).equals(init_params(dims, 3))
        assert not init_params(dims, 3).equals(init_params(dims, 4))

    def test_init_statistics(self):
        params = init_params(ModelDims(100, 32, 32, 1), 0, scale=1.0)
        values = np.concatenate([block.ravel() for block in params.weights.values()])
        assert values.size >= 10**4
        assert abs(values.mean()) < 0.05
        assert abs(values.std() - 1.0) < 0.05

    def test_zero_scale_failed(self):
        with pytest.raises(ConfigError):
            init_params(ModelDims(8), 0, scale=0.0)

    @pytest.mark.parametrize("dims", [dict(vocab_size=4), dict(vocab_size=8, num_layers=3)])
    def test_invalid_dims_failed(self, dims):
        with pytest.raises(ConfigError):
            ModelDims(**dims)

    def test_projection_only_when_dims_differ(self):
        assert "proj" not in init_params(ModelDims(8, 4, 4), 0).weights
        assert init_params(ModelDims(8, 4, 6), 0)["proj"].shape == (4, 6)

    def test_shape_mismatch_failed(self):
        params = init_params(ModelDims(8, 4, 4), 0)
        weights = dict(params.weights, W=np.zeros((7, 4)))
        with pytest.raises(ModelError):
            LstmLmParams(params.dims, weights)

    def test_oracle(self):
        oracle = make_oracle(20, 7)
        assert oracle.dims.hidden_dim == ORACLE_HIDDEN_DIM == 32
        assert oracle.is_oracle
        assert oracle.equals(make_oracle(20, 7))

    def test_oracle_entropy_below_uniform(self):
        mean, _ = entropy_rate(make_oracle(20, 7), 200, seed=0)
        assert mean < math.log(20)


class TestForwardStep:
    def test_zero_params_give_zero_logits(self):
        params = zero_params(ModelDims(7, 3, 5, 2))
        state = RnnState.zeros(params.dims, 2)
        for token in (BOS, 4, 5):
            state, logits = forward_step(params, state, [token, token])
            assert np.array_equal(logits, np.zeros((2, 7)))

    def test_pure(self):
        params = toy_model()
        state = RnnState.zeros(params.dims, 1)
        first = forward_step(params, state, [4])
        second = forward_step(params, state, [4])
        assert np.array_equal(first[1], second[1])
        assert np.array_equal(first[0].h, second[0].h)

    def test_single_token_gives_vector(self):
        params = toy_model()
        _, logits = forward_step(params, RnnState.zeros(params.dims, 1), BOS)
        assert logits.shape == (6,)

    def test_hand_computed_step(self):
        dims = ModelDims(5, 2, 2, 1)
        W = np.array([[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6], [0.7, -0.8], [0.9, 0.05]])
        U = np.arange(32, dtype=np.float64).reshape(8, 4) / 40.0 - 0.4
        b = np.linspace(-0.3, 0.4, 8)
        params = LstmLmParams(dims, {"W": W, "layers.0.U": U, "layers.0.b": b})
        h0, c0 = np.array([0.2, -0.1]), np.array([0.05, 0.3])
        state = RnnState(h0.reshape(1, 1, 2), c0.reshape(1, 1, 2))

        new_state, logits = forward_step(params, state, [3])

        z = U @ np.concatenate([W[3], h0]) + b
        i, f, g, o = _sigmoid(z[0:2]), _sigmoid(z[2:4]), np.tanh(z[4:6]), _sigmoid(z[6:8])
        c1 = f * c0 + i * g
        h1 = o * np.tanh(c1)
        assert np.allclose(new_state.c[0, 0], c1, rtol=0, atol=1e-12)
        assert np.allclose(new_state.h[0, 0], h1, rtol=0, atol=1e-12)
        assert np.allclose(logits[0], W @ h1, rtol=0, atol=1e-12)

    def test_overflow_failed(self):
        dims = ModelDims(5, 4, 4, 1)
        weights = {
            "W": np.full((5, 4), 1e308),
            "layers.0.U": np.zeros((16, 8)),
            "layers.0.b": np.full(16, 10.0),
        }
        params = LstmLmParams(dims, weights)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalOverflow) as exc:
                forward_step(params, RnnState.zeros(dims, 1), [4], step=3)
        assert exc.value.step == 3

    def test_token_out_of_range_failed(self):
        params = toy_model()
        with pytest.raises(ModelError):
            forward_step(params, RnnState.zeros(params.dims, 1), [6])


class TestSequenceNll:
    def test_uniform_model(self):
        params = zero_params(ModelDims(9, 3, 3))
        assert sequence_nll(params, Sentence((4, 5, 6, EOS))) == pytest.approx(math.log(9), rel=1e-12)

    @pytest.mark.parametrize("num_layers", [1, 2])
    def test_matches_step_by_step(self, num_layers):
        params = toy_model(vocab_size=8, embed_dim=3, hidden_dim=5, num_layers=num_layers)
        sentence = Sentence((4, 7, 5, EOS))
        state = RnnState.zeros(params.dims, 1)
        total, previous = 0.0, BOS
        for token in sentence.ids:
            state, logits = forward_step(params, state, [previous])
            total -= math.log(conditional_dist(logits[0], 1.0)[token])
            previous = token
        assert sequence_nll(params, sentence) == pytest.approx(total / 4, rel=1e-10)

    def test_temperature_changes_nll(self):
        params = toy_model()
        sentence = Sentence((4, 5, EOS))
        assert sequence_nll(params, sentence, 0.5) != sequence_nll(params, sentence, 1.0)

    def test_zero_alpha_failed(self):
        with pytest.raises(ConfigError):
            sequence_nll(toy_model(), Sentence((4, EOS)), 0.0)

    def test_colder_samples_are_more_likely(self):
        params = toy_model(vocab_size=12, scale=1.0)
        means = [
            sample(params, DecoderConfig(alpha=alpha, max_len=6, fixed_length=True, seed=3), 2000).mean_loglik
            for alpha in (1.0, 0.5, 0.25)
        ]
        assert means[0] < means[1] < means[2]

    def test_greedy_beats_random_sentences(self):
        params = toy_model(vocab_size=12, scale=1.0)
        greedy = sample(params, DecoderConfig("greedy", max_len=8), 1).sentences[0]
        random_nll = np.mean(
            [sequence_nll(params, Sentence(row + (EOS,))) for row in random_rows(200, 12, 8, seed=4)]
        )
        assert sequence_nll(params, greedy) <= random_nll


class TestDiscriminator:
    def test_zero_discriminator_is_undecided(self):
        disc = zero_discriminator(ModelDims(8, 3, 3))
        assert discriminate(disc, Sentence((4, 5, EOS))) == 0.5
        assert discriminate(disc, Sentence((7, EOS))) == 0.5

    def test_output_in_open_interval(self):
        disc = toy_discriminator(scale=2.0)
        scores = batch_discriminate(disc, [Sentence(row + (EOS,)) for row in random_rows(20, 6, 5, 0)])
        assert np.all((scores > 0) & (scores < 1))

    def test_learns_separable_data(self):
        real = [Sentence(row + (EOS,)) for row in random_rows(20, 6, 4, 1)]
        fake = [Sentence(tuple(t + 2 for t in row) + (EOS,)) for row in random_rows(20, 6, 4, 2)]
        disc = toy_discriminator(vocab_size=8, scale=0.1)
        optimizer = Adam(0.05)
        labels = [1.0] * len(real) + [0.0] * len(fake)
        for _ in range(150):
            _, grads = disc_loss_and_gradients(disc, real + fake, labels)
            optimizer.step(disc.weights, grads)
        real_scores = batch_discriminate(disc, real)
        fake_scores = batch_discriminate(disc, fake)
        pairs = [(r > f) + 0.5 * (r == f) for r in real_scores for f in fake_scores]
        assert sum(pairs) / len(pairs) > 0.9


class TestParamsFile:
    @pytest.fixture(params=["generator", "discriminator"])
    def params(self, request):
        if request.param == "generator":
            return toy_model(vocab_size=8, embed_dim=3, hidden_dim=4, num_layers=2)
        return toy_discriminator(vocab_size=8)

    def test_round_trip_is_bit_exact(self, params, tmp_path):
        path = save_params(params, tmp_path / "model.params")
        loaded = load_params(path)
        assert loaded.equals(params)
        assert loaded.to_bytes() == path.read_bytes()
        assert loaded.lineage == params.lineage

    def test_nll_unchanged_after_round_trip(self, tmp_path):
        params = toy_model()
        loaded = load_params(save_params(params, tmp_path / "g.params"))
        sentence = Sentence((5, 4, EOS))
        assert sequence_nll(loaded, sentence) == sequence_nll(params, sentence)

    def test_truncated_failed(self, params):
        data = params.to_bytes()
        with pytest.raises(ParamsFormatError):
            params_from_bytes(data[:-8])

    def test_version_mismatch_failed(self, params):
        data = params.to_bytes().replace(b"TEMPSWEEP-PARAMS 1", b"TEMPSWEEP-PARAMS 9", 1)
        with pytest.raises(ParamsFormatError):
            params_from_bytes(data)

    def test_checksum_failed(self, params):
        data = bytearray(params.to_bytes())
        data[-1] ^= 0xFF
        with pytest.raises(ParamsFormatError):
            params_from_bytes(bytes(data))

    def test_not_a_params_file_failed(self, tmp_path):
        path = tmp_path / "junk.params"
        path.write_bytes(b"hello\nworld")
        with pytest.raises(ParamsFormatError):
            load_params(path)


class TestOptim:
    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = clip_by_global_norm(grads, 1.0)
        assert norm == 5.0
        assert global_norm(clipped) == pytest.approx(1.0)
        assert clipped["a"][0] / clipped["b"][0] == pytest.approx(0.75)

    def test_zero_learning_rate_is_a_no_op(self):
        weights = {"a": np.array([1.0, 2.0])}
        Adam(0.0).step(weights, {"a": np.array([5.0, -5.0])})
        assert weights["a"].tolist() == [1.0, 2.0]

    def test_first_adam_step_moves_by_learning_rate(self):
        weights = {"a": np.array([1.0, 2.0])}
        Adam(0.1).step(weights, {"a": np.array([5.0, -0.5])})
        assert weights["a"] == pytest.approx([0.9, 2.1], abs=1e-6)
