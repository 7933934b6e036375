import dataclasses
import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from core import numcore as nc
from core.errors import ContractViolation, IngestionError
from core.model import (
    PARAM_NAMES,
    classify,
    dropout_mask,
    entropy_reg,
    f_imp_forward,
    forward,
    init_params,
    l1_reg,
    load_model,
    loss_and_grads,
    param_group,
    predicted_scores,
    save_model,
    scanner,
)
from core.pooling import FeatureSequence
from core.train import score
from models.config_models import HyperParams, ModelDims

GRAD_TOLERANCE = 1e-4


def _with_random_biases(params, seed=0):
    rng = np.random.default_rng(seed)
    arrays = params.arrays()
    arrays.update({name: rng.normal(0.0, 0.1, size=v.shape) for name, v in arrays.items() if ".b" in name})
    return params.with_arrays(arrays)


def _gradcheck(seq, params):
    def loss_fn(tape, leaves):
        return forward(seq, params, tape, weights=leaves).loss

    return nc.finite_diff_check(loss_fn, params.arrays())


@pytest.mark.parametrize("imp_input", ["residual", "concat"])
@pytest.mark.parametrize("reg_kind", ["entropy", "l1"])
def test_adascan_loss_gradients(small_seq, imp_input, reg_kind):
    hyper = HyperParams(hidden=(6, 4), imp_input=imp_input, reg_kind=reg_kind, **{"lambda": 0.7})
    params = _with_random_biases(init_params(ModelDims(D=8, C=3, h1=6, h2=4), seed=4, hyper=hyper))
    assert _gradcheck(small_seq, params) < GRAD_TOLERANCE


@pytest.mark.parametrize("pooler", ["mean", "max", "mil"])
def test_baseline_loss_gradients(small_seq, small_hyper, pooler):
    params = _with_random_biases(init_params(ModelDims(D=8, C=3, h1=6, h2=4), 4, small_hyper, pooler))
    assert _gradcheck(small_seq, params) < GRAD_TOLERANCE


def test_baselines_leave_importance_weights_untouched(small_seq, small_hyper):
    params = init_params(ModelDims(D=8, C=3, h1=6, h2=4), 4, small_hyper, "mean")
    _, grads = loss_and_grads(small_seq, params)
    for name in PARAM_NAMES:
        if param_group(name) == "pool":
            assert not np.any(grads[name])
    assert np.any(grads["cls.W"])


def test_entropy_regularizer_bounds():
    rng = np.random.default_rng(0)
    tape = nc.Tape()
    for T in (1, 2, 5, 30):
        uniform = entropy_reg(tape.constant(np.full(T, 0.7)))
        assert uniform.item() == pytest.approx(math.log(T), abs=1e-12)
    for _ in range(1000):
        T = int(rng.integers(1, 60))
        value = entropy_reg(tape.constant(rng.uniform(0.01, 1.0, size=T))).item()
        assert -1e-12 <= value <= math.log(T) + 1e-12


def test_l1_regularizer_sums_scores():
    tape = nc.Tape()
    assert l1_reg(tape.constant([1.0, 0.25, 0.5])).item() == pytest.approx(1.75)


def test_regularizer_only_added_for_positive_lambda(small_seq):
    dims = ModelDims(D=8, C=3, h1=6, h2=4)
    free = init_params(dims, 1, HyperParams(hidden=(6, 4), **{"lambda": 0.0}))
    result = forward(small_seq, free, nc.Tape())
    assert result.loss.item() == result.cross_entropy.item()

    weighted = free.with_hyper(HyperParams(hidden=(6, 4), **{"lambda": 2.0}))
    result = forward(small_seq, weighted, nc.Tape())
    predicted = nc.Tape().constant(result.gammas.value[1:])
    expected = result.cross_entropy.item() + 2.0 * entropy_reg(predicted).item()
    assert result.loss.item() == pytest.approx(expected, rel=1e-12)


def test_regularizer_skips_the_first_frame(small_params):
    tape = nc.Tape()
    assert predicted_scores(tape.constant([1.0])) is None
    npt.assert_array_equal(predicted_scores(tape.constant([1.0, 0.2, 0.9])).value, [0.2, 0.9])

    single = FeatureSequence(np.ones((1, 8)), 2)
    result = forward(single, small_params, nc.Tape())
    assert small_params.hyper.lambda_ > 0.0
    assert result.loss.item() == result.cross_entropy.item()


def test_entropy_gradient_ignores_a_uniform_shift():
    rng = np.random.default_rng(6)
    for _ in range(100):
        scores = rng.uniform(0.01, 1.0, size=int(rng.integers(2, 40)))
        _, grads = nc.analytic_gradients(lambda tape, p: entropy_reg(p["g"]), {"g": scores})
        assert abs(grads["g"].sum()) < 1e-12

    # a pinned leading 1 would make lowering every other score reduce the entropy
    _, grads = nc.analytic_gradients(
        lambda tape, p: entropy_reg(nc.concat(tape.constant([1.0]), p["g"])), {"g": np.full(5, 0.5)})
    assert np.all(grads["g"] > 0.0)


@pytest.mark.parametrize("T", [10, 20, 50, 100])
def test_entropy_minimum_among_binary_selections(T):
    tape = nc.Tape()
    values = [entropy_reg(tape.constant([1.0] * k + [0.0] * (T - k))).item() for k in range(1, T + 1)]
    best = 1 + int(np.argmin(values))
    assert abs(best - T / (math.e - 1.0) ** 2) <= 1.0
    assert values[best - 1] < values[0] and values[best - 1] < values[-1]


def test_cross_entropy_matches_probabilities(small_seq, small_params):
    result = forward(small_seq, small_params, nc.Tape())
    probs = result.probs.value
    assert probs.sum() == pytest.approx(1.0)
    assert result.cross_entropy.item() == pytest.approx(-math.log(probs[small_seq.label]))
    assert result.gammas.shape == (small_seq.T,)
    assert result.gammas.value[0] == 1.0
    assert np.all((result.gammas.value > 0) & (result.gammas.value <= 1))


def test_constant_importance_replaces_scores(small_seq, small_params):
    result = forward(small_seq, small_params, nc.Tape(), constant_importance=0.3)
    npt.assert_allclose(result.gammas.value, [1.0] + [0.3] * (small_seq.T - 1))


def test_mil_forward_has_no_importance_scores(small_seq, small_hyper):
    params = init_params(ModelDims(D=8, C=3, h1=6, h2=4), 0, small_hyper, "mil")
    result = forward(small_seq, params, nc.Tape())
    assert result.gammas is None
    assert result.probs.value.sum() == pytest.approx(1.0)


def test_forward_rejects_mismatched_inputs(small_params):
    with pytest.raises(ContractViolation):
        forward(FeatureSequence(np.ones((3, 5)), 0), small_params, nc.Tape())
    with pytest.raises(ContractViolation):
        forward(FeatureSequence(np.ones((3, 8)), 3), small_params, nc.Tape())


def test_dropout_needs_a_generator(small_seq, small_params):
    params = small_params.with_hyper(small_params.hyper.model_copy(update={"dropout_p": 0.5}))
    with pytest.raises(ContractViolation):
        forward(small_seq, params, nc.Tape(), train=True)
    # eval mode ignores dropout entirely
    forward(small_seq, params, nc.Tape(), train=False)


def test_dropout_mask_statistics():
    vec = np.ones(20000)
    out = dropout_mask(vec, 0.3, np.random.default_rng(0), train=True)
    dropped = np.mean(out == 0.0)
    assert abs(dropped - 0.3) < 0.05
    npt.assert_allclose(out[out != 0.0], 1.0 / 0.7)
    npt.assert_array_equal(dropout_mask(vec, 0.3, 0, train=False), vec)
    with pytest.raises(ContractViolation):
        dropout_mask(vec, 1.0, 0, train=True)


def test_glorot_initialization():
    dims = ModelDims(D=64, C=4, h1=64, h2=32)
    params = init_params(dims, seed=7)
    W1, W2 = params.imp.W1, params.imp.W2
    assert W1.shape == (64, 64)
    limit = math.sqrt(6.0 / 128)
    assert np.all(np.abs(W1) <= limit)
    assert np.var(W1) == pytest.approx(2.0 / 128, rel=0.2)
    assert W2.shape == (32, 64)
    for name in ("imp.b1", "imp.b2", "imp.b3", "cls.b"):
        assert not np.any(params.arrays()[name])


def test_initialization_is_seeded():
    dims = ModelDims(D=5, C=2, h1=4, h2=3)
    a, b, c = init_params(dims, 1), init_params(dims, 1), init_params(dims, 2)
    for name in PARAM_NAMES:
        npt.assert_array_equal(a.arrays()[name], b.arrays()[name])
    assert not np.array_equal(a.arrays()["imp.W1"], c.arrays()["imp.W1"])


def test_concat_importance_input_doubles_first_layer(small_seq):
    hyper = HyperParams(hidden=(6, 4), imp_input="concat")
    params = init_params(ModelDims(D=8, C=3, h1=6, h2=4), 0, hyper)
    assert params.imp.W1.shape == (6, 16)
    assert forward(small_seq, params, nc.Tape()).gammas.shape == (small_seq.T,)


def test_model_params_shape_check(small_params):
    arrays = small_params.arrays()
    arrays["cls.W"] = np.zeros((2, 8))
    with pytest.raises(ContractViolation):
        small_params.with_arrays(arrays)


def test_model_round_trips_exactly(tmp_path, small_params):
    params = _with_random_biases(small_params, seed=9)
    path = save_model(params, tmp_path / "model.json")
    loaded = load_model(path)
    assert loaded.pooler == params.pooler
    assert loaded.dims == params.dims
    assert loaded.hyper == params.hyper
    for name in PARAM_NAMES:
        npt.assert_array_equal(loaded.arrays()[name], params.arrays()[name])


def test_saved_model_is_readable_json(tmp_path, small_params):
    doc = json.loads(save_model(small_params, tmp_path / "m.json").read_text())
    assert doc["version"] == "adascan-model/1"
    assert doc["hyper"]["lambda"] == 1.0
    assert set(doc["weights"]) == set(PARAM_NAMES)


def test_load_model_rejects_malformed_documents(tmp_path, small_params):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(IngestionError):
        load_model(broken)

    doc = json.loads(save_model(small_params, tmp_path / "m.json").read_text())
    del doc["weights"]["cls.b"]
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps(doc))
    with pytest.raises(IngestionError):
        load_model(partial)

    doc["version"] = "adascan-model/0"
    partial.write_text(json.dumps(doc))
    with pytest.raises(IngestionError):
        load_model(partial)


def test_streaming_scanner_agrees_with_whole_sequence(small_seq, small_params):
    scan = scanner(small_params)
    steps = [scan.push(row) for row in small_seq.frames]
    whole = score(small_seq, small_params)
    npt.assert_allclose([s.gamma for s in steps], whole.gammas, rtol=1e-12)
    npt.assert_allclose(steps[-1].probs, whole.probs, rtol=1e-12)


def test_scanner_requires_adascan(small_hyper):
    params = init_params(ModelDims(D=8, C=3, h1=6, h2=4), 0, small_hyper, "max")
    with pytest.raises(ContractViolation):
        scanner(params)


def _constant_weights(tape, params):
    return {name: tape.constant(value) for name, value in params.arrays().items()}


def test_zero_classifier_gives_uniform_probabilities(small_params):
    arrays = small_params.arrays()
    arrays["cls.W"] = np.zeros_like(arrays["cls.W"])
    arrays["cls.b"] = np.zeros_like(arrays["cls.b"])
    tape = nc.Tape()
    weights = _constant_weights(tape, small_params.with_arrays(arrays))
    _, probs = classify(tape.constant(np.random.default_rng(0).normal(size=8)), weights)
    npt.assert_allclose(probs.value, np.full(3, 1.0 / 3.0), rtol=1e-15)


def test_classification_ignores_the_scale_of_psi(small_params):
    params = _with_random_biases(small_params, seed=2)
    rng = np.random.default_rng(8)
    tape = nc.Tape()
    weights = _constant_weights(tape, params)
    for _ in range(50):
        psi = rng.normal(size=8)
        reference = classify(tape.constant(psi), weights)[1].value
        for c in (0.1, 1.0, 10.0):
            probs = classify(tape.constant(c * psi), weights)[1].value
            npt.assert_allclose(probs, reference, rtol=1e-12)
            assert int(np.argmax(probs)) == int(np.argmax(reference))


@pytest.mark.parametrize("D", [4, 16, 64])
def test_importance_stays_inside_the_open_interval(D):
    rng = np.random.default_rng(D)
    for seed in range(3):
        params = init_params(ModelDims(D=D, C=4, h1=64, h2=32), seed, HyperParams(hidden=(64, 32)))
        tape = nc.Tape()
        weights = _constant_weights(tape, params)
        gammas = []
        for _ in range(1000 // 3):
            residual = rng.uniform(-10.0, 10.0, size=D)
            gammas.append(f_imp_forward(tape.constant(residual), weights).item())
        gammas = np.array(gammas)
        assert np.all((gammas > 0.0) & (gammas < 1.0))
        # still far from the flat tails of the sigmoid
        assert np.all(gammas * (1.0 - gammas) > 1e-4)


def test_unit_importance_without_regularizer_is_mean_pooling(rng):
    hyper = HyperParams(hidden=(6, 4), **{"lambda": 0.0})
    params = _with_random_biases(init_params(ModelDims(D=8, C=3, h1=6, h2=4), 5, hyper), seed=1)
    mean_params = dataclasses.replace(params, pooler="mean")
    for _ in range(20):
        seq = FeatureSequence(rng.normal(size=(int(rng.integers(1, 30)), 8)), int(rng.integers(0, 3)))
        loss = forward(seq, params, nc.Tape(), constant_importance=1.0).loss
        expected = forward(seq, mean_params, nc.Tape()).cross_entropy.item()
        assert abs(loss.item() - expected) < 1e-12
