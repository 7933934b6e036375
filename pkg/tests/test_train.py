import numpy as np
import numpy.testing as npt
import pytest

import core.train
from core.data import Dataset, generate_synthetic, random_subsample
from core.errors import ContractViolation, NumericError
from core.model import PARAM_NAMES, init_params
from core.pooling import FeatureSequence
from core.train import (
    AdamState,
    SampleScore,
    adam_step,
    batch_gradient,
    clip_gradients,
    evaluate,
    global_norm,
    group_learning_rates,
    score,
    score_views,
    summarize,
    train,
)
from models.config_models import SYNTHETIC_PRESETS, HyperParams, ModelDims, SynthConfig

TINY = SYNTHETIC_PRESETS["tiny"]


def _tiny_setup(pooler="adascan", **hyper):
    train_set, test_set = generate_synthetic(TINY)
    hyper = HyperParams(hidden=(6, 4), epochs=2, batch_size=8, **hyper)
    dims = ModelDims(D=train_set.D, C=train_set.C, h1=6, h2=4)
    return train_set, test_set, init_params(dims, 0, hyper, pooler)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.0])}
    grads = {"w": np.array([0.5, -3.0, 0.0])}
    updated, state = adam_step(params, grads, AdamState.zeros(params), {"w": 0.1})
    # bias correction makes the first step lr * g / (|g| + eps)
    npt.assert_allclose(updated["w"], [0.9, -1.9, 0.0], atol=1e-7)
    assert state.step == 1


def test_adam_converges_on_a_quadratic():
    target = np.array([1.0, -0.5, 0.25])
    params = {"w": np.zeros(3)}
    state = AdamState.zeros(params)
    for _ in range(200):
        grads = {"w": 2.0 * (params["w"] - target)}
        params, state = adam_step(params, grads, state, {"w": 0.05})
    npt.assert_allclose(params["w"], target, atol=1e-2)


def test_adam_rejects_non_finite_gradients():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericError):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState.zeros(params), {"w": 0.1})


def test_clip_gradients():
    clipped = clip_gradients({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    npt.assert_allclose(np.concatenate([clipped["a"], clipped["b"]]), [0.6, 0.8])
    assert global_norm(clipped) == pytest.approx(1.0)
    small = {"a": np.array([0.3, 0.4])}
    npt.assert_array_equal(clip_gradients(small, 1.0)["a"], small["a"])
    with pytest.raises(ContractViolation):
        clip_gradients(small, 0.0)


def test_group_learning_rates():
    hyper = HyperParams(lr_pool=0.01, lr_classifier=0.2)
    rates = group_learning_rates(hyper, PARAM_NAMES)
    assert rates["imp.W1"] == rates["imp.b3"] == 0.01
    assert rates["cls.W"] == rates["cls.b"] == 0.2


def test_training_is_deterministic():
    train_set, test_set, params = _tiny_setup(dropout_p=0.2, seed=3)
    a, log_a = train(train_set, params, test=test_set)
    b, log_b = train(train_set, params, test=test_set, workers=3)
    for name in PARAM_NAMES:
        npt.assert_array_equal(a.arrays()[name], b.arrays()[name])
    assert [r.model_dump() for r in log_a] == [r.model_dump() for r in log_b]


def test_training_log_covers_every_epoch_and_split():
    train_set, test_set, params = _tiny_setup()
    seen = []
    _, log = train(train_set, params, test=test_set, on_epoch=lambda e, p, rows: seen.append(e))
    assert [(r.epoch, r.split) for r in log] == [
        (0, "train"), (0, "test"), (1, "train"), (1, "test"), (2, "train"), (2, "test")]
    assert seen == [0, 1, 2]


def test_training_changes_both_parameter_groups():
    train_set, _, params = _tiny_setup(lr_pool=0.01, lr_classifier=0.01)
    trained, _ = train(train_set, params)
    for name in ("imp.W1", "cls.W"):
        assert not np.array_equal(trained.arrays()[name], params.arrays()[name])


def test_random_subsample_training_runs():
    train_set, _, params = _tiny_setup()
    trained, log = train(train_set, params, subsample=3)
    assert len(log) == 3
    assert trained.dims == params.dims


def test_subsampled_training_reports_metrics_on_subsampled_views(monkeypatch):
    train_set, test_set, params = _tiny_setup()
    lengths = []

    def recording_score(seq, *args, **kwargs):
        lengths.append(seq.T)
        return score(seq, *args, **kwargs)

    monkeypatch.setattr(core.train, "score", recording_score)
    _, log = train(train_set, params, test=test_set, subsample=3)
    assert len(log) == 6
    assert len(lengths) == 3 * (len(train_set) + len(test_set))
    assert set(lengths) == {3}


def test_train_rejects_empty_dataset(small_params):
    with pytest.raises(ContractViolation):
        train(Dataset([], 3), small_params)


def test_mean_pooler_learns_a_separable_set():
    cfg = SynthConfig(num_classes=4, feat_dim=16, seq_len=5, signal_frames=5, train_count=200,
                      test_count=0, seed=11)
    train_set, _ = generate_synthetic(cfg)
    hyper = HyperParams(hidden=(8, 4), epochs=20, batch_size=8, lr_classifier=0.05)
    params = init_params(ModelDims(D=16, C=4, h1=8, h2=4), 0, hyper, "mean")
    trained, log = train(train_set, params)
    assert log[-1].accuracy >= 0.99
    assert log[-1].mean_loss < log[0].mean_loss


def test_random_labels_give_chance_accuracy():
    rng = np.random.default_rng(0)
    C = 4
    samples = [FeatureSequence(rng.normal(size=(6, 8)), int(rng.integers(C)), f"r{i}") for i in range(400)]
    params = init_params(ModelDims(D=8, C=C, h1=6, h2=4), 1, HyperParams(hidden=(6, 4)))
    metrics = evaluate(Dataset(samples, C), params)
    assert abs(metrics.accuracy - 1.0 / C) < 0.08


def test_numeric_failure_names_the_sample():
    dims = ModelDims(D=2, C=2)
    params = init_params(dims, 0, pooler="mean")
    arrays = params.arrays()
    arrays["cls.W"] = np.array([[1e4, 0.0], [-1e4, 0.0]])
    params = params.with_arrays(arrays)
    seq = FeatureSequence([[1.0, 0.0]], 1, "doomed")
    with pytest.raises(NumericError) as excinfo:
        batch_gradient(params, [(seq, np.random.default_rng(0))])
    assert excinfo.value.sample_id == "doomed"
    with pytest.raises(NumericError) as excinfo:
        train(Dataset([seq], 2), params)
    assert "doomed" in str(excinfo.value)


def test_batch_gradient_is_the_mean(small_params, rng):
    seqs = [FeatureSequence(rng.normal(size=(4, 8)), i % 3, f"s{i}") for i in range(3)]
    loss, grads = batch_gradient(small_params, [(s, None) for s in seqs])
    singles = [batch_gradient(small_params, [(s, None)]) for s in seqs]
    assert loss == pytest.approx(np.mean([value for value, _ in singles]))
    for name in PARAM_NAMES:
        npt.assert_allclose(grads[name], np.mean([g[name] for _, g in singles], axis=0), rtol=1e-12, atol=1e-15)


def _score(label, pred, gammas=None, mask=None, T=3):
    seq = FeatureSequence(np.ones((T, 2)), label, signal_mask=mask)
    return SampleScore(seq, pred, np.full(2, 0.5), 0.7, None if gammas is None else np.array(gammas))


def test_summarize_metrics():
    scores = [
        _score(0, 0, [1.0, 0.9, 0.1], [False, True, False]),
        _score(1, 0, [1.0, 0.2, 0.8], [False, False, True]),
    ]
    m = summarize(scores, 2)
    assert m.accuracy == 0.5
    assert m.per_class_accuracy == [1.0, 0.0]
    assert m.mean_selected_fraction == pytest.approx(2.0 / 3.0)
    assert m.signal_gap == pytest.approx(0.85 - 0.15)
    assert m.top_gamma_on_signal == 1.0
    assert m.mean_loss == pytest.approx(0.7)
    assert m.count == 2


def test_summarize_uniform_poolers():
    m = summarize([_score(0, 0), _score(1, 1)], 2)
    assert m.mean_selected_fraction == 1.0
    assert m.signal_gap is None
    assert m.top_gamma_on_signal is None
    empty = summarize([], 3)
    assert empty.count == 0 and empty.per_class_accuracy == [0.0, 0.0, 0.0]


def test_score_views_averages_random_samples(small_params, rng):
    seq = FeatureSequence(rng.normal(size=(9, 8)), 2, "v", [t % 3 == 0 for t in range(9)])
    result = score_views(seq, small_params, 4, 5, np.random.default_rng(17))
    draw = np.random.default_rng(17)
    singles = [score(random_subsample(seq, 4, draw), small_params) for _ in range(5)]
    npt.assert_allclose(result.probs, np.mean([s.probs for s in singles], axis=0), rtol=1e-12)
    assert result.pred == int(np.argmax(result.probs))
    assert result.loss == pytest.approx(-np.log(result.probs[2]))
    assert result.gammas is None
    assert len(result.views) == 5
    for (sub, gammas), single in zip(result.views, singles):
        assert sub.T == 4
        npt.assert_array_equal(gammas, single.gammas)
    with pytest.raises(ContractViolation):
        score_views(seq, small_params, 4, 0, np.random.default_rng(0))


def test_evaluate_with_test_views():
    _, test_set, params = _tiny_setup(**{"lambda": 0.0})
    a = evaluate(test_set, params, test_views=3, frames=4, view_seed=5)
    b = evaluate(test_set, params, test_views=3, frames=4, view_seed=5, workers=4)
    assert a.summary() == b.summary()
    assert 0.0 <= a.mean_selected_fraction <= 1.0
    assert a.signal_gap is not None

    # one view holding every frame is the plain evaluation
    full = evaluate(test_set, params, test_views=1, frames=TINY.seq_len)
    plain = evaluate(test_set, params)
    assert full.accuracy == plain.accuracy
    assert full.mean_loss == pytest.approx(plain.mean_loss, rel=1e-12)
    assert full.signal_gap == pytest.approx(plain.signal_gap, rel=1e-12)

    with pytest.raises(ContractViolation):
        evaluate(test_set, params, test_views=3)
