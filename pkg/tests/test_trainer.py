import numpy as np
import pytest

from sedkit.eventroll import EventRoll, FrameParams
from sedkit.losses import compute_loss
from sedkit.metrics import SegmentParams, evaluate_corpus, threshold
from sedkit.model import CrnnParameters, forward, init_params
from sedkit.synthgen import STATIONARY, Band, ClassSpec, SynthSpec, generate_corpus
from sedkit.trainer import (
    DEFAULT_GAMMAS,
    TrainConfig,
    TrainingError,
    batch_gradient,
    evaluate_model,
    format_config,
    gamma_sweep,
    parse_config,
    predict,
    train,
)

SMALL = dict(conv_channels=(4, 4), pool_freq=(2, 2), gru_units=4, dense_units=4)


def separable(n_clips=20, seed=0):
    """Two classes with disjoint spectral bands over light background noise."""
    classes = (
        ClassSpec("low", STATIONARY, 0.8, 0.2, 1.0, ((Band(1, 1, 4.0),),), noise=0.1),
        ClassSpec("high", STATIONARY, 0.8, 0.2, 1.0, ((Band(6, 1, 4.0),),), noise=0.1),
    )
    spec = SynthSpec(classes, clip_length=2.0, n_clips=n_clips, n_mels=8, background_noise=0.3, seed=seed)
    return generate_corpus(spec).dataset


@pytest.fixture(scope="module")
def data():
    return separable()


def cfg(**kw):
    base = dict(epochs=2, clips_per_batch=4, learning_rate=1e-2, **SMALL)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_learning_rate_keeps_init(self, data):
        c = cfg(epochs=1, learning_rate=0.0)
        params, _ = train(data, c)
        assert params.equal(init_params(c.model_config(8, 2), c.seed))

    def test_deterministic(self, data):
        a, ha = train(data, cfg())
        b, hb = train(data, cfg())
        assert a.equal(b) and ha.loss == hb.loss

    def test_worker_count_does_not_change_result(self, data):
        mixed = data[:10] + [(x[:50], type(r)(r.activity[:50])) for x, r in data[10:]]
        c = cfg(clips_per_batch=10)
        a, ha = train(mixed, c, workers=1)
        b, hb = train(mixed, c, workers=3)
        assert a.equal(b) and ha.batch_loss == hb.batch_loss

    def test_seed_changes_result(self, data):
        assert not train(data, cfg(seed=1))[0].equal(train(data, cfg(seed=2))[0])

    def test_loss_falls_on_separable_data(self, data):
        params, hist = train(data, cfg(epochs=30))
        assert len(hist.loss) == 30
        assert hist.loss[-1] < 0.1 * hist.loss[0]
        assert evaluate_model(params, data).micro_f > 0.9

    def test_history_matches_recomputed_loss(self, data):
        c = cfg(epochs=1, clips_per_batch=len(data))
        _, hist = train(data, c)
        init = init_params(c.model_config(8, 2), c.seed)
        expected = sum(compute_loss("bce", forward(init, x).logits, r).value for x, r in data)
        assert hist.loss[0] == pytest.approx(expected, rel=1e-12)
        assert hist.batch_loss == hist.loss

    def test_gamma_zero_matches_bce(self, data):
        a, _ = train(data, cfg(loss_kind="bce"))
        b, _ = train(data, cfg(loss_kind="duration_robust", gamma=0.0))
        assert a.equal(b)

    @pytest.mark.parametrize("kind", ["inverse_freq", "duration_robust"])
    def test_other_losses_run(self, data, kind):
        _, hist = train(data, cfg(loss_kind=kind, gamma=2.0, epochs=1))
        assert np.isfinite(hist.loss[0])

    def test_eval_history(self, data):
        _, hist = train(data, cfg(), eval_set=data[:5])
        assert len(hist.macro_f) == len(hist.micro_f) == 2
        assert hist.to_tsv().count("\n") == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, data):
        bad = [(np.full_like(data[0][0], np.inf), data[0][1])] + data[1:]
        with pytest.raises(TrainingError):
            train(bad, cfg(epochs=1))

    @pytest.mark.parametrize(
        "dataset",
        [[], [(np.zeros((10, 8)), EventRoll.zeros(9, 2))], [(np.zeros((10, 8)), EventRoll.zeros(10, 2)), (np.zeros((10, 7)), EventRoll.zeros(10, 2))]],
    )
    def test_inconsistent_data(self, dataset):
        with pytest.raises(TrainingError):
            train(dataset, cfg())


def test_batch_gradient_is_sum_over_clips(data):
    c = cfg()
    p = init_params(c.model_config(8, 2), 0)
    clips = data[:3]
    total, grads = batch_gradient(p, clips, c)
    parts = [batch_gradient(p, [clip], c) for clip in clips]
    assert total == pytest.approx(sum(v for v, _ in parts), rel=1e-12)
    for name, g in grads.items():
        np.testing.assert_allclose(g, sum(pg[name] for _, pg in parts), rtol=1e-10, atol=1e-14)


class TestEvaluateModel:
    def test_silent_model_on_silent_data(self):
        c = cfg()
        p = init_params(c.model_config(8, 3), 0)
        t = p.zeros_like()
        t["out.bias"][:] = -5.0
        silent = CrnnParameters(p.config, t)
        data = [(np.random.default_rng(i).normal(size=(60, 8)), EventRoll.zeros(60, 3)) for i in range(3)]
        rep = evaluate_model(silent, data)
        assert rep.overall_er == 0.0 and rep.undefined.all()

    def test_threshold_monotone(self, data):
        p = init_params(cfg().model_config(8, 2), 0)
        probs = predict(p, [x for x, _ in data])
        counts = [sum(int(threshold(q, phi).activity.sum()) for q in probs) for phi in (1e-9, 0.3, 0.5, 0.7, 1 - 1e-9)]
        assert counts == sorted(counts, reverse=True)

    def test_oracle_probabilities(self, data):
        pairs = [(r, threshold(r.activity.astype(float), 0.5)) for _, r in data]
        assert evaluate_corpus(pairs, FrameParams(), SegmentParams()).micro_f == 1.0

    def test_predict_keeps_order(self):
        p = init_params(cfg().model_config(8, 2), 0)
        feats = [np.random.default_rng(i).normal(size=(n, 8)) for i, n in enumerate((30, 12, 30, 5))]
        for x, q in zip(feats, predict(p, feats, batch_size=1)):
            np.testing.assert_allclose(q, 1 / (1 + np.exp(-forward(p, x).logits)), rtol=1e-12)


class TestSweep:
    def test_default_grid(self):
        assert DEFAULT_GAMMAS == (0.25, 0.5, 1.0, 2.0, 4.0)

    def test_rows(self, data):
        rows = gamma_sweep(data, data[:5], (0.5, 2.0), cfg(epochs=1))
        assert [g for g, _, _ in rows] == [0.5, 2.0]
        assert all(np.isfinite([a, b]).all() for _, a, b in rows)

    def test_gamma_zero_row_equals_bce(self, data):
        c = cfg(epochs=1, seed=3)
        ((_, macro, micro),) = gamma_sweep(data, data[:5], (0.0,), c)
        params, _ = train(data, c)
        rep = evaluate_model(params, data[:5])
        assert (macro, micro) == (rep.macro_f, rep.micro_f)

    def test_empty_grid(self, data):
        with pytest.raises(ValueError):
            gamma_sweep(data, data, (), cfg())


class TestConfigFile:
    def test_roundtrip(self):
        c = cfg(loss_kind="duration_robust", gamma=2.0, seed=7)
        assert parse_config(format_config(c)) == c

    def test_comments_and_defaults(self):
        c = parse_config("# reduced model\nloss_kind = inverse_freq  # weighted\nc = 250\nconv_channels = 16, 16, 16\n")
        assert c.loss_kind == "inverse_freq" and c.c == 250.0 and c.conv_channels == (16, 16, 16)
        assert c.epochs == TrainConfig().epochs

    @pytest.mark.parametrize("text", ["epochs = 0\n", "loss_kind = focal\n", "gamma = -1\n", "colour = red\n", "c = 0\n"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            parse_config(text)

    def test_digest_tracks_content(self):
        assert cfg().digest() == cfg().digest() != cfg(seed=1).digest()
