import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveformer.audio import AudioClip, synth_dataset
from waveformer.autodiff import Tensor
from waveformer.errors import ConfigError, DimensionError, TrainingError
from waveformer.model import ModelConfig, build, forward, load_checkpoint
from waveformer.training import (
    AdamState,
    LogRow,
    TrainRunConfig,
    adam_step,
    average_precision,
    evaluate,
    huber_loss,
    moving_average,
    predict_clips,
    read_log_csv,
    report_from_scores,
    train,
    write_log_csv,
    write_report_csv,
)

from conftest import check_grads

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def brute_force_ap(scores, positives) -> float:
    """AP straight from the definition: for each positive, precision over all items ranked at or above it."""
    n = len(scores)
    # item j outranks i if it scores higher, or ties and has a lower index
    def outranks(j, i):
        return scores[j] > scores[i] or (scores[j] == scores[i] and j < i)

    precisions = []
    for i in range(n):
        if not positives[i]:
            continue
        above = [j for j in range(n) if j == i or outranks(j, i)]
        precisions.append(sum(positives[j] for j in above) / len(above))
    return sum(precisions) / len(precisions)


class TestHuber:
    def test_zero(self):
        assert huber_loss(Tensor([0.3, 0.7]), np.array([0.3, 0.7])).item() == 0.0

    def test_quadratic_branch(self):
        assert huber_loss(Tensor([0.5, 0.5]), np.zeros(2)).item() == pytest.approx(0.125)

    def test_linear_branch(self):
        assert huber_loss(Tensor([2.0]), np.zeros(1)).item() == pytest.approx(1.5)
        assert huber_loss(Tensor([-2.0]), np.zeros(1), delta=0.5).item() == pytest.approx(0.5 * (2 - 0.25))

    def test_errors(self):
        with pytest.raises(DimensionError):
            huber_loss(Tensor([1.0, 2.0]), np.zeros(3))
        with pytest.raises(ConfigError):
            huber_loss(Tensor([1.0]), np.zeros(1), delta=0.0)

    @settings(max_examples=100, deadline=None)
    @given(seeds, st.floats(0.2, 2.0))
    def test_gradcheck_off_kink(self, seed, delta):
        r = np.random.default_rng(seed)
        pred = r.normal(scale=2.0, size=(4, 5))
        target = r.normal(size=(4, 5))
        resid = pred - target
        near = np.abs(np.abs(resid) - delta) < 1e-3
        pred[near] += 2e-3 * np.sign(resid[near])
        assert check_grads(lambda p: huber_loss(p, target, delta), [pred]) < 1e-6

    def test_gradient_clipped(self):
        p = Tensor(np.array([5.0, -5.0, 0.2]), requires_grad=True)
        huber_loss(p, np.zeros(3)).backward()
        np.testing.assert_allclose(p.grad, np.array([1.0, -1.0, 0.2]) / 3)


def adam_on(values, grads, lr=1e-3, steps=1):
    p = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    state = AdamState([("w", p)], lr=lr)
    for _ in range(steps):
        p.grad = np.array(grads, dtype=np.float64)
        adam_step(state)
    return p, state


class TestAdam:
    def test_zero_gradient(self):
        p, _ = adam_on([1.0, -2.0], [0.0, 0.0], steps=3)
        assert p.data.tolist() == [1.0, -2.0]

    def test_first_step_is_minus_lr(self):
        p, state = adam_on([0.0], [1.0], lr=0.01)
        assert p.data[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_quadratic_converges(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState([("w", w)], lr=0.1)
        for _ in range(200):
            d = w - Tensor([3.0])
            (d * d).sum().backward()
            adam_step(state)
            w.zero_grad()
        assert abs(w.data[0] - 3.0) < 0.05

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_sign_symmetry(self, seed):
        r = np.random.default_rng(seed)
        start = r.normal(size=6)
        g = r.normal(size=6)
        up, _ = adam_on(start, g)
        down, _ = adam_on(start, -g)
        np.testing.assert_allclose(up.data - start, -(down.data - start), rtol=1e-12, atol=1e-15)

    def test_matches_reference_formula(self):
        g = [np.array([0.5, -1.0]), np.array([0.25, 2.0]), np.array([-0.1, 0.3])]
        p = Tensor(np.zeros(2), requires_grad=True)
        state = AdamState([("w", p)], lr=0.05)
        m = v = np.zeros(2)
        w = np.zeros(2)
        for t, gt in enumerate(g, start=1):
            p.grad = gt
            adam_step(state)
            m = 0.9 * m + 0.1 * gt
            v = 0.999 * v + 0.001 * gt**2
            w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12)

    def test_nan_gradient_names_parameter(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        state = AdamState([("ok", a), ("blocks.0.norm1.gamma", b)])
        a.grad = np.ones(2)
        b.grad = np.array([np.nan, 0.0])
        with pytest.raises(TrainingError, match="blocks.0.norm1.gamma"):
            adam_step(state)
        assert a.data.tolist() == [0.0, 0.0]


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_hand_case(self):
        assert average_precision([0.9, 0.8, 0.7], [0, 1, 1]) == pytest.approx(7 / 12)

    def test_no_positives(self):
        assert math.isnan(average_precision([0.1, 0.2], [0, 0]))

    def test_tie_break_by_index(self):
        assert average_precision([0.5, 0.5, 0.5], [0, 0, 1]) == pytest.approx(1 / 3)
        assert average_precision([0.5, 0.5, 0.5], [1, 0, 0]) == 1.0

    def test_exhaustive_small(self):
        for n in range(1, 6):
            for pos in itertools.product([0, 1], repeat=n):
                if not any(pos):
                    continue
                for scores in itertools.product([0.0, 0.5, 1.0], repeat=n):
                    assert average_precision(scores, pos) == pytest.approx(brute_force_ap(scores, pos), abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(seeds)
    def test_monotone_invariance(self, seed):
        r = np.random.default_rng(seed)
        s = r.normal(size=12)
        pos = r.random(12) < 0.4
        pos[0] = True
        assert average_precision(s, pos) == average_precision(np.exp(3 * s) + 1, pos)
        assert average_precision(s, pos) == average_precision(np.tanh(s), pos)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            average_precision([0.1, 0.2], [1])


class TestReport:
    def test_perfect_model(self):
        targets = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=float)
        assert report_from_scores(targets, targets).mAP == 1.0

    def test_constant_score_closed_form(self):
        # index tie-breaking: positive k at position p_k is ranked p_k + 1
        targets = np.array([[1, 0], [0, 1]] * 4, dtype=float)
        report = report_from_scores(np.full(targets.shape, 0.5), targets)
        for c in range(2):
            ranks = np.nonzero(targets[:, c])[0] + 1
            closed = np.mean(np.arange(1, ranks.size + 1) / ranks)
            assert report.ap[c] == pytest.approx(closed)
        # positives in every second slot starting at the second: AP is exactly the prior
        assert report.ap[1] == pytest.approx(0.5)

    def test_one_ap_per_valid_class(self):
        targets = np.array([[1, 0, 0], [0, 0, 1]], dtype=float)
        report = report_from_scores(np.random.default_rng(0).random((2, 3)), targets)
        assert report.valid.tolist() == [True, False, True]
        assert report.positives.tolist() == [1, 0, 1]

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_reversed_not_better(self, seed):
        r = np.random.default_rng(seed)
        targets = (r.random((10, 3)) < 0.5).astype(float)
        targets[0] = 1
        perfect = report_from_scores(targets, targets).mAP
        worst = report_from_scores(1 - targets, targets).mAP
        assert 0.0 <= worst <= perfect <= 1.0

    def test_csv(self, tmp_path):
        targets = np.array([[1, 0, 0], [0, 0, 1]], dtype=float)
        report = report_from_scores(targets, targets)
        write_report_csv(report, tmp_path / "r.csv", ["a", "b", "c"])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "class_index,class_name,ap,num_positives"
        assert lines[1:] == ["0,a,1.0,1", "2,c,1.0,1", "mAP,,1.0,2"]


class TestClipAggregation:
    def test_mean_over_chunks(self):
        model = build(ModelConfig.small(n_labels=2), seed=0)
        rng = np.random.default_rng(1)
        long = AudioClip(rng.uniform(-1, 1, 32000), [1.0, 0.0], "long")
        short = AudioClip(rng.uniform(-1, 1, 16000), [0.0, 1.0], "short")
        clip_scores = predict_clips(model, [long, short])
        first = forward(model, long.samples[:16000].reshape(40, 400)).data[0]
        second = forward(model, long.samples[16000:].reshape(40, 400)).data[0]
        np.testing.assert_allclose(clip_scores[0], (first.astype(np.float64) + second) / 2, rtol=1e-6)
        assert evaluate(model, [long, short]).ap.shape == (2,)


class TestLogs:
    def test_moving_average(self):
        assert moving_average([1, 2, 3, 4], 2).tolist() == [1.5, 2.5, 3.5]
        assert moving_average([1], 2).size == 0

    def test_csv_roundtrip(self, tmp_path):
        log = [LogRow(1, 0.25), LogRow(2, 1 / 3, 0.875)]
        write_log_csv(log, tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines()[:2] == ["step,loss,val_mAP", "1,0.25,"]
        assert read_log_csv(tmp_path / "l.csv") == log


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(2, seed=0)


class TestTrainLoop:
    def tiny_model(self, seed=0):
        return build(ModelConfig.small(num_layers=1, frontend_hidden=32, n_labels=4), seed=seed)

    def test_equal_seeds_identical(self, tiny_data, tmp_path):
        run = TrainRunConfig(batch_size=4, max_steps=6, learning_rate=1e-3, eval_interval=3)
        train(self.tiny_model(), tiny_data, run, tiny_data, tmp_path / "a.atfm", tmp_path / "a.csv")
        train(self.tiny_model(), tiny_data, run, tiny_data, tmp_path / "b.atfm", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.atfm").read_bytes() == (tmp_path / "b.atfm").read_bytes()

    def test_first_loss_matches_initial_model(self, tiny_data, tmp_path):
        from waveformer.audio import stack_examples
        from waveformer.training import _batches

        run = TrainRunConfig(batch_size=4, max_steps=1, seed=7)
        model = self.tiny_model()
        idx = next(_batches(8, 4, np.random.default_rng(7)))
        frames, targets, _ = stack_examples(tiny_data)
        expected = huber_loss(forward(model, frames[idx]), targets[idx]).item()
        result = train(model, tiny_data, run)
        assert result.log[0].loss == expected

    def test_checkpoint_written(self, tiny_data, tmp_path):
        run = TrainRunConfig(batch_size=4, max_steps=2)
        result = train(self.tiny_model(), tiny_data, run, checkpoint_path=tmp_path / "c.atfm")
        loaded = load_checkpoint(tmp_path / "c.atfm")
        assert loaded.frontend[0].W.data.tobytes() == result.model.frontend[0].W.data.tobytes()

    def test_val_only_at_interval(self, tiny_data):
        run = TrainRunConfig(batch_size=4, max_steps=4, eval_interval=2)
        log = train(self.tiny_model(), tiny_data, run, tiny_data).log
        assert [r.val_mAP is not None for r in log] == [False, True, False, True]

    def test_target_map_stops_early(self, tiny_data):
        run = TrainRunConfig(batch_size=4, max_steps=50, eval_interval=1, target_map=0.0)
        assert len(train(self.tiny_model(), tiny_data, run, tiny_data).log) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_batch_ids(self, tiny_data):
        model = self.tiny_model()
        model.frontend[0].W.data[:] = np.inf
        with pytest.raises(TrainingError, match="synth_"):
            train(model, tiny_data, TrainRunConfig(batch_size=4, max_steps=1))

    def test_invalid_run(self, tiny_data):
        with pytest.raises(ConfigError, match="batch_size"):
            train(self.tiny_model(), tiny_data, TrainRunConfig(batch_size=0))
        with pytest.raises(TrainingError):
            train(self.tiny_model(), [], TrainRunConfig())
