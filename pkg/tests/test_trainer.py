import numpy as np
import pytest

from astra_tda.data import Dataset, synth_regression
from astra_tda.model import MlpSpec, forward, loss
from astra_tda.trainer import (
    TrainConfig, TrainingDivergence, load_checkpoint, load_trajectory, save_trajectory, segment_bounds,
    segment_trajectory, train,
)

SPEC = MlpSpec((3, 6, 1))


@pytest.fixture(scope="module")
def data():
    return synth_regression(40, 3, 0.1, seed=0)


def test_training_deterministic(data):
    a = train(SPEC, data, TrainConfig(epochs=3))
    b = train(SPEC, data, TrainConfig(epochs=3))
    assert all(np.array_equal(x, y) for x, y in zip(a.checkpoints, b.checkpoints))
    c = train(SPEC, data, TrainConfig(epochs=3, order_seed=2))
    assert not np.array_equal(a.final, c.final)


def test_training_reduces_loss(data):
    traj = train(SPEC, data, TrainConfig(epochs=20))
    init = np.mean(loss(SPEC, forward(SPEC, traj.checkpoints[0], data.x)[0], data.t))
    assert traj.losses[-1] < 0.5 * init


def test_masked_examples_never_read(data):
    mask = np.zeros(len(data), dtype=bool)
    mask[::2] = True
    poisoned = Dataset(data.x.copy(), data.t.copy())
    poisoned.x[~mask] = np.nan
    poisoned.t[~mask] = np.nan
    a = train(SPEC, poisoned, TrainConfig(epochs=2), mask=mask)
    b = train(SPEC, data.subset(np.flatnonzero(mask)), TrainConfig(epochs=2))
    assert np.array_equal(a.final, b.final)


def test_mask_errors(data):
    with pytest.raises(ValueError):
        train(SPEC, data, TrainConfig(epochs=1), mask=np.zeros(len(data), dtype=bool))
    with pytest.raises(ValueError):
        train(SPEC, data, TrainConfig(epochs=1), mask=np.ones(3, dtype=bool))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(data):
    with pytest.raises(TrainingDivergence):
        train(SPEC, data, TrainConfig(lr=1e4, epochs=5))


def test_step_schedule_and_step_count(data):
    traj = train(SPEC, data, TrainConfig(epochs=4, batch_size=16, lr_schedule="step", lr_decay_every=2))
    assert traj.total_steps == 4 * 3
    assert np.allclose(traj.lrs[:6], 0.03) and np.allclose(traj.lrs[6:], 0.003)
    assert traj.steps == [0, 3, 6, 9, 12]


def test_checkpoint_every(data):
    traj = train(SPEC, data, TrainConfig(epochs=2, batch_size=8, checkpoint_every=3))
    assert traj.steps == [0, 3, 6, 9, 10]


@pytest.mark.parametrize("total,n", [(10, 3), (9, 3), (5, 5), (7, 1)])
def test_segment_bounds_cover(total, n):
    b = segment_bounds(total, n)
    assert b[0][0] == 0 and b[-1][1] == total
    assert all(x[1] == y[0] for x, y in zip(b, b[1:]))
    sizes = [y - x for x, y in b]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def test_segments(data):
    traj = train(SPEC, data, TrainConfig(epochs=6, batch_size=8))
    segs = segment_trajectory(traj, 3)
    assert sum(s.steps for s in segs) == traj.total_steps
    s0 = segs[0]
    assert s0.damping == pytest.approx(1.0 / (0.03 * s0.steps))
    sel = [c for k, c in zip(traj.steps, traj.checkpoints) if s0.start <= k < s0.stop]
    assert np.allclose(s0.mean_params, np.mean(sel, axis=0))
    with pytest.raises(ValueError):
        segment_trajectory(traj, 100)


def test_checkpoint_round_trip(tmp_path, data):
    traj = train(SPEC, data, TrainConfig(epochs=2))
    save_trajectory(traj, tmp_path)
    back = load_trajectory(tmp_path, SPEC)
    assert back.steps == traj.steps
    assert all(np.array_equal(a, b) for a, b in zip(back.checkpoints, traj.checkpoints))
    assert np.array_equal(back.lrs, traj.lrs)
    shapes, step, _ = load_checkpoint(sorted(tmp_path.glob("*.astk"))[-1])
    assert [tuple(s) for s in shapes] == list(SPEC.shapes) and step == traj.total_steps
    with pytest.raises(ValueError):
        load_trajectory(tmp_path, MlpSpec((3, 5, 1)))


def test_config_validation():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(batch_size=0), dict(lr_schedule="cosine")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
