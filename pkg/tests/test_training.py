import json

import numpy as np
import pytest

from inner_imaging.backbones import ArchDescriptor, build
from inner_imaging.nn import Linear, Module, Parameter
from inner_imaging.tensor import Tensor, cross_entropy, no_grad
from inner_imaging.training import SGD, TrainConfig, Trainer, TrainingAborted, evaluate, lr_at, predict, train_step


class Flat(Module):
    """Linear classifier on flattened images."""

    def __init__(self, features, classes, seed=0):
        self.fc = Linear(features, classes, np.random.default_rng(seed))

    def forward(self, x):
        return self.fc(x.reshape(x.shape[0], -1))


class Fixed(Module):
    """Returns preset logits regardless of input."""

    def __init__(self, logits):
        self.logits = logits

    def forward(self, x):
        return Tensor(self.logits[: x.shape[0]])


def _separable(n=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 1, 2, 2)) * 0.3
    x[:, 0, 0, 0] += np.where(y == 1, 2.0, -2.0)
    return x, y


# -- schedule ---------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig(epochs=400)
    assert lr_at(cfg, 0) == 0.1
    assert lr_at(cfg, 200) == pytest.approx(0.01, rel=1e-15)
    assert lr_at(cfg, 399) == pytest.approx(1e-4, rel=1e-15)
    assert lr_at(cfg, 199) == 0.1
    assert lr_at(cfg, 300) == pytest.approx(0.001, rel=1e-15)


def test_lr_schedule_non_increasing():
    cfg = TrainConfig(epochs=37, lr_drops=(0.3, 0.6, 0.95))
    rates = [lr_at(cfg, e) for e in range(37)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(TrainConfig(epochs=10), 10)
    with pytest.raises(ValueError):
        lr_at(TrainConfig(epochs=10), -1)


@pytest.mark.parametrize("drops", [(0.5, 0.5), (0.7, 0.3), (0.0, 0.5), (0.5, 1.0)])
def test_drop_fractions_validated(drops):
    with pytest.raises(ValueError):
        TrainConfig(lr_drops=drops)


# -- optimizer ---------------------------------------------------------------------

def _param(values, decay=True):
    p = Parameter(np.array(values, dtype=float), decay=decay)
    return p


def test_momentum_zero_is_vanilla_sgd():
    p = _param([1.0, -2.0, 3.0])
    p.grad = np.array([0.5, 0.25, -1.0])
    before = p.data.copy()
    SGD([p], lr=0.1, momentum=0.0, nesterov=False).step()
    np.testing.assert_array_equal(p.data, before - 0.1 * np.array([0.5, 0.25, -1.0]))


def test_zero_lr_leaves_parameters():
    net = Flat(4, 2)
    x, y = _separable()
    before = [p.data.copy() for p in net.parameters()]
    train_step(net, x, y, SGD(net.parameters(), lr=0.0, momentum=0.9, weight_decay=5e-4))
    for b, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(p.data, b)


def test_nesterov_two_steps_by_hand():
    p = _param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, nesterov=True, weight_decay=0.01)
    w, v = 1.0, 0.0
    for g in (0.5, -0.2):
        p.grad = np.array([g])
        opt.step()
        d = g + 0.01 * w
        v = 0.9 * v + d
        w = w - 0.1 * (d + 0.9 * v)
        assert p.data[0] == pytest.approx(w, abs=1e-15)


def test_weight_decay_skips_no_decay_params():
    w, b = _param([1.0]), _param([1.0], decay=False)
    w.grad, b.grad = np.zeros(1), np.zeros(1)
    SGD([w, b], lr=0.1, momentum=0.0, weight_decay=0.5).step()
    assert w.data[0] == pytest.approx(0.95)
    assert b.data[0] == 1.0


def test_bn_and_bias_parameters_not_decayed():
    net = build(ArchDescriptor(image_size=8, widths=(8, 16), attention="ini"))
    no_decay = {n for n, p in net.named_parameters() if not p.decay}
    assert no_decay and all(n.endswith(("bias", "gamma", "beta")) or ".biases." in n for n in no_decay)
    assert all(p.decay for n, p in net.named_parameters() if n.endswith("weight"))


def test_separable_loss_strictly_decreases():
    net = Flat(4, 2)
    x, y = _separable()
    opt = SGD(net.parameters(), lr=0.05, momentum=0.9)
    losses = [train_step(net, x, y, opt)[0] for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_small_step_does_not_increase_loss():
    net = build(ArchDescriptor(image_size=8, widths=(8, 16), attention="ini", num_classes=3), seed=1)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 3, 8, 8)), rng.integers(0, 3, size=8)

    def frozen_loss():
        net.train()
        # batch statistics are recomputed each call; running buffers are restored afterwards
        saved = [b.copy() for _, b in net.named_buffers()]
        with no_grad():
            value = float(cross_entropy(net(Tensor(x)), y).data)
        for (_, b), s in zip(net.named_buffers(), saved):
            b[...] = s
        return value

    before = frozen_loss()
    train_step(net, x, y, SGD(net.parameters(), lr=1e-4, momentum=0.0))
    assert frozen_loss() <= before + 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    net = Flat(4, 2)
    net.fc.weight.data[0, 0] = np.inf
    x, y = _separable()
    with pytest.raises(TrainingAborted):
        train_step(net, x, y, SGD(net.parameters()))


# -- evaluation ----------------------------------------------------------------------

def test_perfect_logits_give_full_accuracy():
    y = np.array([0, 2, 1, 1, 0])
    logits = np.eye(3)[y] * 10
    assert evaluate(Fixed(logits), np.zeros((5, 1)), y)["accuracy"] == 1.0


def test_uniform_logits_tie_break_lowest_index():
    k = 4
    y = np.arange(40) % k
    m = evaluate(Fixed(np.zeros((40, k))), np.zeros((40, 1)), y)
    assert m["accuracy"] == 1 / k
    assert m["loss"] == pytest.approx(np.log(k), abs=1e-12)
    assert list(predict(np.zeros((2, 3)))) == [0, 0]


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(Fixed(np.zeros((1, 2))), np.zeros((0, 1)), np.zeros(0, dtype=int))


def test_evaluate_reproducible():
    net = build(ArchDescriptor(image_size=8, widths=(8, 16), attention="ini"), seed=3)
    x = np.random.default_rng(4).normal(size=(10, 3, 8, 8))
    y = np.arange(10) % 10
    assert evaluate(net, x, y, batch_size=3) == evaluate(net, x, y, batch_size=3)


# -- trainer ---------------------------------------------------------------------------

def _trainer(tmp_path, seed=0, log="m.jsonl"):
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(24, 3, 8, 8)), np.arange(24) % 3
    net = build(ArchDescriptor(image_size=8, widths=(8, 16), attention="ini", num_classes=3), seed=seed)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=seed)

    def aug(b, r):
        return b[..., ::-1] if r.random() < 0.5 else b

    return Trainer(net, cfg, (x, y), (x[:6], y[:6]), augment=aug, log_path=tmp_path / log)


def test_metrics_log_records(tmp_path):
    tr = _trainer(tmp_path)
    tr.fit()
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms"}
    assert [r["lr"] for r in lines] == [lr_at(tr.config, e) for e in range(3)]


def test_twin_runs_identical(tmp_path):
    a, b = _trainer(tmp_path, log="a.jsonl"), _trainer(tmp_path, log="b.jsonl")
    a.fit()
    b.fit()
    for (_, pa), (_, pb) in zip(a.net.named_parameters(), b.net.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_ms"} for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)


def test_fit_until_stops_early(tmp_path):
    tr = _trainer(tmp_path)
    tr.fit(until=1)
    assert tr.epoch == 1 and len(tr.history) == 1


def test_abort_names_last_checkpoint(tmp_path):
    tr = _trainer(tmp_path)
    tr.last_checkpoint = "runs/x/checkpoint.bin"
    tr.net.head.weight.data[...] = np.nan
    with pytest.raises(TrainingAborted) as info:
        tr.run_epoch()
    assert info.value.checkpoint == "runs/x/checkpoint.bin"
    assert "runs/x/checkpoint.bin" in str(info.value) and "head" in str(info.value)
