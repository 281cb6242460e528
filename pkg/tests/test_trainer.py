import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.utils.data import Dataset

from wastebench import models as md
from wastebench import trainer as tr
from wastebench.errors import (
    DivergedTraining,
    EmptyDataset,
    LabelOutOfRange,
    MissingHyperparam,
    ShapeMismatch,
    UnknownOptimizer,
    ValidationError,
)
from wastebench.models import ModelSpec
from wastebench.predictions import read_predictions
from wastebench.trainer import ImageSet, OptimizerSpec, TrainConfig


def toy_model(width=32, seed=0, **kw):
    return md.build_model(ModelSpec("toy_cnn", toy_width=width, **kw), seed=seed)


def cfg(**kw):
    base = dict(batch_size=8, learning_rate=1e-4, max_epochs=2, patience=2, global_seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- loss ---

def test_nll_certain_and_definition():
    assert float(tr.nll_loss([[0.0, -math.inf]], [0])) == 0.0
    assert float(tr.nll_loss([[-2.0, math.log(1 - math.exp(-2))]], [0])) == pytest.approx(2.0)


def test_nll_hand_arithmetic():
    lp = [[math.log(0.5), math.log(0.5)], [math.log(0.75), math.log(0.25)]]
    assert float(tr.nll_loss(lp, [1, 1], "sum")) == pytest.approx(2.079442, abs=1e-6)
    assert float(tr.nll_loss(lp, [1, 1], "mean")) == pytest.approx(1.039721, abs=1e-6)


def test_nll_errors():
    with pytest.raises(ShapeMismatch):
        tr.nll_loss(np.zeros((3, 3)), [0, 1, 0])
    with pytest.raises(ShapeMismatch):
        tr.nll_loss(np.zeros((3, 2)), [0, 1])
    with pytest.raises(LabelOutOfRange):
        tr.nll_loss(np.zeros((2, 2)), [0, 2])
    with pytest.raises(ValidationError):
        tr.nll_loss(np.zeros((2, 2)), [0, 1], "max")


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_nll_gradient_matches_softmax_minus_onehot(seed):
    g = np.random.default_rng(seed)
    z = torch.tensor(g.standard_normal((4, 2)), dtype=torch.float64, requires_grad=True)
    y = torch.tensor(g.integers(0, 2, 4))
    tr.nll_loss(torch.log_softmax(z, 1), y).backward()
    expected = (torch.softmax(z, 1) - torch.nn.functional.one_hot(y, 2)).detach() / 4
    assert torch.allclose(z.grad, expected, atol=1e-12)
    # central finite differences on the composed loss
    zn = z.detach().numpy()
    eps = 1e-6
    for i in range(4):
        for j in range(2):
            up, down = zn.copy(), zn.copy()
            up[i, j] += eps
            down[i, j] -= eps
            f = lambda a: float(tr.nll_loss(torch.log_softmax(torch.from_numpy(a), 1), y))
            fd = (f(up) - f(down)) / (2 * eps)
            assert abs(fd - float(z.grad[i, j])) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9


# --- optimizers ---

def test_optimizer_guards():
    with pytest.raises(UnknownOptimizer):
        OptimizerSpec("adagrad").resolved()
    with pytest.raises(MissingHyperparam):
        OptimizerSpec("sgd_warm_restarts", {"restart_period": None}).resolved()
    with pytest.raises(ValidationError):
        OptimizerSpec("adamw", {"lookahead_k": 3}).resolved()


def test_optimizer_defaults():
    assert OptimizerSpec("adamw").resolved()["weight_decay"] == 0.01
    r = OptimizerSpec("ranger").resolved()
    assert (r["lookahead_k"], r["lookahead_alpha"]) == (6, 0.5)
    assert tuple(OptimizerSpec("rprop").resolved()["etas"]) == (0.5, 1.2)
    assert tuple(OptimizerSpec("rprop").resolved()["step_sizes"]) == (1e-6, 50.0)
    s = OptimizerSpec("sgd_warm_restarts").resolved()
    assert (s["momentum"], s["restart_period"], s["period_multiplier"]) == (0.9, 10, 2)


@pytest.mark.parametrize("kind, lr", [("adamw", 0.1), ("radam", 0.1), ("ranger", 0.2), ("rprop", 0.01),
                                      ("sgd_warm_restarts", 0.05)])
def test_convex_quadratic_reduction(kind, lr):
    target = torch.tensor([1.0, -2.0, 0.5, 3.0, -1.0], dtype=torch.float64)
    w = torch.zeros(5, dtype=torch.float64, requires_grad=True)
    objective = lambda: ((w - target) ** 2).sum()
    start = float(objective().detach())
    opt = tr.build_optimizer(OptimizerSpec(kind), [w], lr=lr)
    for _ in range(100):
        opt.zero_grad()
        objective().backward()
        opt.step()
    assert float(objective().detach()) <= 0.1 * start


def _cosine_restart_oracle(step, base, t0, mult, eta_min=0.0):
    t_i, t_cur = t0, step
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= mult
    return eta_min + (base - eta_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2


def test_warm_restart_schedule():
    w = torch.zeros(1, requires_grad=True)
    opt = tr.build_optimizer(OptimizerSpec("sgd_warm_restarts", {"restart_period": 4}), [w], lr=0.1)
    trace = []
    for step in range(20):
        trace.append(opt.lr)
        opt.advance_schedule()
    expected = [_cosine_restart_oracle(t, 0.1, 4, 2) for t in range(20)]
    assert np.allclose(trace, expected, atol=1e-12)
    peaks = [t for t in range(1, 20) if trace[t] > trace[t - 1]]
    assert peaks == [4, 12]
    assert trace[4] == pytest.approx(0.1) and trace[12] == pytest.approx(0.1)


def test_lookahead_syncs_every_k():
    w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    opt = tr.build_optimizer(OptimizerSpec("ranger", {"lookahead_k": 2, "lookahead_alpha": 0.5}), [w], lr=0.1)
    inner = torch.optim.RAdam([torch.zeros(1, dtype=torch.float64, requires_grad=True)], lr=0.1,
                              betas=(0.95, 0.999), eps=1e-5)
    fast = inner.param_groups[0]["params"][0]
    for _ in range(2):
        for p, o in ((w, opt), (fast, inner)):
            o.zero_grad()
            ((p - 1.0) ** 2).sum().backward()
            o.step()
    # after k=2 steps the slow weight (0) moves halfway toward the fast weight
    assert w.item() == pytest.approx(0.5 * fast.item(), rel=1e-12)


def test_optimizer_state_roundtrip():
    w = torch.ones(3, requires_grad=True)
    for kind in tr.OPTIMIZER_KINDS:
        opt = tr.build_optimizer(OptimizerSpec(kind), [w], lr=0.01)
        (w ** 2).sum().backward()
        opt.step()
        state = opt.state_dict()
        again = tr.build_optimizer(OptimizerSpec(kind), [w], lr=0.01)
        again.load_state_dict(state)
        assert again.state_dict()["kind"] == kind


# --- config ---

@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=0), dict(patience=5, max_epochs=3),
                                dict(folds=5), dict(patience=0), dict(monitor="f1")])
def test_train_config_invariants(kw):
    with pytest.raises(ValidationError):
        cfg(**kw)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.max_epochs, c.patience, c.folds) == (64, 1e-4, 100, 20, 1)
    assert not c.mixed_precision and c.optimizer.kind == "adamw"


# --- training ---

def test_toy_fits_in_five_epochs(stats, toy_items):
    model = toy_model()
    data = ImageSet(toy_items, stats)
    result = tr.train(model, data, data, cfg(max_epochs=5, patience=5))
    assert len(result.history) == 5
    _, acc = tr.evaluate(model, data)
    assert acc >= 0.95


def test_early_stopping_arithmetic(monkeypatch, stats, toy_items):
    losses = iter([1.0, 0.8, 0.5, 0.6, 0.7, 0.4, 0.3])
    monkeypatch.setattr(tr, "evaluate", lambda *a, **k: (next(losses), 0.5))
    data = ImageSet(toy_items[:8], stats)
    result = tr.train(toy_model(8), data, data, cfg(max_epochs=10, patience=2))
    assert result.epochs_run == 5 and result.best_epoch == 3 and result.stopped_early
    assert result.epochs_run <= result.best_epoch + 2 + 1


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_early_stopping_bound(losses, patience):
    import pytest as _pytest
    mp = _pytest.MonkeyPatch()
    it = iter(losses)
    mp.setattr(tr, "evaluate", lambda *a, **k: (next(it), 0.5))
    try:
        data = _Tensors(2)
        result = tr.train(toy_model(4), data, data, cfg(max_epochs=len(losses), patience=min(patience, len(losses))))
    finally:
        mp.undo()
    best = min(range(len(losses)), key=lambda i: (losses[i], i)) + 1
    assert result.best_epoch <= best
    assert result.epochs_run <= result.best_epoch + min(patience, len(losses)) + 1


def test_max_epochs_zero(stats, toy_items):
    model = toy_model(8)
    before = {k: v.clone() for k, v in model.module.state_dict().items()}
    data = ImageSet(toy_items[:4], stats)
    result = tr.train(model, data, data, cfg(max_epochs=0, patience=1))
    assert result.history == [] and result.epochs_run == 0
    for k, v in model.module.state_dict().items():
        assert torch.equal(v, before[k])


def test_empty_dataset(stats, toy_items):
    data = ImageSet(toy_items[:4], stats)
    with pytest.raises(EmptyDataset):
        tr.train(toy_model(8), ImageSet([], stats), data, cfg())
    with pytest.raises(EmptyDataset):
        tr.train(toy_model(8), data, ImageSet([], stats), cfg())


class _Tensors(Dataset):
    def __init__(self, n, value=0.0):
        self.items = [(f"x{i}.png", i % 2, None) for i in range(n)]
        self.value = value

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return torch.full((3, 224, 224), self.value), self.items[i][1], i


def test_divergence_raises():
    with pytest.raises(DivergedTraining):
        tr.train(toy_model(8), _Tensors(4, float("nan")), _Tensors(4), cfg())


def test_frozen_prefix_untouched_by_training(stats, toy_items):
    model = toy_model(8, frozen_prefix=3)
    frozen = [p.detach().clone() for _, m in md.parameterized_layers(model.module)[:3]
              for p in m.parameters(recurse=False)]
    data = ImageSet(toy_items[:16], stats)
    tr.train(model, data, data, cfg(max_epochs=1, patience=1, learning_rate=1e-2))
    after = [p for _, m in md.parameterized_layers(model.module)[:3] for p in m.parameters(recurse=False)]
    for a, b in zip(frozen, after):
        assert torch.equal(a, b)


def test_seed_totality(stats, toy_items):
    runs = []
    for _ in range(2):
        data = ImageSet(toy_items[:24], stats, augment=True)
        result = tr.train(toy_model(8), data, ImageSet(toy_items[24:32], stats), cfg())
        runs.append(tr.format_history(result.history))
    assert runs[0] == runs[1]


def test_online_augmentation_keyed_by_epoch(stats, toy_items):
    data = ImageSet(toy_items[:2], stats, augment=True, augment_labels=(0, 1))
    data.set_epoch(1)
    a = data[0][0]
    data.set_epoch(2)
    b = data[0][0]
    data.set_epoch(1)
    assert torch.equal(a, data[0][0]) and not torch.equal(a, b)
    plain = ImageSet(toy_items[:2], stats)
    assert torch.equal(plain[0][0], plain[0][0])


def test_history_csv(tmp_path):
    hist = [tr.EpochRecord(1, 0.5, 0.25, 0.75)]
    tr.write_history(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_bytes() == b"epoch,train_loss,val_loss,val_accuracy\n1,0.500000,0.250000,0.750000\n"


# --- predict ---

def test_predict_three_images(tmp_path, stats, toy_items):
    data = ImageSet(toy_items[:3], stats)
    recs = tr.predict(toy_model(8), data, tmp_path / "p.csv")
    assert len(recs) == 3
    assert [r.filename for r in recs] == sorted(r.filename for r in recs)
    for r in recs:
        assert abs(r.p_negative + r.p_positive - 1) <= 1e-6
    assert len(read_predictions(tmp_path / "p.csv")) == 3


def test_predict_zero_head(stats, toy_items):
    recs = tr.predict(md.zero_head(toy_model(8)), ImageSet(toy_items[:4], stats))
    assert all(r.p_positive == pytest.approx(0.5) and r.p_negative == pytest.approx(0.5) for r in recs)


def test_predict_byte_identical_and_checkpoint_roundtrip(tmp_path, stats, toy_items):
    data = ImageSet(toy_items[:6], stats)
    model = toy_model(8)
    tr.predict(model, data, tmp_path / "a.csv")
    tr.predict(model, data, tmp_path / "b.csv")
    md.save_checkpoint(model, tmp_path / "m.pt")
    back, _ = md.load_checkpoint(tmp_path / "m.pt")
    tr.predict(back, data, tmp_path / "c.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
