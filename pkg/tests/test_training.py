import numpy as np
import pytest

from meltriage.aggregator import AggregatorConfig
from meltriage.errors import NumericError, ValidationError
from meltriage.records import CaseRecord, CrossSection, FeatureBag, Label, SlideRecord
from meltriage.splits import Partition, SplitAssignment
from meltriage.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    cross_section_dropout,
    lr_at,
    train_ensemble,
    train_fold,
    write_history,
    ValidationPoint,
)

FDIM = 12

AGG = AggregatorConfig(
    feature_dim=FDIM,
    model_dim=12,
    n_layers=1,
    n_heads=2,
    mlp_ratio=2,
    attention_dropout_p=0.5,
)


def _bag(rng, case_id, n_tiles, shift=0.0, n_units=1):
    vecs = (rng.standard_normal((n_tiles, FDIM)) + shift).astype(np.float32)
    per = n_tiles // n_units
    section_ids = np.repeat(np.arange(n_units, dtype=np.uint16), per)
    section_ids = np.concatenate(
        [section_ids, np.full(n_tiles - per * n_units, n_units - 1, np.uint16)]
    )
    return FeatureBag(
        case_id=case_id,
        vectors=vecs,
        slide_ids=("s",) * n_tiles,
        section_ids=np.sort(section_ids),
        grid_x=np.arange(n_tiles, dtype=np.uint32),
        grid_y=np.zeros(n_tiles, dtype=np.uint32),
    )


def _dataset(n_cases=12, seed=0):
    """Tiny linearly separable corpus: high cases sit at +2 in every feature."""
    rng = np.random.default_rng(seed)
    cases, bags, partition, folds = [], {}, {}, {}
    for i in range(n_cases):
        cid = f"C{i:02d}"
        pid = f"P{i:02d}"
        label = Label.HIGH if i % 2 else Label.LOW
        shift = 2.0 if label is Label.HIGH else 0.0
        bag = _bag(rng, cid, int(rng.integers(4, 9)), shift=shift, n_units=2)
        slide = SlideRecord(
            slide_id="s",
            feature_file=f"{cid}.fbag",
            sections=(
                CrossSection(0, tuple(np.flatnonzero(bag.section_ids == 0))),
                CrossSection(1, tuple(np.flatnonzero(bag.section_ids == 1))),
            ),
        )
        cases.append(
            CaseRecord(case_id=cid, patient_id=pid, label=label, slides=(slide,))
        )
        bags[cid] = bag
        partition[pid] = Partition.DEVELOPMENT
        folds[pid] = (i // 2) % 2  # pairs alternate folds, so both see both labels
    return cases, bags, SplitAssignment(partition=partition, folds=folds)


def test_train_config_validation():
    TrainConfig()
    with pytest.raises(ValidationError):
        TrainConfig(total_iterations=-1)
    with pytest.raises(ValidationError):
        TrainConfig(accumulation_steps=0)
    with pytest.raises(ValidationError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(lr_halving_period=0)
    with pytest.raises(ValidationError):
        TrainConfig(validation_period=0)
    with pytest.raises(ValidationError):
        TrainConfig(weight_decay=-0.01)
    with pytest.raises(ValidationError):
        TrainConfig(section_dropout_p=1.5)
    with pytest.raises(ValidationError):
        TrainConfig(seed=-1)


def test_train_config_round_trip():
    cfg = TrainConfig(total_iterations=50, seed=9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"no_such_knob": 1})


def test_lr_schedule():
    assert lr_at(0, 5e-4, 100_000) == 5e-4
    assert lr_at(99_999, 5e-4, 100_000) == 5e-4
    assert lr_at(100_000, 5e-4, 100_000) == 2.5e-4
    assert lr_at(200_000, 5e-4, 100_000) == 1.25e-4
    assert lr_at(950_000, 1e-3, 100_000) == 1e-3 * 0.5**9
    with pytest.raises(ValidationError):
        lr_at(-1, 5e-4, 100_000)


def test_adamw_first_step_oracle():
    # beta corrections cancel on step 1: update is lr * g/(|g|+eps) modulo eps
    params = np.array([1.0, -2.0, 0.5])
    grad = np.array([0.1, -0.2, 0.3])
    state = AdamWState.fresh(3)
    lr, wd = 0.1, 0.0
    new = adamw_step(params, grad, state, lr, wd)
    expected = params - lr * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(new, expected, atol=1e-9)
    assert state.step == 1


def test_adamw_zero_grad_is_pure_decay():
    params = np.array([1.0, -4.0], dtype=np.float32)
    state = AdamWState.fresh(2)
    new = adamw_step(params, np.zeros(2), state, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(
        new, params * (1.0 - 0.01 * 0.1), rtol=1e-7
    )
    assert new.dtype == np.float32


def test_adamw_two_step_hand_oracle():
    # scalar parameter, constant gradient, worked by hand in float64
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr, wd, g = 0.5, 0.01, 2.0
    w = 1.0
    m = v = 0.0
    for step in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        w = w - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * w
    params = np.array([1.0])
    state = AdamWState.fresh(1)
    params = adamw_step(params, np.array([g]), state, lr, wd)
    params = adamw_step(params, np.array([g]), state, lr, wd)
    assert params[0] == pytest.approx(w, abs=1e-12)


def test_adamw_rejects_bad_gradient():
    params = np.zeros(3)
    state = AdamWState.fresh(3)
    with pytest.raises(ValidationError):
        adamw_step(params, np.zeros(4), state, 0.1, 0.0)
    with pytest.raises(NumericError):
        adamw_step(params, np.array([0.0, np.nan, 0.0]), state, 0.1, 0.0)
    # failed calls must not advance the moments
    assert state.step == 0
    np.testing.assert_array_equal(state.m, 0.0)


def test_section_dropout_frequencies():
    # two units at p=0.5: both kept 1/4; each single-survivor case combines
    # the direct outcome (1/4) with half of the both-dropped rescue (1/8)
    rng = np.random.default_rng(0)
    bag = _bag(np.random.default_rng(1), "C", 8, n_units=2)
    counts = {0: 0, 1: 0, 2: 0}
    trials = 20_000
    for _ in range(trials):
        out = cross_section_dropout(bag, 0.5, rng)
        units = {int(s) for s in out.section_ids}
        if units == {0, 1}:
            counts[2] += 1
        else:
            counts[units.pop()] += 1
    assert counts[2] / trials == pytest.approx(0.25, abs=0.02)
    assert counts[0] / trials == pytest.approx(0.375, abs=0.02)
    assert counts[1] / trials == pytest.approx(0.375, abs=0.02)


def test_section_dropout_never_empties():
    rng = np.random.default_rng(5)
    bag = _bag(np.random.default_rng(2), "C", 9, n_units=3)
    for _ in range(300):
        assert cross_section_dropout(bag, 0.9, rng).n_tiles > 0


def test_section_dropout_passthrough_consumes_nothing():
    bag_one = _bag(np.random.default_rng(3), "C", 5, n_units=1)
    bag_two = _bag(np.random.default_rng(3), "C", 6, n_units=2)
    rng = np.random.default_rng(11)
    assert cross_section_dropout(bag_one, 0.5, rng) is bag_one
    assert cross_section_dropout(bag_two, 0.0, rng) is bag_two
    assert rng.integers(1 << 30) == np.random.default_rng(11).integers(1 << 30)


def _quick_config(**overrides):
    base = dict(
        total_iterations=60,
        accumulation_steps=4,
        base_lr=5e-3,
        lr_halving_period=40,
        validation_period=20,
        weight_decay=0.01,
        section_dropout_p=0.5,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def test_train_fold_deterministic():
    cases, bags, split = _dataset()
    cfg = _quick_config()
    a = train_fold(cases, bags, split, 0, AGG, cfg)
    b = train_fold(cases, bags, split, 0, AGG, cfg)
    np.testing.assert_array_equal(a.params, b.params)
    assert a.history == b.history
    assert a.best_iteration == b.best_iteration
    c = train_fold(cases, bags, split, 0, AGG, _quick_config(seed=1))
    assert np.any(a.params != c.params)


def test_train_fold_history_and_best():
    cases, bags, split = _dataset()
    cfg = _quick_config()
    result = train_fold(cases, bags, split, 0, AGG, cfg)
    assert [p.iteration for p in result.history] == [20, 40, 60]
    assert result.history[0].lr == 5e-3
    assert result.history[-1].lr == 2.5e-3  # halved once at iteration 40
    best = min(result.history, key=lambda p: (p.loss, p.iteration))
    assert result.best_loss == best.loss
    assert result.best_iteration == best.iteration


def test_train_fold_no_validation_returns_final():
    cases, bags, split = _dataset()
    cfg = _quick_config(total_iterations=10, validation_period=100)
    result = train_fold(cases, bags, split, 0, AGG, cfg)
    assert result.history == []
    assert result.best_iteration is None
    assert result.params.shape[0] > 0


def test_train_fold_learns_separable_data():
    cases, bags, split = _dataset()
    cfg = _quick_config(total_iterations=400, lr_halving_period=400)
    result = train_fold(cases, bags, split, 0, AGG, cfg)
    assert result.history[-1].loss < result.history[0].loss
    assert min(p.loss for p in result.history) < 0.4


def test_train_fold_errors():
    cases, bags, split = _dataset()
    with pytest.raises(ValidationError):
        train_fold(cases, bags, split, 7, AGG, _quick_config())
    missing = dict(bags)
    del missing[cases[0].case_id]
    with pytest.raises(ValidationError):
        train_fold(cases, missing, split, 0, AGG, _quick_config())


def test_train_ensemble_covers_folds():
    cases, bags, split = _dataset()
    results = train_ensemble(cases, bags, split, AGG, _quick_config())
    assert [r.fold_id for r in results] == [0, 1]
    bare = SplitAssignment(partition=split.partition, folds={})
    with pytest.raises(ValidationError):
        train_ensemble(cases, bags, bare, AGG, _quick_config())


def test_write_history_format(tmp_path):
    path = tmp_path / "history.csv"
    history = [
        ValidationPoint(iteration=200, loss=0.6931471805599453, lr=5e-4),
        ValidationPoint(iteration=400, loss=0.25, lr=5e-4),
    ]
    write_history(path, history, run_config={"seed": 3, "fold": 1})
    lines = path.read_text().splitlines()
    assert lines[0] == "# fold=1"
    assert lines[1] == "# seed=3"
    assert lines[2] == "iteration,validation_loss,lr"
    assert lines[3] == "200,0.6931471805599453,0.0005"
    assert lines[4] == "400,0.25,0.0005"
