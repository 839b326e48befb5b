import numpy as np
import pytest

from sfavfl.attack import (
    AdversaryView,
    Generator,
    GrnConfig,
    SweepRow,
    collect_views,
    paillier_clone,
    random_baseline,
    reconstruction_mse,
    train_grn,
    tradeoff_sweep,
)
from sfavfl.data import SyntheticTaskSpec, make_synthetic, train_test_split
from sfavfl.numeric import DenseLayer, InputError, Mlp, ShapeError, build_mlp, mlp_forward
from sfavfl.seeding import np_rng
from sfavfl.training import ExperimentConfig, VflModel


def identity_bottom(k):
    return Mlp([DenseLayer(np.eye(k))], ["identity"])


def uniform(shape, seed):
    return np.random.default_rng(seed).uniform(size=shape)


def constant_generator(active_width, signal_width, width_out):
    """Generator whose sigmoid output is 0.5 for every input."""
    layer = DenseLayer(np.zeros((width_out, active_width + signal_width)), np.zeros((1, width_out)))
    return Generator(Mlp([layer], ["sigmoid"]), np.zeros((1, signal_width)), np.ones((1, signal_width)))


# --- views ------------------------------------------------------------------


def test_view_checks_rows_and_variant():
    with pytest.raises(ShapeError):
        AdversaryView(np.zeros((3, 2)), np.zeros((4, 2)), identity_bottom(2))
    with pytest.raises(InputError):
        AdversaryView(np.zeros((3, 2)), np.zeros((3, 2)), identity_bottom(2), variant="attack-3")


def test_grn_rejects_unnormalised_features():
    view = AdversaryView(np.full((4, 2), 3.0), np.zeros((4, 2)), identity_bottom(2))
    with pytest.raises(InputError):
        train_grn(view, GrnConfig(epochs=1))


def test_grn_rejects_signal_width_mismatch():
    view = AdversaryView(uniform((4, 2), 0), np.zeros((4, 3)), identity_bottom(2))
    with pytest.raises(ShapeError):
        train_grn(view, GrnConfig(epochs=1))


# --- generator --------------------------------------------------------------


def test_zero_epochs_leaves_the_random_init():
    xa, xp = uniform((50, 3), 1), uniform((50, 4), 2)
    view = AdversaryView(xa, xp, identity_bottom(4))
    cfg = GrnConfig(epochs=0, seed=5)
    gen = train_grn(view, cfg)
    assert gen.history == []
    # rebuild the same init stream by hand
    init = build_mlp([7, 64, 64, 4], np_rng(5, "grn", "init"), activations=["relu", "relu", "sigmoid"])
    s = (xp - xp.mean(axis=0)) / xp.std(axis=0)
    x_hat = mlp_forward(init, np.hstack([xa, s]))[0]
    assert reconstruction_mse(gen, view, xp) == pytest.approx(float(np.mean((x_hat - xp) ** 2)), abs=1e-15)


def test_identity_bottom_attack_recovers_the_features():
    xa, xp = uniform((1000, 3), 3), uniform((1000, 5), 4)
    view = AdversaryView(xa, xp, identity_bottom(5))
    gen = train_grn(view, GrnConfig(epochs=60))
    assert gen.history[-1] < gen.history[0]
    assert reconstruction_mse(gen, view, xp) < 0.01


def test_training_is_seed_deterministic():
    xa, xp = uniform((100, 2), 5), uniform((100, 3), 6)
    view = AdversaryView(xa, xp, identity_bottom(3))
    a = train_grn(view, GrnConfig(epochs=3, seed=1))
    b = train_grn(view, GrnConfig(epochs=3, seed=1))
    assert a.history == b.history


# --- metrics ----------------------------------------------------------------


def test_exact_generator_scores_zero():
    xp = uniform((20, 3), 7)
    # feeding logit(x) through an identity layer and a sigmoid returns x
    logits = np.log(xp / (1 - xp))
    view = AdversaryView(np.zeros((20, 0)), logits, identity_bottom(3))
    gen = Generator(Mlp([DenseLayer(np.eye(3))], ["sigmoid"]), np.zeros((1, 3)), np.ones((1, 3)))
    assert reconstruction_mse(gen, view, xp) == pytest.approx(0.0, abs=1e-24)


def test_half_generator_on_uniform_data_is_one_twelfth():
    xp = uniform((20000, 5), 8)
    view = AdversaryView(np.zeros((20000, 1)), np.zeros((20000, 2)), identity_bottom(2))
    gen = constant_generator(1, 2, 5)
    assert reconstruction_mse(gen, view, xp) == pytest.approx(1 / 12, abs=0.002)


def test_reconstruction_shape_mismatch():
    view = AdversaryView(np.zeros((4, 1)), np.zeros((4, 2)), identity_bottom(2))
    with pytest.raises(ShapeError):
        reconstruction_mse(constant_generator(1, 2, 5), view, np.zeros((4, 4)))


def test_random_baseline_uniform_and_constant():
    assert random_baseline(uniform((2000, 10), 9)) == pytest.approx(1 / 6, abs=0.005)
    assert random_baseline(np.full((2000, 10), 0.5)) == pytest.approx(1 / 12, abs=0.005)


def test_random_baseline_seed_spread():
    xp = uniform((1000, 10), 10)
    vals = [random_baseline(xp, seed=s) for s in range(10)]
    assert np.std(vals) < 0.005
    assert len(set(vals)) == 10


def test_random_baseline_rejects_unnormalised():
    with pytest.raises(InputError):
        random_baseline(np.array([[1.5]]))


# --- protocol views ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_split():
    ds = make_synthetic(SyntheticTaskSpec(n_samples=200, n_features=8, seed=0))
    return train_test_split(ds, 0.8, 0)


def test_plain_view_is_the_passive_bottom_output(small_split):
    cfg = ExperimentConfig(protocol="splitnn", bottom_height=2, cut_width=6, hidden_width=8)
    model = VflModel(cfg, 8, 2)
    views = collect_views(model, small_split.test, ["plain"], batch_size=16)
    lead = model.parties[1]
    expected = mlp_forward(lead.bottom, small_split.test.x[:, 4:8])[0]
    assert np.max(np.abs(views["plain"].target_signal - expected)) < 1e-12
    with pytest.raises(InputError):
        collect_views(model, small_split.test, ["attack-1"])


@pytest.mark.slow
def test_masked_views_under_paillier(small_split):
    cfg = ExperimentConfig(cut_width=6, hidden_width=8)
    mock = VflModel(cfg, 8, 2, keep_plain_mask=True)
    with pytest.raises(InputError):
        collect_views(mock, small_split.test, ["attack-1"])
    probe = paillier_clone(mock, 512)
    ds = small_split.test.subset(np.arange(16))
    views = collect_views(probe, ds, ["attack-1", "attack-2"], batch_size=8)
    xa, xp = ds.x[:, 0:4], ds.x[:, 4:8]
    # attack-2 strips Mask_A, leaving the passive output plus the weight-mask term
    w_mask = mock.parties[1].w_mask_plain
    expected = xp @ probe.parties[1].bottom.layers[0].weight.T + xa @ w_mask.T
    assert np.max(np.abs(views["attack-2"].target_signal - expected)) <= 8 * 2.0**-19
    # attack-1 still carries the ring-uniform share of the active party
    assert np.min(np.abs(views["attack-1"].target_signal)) > 1e100
    assert views["attack-1"].calibrate and not views["attack-2"].calibrate


@pytest.mark.slow
def test_sweep_rows_contract(small_split):
    cfg = ExperimentConfig(cut_width=6, hidden_width=8, epochs=1, batch_size=32, learning_rate=0.05)
    rows = tradeoff_sweep(
        [1, 3, 5], small_split, ["splitnn", "sfa"], cfg, GrnConfig(epochs=2),
        attack_train=24, attack_test=16,
    )
    assert len(rows) == 6
    assert {(r.height, r.protocol) for r in rows} == {(h, p) for h in (1, 3, 5) for p in ("splitnn", "sfa")}
    for r in rows:
        assert isinstance(r, SweepRow)
        assert len(r.as_tuple()) == len(SweepRow.FIELDS)
        assert 0.0 <= r.test_acc <= 1.0 and r.attack_mse >= 0.0 and r.baseline_mse > 0.0
        assert r.variant in (("plain",) if r.protocol == "splitnn" else ("attack-1", "attack-2"))
    both = tradeoff_sweep([1], small_split, ["sfa"], cfg, GrnConfig(epochs=1), attack_train=8, attack_test=8, all_variants=True)
    assert [r.variant for r in both] == ["attack-1", "attack-2"]


def test_sweep_errors_carry_point_context(small_split):
    cfg = ExperimentConfig(cut_width=6, hidden_width=8, epochs=1, total_layers=3)
    with pytest.raises(RuntimeError, match="height=5 protocol=splitnn"):
        tradeoff_sweep([5], small_split, ["splitnn"], cfg, GrnConfig(epochs=1))
