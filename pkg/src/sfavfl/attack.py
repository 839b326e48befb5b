"""Generative-regression-network (GRN) feature inference against the cut layer.

The adversary is the active party. It knows its own features ``x_active``,
whatever signal arrives from the lead passive party, and (white-box) a frozen
copy of that party's bottom model. A generator maps ``(x_active, signal)`` to
a guess ``x_hat`` of the passive features and is trained so that
``bottom(x_hat)`` reproduces the observed signal; it never sees the true
passive features.

Signal variants:

``plain``
    SplitNN: the unmasked bottom output ``Z_p0``.
``attack-1``
    SFA: the masked share ``Z_P0`` as received (ring-uniform; centered lift).
``attack-2``
    SFA: ``Z_P0 + Mask_A``, i.e. the passive output protected only by ``Mask``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, Split
from .numeric import InputError, LayerGrad, Mlp, ShapeError, as_matrix, build_mlp, mlp_backward, mlp_forward, mse_loss
from .protocol import CutLayerMode, PartyState
from .seeding import np_rng, py_rng
from .training import ExperimentConfig, VflModel, train_vfl

logger = logging.getLogger(__name__)

VARIANTS = ("plain", "attack-1", "attack-2")


@dataclass
class AdversaryView:
    x_active: np.ndarray
    target_signal: np.ndarray
    bottom_model_p0: Mlp
    variant: str = "plain"
    # ring-uniform signals are ~2^470 after lifting; rescale before use
    calibrate: bool = False

    def __post_init__(self):
        self.x_active = as_matrix(self.x_active)
        self.target_signal = as_matrix(self.target_signal)
        if self.x_active.shape[0] != self.target_signal.shape[0]:
            raise ShapeError("x_active and target_signal disagree on row count")
        if self.variant not in VARIANTS:
            raise InputError(f"unknown attack variant {self.variant!r}")


@dataclass
class GrnConfig:
    hidden_width: int = 64
    layers: int = 3
    epochs: int = 60
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class Generator:
    model: Mlp
    signal_mean: np.ndarray
    signal_std: np.ndarray
    history: list = field(default_factory=list)

    def inputs(self, view: AdversaryView) -> np.ndarray:
        s = (view.target_signal - self.signal_mean) / self.signal_std
        return np.hstack([view.x_active, s])

    def generate(self, view: AdversaryView) -> np.ndarray:
        return mlp_forward(self.model, self.inputs(view))[0]


class Adam:
    def __init__(self, model: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [[np.zeros_like(l.weight), None if l.bias is None else np.zeros_like(l.bias)] for l in model.layers]
        self.v = [[np.zeros_like(l.weight), None if l.bias is None else np.zeros_like(l.bias)] for l in model.layers]

    def step(self, model: Mlp, grads: Sequence[LayerGrad]) -> Mlp:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        out = model.copy()
        for k, (layer, g) in enumerate(zip(out.layers, grads)):
            for slot, (param, grad) in enumerate(((layer.weight, g.weight), (layer.bias, g.bias))):
                if param is None:
                    continue
                m = self.m[k][slot] = self.b1 * self.m[k][slot] + (1 - self.b1) * grad
                v = self.v[k][slot] = self.b2 * self.v[k][slot] + (1 - self.b2) * grad * grad
                param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def _check_unit_range(x: np.ndarray, what: str) -> None:
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InputError(f"{what} must be normalised into [0, 1]")


def _probe_stats(bottom: Mlp, seed: int, n: int = 4096):
    probes = np_rng(seed, "grn", "probe").uniform(size=(n, bottom.in_features))
    out = mlp_forward(bottom, probes)[0]
    return out.mean(axis=0), out.std(axis=0) + 1e-12


def _column_stats(s: np.ndarray):
    mean = s.mean(axis=0)
    std = s.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def train_grn(view: AdversaryView, cfg: GrnConfig) -> Generator:
    """Fit a generator with loss MSE(bottom(generator(x_active, signal)), signal)."""
    _check_unit_range(view.x_active, "active features")
    bottom = view.bottom_model_p0
    if view.target_signal.shape[1] != bottom.out_features:
        raise ShapeError("signal width must equal the bottom model output width")
    mean, std = _column_stats(view.target_signal)
    target = view.target_signal
    if view.calibrate:
        p_mean, p_std = _probe_stats(bottom, cfg.seed)
        target = (target - mean) / std * p_std + p_mean
    widths = [view.x_active.shape[1] + bottom.out_features]
    widths += [cfg.hidden_width] * (cfg.layers - 1) + [bottom.in_features]
    gen_model = build_mlp(
        widths,
        np_rng(cfg.seed, "grn", "init"),
        activations=["relu"] * (cfg.layers - 1) + ["sigmoid"],
    )
    gen = Generator(gen_model, mean, std)
    inputs = gen.inputs(view)
    opt = Adam(gen_model, cfg.learning_rate)
    n = inputs.shape[0]
    for epoch in range(cfg.epochs):
        order = np_rng(cfg.seed, "grn", "batches", epoch).permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x_hat, g_cache = mlp_forward(gen.model, inputs[idx])
            z_hat, b_cache = mlp_forward(bottom, x_hat)
            loss, g = mse_loss(z_hat, target[idx])
            g_x, _ = mlp_backward(bottom, b_cache, g)
            _, grads = mlp_backward(gen.model, g_cache, g_x)
            gen.model = opt.step(gen.model, grads)
            total += loss * len(idx)
        gen.history.append(total / n)
    return gen


def reconstruction_mse(generator: Generator, view: AdversaryView, x_passive_true) -> float:
    x_true = as_matrix(x_passive_true)
    x_hat = generator.generate(view)
    if x_hat.shape != x_true.shape:
        raise ShapeError(f"generated {x_hat.shape} vs true {x_true.shape}")
    return float(np.mean((x_hat - x_true) ** 2))


def random_baseline(x_passive_true, seed: int = 0) -> float:
    """MSE of uniform(0, 1) guesses against the true passive features."""
    x_true = as_matrix(x_passive_true)
    _check_unit_range(x_true, "passive features")
    guess = np_rng(seed, "baseline").uniform(size=x_true.shape)
    return float(np.mean((guess - x_true) ** 2))


def lead_columns(model: VflModel) -> tuple:
    return model.parties[1].columns


def collect_views(model: VflModel, ds: Dataset, variants: Sequence[str], batch_size: int = 64) -> dict:
    """Run the model's protocol over ``ds`` and build one view per variant.

    SplitNN models only expose ``plain``; SFA models expose ``attack-1`` and
    ``attack-2`` and must run in Paillier mode so the masks are ring-uniform.
    """
    sfa = model.config.mode is CutLayerMode.SFA_SUM
    for v in variants:
        if (v == "plain") == sfa:
            raise InputError(f"variant {v!r} does not apply to {model.config.protocol}")
    if sfa and model.session.backend.name != "paillier":
        raise InputError("SFA attack views need a Paillier-mode model")
    lo, hi = model.active.columns
    lead = model.parties[1]
    cut = lead.bottom.out_features
    chunks = {v: [] for v in variants}
    for i in range(0, len(ds), batch_size):
        xb = ds.x[i : i + batch_size]
        model.forward(xb)
        res = model.last_forward
        if not sfa:
            width0 = model.active.bottom.out_features
            chunks["plain"].append(res.z[:, width0 : width0 + cut])
            continue
        backend = model.session.backend
        codec, scale = backend.codec, backend.product_scale
        received = res.active_view.received[lead.party_id]
        if "attack-1" in chunks:
            chunks["attack-1"].append(codec.decode_matrix(received, scale))
        if "attack-2" in chunks:
            combined = backend.add(received, res.active_view.mask_a)
            chunks["attack-2"].append(codec.decode_matrix(combined, scale))
    bottom = lead.bottom.copy()
    x_active = ds.x[:, lo:hi]
    return {
        v: AdversaryView(x_active, np.vstack(chunks[v]), bottom, v, calibrate=(v == "attack-1"))
        for v in variants
    }


@dataclass
class SweepRow:
    height: int
    protocol: str
    variant: str
    test_acc: float
    attack_mse: float
    baseline_mse: float
    seed: int

    FIELDS = ("height", "protocol", "variant", "test_acc", "attack_mse", "baseline_mse", "seed")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in self.FIELDS)


def paillier_clone(model: VflModel, key_bits: int) -> VflModel:
    """Same trained weights and weight mask, re-keyed under real Paillier."""
    parties = []
    for p in model.parties:
        parties.append(
            PartyState(
                party_id=p.party_id,
                role=p.role,
                bottom=p.bottom.copy(),
                columns=p.columns,
                top=None if p.top is None else p.top.copy(),
                ring_rng=py_rng(model.config.seed, "party", p.party_id, "ring", "attack"),
            )
        )
    cfg = replace(model.config, he_mode="paillier", key_bits=key_bits)
    return VflModel(cfg, model.n_features, model.n_classes, parties=parties)


def attack_point(
    config: ExperimentConfig,
    split: Split,
    grn: GrnConfig,
    target_acc: Optional[float] = 0.9,
    attack_train: int = 400,
    attack_test: int = 200,
    key_bits: int = 512,
    variants: Optional[Sequence[str]] = None,
) -> list:
    """Train one model (mock HE) to the accuracy target, then attack it.

    Returns one :class:`SweepRow` per attack variant.
    """
    n_classes = split.n_classes
    train_cfg = replace(config, he_mode="mock")
    model = VflModel(train_cfg, split.train.n_features, n_classes)
    stop = None
    if target_acc is not None:
        stop = lambda rec, _m: rec.test_accuracy >= target_acc  # noqa: E731
    records = train_vfl(train_cfg, split.train, split.test, model=model, callback=stop)
    test_acc = records[-1].test_accuracy if records else model.evaluate(split.test)

    sfa = config.mode is CutLayerMode.SFA_SUM
    if variants is None:
        variants = ("attack-1", "attack-2") if sfa else ("plain",)
    probe = paillier_clone(model, key_bits) if sfa else model
    a_train = split.train.subset(np.arange(min(attack_train, len(split.train))))
    a_test = split.test.subset(np.arange(min(attack_test, len(split.test))))
    train_views = collect_views(probe, a_train, variants)
    test_views = collect_views(probe, a_test, variants)
    lo, hi = model.parties[1].columns
    x_true = a_test.x[:, lo:hi]
    baseline = random_baseline(x_true, config.seed)
    rows = []
    for v in variants:
        gen = train_grn(train_views[v], replace(grn, seed=config.seed))
        mse = reconstruction_mse(gen, test_views[v], x_true)
        rows.append(SweepRow(config.height, "sfa" if sfa else "splitnn", v, test_acc, mse, baseline, config.seed))
        logger.info("height %d %s %s: acc %.3f mse %.4f baseline %.4f", config.height, config.protocol, v, test_acc, mse, baseline)
    return rows


def tradeoff_sweep(
    heights: Sequence[int],
    split: Split,
    protocols: Sequence[str],
    config: ExperimentConfig,
    grn: GrnConfig,
    seeds: Sequence[int] = (0,),
    target_acc: Optional[float] = 0.9,
    attack_train: int = 400,
    attack_test: int = 200,
    key_bits: int = 512,
    all_variants: bool = False,
    jobs: int = 1,
) -> list:
    """Accuracy and reconstruction MSE per (bottom height, protocol, seed).

    SFA points are attacked with both masked variants; unless
    ``all_variants`` is set only the stronger one (lower MSE) is reported, so
    the table has one row per point.
    """
    points = [
        replace(config, protocol=p, bottom_height=h, seed=s)
        for s in seeds
        for h in heights
        for p in protocols
    ]
    args = (split, grn, target_acc, attack_train, attack_test, key_bits)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, points, *[[a] * len(points) for a in args]))
    else:
        results = [_sweep_point(p, *args) for p in points]
    rows = []
    for point_rows in results:
        if all_variants:
            rows.extend(point_rows)
        else:
            rows.append(min(point_rows, key=lambda r: r.attack_mse))
    return rows


def _sweep_point(config, split, grn, target_acc, attack_train, attack_test, key_bits):
    try:
        return attack_point(config, split, grn, target_acc, attack_train, attack_test, key_bits)
    except Exception as exc:
        raise RuntimeError(
            f"sweep point height={config.height} protocol={config.protocol} seed={config.seed}: {exc}"
        ) from exc
