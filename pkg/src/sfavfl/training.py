"""End-to-end VFL training and the centralized reference model."""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import he
from .data import Dataset
from .numeric import (
    DenseLayer,
    Mlp,
    accuracy,
    build_mlp,
    init_dense,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax_cross_entropy,
)
from .protocol import (
    CutLayerMode,
    PartyRole,
    PartyState,
    Session,
    assign_keypair,
    backward_route,
    cut_forward,
    sfa_init,
)
from .seeding import np_rng, py_rng

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A protocol or numeric failure, tagged with the epoch and batch index."""


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key


@dataclass
class ExperimentConfig:
    protocol: str = "sfa"
    total_layers: int = 6
    hidden_width: int = 64
    cut_width: int = 64
    bottom_height: Optional[int] = None
    party_count: int = 2
    feature_partition: Optional[list] = None
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.01
    seed: int = 0
    he_mode: str = "mock"
    key_bits: int = he.DEFAULT_KEY_BITS
    fraction_bits: int = he.DEFAULT_FRACTION_BITS
    mask_scale: float = 1.0
    deterministic: bool = True
    verbose: bool = False

    @property
    def mode(self) -> CutLayerMode:
        return CutLayerMode.parse(self.protocol)

    @property
    def height(self) -> int:
        if self.bottom_height is not None:
            return self.bottom_height
        return 1 if self.mode is CutLayerMode.SFA_SUM else 5

    def partition(self, n_features: int) -> list:
        if self.feature_partition is not None:
            return [tuple(r) for r in self.feature_partition]
        sizes = [len(a) for a in np.array_split(np.arange(n_features), self.party_count)]
        edges = np.cumsum([0] + sizes)
        return [(int(edges[k]), int(edges[k + 1])) for k in range(self.party_count)]

    def validate(self, n_features: Optional[int] = None) -> "ExperimentConfig":
        try:
            self.mode
        except ValueError as exc:
            raise ConfigError("protocol", str(exc)) from None
        if self.he_mode not in ("mock", "paillier"):
            raise ConfigError("he_mode", f"expected mock or paillier, got {self.he_mode!r}")
        if self.total_layers < 2:
            raise ConfigError("total_layers", "need at least two layers")
        if not 1 <= self.height < self.total_layers:
            raise ConfigError("bottom_height", f"must lie in [1, {self.total_layers})")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")
        if self.party_count < 1:
            raise ConfigError("party_count", "must be at least 1")
        if self.mode is CutLayerMode.SFA_SUM and self.party_count < 2:
            raise ConfigError("party_count", "SFA needs at least one passive party")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be non-negative")
        if self.key_bits < he.TEST_KEY_BITS:
            raise ConfigError("key_bits", f"must be at least {he.TEST_KEY_BITS}")
        if n_features is not None:
            parts = self.partition(n_features)
            if len(parts) != self.party_count:
                raise ConfigError("feature_partition", f"{len(parts)} ranges for {self.party_count} parties")
            covered = []
            for lo, hi in parts:
                if not 0 <= lo < hi <= n_features:
                    raise ConfigError("feature_partition", f"range {lo}:{hi} invalid for {n_features} features")
                covered.extend(range(lo, hi))
            if sorted(covered) != list(range(n_features)):
                raise ConfigError("feature_partition", "ranges must be disjoint and cover every feature")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    wall_time: float


def _bottom_widths(config: ExperimentConfig, in_features: int) -> list:
    return [in_features] + [config.hidden_width] * (config.height - 1) + [config.cut_width]


def _bottom_model(config: ExperimentConfig, party_id: int, in_features: int) -> Mlp:
    # the cut projection carries no bias; it is the W of Z = W X
    h = config.height
    return build_mlp(
        _bottom_widths(config, in_features),
        np_rng(config.seed, "party", party_id, "bottom"),
        biases=[True] * (h - 1) + [False],
    )


def _top_model(config: ExperimentConfig, cut_in: int, n_classes: int) -> Mlp:
    top_layers = config.total_layers - config.height
    widths = [cut_in] + [config.hidden_width] * (top_layers - 1) + [n_classes]
    return build_mlp(widths, np_rng(config.seed, "top"))


def build_parties(config: ExperimentConfig, n_features: int, n_classes: int) -> list:
    """Party 0 is active (bottom + top); with SFA party 1 is the lead passive party."""
    config.validate(n_features)
    parts = config.partition(n_features)
    sfa = config.mode is CutLayerMode.SFA_SUM
    parties = []
    for k, (lo, hi) in enumerate(parts):
        if k == 0:
            role = PartyRole.ACTIVE
        elif k == 1 and sfa:
            role = PartyRole.PASSIVE_LEAD
        else:
            role = PartyRole.PASSIVE
        parties.append(
            PartyState(
                party_id=k,
                role=role,
                bottom=_bottom_model(config, k, hi - lo),
                columns=(lo, hi),
                ring_rng=py_rng(config.seed, "party", k, "ring"),
            )
        )
    cut_in = config.cut_width if sfa else config.cut_width * len(parties)
    parties[0].top = _top_model(config, cut_in, n_classes)
    return parties


def build_centralized(config: ExperimentConfig, n_features: int, n_classes: int) -> Mlp:
    """Same depth and widths with the cut realised as one layer over all features.

    For bottom height 1 the first layer is assembled from exactly the blocks
    ``build_parties`` draws, and the top uses the same stream, so the only
    difference from SFA-NN at initialisation is the weight mask.
    """
    config.validate(n_features)
    h = config.height
    if h == 1:
        blocks = [
            init_dense(np_rng(config.seed, "party", k, "bottom"), hi - lo, config.cut_width, False).weight
            for k, (lo, hi) in enumerate(config.partition(n_features))
        ]
        bottom = Mlp([DenseLayer(np.hstack(blocks))], ["relu"])
    else:
        bottom = build_mlp(
            _bottom_widths(config, n_features),
            np_rng(config.seed, "centralized"),
            activations=["relu"] * h,
            biases=[True] * (h - 1) + [False],
        )
    top = _top_model(config, config.cut_width, n_classes)
    return Mlp(bottom.layers + top.layers, bottom.activations + top.activations)


class VflModel:
    """A protocol session plus the active party's top model."""

    def __init__(
        self,
        config: ExperimentConfig,
        n_features: int,
        n_classes: int,
        parties: Optional[list] = None,
        capture: bool = False,
        keep_plain_mask: bool = False,
        record_secrets: bool = False,
    ):
        self.config = config.validate(n_features)
        self.n_features = n_features
        self.n_classes = n_classes
        if parties is None:
            parties = build_parties(config, n_features, n_classes)
        if not config.deterministic:
            for p in parties:
                p.ring_rng = random.SystemRandom()
        self.session = Session(
            parties,
            config.mode,
            he_mode=config.he_mode,
            seed=config.seed,
            fraction_bits=config.fraction_bits,
            mask_scale=config.mask_scale,
            deterministic=config.deterministic,
            capture=capture,
            keep_plain_mask=keep_plain_mask,
            record_secrets=record_secrets,
        )
        if config.mode is CutLayerMode.SFA_SUM:
            if config.he_mode == "paillier":
                assign_keypair(self.session, config.key_bits)
            sfa_init(self.session)
        self._top_cache = None
        self._cut = None
        self.last_forward = None

    @property
    def parties(self) -> list:
        return self.session.parties

    @property
    def active(self) -> PartyState:
        return self.session.active

    @property
    def top(self) -> Mlp:
        return self.active.top

    def slices(self, x) -> list:
        return [x[:, lo:hi] for lo, hi in (p.columns for p in self.parties)]

    def forward(self, x, train: bool = False) -> np.ndarray:
        result = cut_forward(self.session, self.slices(x), train)
        self.last_forward = result
        z = result.z
        h = np.maximum(z, 0.0)
        logits, cache = mlp_forward(self.top, h)
        if train:
            self._top_cache, self._cut = cache, z
        return logits

    def train_step(self, x, y, learning_rate: float) -> tuple:
        logits = self.forward(x, train=True)
        loss, grad = softmax_cross_entropy(logits, y)
        grad_h, top_grads = mlp_backward(self.top, self._top_cache, grad)
        grad_cut = grad_h * (self._cut > 0)
        backward_route(self.session, grad_cut, learning_rate)
        self.active.top = sgd_step(self.top, top_grads, learning_rate)
        self._top_cache = self._cut = None
        return loss, accuracy(logits, y)

    def logits(self, x, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.vstack(out) if out else np.zeros((0, self.n_classes))

    def evaluate(self, ds: Dataset, batch_size: int = 256) -> float:
        return accuracy(self.logits(ds.x, batch_size), ds.y)


class CentralizedModel:
    def __init__(self, config: ExperimentConfig, n_features: int, n_classes: int, model: Optional[Mlp] = None):
        self.config = config
        self.model = model if model is not None else build_centralized(config, n_features, n_classes)

    def train_step(self, x, y, learning_rate: float) -> tuple:
        logits, cache = mlp_forward(self.model, x)
        loss, grad = softmax_cross_entropy(logits, y)
        _, grads = mlp_backward(self.model, cache, grad)
        self.model = sgd_step(self.model, grads, learning_rate)
        return loss, accuracy(logits, y)

    def logits(self, x, batch_size: int = 256) -> np.ndarray:
        return mlp_forward(self.model, x)[0]

    def evaluate(self, ds: Dataset, batch_size: int = 256) -> float:
        return accuracy(self.logits(ds.x), ds.y)


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np_rng(seed, "batches", epoch).permutation(n)


def _fit(model, config: ExperimentConfig, train: Dataset, test: Dataset, callback=None) -> list:
    records = []
    start = time.perf_counter()
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = batch_order(config.seed, epoch, len(train))
        loss_sum = acc_sum = 0.0
        for b, i in enumerate(range(0, len(train), bs)):
            idx = order[i : i + bs]
            try:
                loss, acc = model.train_step(train.x[idx], train.y[idx], config.learning_rate)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            loss_sum += loss * len(idx)
            acc_sum += acc * len(idx)
            if config.verbose:
                logger.info("epoch %d batch %d loss %.5f acc %.4f", epoch, b, loss, acc)
        rec = MetricsRecord(
            epoch,
            loss_sum / len(train),
            acc_sum / len(train),
            model.evaluate(test, bs),
            time.perf_counter() - start,
        )
        records.append(rec)
        if callback is not None and callback(rec, model):
            break
    return records


def train_vfl(
    config: ExperimentConfig, train: Dataset, test: Dataset, model: Optional[VflModel] = None, callback=None
) -> list:
    """Train SplitNN or SFA-NN; returns one :class:`MetricsRecord` per epoch.

    ``callback(record, model)`` runs after every epoch and may return True to
    stop early (used for accuracy-target training before an attack).
    """
    n_classes = max(train.n_classes, test.n_classes)
    if model is None:
        model = VflModel(config, train.n_features, n_classes)
    return _fit(model, config, train, test, callback)


def train_centralized(
    config: ExperimentConfig, train: Dataset, test: Dataset, model: Optional[CentralizedModel] = None, callback=None
) -> list:
    n_classes = max(train.n_classes, test.n_classes)
    if model is None:
        model = CentralizedModel(config, train.n_features, n_classes)
    return _fit(model, config, train, test, callback)


@dataclass
class EquivalenceReport:
    steps: int
    max_param_divergence: float
    max_logit_divergence: float
    vfl_test_accuracy: float
    centralized_test_accuracy: float
    per_step: list = field(default_factory=list, repr=False)

    @property
    def accuracy_gap(self) -> float:
        return abs(self.vfl_test_accuracy - self.centralized_test_accuracy)


def matched_twin(model: VflModel) -> CentralizedModel:
    """Centralized model whose cut weight is [W_A + W_mask | W_P0 | ...]."""
    lead = model.parties[1]
    if lead.w_mask_plain is None:
        raise ConfigError("keep_plain_mask", "the twin needs the plaintext weight mask")
    blocks = []
    for p in model.parties:
        w = p.bottom.layers[0].weight
        blocks.append(w + lead.w_mask_plain if p is model.active else w)
    first = DenseLayer(np.hstack(blocks))
    top = model.top.copy()
    mlp = Mlp([first] + top.layers, ["relu"] + top.activations)
    return CentralizedModel(model.config, model.n_features, model.n_classes, mlp)


def param_divergence(model: VflModel, twin: CentralizedModel) -> float:
    lead = model.parties[1]
    worst = 0.0
    col = 0
    first = twin.model.layers[0].weight
    for p in model.parties:
        w = p.bottom.layers[0].weight
        if p is model.active:
            w = w + lead.w_mask_plain
        block = first[:, col : col + w.shape[1]]
        worst = max(worst, float(np.max(np.abs(w - block))))
        col += w.shape[1]
    for a, b in zip(model.top.layers, twin.model.layers[1:]):
        worst = max(worst, float(np.max(np.abs(a.weight - b.weight))))
        if a.bias is not None:
            worst = max(worst, float(np.max(np.abs(a.bias - b.bias))))
    return worst


def equivalence_check(
    config: ExperimentConfig, train: Dataset, test: Dataset, epochs: Optional[int] = None, track_steps: bool = False
) -> EquivalenceReport:
    """Train SFA-NN and its matched centralized twin side by side.

    Both see identical batches and learning rates; the divergence is the
    largest absolute difference between the effective SFA weights and the
    twin's weights at any step.
    """
    if config.mode is not CutLayerMode.SFA_SUM:
        raise ConfigError("protocol", "equivalence is defined for SFA only")
    if config.height != 1:
        raise ConfigError("bottom_height", "equivalence requires bottom height 1")
    n_classes = max(train.n_classes, test.n_classes)
    model = VflModel(config, train.n_features, n_classes, keep_plain_mask=True)
    twin = matched_twin(model)
    epochs = config.epochs if epochs is None else epochs
    bs = config.batch_size
    worst = param_divergence(model, twin)
    per_step = []
    steps = 0
    for epoch in range(1, epochs + 1):
        order = batch_order(config.seed, epoch, len(train))
        for i in range(0, len(train), bs):
            idx = order[i : i + bs]
            model.train_step(train.x[idx], train.y[idx], config.learning_rate)
            twin.train_step(train.x[idx], train.y[idx], config.learning_rate)
            d = param_divergence(model, twin)
            worst = max(worst, d)
            steps += 1
            if track_steps:
                per_step.append(d)
    vfl_logits = model.logits(test.x, bs)
    twin_logits = twin.logits(test.x)
    return EquivalenceReport(
        steps=steps,
        max_param_divergence=worst,
        max_logit_divergence=float(np.max(np.abs(vfl_logits - twin_logits))) if len(test) else 0.0,
        vfl_test_accuracy=accuracy(vfl_logits, test.y),
        centralized_test_accuracy=accuracy(twin_logits, test.y),
        per_step=per_step,
    )


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **kw)
