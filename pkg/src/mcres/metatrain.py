"""Meta-optimisation loop: virtual training, virtual testing, meta update.

Every epoch the training corpus is re-split into a virtual training set and
per-level virtual testing sets. Each iteration draws a virtual testing batch,
a virtual training batch covering the components of its novel compositions,
takes a virtual step on the training batch, measures the testing losses at
the stepped parameters and finally updates the real parameters with the
gradient of the combined objective.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .compositions import LEVELS, Level
from .model import (
    DTYPE, THRESHOLDS, Batch, ModelConfig, NonFiniteGradient, SampleStore, checksum,
    forward, grad, init_params, loss, meta_gradient, objective, oiou, precision_at,
    save_checkpoint,
)
from .splitter import (
    ComponentInventory, CoverIndex, CurriculumSchedule, NoNovelCompositions, PairingFailed,
    Sample, VirtualSplit, build_vocab, construct_split, pair_batches,
)

log = logging.getLogger(__name__)

TESTING_SET_MODES = ("per-level", "merged", "random")
OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1.0
    beta: float = 5e-3
    epochs: int = 24
    batch_size_tr: int = 32
    batch_size_te: int = 32
    vtr_fraction: float = 0.6
    curriculum: bool = True
    testing_set_mode: str = "per-level"
    levels: tuple[str, ...] = ("WW", "WP", "PP")
    meta: bool = True
    first_order: bool = False
    optimizer: str = "adam"
    momentum: float = 0.9
    iterations_per_epoch: int | None = None
    baseline_updates: int | None = None
    embed_dim: int = 16
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not 0.0 < self.vtr_fraction < 1.0:
            raise ValueError("vtr_fraction must lie in (0, 1)")
        if self.testing_set_mode not in TESTING_SET_MODES:
            raise ValueError(f"testing_set_mode must be one of {TESTING_SET_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        object.__setattr__(self, "levels", tuple(Level(lv).value for lv in self.levels))

    @property
    def enabled_levels(self) -> tuple[Level, ...]:
        return tuple(lv for lv in LEVELS if lv.value in self.levels)


def subseed(root: int, *names) -> int:
    """Named child seed, e.g. ``subseed(seed, "split", epoch)``."""
    blob = "/".join(str(x) for x in (root,) + names).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


# --------------------------------------------------------------------------
# optimisers over the flat parameter vector

class Optimizer:
    """Plain descent, heavy-ball momentum or Adam, all driven by one step size."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self._param: torch.nn.Parameter | None = None
        self._opt: torch.optim.Optimizer | None = None

    def step(self, theta: torch.Tensor, gradient: torch.Tensor) -> torch.Tensor:
        if self.kind == "sgd":
            return theta - self.lr * gradient
        if self._param is None:
            self._param = torch.nn.Parameter(theta.detach().clone())
            if self.kind == "adam":
                self._opt = torch.optim.Adam([self._param], lr=self.lr)
            else:
                self._opt = torch.optim.SGD([self._param], lr=self.lr, momentum=self.momentum)
        with torch.no_grad():
            self._param.copy_(theta)
        self._param.grad = gradient.detach().clone()
        self._opt.step()
        return self._param.detach().clone()


# --------------------------------------------------------------------------
# the three steps

def virtual_train_step(theta: torch.Tensor, train_fn: Callable[[torch.Tensor], torch.Tensor],
                       alpha: float) -> tuple[torch.Tensor, float]:
    """theta' = theta - alpha * grad L_vtr(theta). ``theta`` itself is left untouched."""
    r = grad(theta, train_fn)
    return theta.detach() - alpha * r.gradient, r.loss


def virtual_test(adapted: torch.Tensor, test_fns: Mapping[str, Callable[[torch.Tensor], torch.Tensor]]) -> dict[str, float]:
    with torch.no_grad():
        return {k: float(fn(adapted.detach())) for k, fn in test_fns.items()}


def meta_update(theta: torch.Tensor, train_fn, test_fns, alpha: float, beta: float,
                first_order: bool = False, optimizer: Optimizer | None = None):
    """One real parameter update on the combined objective. Returns (theta_new, MetaGradientResult)."""
    res = meta_gradient(theta, train_fn, test_fns, alpha, first_order=first_order)
    if optimizer is None:
        return theta.detach() - beta * res.gradient, res
    return optimizer.step(theta, res.gradient), res


# --------------------------------------------------------------------------
# reports

@dataclass
class TrainStepReport:
    epoch: int
    iteration: int
    train_loss: float
    test_losses: dict[str, float]
    grad_norm: float
    active_levels: list[str]
    cover_size: int = 0
    retries: int = 0
    theta_checksum: str = ""
    virtual_checksum_ok: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    theta: torch.Tensor
    model_config: ModelConfig
    steps: list[TrainStepReport] = field(default_factory=list)
    splits: list[VirtualSplit] = field(default_factory=list)
    epoch_checkpoints: list[torch.Tensor] = field(default_factory=list)
    pairing_failures: int = 0
    total_updates: int = 0


def model_config_for(train_corpus: Sequence[Sample], shapes: Sequence[str], colors: Sequence[str],
                     meta: MetaConfig, height: int = 16, width: int = 16) -> ModelConfig:
    return ModelConfig(build_vocab(train_corpus).words, tuple(shapes), tuple(colors), height, width,
                       meta.embed_dim, meta.hidden)


def _randomize(split: VirtualSplit, seed: int) -> VirtualSplit:
    """Same-sized testing sets drawn uniformly from the candidates, without annotations."""
    rng = np.random.default_rng(seed)
    cands = np.array(split.candidate_ids)
    vte = {}
    for lv in LEVELS:
        n = min(len(split.vte_ids.get(lv, ())), len(cands))
        vte[lv] = tuple(sorted(cands[rng.choice(len(cands), size=n, replace=False)].tolist()))
    return replace(split, vte_ids=vte, annotations={})


def _pools(split: VirtualSplit, mode: str, active: Sequence[Level]) -> dict[str, tuple[str, ...]]:
    if mode == "merged":
        merged = sorted({i for lv in active for i in split.vte_ids.get(lv, ())})
        return {"merged": tuple(merged)} if merged else {}
    return {lv.value: split.vte_ids[lv] for lv in active if split.vte_ids.get(lv)}


def train(config: MetaConfig, corpus: Sequence[Sample], model_config: ModelConfig,
          store: SampleStore | None = None, on_epoch: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Meta-train from scratch. Deterministic given ``config.seed``."""
    store = store or SampleStore(corpus, model_config)
    by_id = {s.id: s for s in corpus}
    theta = init_params(model_config, subseed(config.seed, "init"))
    opt = Optimizer(config.optimizer, config.beta, config.momentum)
    schedule = CurriculumSchedule(config.epochs, config.curriculum)
    result = TrainResult(theta, model_config)

    for epoch in range(config.epochs):
        split = construct_split(corpus, config.vtr_fraction, subseed(config.seed, "split", epoch), epoch=epoch)
        if config.testing_set_mode == "random":
            split = _randomize(split, subseed(config.seed, "random-sets", epoch))
        result.splits.append(split)
        cover = CoverIndex([by_id[i] for i in split.vtr_ids])
        if config.testing_set_mode == "merged":
            active = config.enabled_levels
        else:
            active = tuple(lv for lv in schedule.levels(epoch) if lv in config.enabled_levels)
        pools = _pools(split, config.testing_set_mode, active)
        n_iter = config.iterations_per_epoch or math.ceil(len(split.vtr_ids) / config.batch_size_tr)
        if not pools:
            log.warning("epoch %d: no usable virtual testing set; skipping", epoch)

        for it in range(n_iter if pools else 0):
            try:
                pb = pair_batches(split, active, config.batch_size_te, config.batch_size_tr,
                                  subseed(config.seed, "batch", epoch, it), cover, pools=pools)
            except (PairingFailed, NoNovelCompositions) as e:
                result.pairing_failures += 1
                log.warning("epoch %d iteration %d: %s", epoch, it, e)
                continue
            train_fn = objective(store.batch(pb.train), model_config)
            test_fns = {k: objective(store.batch(v), model_config) for k, v in pb.test.items() if v}
            before = checksum(theta)
            try:
                if config.meta:
                    theta_new, res = meta_update(theta, train_fn, test_fns, config.alpha, config.beta,
                                                 config.first_order, opt)
                    train_loss, test_losses, gnorm = res.train_loss, res.test_losses, float(res.gradient.norm())
                    result.total_updates += 1
                else:
                    # plain alternating steps: virtual training batch, then virtual testing batches
                    r1 = grad(theta, train_fn)
                    theta_mid = opt.step(theta, r1.gradient)
                    r2 = grad(theta_mid, lambda x: sum(f(x) for f in test_fns.values()))
                    theta_new = opt.step(theta_mid, r2.gradient)
                    train_loss, gnorm = r1.loss, float(r1.gradient.norm())
                    test_losses = virtual_test(theta_mid, test_fns)
                    result.total_updates += 2
            except NonFiniteGradient:
                result.theta = theta
                raise
            ok = checksum(theta) == before
            result.steps.append(TrainStepReport(
                epoch, it, train_loss, test_losses, gnorm, [lv.value for lv in active],
                pb.cover_size, pb.retries, before, ok))
            theta = theta_new
        result.theta = theta
        result.epoch_checkpoints.append(theta.clone())
        if on_epoch:
            on_epoch(epoch, result)
    return result


def train_baseline(config: MetaConfig, corpus: Sequence[Sample], model_config: ModelConfig,
                   store: SampleStore | None = None, total_updates: int | None = None,
                   on_epoch: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Conventional minibatch descent over the whole corpus.

    ``total_updates`` (or ``config.baseline_updates``) fixes the number of
    parameter updates, spread evenly over the configured epochs.
    """
    store = store or SampleStore(corpus, model_config)
    theta = init_params(model_config, subseed(config.seed, "init"))
    opt = Optimizer(config.optimizer, config.beta, config.momentum)
    result = TrainResult(theta, model_config)
    ids = [s.id for s in corpus]
    per_epoch = math.ceil(len(ids) / config.batch_size_tr)
    budget = total_updates if total_updates is not None else config.baseline_updates
    if budget is None:
        budget = per_epoch * config.epochs
    counts = [budget // config.epochs + (1 if e < budget % config.epochs else 0)
              for e in range(config.epochs)] if config.epochs else []

    for epoch, n_iter in enumerate(counts):
        rng = np.random.default_rng(subseed(config.seed, "baseline-order", epoch))
        order: list[int] = []
        for it in range(n_iter):
            if len(order) < config.batch_size_tr:
                order.extend(rng.permutation(len(ids)).tolist())
            chunk, order = order[:config.batch_size_tr], order[config.batch_size_tr:]
            r = grad(theta, objective(store.batch([ids[i] for i in chunk]), model_config))
            result.steps.append(TrainStepReport(epoch, it, r.loss, {}, float(r.gradient.norm()), []))
            theta = opt.step(theta, r.gradient)
            result.total_updates += 1
        result.theta = theta
        result.epoch_checkpoints.append(theta.clone())
        if on_epoch:
            on_epoch(epoch, result)
    return result


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class TrainInventory:
    """Compositions, words and constituent phrases seen in a training corpus."""

    compositions: Mapping[Level, frozenset[tuple[str, str]]]
    components: ComponentInventory

    @classmethod
    def of(cls, corpus: Iterable[Sample]) -> TrainInventory:
        corpus = list(corpus)
        comps = {lv: frozenset(c.key for s in corpus for c in s.compositions[lv]) for lv in LEVELS}
        return cls(comps, ComponentInventory.of(corpus))

    def novel_compositions(self, sample: Sample):
        return [c for lv in LEVELS for c in sample.compositions[lv]
                if c.key not in self.compositions[lv]
                and self.components.has(c.left) and self.components.has(c.right)]

    def is_novel(self, sample: Sample) -> bool:
        return bool(self.novel_compositions(sample))


def metrics(predictions, masks) -> dict[str, float]:
    out = {"oIoU": oiou(predictions, masks)}
    for x in THRESHOLDS:
        out[f"P@{x}"] = precision_at(predictions, masks, x)
    return out


@dataclass
class EvalReport:
    overall: dict[str, float]
    novel: dict[str, float] | None
    non_novel: dict[str, float] | None
    sizes: dict[str, int]
    test_ids: list[str] = field(default_factory=list)

    @property
    def gap(self) -> float | None:
        if self.novel is None or self.non_novel is None:
            return None
        return self.non_novel["oIoU"] - self.novel["oIoU"]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["gap"] = self.gap
        doc["test_fingerprint"] = hashlib.sha256("\n".join(self.test_ids).encode()).hexdigest()[:16]
        del doc["test_ids"]
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        doc = json.loads(text)
        rep = cls(doc["overall"], doc["novel"], doc["non_novel"], doc["sizes"])
        rep.fingerprint = doc.get("test_fingerprint")
        return rep


def predict(theta: torch.Tensor, samples: Sequence[Sample], model_config: ModelConfig,
            store: SampleStore | None = None, chunk: int = 256) -> np.ndarray:
    store = store or SampleStore(samples, model_config)
    ids = [s.id for s in samples]
    out = []
    with torch.no_grad():
        for i in range(0, len(ids), chunk):
            out.append(forward(theta, store.batch(ids[i:i + chunk]), model_config).numpy())
    return np.concatenate(out) if out else np.zeros((0, model_config.height, model_config.width))


def evaluate_predictions(predictions: np.ndarray, test_corpus: Sequence[Sample],
                         inventory: TrainInventory) -> EvalReport:
    masks = [np.asarray(s.mask) for s in test_corpus]
    novel = np.array([inventory.is_novel(s) for s in test_corpus], dtype=bool)
    subsets = {}
    for name, sel in (("novel", novel), ("non_novel", ~novel)):
        idx = np.nonzero(sel)[0]
        if len(idx) == 0:
            log.warning("empty %s subset; its metrics are omitted", name)
            subsets[name] = None
        else:
            subsets[name] = metrics([predictions[i] for i in idx], [masks[i] for i in idx])
    return EvalReport(metrics(list(predictions), masks), subsets["novel"], subsets["non_novel"],
                      {"total": len(test_corpus), "novel": int(novel.sum()), "non_novel": int((~novel).sum())},
                      [s.id for s in test_corpus])


def evaluate(theta: torch.Tensor, test_corpus: Sequence[Sample], inventory: TrainInventory,
             model_config: ModelConfig, store: SampleStore | None = None) -> EvalReport:
    return evaluate_predictions(predict(theta, test_corpus, model_config, store), test_corpus, inventory)
