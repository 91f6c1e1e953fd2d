"""Toy segmentation model, losses, gradients through one inner step, metrics.

The expression encoder is the mean of word embeddings plus the mean, over
adjacent token pairs, of ``(e_i^T W e_j) * (e_i * e_j)``. That pairwise term
lets the model memorise a composition as a whole. Every cell is scored by a
two-layer tanh MLP on ``[cell features, encoding]``.

All parameters live in one flat float64 vector; :class:`ModelConfig` knows
how to slice it into the structured view.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .splitter import Sample
from .synthetic import SIZES, SceneSpec, cell_codes, coordinate_channels

DTYPE = torch.float64
EPS = 1e-7
THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)

Objective = Callable[[torch.Tensor], torch.Tensor]


class UnknownToken(KeyError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    words: tuple[str, ...]
    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    height: int = 16
    width: int = 16
    embed_dim: int = 16
    hidden: int = 32

    @property
    def feature_dim(self) -> int:
        return len(self.shapes) + len(self.colors) + len(SIZES) + 2

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d, f, h = self.embed_dim, self.feature_dim, self.hidden
        return [("embed", (len(self.words), d)), ("pair", (d, d)), ("w1", (f + d, h)),
                ("b1", (h,)), ("w2", (h,)), ("b2", (1,))]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def unflatten(self, theta: torch.Tensor) -> dict[str, torch.Tensor]:
        if theta.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {tuple(theta.shape)}")
        out, pos = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = theta[pos:pos + n].view(shape)
            pos += n
        return out

    def flatten(self, parts: Mapping[str, torch.Tensor]) -> torch.Tensor:
        return torch.cat([parts[name].reshape(-1) for name, _ in self.layout])

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def word_index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}


def init_params(cfg: ModelConfig, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    f, d, h = cfg.feature_dim, cfg.embed_dim, cfg.hidden
    parts = {
        "embed": torch.randn(len(cfg.words), d, generator=g, dtype=DTYPE) * 0.5,
        "pair": torch.randn(d, d, generator=g, dtype=DTYPE) * 0.1,
        "w1": torch.randn(f + d, h, generator=g, dtype=DTYPE) / np.sqrt(f + d),
        "b1": torch.zeros(h, dtype=DTYPE),
        "w2": torch.randn(h, generator=g, dtype=DTYPE) / np.sqrt(h),
        # start near the background rate so early steps are not spent learning the prior
        "b2": torch.full((1,), -4.0, dtype=DTYPE),
    }
    return cfg.flatten(parts)


# --------------------------------------------------------------------------
# batches

@dataclass(frozen=True)
class Batch:
    token_ids: torch.Tensor     # (B, L) long, padded with 0
    token_mask: torch.Tensor    # (B, L) float
    features: torch.Tensor      # (B, H*W, F)
    masks: torch.Tensor         # (B, H*W) float

    def __len__(self) -> int:
        return self.token_ids.shape[0]


class SampleStore:
    """Tensor cache for a fixed set of samples, keyed by sample id."""

    def __init__(self, samples: Sequence[Sample], cfg: ModelConfig):
        from .parse import SyntheticGrammar

        self.cfg = cfg
        grammar = SyntheticGrammar(SIZES, cfg.colors, cfg.shapes, ())
        widx = cfg.word_index
        self.pos = {s.id: i for i, s in enumerate(samples)}
        n, hw = len(samples), cfg.height * cfg.width
        max_len = max((len(s.tokens) for s in samples), default=1)
        self.ids = np.zeros((n, max_len), dtype=np.int64)
        self.lengths = np.zeros(n, dtype=np.int64)
        self.codes = np.full((n, hw, 3), -1, dtype=np.int64)
        self.masks = np.zeros((n, hw))
        for i, s in enumerate(samples):
            try:
                self.ids[i, :len(s.tokens)] = [widx[t] for t in s.tokens]
            except KeyError as e:
                raise UnknownToken(f"{e.args[0]!r} in sample {s.id}") from None
            self.lengths[i] = len(s.tokens)
            scene = s.image
            if not isinstance(scene, SceneSpec):
                raise ShapeMismatch(f"sample {s.id} has no scene")
            if (scene.height, scene.width) != (cfg.height, cfg.width):
                raise ShapeMismatch(f"sample {s.id} is {scene.height}x{scene.width}")
            self.codes[i] = cell_codes(scene, grammar)
            self.masks[i] = np.asarray(s.mask, dtype=np.float64).reshape(-1)
        self._coords = torch.from_numpy(coordinate_channels(cfg.height, cfg.width))
        ns, nc = len(cfg.shapes), len(cfg.colors)
        # one extra all-zero row per block encodes empty cells
        self._shape_tab = torch.cat([torch.eye(ns, dtype=DTYPE), torch.zeros(1, ns, dtype=DTYPE)])
        self._color_tab = torch.cat([torch.eye(nc, dtype=DTYPE), torch.zeros(1, nc, dtype=DTYPE)])
        self._size_tab = torch.cat([torch.eye(len(SIZES), dtype=DTYPE), torch.zeros(1, len(SIZES), dtype=DTYPE)])

    def __contains__(self, sid: str) -> bool:
        return sid in self.pos

    def batch(self, sample_ids: Sequence[str]) -> Batch:
        rows = np.array([self.pos[s] for s in sample_ids], dtype=np.int64)
        max_len = int(self.lengths[rows].max())
        ids = torch.from_numpy(self.ids[rows, :max_len])
        tmask = (torch.arange(max_len)[None, :] < torch.from_numpy(self.lengths[rows])[:, None]).to(DTYPE)
        codes = torch.from_numpy(self.codes[rows])
        feats = torch.cat([
            self._shape_tab[codes[..., 0]], self._color_tab[codes[..., 1]], self._size_tab[codes[..., 2]],
            self._coords.expand(len(rows), -1, -1),
        ], dim=-1)
        return Batch(ids, tmask, feats, torch.from_numpy(self.masks[rows]))


# --------------------------------------------------------------------------
# forward / loss

def encode(theta: torch.Tensor, batch: Batch, cfg: ModelConfig) -> torch.Tensor:
    p = cfg.unflatten(theta)
    emb = p["embed"][batch.token_ids] * batch.token_mask[..., None]          # (B, L, d)
    bag = emb.sum(1) / batch.token_mask.sum(1, keepdim=True)
    left, right = emb[:, :-1], emb[:, 1:]
    pmask = batch.token_mask[:, :-1] * batch.token_mask[:, 1:]
    gate = torch.einsum("bld,de,ble->bl", left, p["pair"], right)
    pairs = (gate * pmask)[..., None] * left * right
    n_pairs = pmask.sum(1, keepdim=True).clamp(min=1.0)
    return bag + pairs.sum(1) / n_pairs


def logits(theta: torch.Tensor, batch: Batch, cfg: ModelConfig) -> torch.Tensor:
    if batch.features.shape[-1] != cfg.feature_dim:
        raise ShapeMismatch(f"features have {batch.features.shape[-1]} channels, expected {cfg.feature_dim}")
    p = cfg.unflatten(theta)
    enc = encode(theta, batch, cfg)
    f = cfg.feature_dim
    hidden = torch.tanh(batch.features @ p["w1"][:f] + (enc @ p["w1"][f:])[:, None, :] + p["b1"])
    return hidden @ p["w2"] + p["b2"]


def forward(theta: torch.Tensor, batch: Batch, cfg: ModelConfig) -> torch.Tensor:
    """Per-cell probabilities, shape (B, H, W)."""
    return torch.sigmoid(logits(theta, batch, cfg)).view(-1, cfg.height, cfg.width)


def bce(probs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-cell binary cross-entropy averaged over cells, then over samples."""
    p = probs.reshape(masks.shape).clamp(EPS, 1.0 - EPS)
    per_cell = -(masks * torch.log(p) + (1.0 - masks) * torch.log1p(-p))
    return per_cell.mean(dim=-1).mean()


def loss(theta: torch.Tensor, batch: Batch, cfg: ModelConfig) -> torch.Tensor:
    if len(batch) == 0:
        raise EmptyInput("empty batch")
    return bce(torch.sigmoid(logits(theta, batch, cfg)), batch.masks)


def objective(batch: Batch, cfg: ModelConfig) -> Objective:
    return lambda theta: loss(theta, batch, cfg)


# --------------------------------------------------------------------------
# gradients

@dataclass(frozen=True)
class GradientResult:
    loss: float
    gradient: torch.Tensor


@dataclass(frozen=True)
class MetaGradientResult:
    train_loss: float
    test_losses: dict[str, float]
    gradient: torch.Tensor
    adapted: torch.Tensor


def _check_finite(g: torch.Tensor, what: str) -> None:
    if not torch.isfinite(g).all():
        raise NonFiniteGradient(f"non-finite {what}")


def grad(theta: torch.Tensor, fn: Objective) -> GradientResult:
    """Exact reverse-mode gradient of ``fn`` at ``theta``."""
    x = theta.detach().clone().requires_grad_(True)
    value = fn(x)
    (g,) = torch.autograd.grad(value, x)
    _check_finite(g, "gradient")
    return GradientResult(float(value.detach()), g.detach())


def meta_gradient(theta: torch.Tensor, train_fn: Objective, test_fns: Mapping[str, Objective],
                  alpha: float, first_order: bool = False) -> MetaGradientResult:
    """Gradient of ``train(theta) + sum_k test_k(theta - alpha * grad train(theta))``.

    The inner step is differentiated through, so the result includes the
    Hessian-vector term. ``first_order`` treats the inner gradient as a
    constant, which drops that term.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    x = theta.detach().clone().requires_grad_(True)
    train_value = train_fn(x)
    (g,) = torch.autograd.grad(train_value, x, create_graph=not first_order, retain_graph=True)
    if first_order:
        g = g.detach()
    adapted = x - alpha * g
    test_values = {k: fn(adapted) for k, fn in test_fns.items()}
    total = train_value + sum(test_values.values())
    (meta,) = torch.autograd.grad(total, x)
    _check_finite(meta, "meta-gradient")
    return MetaGradientResult(float(train_value.detach()), {k: float(v.detach()) for k, v in test_values.items()},
                              meta.detach(), adapted.detach())


# --------------------------------------------------------------------------
# metrics

def _binarize(pred) -> np.ndarray:
    arr = pred.detach().numpy() if isinstance(pred, torch.Tensor) else np.asarray(pred)
    return arr > 0.5


def _inter_union(predictions, masks) -> tuple[np.ndarray, np.ndarray]:
    preds, gts = list(predictions), list(masks)
    if not preds:
        raise EmptyInput("no predictions")
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} predictions for {len(gts)} masks")
    inter, union = np.zeros(len(preds)), np.zeros(len(preds))
    for i, (p, m) in enumerate(zip(preds, gts)):
        pb, mb = _binarize(p), np.asarray(m) > 0.5
        if pb.shape != mb.shape:
            raise ShapeMismatch(f"prediction {pb.shape} vs mask {mb.shape}")
        inter[i] = np.logical_and(pb, mb).sum()
        union[i] = np.logical_or(pb, mb).sum()
    return inter, union


def sample_ious(predictions, masks) -> np.ndarray:
    inter, union = _inter_union(predictions, masks)
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)


def oiou(predictions, masks) -> float:
    """Pooled intersection over pooled union; predictions thresholded at 0.5."""
    inter, union = _inter_union(predictions, masks)
    if union.sum() == 0:
        return 1.0
    return float(inter.sum() / union.sum())


def precision_at(predictions, masks, x: float) -> float:
    """Fraction of samples whose IoU is strictly greater than ``x``."""
    return float(np.mean(sample_ious(predictions, masks) > x))


# --------------------------------------------------------------------------
# checkpoints: magic line, JSON header line, then little-endian float64 values

_MAGIC = b"MCRES-CKPT 1\n"


def save_checkpoint(path: Path, theta: torch.Tensor, cfg: ModelConfig, extra: Mapping | None = None) -> None:
    header = {"config_hash": cfg.hash(), "n_params": cfg.n_params, "precision": "float64-le"}
    if extra:
        header.update(extra)
    values = theta.detach().numpy().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(values.tobytes())


def load_checkpoint(path: Path, cfg: ModelConfig | None = None) -> tuple[torch.Tensor, dict]:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        header = json.loads(fh.readline())
        values = np.frombuffer(fh.read(), dtype="<f8")
    if values.size != header["n_params"]:
        raise ShapeMismatch(f"{path}: header says {header['n_params']} values, found {values.size}")
    if cfg is not None and header["config_hash"] != cfg.hash():
        raise ShapeMismatch(f"{path} was written for a different model config")
    return torch.from_numpy(values.copy()), header


def checksum(theta: torch.Tensor) -> str:
    return hashlib.sha256(theta.detach().numpy().astype("<f8").tobytes()).hexdigest()
