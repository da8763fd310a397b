"""Gradient-matching dataset distillation.

A synthetic per-class dataset is optimized so that the model gradient it
induces stays close (in a layerwise cosine distance) to the gradient induced
by real batches of the same class, along the trajectory of a training run.
Matching is class-wise: each class's synthetic bucket is updated against a
real batch of that class only.

The synthetic update differentiates the gradient distance through the inner
gradient computation with respect to the synthetic pixels, so the model
gradient on synthetic data must be taken with graph retention.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .data import ClassBatchSampler, LabeledDataset, class_index
from .errors import NumericError, ShapeError
from .models import ArchSpec, InitDistribution, cross_entropy, forward, init_params
from .seeds import derive_seed, make_rng
from .tensor import (
    GradSet,
    ParamSet,
    Tensor,
    asum,
    concat,
    div,
    grad,
    hypergrad,
    mul,
    reshape,
    sqrt,
    transpose,
)

log = logging.getLogger(__name__)

ZERO_ROW_EPS = 1e-10


@dataclass
class DistillConfig:
    outer_steps: int = 200          # global rounds (integrated) / restarts (standalone)
    inner_steps: int = 50           # local steps per round
    syn_steps: int = 1              # gradient-descent steps on pixels per match
    syn_lr: float = 0.1
    model_lr: float = 0.01
    real_batch_per_class: int = 256
    seed: int = 0

    def problems(self, prefix: str = "distill") -> list[str]:
        errs = []
        for name in ("outer_steps", "inner_steps", "syn_steps"):
            if getattr(self, name) < 0:
                errs.append(f"{prefix}.{name}: must be >= 0")
        for name in ("syn_lr", "model_lr"):
            if getattr(self, name) < 0:
                errs.append(f"{prefix}.{name}: must be >= 0")
        if self.real_batch_per_class < 1:
            errs.append(f"{prefix}.real_batch_per_class: must be >= 1")
        return errs

    @staticmethod
    def standalone_defaults(**overrides) -> "DistillConfig":
        cfg = DistillConfig(outer_steps=500)
        return replace(cfg, **overrides)


class SyntheticDataset:
    """Per-class trainable synthetic samples plus their update hyperparameters.

    Pixels are left unclamped while being optimized; clamping to [0, 1]
    happens only on export.
    """

    def __init__(self, buckets: dict[int, Tensor], syn_lr: float, scale: float):
        self.buckets = dict(sorted(buckets.items()))
        self.syn_lr = float(syn_lr)
        self.scale = float(scale)
        self.match_skips = 0
        self.real_grad_steps = 0
        self.real_samples_touched = 0
        for c, t in self.buckets.items():
            if t.ndim != 4 or t.shape[0] < 1:
                raise ShapeError(f"synthetic bucket for class {c} must be [m,C,H,W], got {t.shape}")
            if not t.requires_grad:
                raise ShapeError(f"synthetic bucket for class {c} must require grad")

    def classes(self) -> list[int]:
        return list(self.buckets)

    def count(self, classes=None) -> int:
        if classes is None:
            return sum(t.shape[0] for t in self.buckets.values())
        return sum(self.buckets[c].shape[0] for c in classes if c in self.buckets)

    def union(self, classes=None) -> tuple[Tensor, np.ndarray]:
        """Concatenated samples and labels for the given classes (all if None)."""
        keys = [c for c in self.buckets if classes is None or c in set(classes)]
        if not keys:
            raise ShapeError("no synthetic buckets for the requested classes")
        xs = concat([self.buckets[c] for c in keys], axis=0)
        ys = np.concatenate([np.full(self.buckets[c].shape[0], c, dtype=np.int64) for c in keys])
        return xs, ys

    def clone(self) -> "SyntheticDataset":
        out = SyntheticDataset(
            {c: Tensor(t.data.copy(), requires_grad=True) for c, t in self.buckets.items()},
            self.syn_lr, self.scale)
        out.match_skips = self.match_skips
        out.real_grad_steps = self.real_grad_steps
        out.real_samples_touched = self.real_samples_touched
        return out

    def export(self, class_count: int, source: str = "distilled") -> LabeledDataset:
        xs, ys = [], []
        for c, t in self.buckets.items():
            xs.append(np.clip(t.data, 0.0, 1.0).astype(np.float32))
            ys.append(np.full(t.shape[0], c, dtype=np.int64))
        return LabeledDataset(np.concatenate(xs), np.concatenate(ys), class_count, source=source)


def synthetic_size(n_c: int, s: float) -> int:
    """Per-class synthetic count: floor(n_c / s), rounded up to 1 when the
    class is present at all."""
    if n_c <= 0:
        return 0
    return max(1, int(math.floor(n_c / s)))


def init_synthetic(client_data: LabeledDataset, s: float, seed: int,
                   dtype=np.float32) -> SyntheticDataset:
    """Initialize synthetic buckets from randomly selected real samples."""
    if s <= 0:
        raise ValueError("scale factor s must be positive")
    if len(client_data) == 0:
        raise ShapeError("cannot distill an empty client dataset")
    buckets: dict[int, Tensor] = {}
    for c, idx in enumerate(class_index(client_data)):
        m_c = synthetic_size(len(idx), s)
        if m_c == 0:
            continue
        rng = make_rng(seed, "syn-init", c)
        chosen = rng.choice(idx, size=m_c, replace=m_c > len(idx))
        chosen.sort()
        buckets[c] = Tensor(client_data.samples[chosen].astype(np.dtype(dtype)),
                            requires_grad=True, dtype=dtype)
    return SyntheticDataset(buckets, syn_lr=0.1, scale=s)


# ---- gradient distance ---------------------------------------------------------


def _as_rows(t: Tensor, role: str) -> Tensor:
    # one row per output unit; 1-D parameters (biases, norm affine) are a
    # single row, linear weights are stored input-major so transpose first
    if t.ndim == 1:
        return reshape(t, (1, t.shape[0]))
    if role == "linear" and t.ndim == 2:
        return transpose(t)
    if role == "conv" and t.ndim == 4:
        return reshape(t, (t.shape[0], t.size // t.shape[0]))
    raise ShapeError(f"unsupported gradient tensor (role={role}, shape={t.shape})")


def grad_distance(ga: GradSet, gb: GradSet) -> Tensor:
    """Layerwise sum over output units of (1 - cosine) between gradient rows.

    Rows whose norm falls below 1e-10 on either side are skipped (contribute
    zero); near convergence whole layers can vanish and the cosine would be
    undefined there.  Differentiable w.r.t. whichever side carries a graph.
    """
    if ga.names != gb.names:
        raise ShapeError("gradient sets come from different architectures")
    total: Tensor | None = None
    tiny = 1e-20
    for (_, ta, role), (_, tb, _) in zip(ga, gb):
        if ta.shape != tb.shape:
            raise ShapeError(f"gradient shapes differ: {ta.shape} vs {tb.shape}")
        ra, rb = _as_rows(ta, role), _as_rows(tb, role)
        dots = asum(mul(ra, rb), axes=(1,))
        na2 = asum(mul(ra, ra), axes=(1,))
        nb2 = asum(mul(rb, rb), axes=(1,))
        # tiny keeps masked rows' derivatives finite; the mask zeroes them out
        na = sqrt(na2 + tiny)
        nb = sqrt(nb2 + tiny)
        mask = Tensor(((np.sqrt(na2.data) >= ZERO_ROW_EPS)
                       & (np.sqrt(nb2.data) >= ZERO_ROW_EPS)).astype(ta.data.dtype))
        row_terms = mul(mask, 1.0 - div(dots, mul(na, nb)))
        layer = asum(row_terms)
        total = layer if total is None else total + layer
    if total is None:
        raise ShapeError("empty gradient sets")
    return total


def class_gradient(params: ParamSet, spec: ArchSpec, batch: Tensor, label: int,
                   create_graph: bool = False) -> GradSet:
    """Cross-entropy gradient w.r.t. params over a single-class batch."""
    labels = np.full(batch.shape[0], label, dtype=np.int64)
    loss = cross_entropy(forward(params, spec, batch), labels)
    loss.check_finite(f"class {label} gradient")
    return grad(loss, params, create_graph=create_graph)


def sgd_step(params: ParamSet, grads: GradSet, lr: float, direction: float = -1.0) -> None:
    """In-place parameter update: theta <- theta + direction*lr*grad."""
    grads.check_congruent(params)
    for p, g in zip(params.tensors(), grads.grads):
        p.data = p.data + p.data.dtype.type(direction * lr) * g.data


def match_step(params: ParamSet, spec: ArchSpec,
               real_batch_by_class: Mapping[int, Tensor],
               syn: SyntheticDataset, cfg: DistillConfig,
               real_grads: Mapping[int, GradSet] | None = None) -> SyntheticDataset:
    """One class-wise matching update of the synthetic pixels.

    For every class with a real batch: take the (possibly pre-computed) real
    gradient as a constant target, recompute the synthetic-bucket gradient
    with graph retention, and descend `cfg.syn_steps` times with `cfg.syn_lr`
    on the distance, via the hypergradient.  Model parameters are never
    touched.
    """
    for c in sorted(real_batch_by_class):
        bucket = syn.buckets.get(c)
        if bucket is None:
            syn.match_skips += 1
            log.warning("no synthetic bucket for class %d; matching skipped", c)
            continue
        if real_grads is not None and c in real_grads:
            g_real = real_grads[c]
        else:
            g_real = class_gradient(params, spec, real_batch_by_class[c], c)
        for _ in range(cfg.syn_steps):
            g_syn = class_gradient(params, spec, bucket, c, create_graph=True)
            distance = grad_distance(g_real, g_syn)
            (pixel_grad,) = hypergrad(distance, [bucket])
            new_data = bucket.data - bucket.data.dtype.type(cfg.syn_lr) * pixel_grad.data
            bucket = Tensor(new_data, requires_grad=True)
        syn.buckets[c] = bucket
    return syn


# ---- standalone distillation and fine-tuning ------------------------------------


def _distill_loops(syn: SyntheticDataset, data: LabeledDataset, spec: ArchSpec,
                   cfg: DistillConfig, outer_steps: int, seed_tag: str,
                   dtype) -> SyntheticDataset:
    sampler = ClassBatchSampler(data, make_rng(cfg.seed, seed_tag, "batches"))
    for k in range(outer_steps):
        params = init_params(spec, InitDistribution(seed=derive_seed(cfg.seed, seed_tag, k)),
                             dtype=dtype)
        for _ in range(cfg.inner_steps):
            batches = {}
            for c in sampler.classes():
                idx = sampler.next_batch(c, cfg.real_batch_per_class)
                batches[c] = Tensor(data.samples[idx], dtype=dtype)
                syn.real_samples_touched += len(idx)
            match_step(params, spec, batches, syn, cfg)
            syn.real_grad_steps += len(batches)
            xs, ys = syn.union()
            loss = cross_entropy(forward(params, spec, xs), ys)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite synthetic loss during {seed_tag} round {k}")
            sgd_step(params, grad(loss, params), cfg.model_lr)
    return syn


def distill_standalone(data: LabeledDataset, spec: ArchSpec, cfg: DistillConfig,
                       s: float = 100.0, syn: SyntheticDataset | None = None,
                       dtype=np.float32) -> SyntheticDataset:
    """Full distillation from randomly re-initialized models.

    Each of `cfg.outer_steps` restarts draws a fresh model and walks it
    `cfg.inner_steps` steps on the synthetic loss while matching gradients
    class-wise along the way.  Deterministic per cfg.seed.
    """
    for p in cfg.problems():
        raise ShapeError(p)
    if syn is None:
        syn = init_synthetic(data, s, derive_seed(cfg.seed, "standalone-syn"), dtype=dtype)
    return _distill_loops(syn, data, spec, cfg, cfg.outer_steps, "standalone", dtype)


def fine_tune(syn: SyntheticDataset, data: LabeledDataset, spec: ArchSpec, steps: int,
              cfg: DistillConfig, dtype=np.float32) -> SyntheticDataset:
    """Extra standalone-style refinement passes over an existing synthetic set.

    `steps` == 0 is the identity.  Each pass costs inner_steps * (classes held)
    real-data gradient computations, visible in `syn.real_grad_steps`.
    """
    if steps < 0:
        raise ValueError("fine-tune steps must be >= 0")
    if steps == 0:
        return syn
    return _distill_loops(syn, data, spec, cfg, steps, "finetune", dtype)
