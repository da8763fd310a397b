"""Accuracy and forgetting metrics, a loss-threshold membership-inference
attack, cost meters, and the retrain / original-data-ascent baselines the
acceptance suite compares against."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .distill import DistillConfig, sgd_step
from .errors import ShapeError
from .federation import ClientState, GlobalModel, RoundRecord, train_federated
from .models import ArchSpec, InitDistribution, cross_entropy, forward, init_params, predict
from .seeds import make_rng
from .tensor import ParamSet, Tensor, grad, no_grad
from .unlearn import ClientSplit, ForgetPartition, StageCost, UnlearnEngine


@dataclass
class StageRecord:
    """One pipeline stage's metrics; accuracies derive from stored counts."""
    stage: str
    rounds: int = 0
    samples: int = 0
    wall_ms: float = 0.0
    per_class_correct: list[int] = field(default_factory=list)
    per_class_total: list[int] = field(default_factory=list)
    forget_classes: list[int] = field(default_factory=list)
    mia_forget_rate: float | None = None

    def _acc_over(self, classes) -> float | None:
        idx = [c for c in classes if c < len(self.per_class_total)]
        total = sum(self.per_class_total[c] for c in idx)
        if total == 0:
            return None
        return sum(self.per_class_correct[c] for c in idx) / total

    def f_set_accuracy(self) -> float | None:
        return self._acc_over(self.forget_classes)

    def r_set_accuracy(self) -> float | None:
        rest = [c for c in range(len(self.per_class_total)) if c not in set(self.forget_classes)]
        return self._acc_over(rest)

    def overall_accuracy(self) -> float | None:
        return self._acc_over(range(len(self.per_class_total)))

    def per_class_accuracy(self) -> list[float]:
        return [c / t if t else float("nan")
                for c, t in zip(self.per_class_correct, self.per_class_total)]

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "rounds": self.rounds,
            "samples": self.samples,
            "forget_classes": list(self.forget_classes),
            "per_class_correct": list(self.per_class_correct),
            "per_class_total": list(self.per_class_total),
            "f_set_accuracy": self.f_set_accuracy(),
            "r_set_accuracy": self.r_set_accuracy(),
            "overall_accuracy": self.overall_accuracy(),
            "mia_forget_rate": self.mia_forget_rate,
        }


@dataclass
class ExperimentReport:
    method: str
    seed: int
    stages: list[StageRecord] = field(default_factory=list)
    schema_version: int = 1

    def to_dict(self) -> dict:
        # wall times are deliberately absent: the JSON report must be
        # byte-identical across runs of the same config+seed
        return {
            "schema_version": self.schema_version,
            "method": self.method,
            "seed": self.seed,
            "stages": [s.to_dict() for s in self.stages],
        }

    def write_json(self, path) -> None:
        import json

        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path) -> None:
        import csv

        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["method", "seed", "stage", "rounds", "samples", "wall_ms",
                             "f_set_accuracy", "r_set_accuracy", "overall_accuracy",
                             "mia_forget_rate"])
            for s in self.stages:
                writer.writerow([self.method, self.seed, s.stage, s.rounds, s.samples,
                                 f"{s.wall_ms:.3f}", fmt(s.f_set_accuracy()),
                                 fmt(s.r_set_accuracy()), fmt(s.overall_accuracy()),
                                 fmt(s.mia_forget_rate)])


@dataclass
class MIAConfig:
    split_seed: int = 0
    attack: str = "loss-threshold"


def accuracy_report(params: ParamSet, spec: ArchSpec, test_set: LabeledDataset,
                    forget_classes) -> StageRecord:
    """Per-class Top-1 counts plus the induced forget/remain split."""
    preds = predict(params, spec, test_set.samples)
    correct = [0] * test_set.class_count
    total = [0] * test_set.class_count
    for c in range(test_set.class_count):
        mask = test_set.labels == c
        total[c] = int(mask.sum())
        correct[c] = int((preds[mask] == c).sum())
    return StageRecord(stage="", per_class_correct=correct, per_class_total=total,
                       forget_classes=sorted(int(c) for c in forget_classes))


def per_sample_losses(params: ParamSet, spec: ArchSpec, samples: np.ndarray,
                      labels: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Cross-entropy of each sample under the model, no graph kept."""
    dtype = params.tensors()[0].dtype
    out = np.empty(samples.shape[0], dtype=np.float64)
    with no_grad():
        for start in range(0, samples.shape[0], batch_size):
            x = Tensor(np.ascontiguousarray(samples[start:start + batch_size]), dtype=dtype)
            logits = forward(params, spec, x).data.astype(np.float64)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            y = labels[start:start + x.shape[0]]
            out[start:start + x.shape[0]] = -logp[np.arange(x.shape[0]), y]
    return out


@dataclass
class MIAResult:
    forget_member_rate: float
    fit_balanced_accuracy: float
    eval_balanced_accuracy: float
    threshold: float


def _balanced_accuracy(member_losses, nonmember_losses, threshold) -> float:
    tpr = float((member_losses <= threshold).mean())
    tnr = float((nonmember_losses > threshold).mean())
    return 0.5 * (tpr + tnr)


def mia_attack(params: ParamSet, spec: ArchSpec, member_pool: LabeledDataset,
               nonmember_pool: LabeledDataset, forget_pool: LabeledDataset,
               cfg: MIAConfig) -> MIAResult:
    """Loss-threshold attack: fit the threshold that best separates member from
    non-member losses on held-out halves, then report how often the forget
    pool is still classified as "member".

    Threshold ties (flat balanced accuracy) resolve toward the median loss,
    which keeps the reported rate near 50% when the pools are
    indistinguishable.
    """
    if min(len(member_pool), len(nonmember_pool)) < 4 or len(forget_pool) == 0:
        raise ShapeError("degenerate MIA pools; need >= 4 member/non-member and >= 1 forget")
    mem = per_sample_losses(params, spec, member_pool.samples, member_pool.labels)
    non = per_sample_losses(params, spec, nonmember_pool.samples, nonmember_pool.labels)
    fgt = per_sample_losses(params, spec, forget_pool.samples, forget_pool.labels)

    rng = make_rng(cfg.split_seed, "mia-split")
    mem = mem[rng.permutation(len(mem))]
    non = non[rng.permutation(len(non))]
    mem_fit, mem_eval = np.array_split(mem, 2)
    non_fit, non_eval = np.array_split(non, 2)

    pooled = np.sort(np.concatenate([mem_fit, non_fit]))
    mids = 0.5 * (pooled[1:] + pooled[:-1])
    candidates = np.concatenate([[pooled[0] - 1e-9], mids, [pooled[-1] + 1e-9]])
    scores = np.array([_balanced_accuracy(mem_fit, non_fit, t) for t in candidates])
    best = scores.max()
    tied = candidates[scores == best]
    median = float(np.median(pooled))
    threshold = float(tied[np.argmin(np.abs(tied - median))])

    return MIAResult(
        forget_member_rate=float((fgt <= threshold).mean()),
        fit_balanced_accuracy=float(best),
        eval_balanced_accuracy=_balanced_accuracy(mem_eval, non_eval, threshold),
        threshold=threshold,
    )


# ---- training helpers and baselines ------------------------------------------


def fit_model(spec: ArchSpec, data: LabeledDataset, steps: int, lr: float,
              batch_size: int, seed: int, dtype=np.float32,
              initial: ParamSet | None = None) -> ParamSet:
    """Centralized SGD on mixed minibatches (shared oracle/eval trainer)."""
    params = initial.clone() if initial is not None else init_params(
        spec, InitDistribution(seed=seed), dtype=dtype)
    rng = make_rng(seed, "fit")
    order = rng.permutation(len(data))
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + min(batch_size, len(order))]
        cursor += len(idx)
        x = Tensor(data.samples[idx], dtype=dtype)
        loss = cross_entropy(forward(params, spec, x), data.labels[idx])
        loss.check_finite("centralized fit")
        sgd_step(params, grad(loss, params), lr)
    return params


def filtered_clients(clients: list[ClientState], forget_classes: set[int],
                     forget_clients: set[int], master_seed: int) -> list[ClientState]:
    """Client states over the original data minus the forget set, with the
    same per-id RNG stream labels as a fresh training run."""
    from .data import ClassBatchSampler

    out = []
    for client in clients:
        if client.cid in forget_clients:
            continue
        data = client.data.without_classes(forget_classes)
        if len(data) == 0:
            continue
        sampler = ClassBatchSampler(data, make_rng(master_seed, "client", client.cid, "batches"))
        out.append(ClientState(cid=client.cid, data=data, sampler=sampler, syn=None))
    return out


def retrain_baseline(clients: list[ClientState], forget_classes: set[int],
                     forget_clients: set[int], spec: ArchSpec, cfg: DistillConfig,
                     master_seed: int, participation: float = 1.0,
                     dtype=np.float32) -> tuple[GlobalModel, list[RoundRecord], StageCost]:
    """Retrain from scratch on everything outside the forget set (no recovery
    stage); with an empty forget set this is exactly a plain training run."""
    remaining = filtered_clients(clients, forget_classes, forget_clients, master_seed)
    if not remaining:
        raise ShapeError("forget set leaves no training data to retrain on")
    start = time.monotonic()
    model, _, records = train_federated(remaining, spec, cfg, master_seed=master_seed,
                                        participation=participation, distill_enabled=False,
                                        dtype=dtype)
    cost = StageCost("unlearn", rounds=len(records),
                     samples=sum(r.samples for r in records),
                     wall_ms=(time.monotonic() - start) * 1e3)
    return model, records, cost


def original_data_partition(clients: list[ClientState], forget_classes: set[int],
                            forget_clients: set[int],
                            excluded_classes: set[int] = frozenset(),
                            dtype=np.float32) -> ForgetPartition:
    """Forget/keep split over the clients' original samples (not distilled),
    shaped like the distilled partition so the same round machinery applies."""
    splits: dict[int, ClientSplit] = {}
    for client in clients:
        if len(client.data) == 0:
            continue
        by_class = {}
        for c in client.held_classes():
            rows = client.data.samples[client.data.labels == c]
            by_class[c] = Tensor(rows.astype(np.dtype(dtype), copy=False), requires_grad=True)
        if client.cid in forget_clients:
            splits[client.cid] = ClientSplit(forget=by_class, keep={})
            continue
        forget = {c: t for c, t in by_class.items() if c in forget_classes}
        keep = {c: t for c, t in by_class.items()
                if c not in forget_classes and c not in excluded_classes}
        splits[client.cid] = ClientSplit(forget=forget, keep=keep)
    return ForgetPartition(splits=splits, forget_classes=set(forget_classes),
                           forget_clients=set(forget_clients))


def sga_or_baseline(model: GlobalModel, clients: list[ClientState],
                    forget_classes: set[int], forget_clients: set[int],
                    master_seed: int, unlearn_rounds: int = 2, recovery_rounds: int = 2,
                    sga_lr: float = 0.01, recovery_lr: float = 0.01,
                    dtype=np.float32, pass_batch_size: int = 32
                    ) -> tuple[GlobalModel, list[StageCost]]:
    """Same ascent/recovery protocol as the distilled path, but every round
    passes over the clients' original data."""
    engine = UnlearnEngine(clients, model.spec, master_seed, dtype=dtype,
                           pass_batch_size=pass_batch_size)
    partition = original_data_partition(clients, forget_classes, forget_clients, dtype=dtype)
    if partition.forget_total() == 0:
        raise ShapeError("forget set is empty")
    params = model.params
    costs = [StageCost("unlearn", 0, 0, 0.0), StageCost("recover", 0, 0, 0.0)]
    start = time.monotonic()
    for _ in range(unlearn_rounds):
        params = engine.sga_round(params, partition, sga_lr)
        costs[0].rounds += 1
        costs[0].samples += partition.forget_total()
    costs[0].wall_ms = (time.monotonic() - start) * 1e3
    start = time.monotonic()
    if partition.keep_total():
        for _ in range(recovery_rounds):
            params = engine.recovery_round(params, partition, recovery_lr)
            costs[1].rounds += 1
            costs[1].samples += partition.keep_total()
    costs[1].wall_ms = (time.monotonic() - start) * 1e3
    return GlobalModel(params=params, spec=model.spec, round=model.round), costs
