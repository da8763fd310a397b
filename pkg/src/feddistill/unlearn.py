"""Unlearning on distilled data: gradient-ascent rounds on the forget buckets,
recovery rounds on the remaining buckets mixed with a few original samples,
sequential and batched requests, and relearning from retained buckets.

One "round" is one full pass over the relevant distilled set per involved
client (a single full-batch step; the sets are tiny), followed by size-
weighted aggregation.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .federation import ClientState, GlobalModel, aggregate
from .models import ArchSpec, cross_entropy, forward
from .seeds import make_rng
from .tensor import ParamSet, Tensor, grad

from .distill import sgd_step

log = logging.getLogger(__name__)


@dataclass
class UnlearningRequest:
    targets: list[dict]                  # each {"class": id} or {"client": id}
    unlearn_rounds: int = 1
    recovery_rounds: int = 2
    sga_lr: float = 0.01
    recovery_lr: float = 0.01
    mix_per_class: int = 10

    def problems(self, prefix: str = "request") -> list[str]:
        errs = []
        if not self.targets:
            errs.append(f"{prefix}.targets: must not be empty")
        for i, t in enumerate(self.targets):
            if not isinstance(t, dict) or len(t) != 1:
                errs.append(f"{prefix}.targets[{i}]: expected one of class=<id> / client=<id>")
            elif "sample" in t:
                errs.append(f"{prefix}.targets[{i}]: sample-level unlearning is not supported")
            elif not ("class" in t or "client" in t):
                errs.append(f"{prefix}.targets[{i}]: unknown target kind {list(t)[0]!r}")
        if self.unlearn_rounds < 0 or self.recovery_rounds < 0:
            errs.append(f"{prefix}: round counts must be >= 0")
        if self.mix_per_class < 0:
            errs.append(f"{prefix}.mix_per_class: must be >= 0")
        return errs


@dataclass
class RequestAction:
    kind: str            # "unlearn" | "batch" | "relearn"
    targets: list[dict]


def parse_request_line(line: str) -> RequestAction | None:
    """One action per line: `unlearn class=9`, `unlearn client=3`,
    `batch class=5,class=8`, `relearn class=9`.  Blank/comment lines skipped."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split(None, 1)
    if len(parts) != 2 or parts[0] not in ("unlearn", "batch", "relearn"):
        raise ShapeError(f"cannot parse request line {line.rstrip()!r}")
    kind, spec = parts
    targets = []
    for item in spec.split(","):
        item = item.strip()
        if "=" not in item:
            raise ShapeError(f"bad target {item!r} in request line {line.rstrip()!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in ("class", "client"):
            raise ShapeError(f"unknown target kind {key!r} in request line {line.rstrip()!r}")
        targets.append({key: int(value)})
    if kind == "unlearn" and len(targets) != 1:
        raise ShapeError("`unlearn` takes a single target; use `batch` for several")
    return RequestAction(kind=kind, targets=targets)


def parse_request_file(text: str) -> list[RequestAction]:
    actions = []
    for line in text.splitlines():
        action = parse_request_line(line)
        if action is not None:
            actions.append(action)
    return actions


@dataclass
class ClientSplit:
    forget: dict[int, Tensor]
    keep: dict[int, Tensor]
    mix_x: np.ndarray | None = None
    mix_y: np.ndarray | None = None

    def forget_count(self) -> int:
        return sum(t.shape[0] for t in self.forget.values())

    def keep_count(self) -> int:
        n = sum(t.shape[0] for t in self.keep.values())
        if self.mix_x is not None:
            n += self.mix_x.shape[0]
        return n


@dataclass
class ForgetPartition:
    splits: dict[int, ClientSplit]
    forget_classes: set[int]
    forget_clients: set[int]

    def forget_total(self) -> int:
        return sum(s.forget_count() for s in self.splits.values())

    def keep_total(self) -> int:
        return sum(s.keep_count() for s in self.splits.values())


@dataclass
class StageCost:
    stage: str
    rounds: int
    samples: int
    wall_ms: float


class UnlearnEngine:
    """Executes unlearning requests against a trained model and the clients'
    retained synthetic sets.  Remembers what has been forgotten so later
    recovery and relearning exclude / rejoin the right buckets."""

    def __init__(self, clients: list[ClientState], spec: ArchSpec, master_seed: int,
                 dtype=np.float32, pass_batch_size: int = 32):
        self.clients = {c.cid: c for c in clients}
        self.spec = spec
        self.master_seed = master_seed
        self.dtype = np.dtype(dtype)
        self.pass_batch_size = int(pass_batch_size)
        self.forgotten_classes: set[int] = set()
        self.forgotten_clients: set[int] = set()
        self.warnings = 0
        self._request_index = 0

    # ---- target resolution ------------------------------------------------

    def _classes_with_data(self) -> set[int]:
        held = set()
        for client in self.clients.values():
            held.update(client.held_classes())
        return held

    def resolve_targets(self, targets: list[dict]) -> tuple[set[int], set[int]]:
        classes, client_ids = set(), set()
        held = self._classes_with_data()
        for t in targets:
            if "class" in t:
                c = int(t["class"])
                if c not in held:
                    raise ShapeError(f"no client holds data for class {c}")
                classes.add(c)
            elif "client" in t:
                j = int(t["client"])
                if j not in self.clients:
                    raise ShapeError(f"unknown client id {j}")
                if len(self.clients[j].data) == 0:
                    raise ShapeError(f"client {j} holds no data")
                client_ids.add(j)
            elif "sample" in t:
                raise ShapeError("sample-level unlearning is not supported; "
                                 "distilled buckets exist per class, not per sample")
            else:
                raise ShapeError(f"cannot resolve target {t!r}")
        return classes, client_ids

    def eval_forget_classes(self, targets: list[dict]) -> set[int]:
        """Classes whose test samples count as the forget set: explicit class
        targets plus every class held by a target client."""
        classes, client_ids = self.resolve_targets(targets)
        for j in client_ids:
            classes.update(self.clients[j].held_classes())
        return classes

    # ---- partition ----------------------------------------------------------

    def build_forget_partition(self, classes: set[int], client_ids: set[int],
                               mix_per_class: int) -> ForgetPartition:
        """Split every client's synthetic set into forget and keep sides and
        draw the per-class original mix-ins for recovery."""
        splits: dict[int, ClientSplit] = {}
        excluded = self.forgotten_classes | classes
        for cid in sorted(self.clients):
            client = self.clients[cid]
            if client.syn is None or cid in self.forgotten_clients:
                continue
            if cid in client_ids:
                splits[cid] = ClientSplit(forget=dict(client.syn.buckets), keep={})
                continue
            forget = {c: t for c, t in client.syn.buckets.items() if c in classes}
            keep = {c: t for c, t in client.syn.buckets.items() if c not in excluded}
            mix_x = mix_y = None
            if mix_per_class > 0 and keep:
                rng = make_rng(self.master_seed, "mix", self._request_index, cid)
                xs, ys = [], []
                for c in sorted(keep):
                    pool = np.nonzero(client.data.labels == c)[0]
                    if len(pool) == 0:
                        continue
                    take = min(mix_per_class, len(pool))
                    chosen = rng.choice(pool, size=take, replace=False)
                    chosen.sort()
                    xs.append(client.data.samples[chosen])
                    ys.append(np.full(take, c, dtype=np.int64))
                if xs:
                    mix_x = np.concatenate(xs)
                    mix_y = np.concatenate(ys)
            splits[cid] = ClientSplit(forget=forget, keep=keep, mix_x=mix_x, mix_y=mix_y)
        return ForgetPartition(splits=splits, forget_classes=set(classes),
                               forget_clients=set(client_ids))

    # ---- rounds --------------------------------------------------------------

    def _batch_of(self, buckets: dict[int, Tensor], mix_x=None, mix_y=None):
        parts, labels = [], []
        for c in sorted(buckets):
            t = buckets[c]
            parts.append(t.data.astype(self.dtype, copy=False))
            labels.append(np.full(t.shape[0], c, dtype=np.int64))
        if mix_x is not None:
            parts.append(mix_x.astype(self.dtype, copy=False))
            labels.append(mix_y)
        return np.concatenate(parts), np.concatenate(labels)

    def _local_pass(self, params: ParamSet, xs: np.ndarray, ys: np.ndarray, lr: float,
                    direction: float, context: str) -> ParamSet:
        """One pass over the set: minibatch steps in a fixed order, each sample
        touched exactly once."""
        local = params.clone()
        for start in range(0, xs.shape[0], self.pass_batch_size):
            xb = Tensor(np.ascontiguousarray(xs[start:start + self.pass_batch_size]))
            yb = ys[start:start + self.pass_batch_size]
            loss = cross_entropy(forward(local, self.spec, xb), yb)
            loss.check_finite(context)
            sgd_step(local, grad(loss, local), lr, direction=direction)
        return local

    def sga_round(self, params: ParamSet, partition: ForgetPartition, lr: float) -> ParamSet:
        """One ascent pass on each client's forget buckets, then aggregation
        weighted by forget-set size."""
        involved = [cid for cid, s in sorted(partition.splits.items()) if s.forget_count()]
        if not involved:
            raise ShapeError("forget set is empty; nothing to unlearn")
        locals_, weights = [], []
        total = sum(partition.splits[cid].forget_count() for cid in involved)
        for cid in involved:
            split = partition.splits[cid]
            xs, ys = self._batch_of(split.forget)
            locals_.append(self._local_pass(params, xs, ys, lr, +1.0,
                                            f"unlearning client {cid}"))
            weights.append(split.forget_count() / total)
        return aggregate(locals_, weights)

    def recovery_round(self, params: ParamSet, partition: ForgetPartition, lr: float) -> ParamSet:
        """One descent pass on each client's keep buckets plus mix-ins, then
        aggregation weighted by that merged set's size."""
        involved = [cid for cid, s in sorted(partition.splits.items()) if s.keep_count()]
        if not involved:
            raise ShapeError("recovery set is empty")
        locals_, weights = [], []
        total = sum(partition.splits[cid].keep_count() for cid in involved)
        for cid in involved:
            split = partition.splits[cid]
            xs, ys = self._batch_of(split.keep, split.mix_x, split.mix_y)
            locals_.append(self._local_pass(params, xs, ys, lr, -1.0,
                                            f"recovery client {cid}"))
            weights.append(split.keep_count() / total)
        return aggregate(locals_, weights)

    # ---- request execution ------------------------------------------------------

    def execute_request(self, model: GlobalModel, request: UnlearningRequest,
                        stage_callback=None) -> tuple[GlobalModel, list[StageCost]]:
        """U ascent rounds on the forget side, then R recovery rounds.

        Targets that were already forgotten are dropped with a warning; a
        request whose targets were all forgotten is a no-op.  When given,
        `stage_callback(stage_name, model, cost)` runs after each stage with
        the intermediate model (evaluation hooks; must not mutate it).
        """
        errs = request.problems()
        if errs:
            raise ShapeError("; ".join(errs))
        classes, client_ids = self.resolve_targets(request.targets)
        repeat_classes = classes & self.forgotten_classes
        repeat_clients = client_ids & self.forgotten_clients
        for c in sorted(repeat_classes):
            log.warning("class %d already unlearned; skipping", c)
            self.warnings += 1
        for j in sorted(repeat_clients):
            log.warning("client %d already unlearned; skipping", j)
            self.warnings += 1
        classes -= repeat_classes
        client_ids -= repeat_clients
        self._request_index += 1

        costs = [StageCost("unlearn", 0, 0, 0.0), StageCost("recover", 0, 0, 0.0)]
        if not classes and not client_ids:
            return model, costs
        partition = self.build_forget_partition(classes, client_ids, request.mix_per_class)

        self.forgotten_classes |= classes
        self.forgotten_clients |= client_ids

        params = model.params
        start = time.monotonic()
        for _ in range(request.unlearn_rounds):
            params = self.sga_round(params, partition, request.sga_lr)
            costs[0].rounds += 1
            costs[0].samples += partition.forget_total()
        costs[0].wall_ms = (time.monotonic() - start) * 1e3
        current = GlobalModel(params=params, spec=model.spec, round=model.round)
        if stage_callback is not None:
            stage_callback("unlearn", current, costs[0])

        start = time.monotonic()
        if partition.keep_total() == 0:
            if request.recovery_rounds:
                log.warning("recovery set is empty after forgetting %s; skipping recovery",
                            sorted(classes | client_ids))
                self.warnings += 1
        else:
            for _ in range(request.recovery_rounds):
                params = self.recovery_round(params, partition, request.recovery_lr)
                costs[1].rounds += 1
                costs[1].samples += partition.keep_total()
        costs[1].wall_ms = (time.monotonic() - start) * 1e3
        current = GlobalModel(params=params, spec=model.spec, round=model.round)
        if stage_callback is not None:
            stage_callback("recover", current, costs[1])
        return current, costs

    def execute_batch(self, model: GlobalModel,
                      request: UnlearningRequest) -> tuple[GlobalModel, list[StageCost]]:
        """A batched request is a single request over the union of targets:
        one unlearning stage and one recovery stage cover all of them."""
        return self.execute_request(model, request)

    def execute_sequence(self, model: GlobalModel, requests: list[UnlearningRequest]
                         ) -> tuple[GlobalModel, list[list[StageCost]]]:
        """Serial execution; each request's recovery excludes everything
        forgotten by earlier requests."""
        all_costs = []
        for request in requests:
            model, costs = self.execute_request(model, request)
            all_costs.append(costs)
        return model, all_costs

    # ---- relearning ---------------------------------------------------------------

    def relearn(self, model: GlobalModel, targets: list[dict], rounds: int,
                lr: float = 0.01) -> tuple[GlobalModel, StageCost]:
        """SGD rounds over the rejoined distilled sets (the targets' retained
        buckets together with everything not currently forgotten)."""
        classes, client_ids = self.resolve_targets(targets)
        for c in sorted(classes - self.forgotten_classes):
            log.warning("class %d was never unlearned; relearning is a refresh", c)
            self.warnings += 1
        for j in sorted(client_ids - self.forgotten_clients):
            log.warning("client %d was never unlearned; relearning is a refresh", j)
            self.warnings += 1

        still_forgotten = self.forgotten_classes - classes
        rejoin_clients = (set(self.clients) - self.forgotten_clients) | client_ids
        params = model.params
        cost = StageCost("relearn", 0, 0, 0.0)
        start = time.monotonic()
        for _ in range(rounds):
            locals_, sizes = [], []
            for cid in sorted(rejoin_clients):
                client = self.clients[cid]
                if client.syn is None:
                    continue
                buckets = {c: t for c, t in client.syn.buckets.items()
                           if c not in still_forgotten}
                if not buckets:
                    continue
                xs, ys = self._batch_of(buckets)
                locals_.append(self._local_pass(params, xs, ys, lr, -1.0,
                                                f"relearn client {cid}"))
                sizes.append(xs.shape[0])
            if not locals_:
                raise ShapeError("no retained buckets to relearn from")
            total = sum(sizes)
            params = aggregate(locals_, [s / total for s in sizes])
            cost.rounds += 1
            cost.samples += total
        cost.wall_ms = (time.monotonic() - start) * 1e3
        self.forgotten_classes -= classes
        self.forgotten_clients -= client_ids
        return GlobalModel(params=params, spec=model.spec, round=model.round), cost
