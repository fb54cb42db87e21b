"""FedSSA round engine.

Server: sample clients, send each one the global rows of its seen classes,
then average the uploaded rows class by class. Client: fuse the received
rows into its historical header, train the spliced model, upload the
seen-class rows of the trained header.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import DataPartition, LabeledDataset, PartitionPlan, batches, gen_blobs, load_idx, partition_noniid
from .errors import ConfigError, FedSSAError, ProtocolError
from .metrics import (RoundRecord, evaluate_client, flops_estimate, fusion_flops,
                      mean_accuracy)
from .models import (ClassificationHeader, ClassRow, LocalModel, build_model,
                     init_header, model_arrays)
from .numerics import backward, sgd_step
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilizationSchedule:
    mu0: float
    T_stable: int

    def __post_init__(self):
        if not 0 < self.mu0 <= 1:
            raise ConfigError("mu0 must lie in (0, 1]", "algo_params.mu0")
        if self.T_stable < 0:
            raise ConfigError("T_stable must be >= 0", "algo_params.T_stable")


def mu_schedule(t: int, sched: StabilizationSchedule) -> float:
    """Weight of the historical local header in round ``t``.

    Cosine decay from ``mu0`` at t=0 to zero at ``T_stable``, zero after.
    ``T_stable == 0`` disables stabilisation entirely.
    """
    if t < 0:
        raise ValueError(f"round must be >= 0, got {t}")
    if t >= sched.T_stable:
        return 0.0
    return sched.mu0 * math.cos(t / (2 * sched.T_stable) * math.pi)


# -- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class HeaderUpload:
    """Seen-class header rows sent from a client to the server."""
    client_id: int
    rows: dict[int, ClassRow]

    @property
    def n_params(self) -> int:
        return sum(len(w) + 1 for w, _ in self.rows.values())


@dataclass(frozen=True)
class HeaderBroadcast:
    """Global header rows sent from the server to one client."""
    client_id: int
    rows: dict[int, ClassRow]

    @property
    def n_params(self) -> int:
        return sum(len(w) + 1 for w, _ in self.rows.values())


@dataclass
class GlobalHeaderState:
    header: ClassificationHeader
    last_update: list[int]  # -1 = never aggregated

    @classmethod
    def initial(cls, header: ClassificationHeader) -> "GlobalHeaderState":
        return cls(header, [-1] * header.n_classes)

    def broadcast(self, client_id: int, classes) -> HeaderBroadcast:
        return HeaderBroadcast(client_id, self.header.rows(classes))


@dataclass
class ClientState:
    client_id: int
    model: LocalModel
    partition: DataPartition

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return self.partition.seen_classes


@dataclass
class LocalTraining:
    eta: float
    epochs: int
    batch_size: int


@dataclass
class ClientResult:
    client_id: int
    upload: object | None = None
    train_loss: float | None = None
    flops: int = 0
    skipped: bool = False


@dataclass(frozen=True)
class RoundContext:
    t: int
    sampled: tuple[int, ...]
    seed: int

    def client_seed(self, client_id: int) -> int:
        return derive_seed(self.seed, "client", client_id, self.t)


# -- server side ---------------------------------------------------------------

def sample_clients(n_clients: int, fraction: float, t: int, seed: int) -> RoundContext:
    """Uniform sample of ``floor(C*N)`` (at least one) clients without replacement."""
    if not 0 < fraction <= 1:
        raise ConfigError("must lie in (0, 1]", "C")
    exact = fraction * n_clients
    k = max(1, int(math.floor(exact + 1e-9)))
    if abs(exact - round(exact)) > 1e-9:
        log.warning("C*N = %g is not integral; sampling %d clients", exact, k)
    if k == n_clients:
        chosen = tuple(range(n_clients))
    else:
        rng = rng_for(seed, "sample", t)
        chosen = tuple(sorted(int(c) for c in rng.choice(n_clients, size=k, replace=False)))
    return RoundContext(t, chosen, seed)


def aggregate(uploads: Sequence[HeaderUpload], prev: GlobalHeaderState,
              t: int) -> GlobalHeaderState:
    """Class-wise mean of uploaded rows; classes nobody uploaded carry over."""
    ids = [u.client_id for u in uploads]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate uploads in round {t}: {sorted(ids)}")
    d_rep = prev.header.d_rep
    n_classes = prev.header.n_classes
    sums: dict[int, tuple[np.ndarray, float, int]] = {}
    for up in sorted(uploads, key=lambda u: u.client_id):
        for s, (w, b) in sorted(up.rows.items()):
            if not 0 <= s < n_classes:
                raise ProtocolError(f"client {up.client_id} uploaded unknown class {s}")
            if len(w) != d_rep:
                raise ProtocolError(
                    f"client {up.client_id} sent a row of width {len(w)} for class {s}, "
                    f"expected {d_rep}")
            if s in sums:
                acc_w, acc_b, n = sums[s]
                sums[s] = (acc_w + w, acc_b + b, n + 1)
            else:
                sums[s] = (np.array(w, dtype=np.float64), float(b), 1)

    header = prev.header.copy()
    last = list(prev.last_update)
    for s, (acc_w, acc_b, n) in sums.items():
        header.weight[s] = acc_w / n
        header.bias[s] = acc_b / n
        last[s] = t
    return GlobalHeaderState(header, last)


# -- client side ---------------------------------------------------------------

def fuse_header(local: ClassificationHeader, global_rows: dict[int, ClassRow],
                seen: Sequence[int], mu_t: float, fusion: str = "additive") -> ClassificationHeader:
    """Seen rows become ``global + mu_t * local``; unseen rows stay local.

    ``fusion="convex"`` uses ``(1 - mu_t) * global + mu_t * local`` instead.
    """
    if not 0.0 <= mu_t <= 1.0:
        raise ValueError(f"mu_t must lie in [0, 1], got {mu_t}")
    out = local.copy()
    for s in seen:
        if s not in global_rows:
            raise ProtocolError(f"no global row received for seen class {s}")
        gw, gb = global_rows[s]
        if len(gw) != local.d_rep:
            raise ProtocolError(f"global row for class {s} has width {len(gw)}")
        if fusion == "additive":
            out.weight[s] = gw + mu_t * local.weight[s]
            out.bias[s] = gb + mu_t * local.bias[s]
        elif fusion == "convex":
            out.weight[s] = (1.0 - mu_t) * gw + mu_t * local.weight[s]
            out.bias[s] = (1.0 - mu_t) * gb + mu_t * local.bias[s]
        else:
            raise ValueError(f"unknown fusion {fusion!r}")
    return out


def local_train(model: LocalModel, dataset: LabeledDataset, train_idx: np.ndarray,
                training: LocalTraining, rng: np.random.Generator,
                prototypes: dict[int, np.ndarray] | None = None,
                lam: float = 0.0) -> float | None:
    """Mini-batch SGD in place; returns the mean pre-step batch loss."""
    layers = model.layers
    losses = []
    for _ in range(training.epochs):
        for idx in batches(train_idx, training.batch_size, rng):
            loss, grads = backward(layers, dataset.batch(idx), prototypes, lam)
            layers = sgd_step(layers, grads, training.eta)
            losses.append(loss)
    model.set_layers(layers)
    return float(np.mean(losses)) if losses else None


def train_with_header(state: ClientState, dataset: LabeledDataset,
                      header: ClassificationHeader, training: LocalTraining,
                      seed: int) -> ClientResult:
    """Splice ``header`` onto the client's extractor and train locally."""
    train_idx = state.partition.train
    if len(train_idx) == 0:
        log.warning("client %d has an empty train split; skipped", state.client_id)
        return ClientResult(state.client_id, skipped=True)
    state.model = LocalModel(state.model.spec, state.model.extractor, header)
    loss = local_train(state.model, dataset, train_idx, training, np.random.default_rng(seed))
    flops = flops_estimate(state.model, len(train_idx), training.epochs, "train")
    return ClientResult(state.client_id, train_loss=loss, flops=flops)


def seen_upload(state: ClientState) -> HeaderUpload:
    return HeaderUpload(state.client_id, state.model.header.rows(state.seen_classes))


def client_update(state: ClientState, dataset: LabeledDataset, global_rows: dict[int, ClassRow],
                  t: int, sched: StabilizationSchedule, training: LocalTraining, seed: int,
                  fusion: str = "additive") -> ClientResult:
    """One FedSSA client step: fuse, splice, train, upload seen rows."""
    mu_t = mu_schedule(t, sched)
    fused = fuse_header(state.model.header, global_rows, state.seen_classes, mu_t, fusion)
    result = train_with_header(state, dataset, fused, training, seed)
    if result.skipped:
        return result
    if mu_t > 0.0:
        result.flops += fusion_flops(len(state.seen_classes) * (fused.d_rep + 1))
    result.upload = seen_upload(state)
    return result


# -- algorithms ----------------------------------------------------------------

@dataclass
class RoundStats:
    uplink: int = 0
    downlink: int = 0
    flops: int = 0
    losses: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def add(self, result: ClientResult) -> None:
        self.flops += result.flops
        if result.skipped:
            self.skipped.append(result.client_id)
        elif result.train_loss is not None:
            self.losses.append(result.train_loss)


class Algorithm:
    """A round strategy plugged into :class:`Simulation`."""

    name = "base"

    def setup(self, sim: "Simulation") -> None:
        pass

    def run_round(self, sim: "Simulation", ctx: RoundContext) -> RoundStats:
        raise NotImplementedError

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return {}


class HeaderAlgorithm(Algorithm):
    """Seen-class upload plus class-wise aggregation, with a pluggable merge.

    Subclasses decide which global rows a client receives and how they are
    merged into its historical header.
    """

    def __init__(self):
        self.global_state: GlobalHeaderState | None = None
        self.uploads: list[HeaderUpload] = []
        self.broadcasts: list[HeaderBroadcast] = []

    def setup(self, sim: "Simulation") -> None:
        rng = rng_for(sim.seed, "init", "global")
        self.global_state = GlobalHeaderState.initial(init_header(sim.n_classes, sim.d_rep, rng))

    def downlink_classes(self, state: ClientState, sim: "Simulation") -> Sequence[int]:
        return state.seen_classes

    def merge(self, state: ClientState, msg: HeaderBroadcast, t: int) -> tuple[ClassificationHeader, int]:
        """Return the new local header and the FLOPs spent producing it."""
        raise NotImplementedError

    def run_round(self, sim: "Simulation", ctx: RoundContext) -> RoundStats:
        stats = RoundStats()
        snapshot = self.global_state
        uploads = []
        self.broadcasts = []
        for k in ctx.sampled:
            state = sim.clients[k]
            msg = snapshot.broadcast(k, self.downlink_classes(state, sim))
            self.broadcasts.append(msg)
            header, merge_flops = self.merge(state, msg, ctx.t)
            result = train_with_header(state, sim.dataset, header, sim.training, ctx.client_seed(k))
            stats.add(result)
            if result.skipped:
                continue
            stats.downlink += msg.n_params
            stats.flops += merge_flops
            upload = seen_upload(state)
            uploads.append(upload)
            stats.uplink += upload.n_params
        self.uploads = uploads
        self.global_state = aggregate(uploads, snapshot, ctx.t)
        return stats

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return {"global.header.weight": self.global_state.header.weight,
                "global.header.bias": self.global_state.header.bias,
                "global.last_update": np.asarray(self.global_state.last_update, dtype=np.int64)}


class FedSSA(HeaderAlgorithm):
    name = "fedssa"

    def __init__(self, mu0: float = 0.5, T_stable: int = 25, fusion: str = "convex"):
        super().__init__()
        self.schedule = StabilizationSchedule(mu0, T_stable)
        self.fusion = fusion

    def merge(self, state, msg, t):
        mu_t = mu_schedule(t, self.schedule)
        fused = fuse_header(state.model.header, msg.rows, state.seen_classes, mu_t, self.fusion)
        flops = fusion_flops(msg.n_params) if mu_t > 0.0 else 0
        return fused, flops


# -- simulation ----------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.dataset.kind == "blobs":
        return gen_blobs(cfg.S, cfg.dataset.per_class_n, cfg.dataset.d_in,
                         cfg.dataset.spread, rng_for(cfg.seed, "data", "blobs"))
    ds = load_idx(cfg.dataset.images, cfg.dataset.labels, cfg.S)
    return ds


class Simulation:
    """All mutable state of one run: clients, algorithm, records."""

    def __init__(self, cfg: ExperimentConfig, algorithm: Algorithm,
                 dataset: LabeledDataset | None = None):
        self.cfg = cfg
        self.seed = cfg.seed
        self.n_classes = cfg.S
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        if self.dataset.n_classes != cfg.S:
            raise ConfigError(f"dataset has {self.dataset.n_classes} classes", "S")
        self.specs = cfg.extractor_specs(self.dataset.input_dim)
        self.d_rep = self.specs[0].d_rep
        self.training = LocalTraining(cfg.eta, cfg.E, cfg.B)
        plan = PartitionPlan(cfg.N, cfg.classes_per_client,
                             derive_seed(cfg.seed, "data", "partition"))
        partitions = partition_noniid(self.dataset, plan)
        self.clients = [
            ClientState(k, build_model(self.specs[k % len(self.specs)], cfg.S,
                                       rng_for(cfg.seed, "init", k)), partitions[k])
            for k in range(cfg.N)
        ]
        self.algorithm = algorithm
        self.records: list[RoundRecord] = []
        self.cum_params = 0
        self.cum_flops = 0
        algorithm.setup(self)

    def evaluate(self, split: str = "test") -> list[float | None]:
        out = []
        for c in self.clients:
            idx = c.partition.split(split)
            out.append(evaluate_client(c.model, self.dataset.features[idx], self.dataset.labels[idx]))
        return out

    def run_round(self, t: int) -> RoundRecord:
        start = time.perf_counter()
        ctx = sample_clients(self.cfg.N, self.cfg.C, t, self.seed)
        try:
            stats = self.algorithm.run_round(self, ctx)
        except FedSSAError as exc:
            raise type(exc)(f"round {t}: {exc}") from exc
        accs = self.evaluate()
        self.cum_params += stats.uplink + stats.downlink
        self.cum_flops += stats.flops
        wall_ms = int(round((time.perf_counter() - start) * 1000)) if self.cfg.timing else 0
        record = RoundRecord(
            round=t, accuracies=accs, mean_accuracy=mean_accuracy(accs),
            uplink_params=stats.uplink, downlink_params=stats.downlink,
            cum_params=self.cum_params, flops=stats.flops, cum_flops=self.cum_flops,
            wall_ms=wall_ms, sampled=list(ctx.sampled),
            train_loss=float(np.mean(stats.losses)) if stats.losses else None,
            skipped=stats.skipped)
        self.records.append(record)
        return record

    def save_checkpoint(self, path: str | Path, t: int) -> Path:
        path = Path(path)
        arrays = {}
        for c in self.clients:
            arrays.update(model_arrays(c.model, prefix=f"client.{c.client_id}."))
        arrays.update(self.algorithm.checkpoint_arrays())
        arrays["round"] = np.asarray(t, dtype=np.int64)
        arrays["meta"] = np.asarray(checkpoint_meta(self))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    models: list[LocalModel]
    initial_accuracies: list[float | None]
    final_accuracies: list[float | None]
    simulation: Simulation

    @property
    def final_mean_accuracy(self) -> float:
        return mean_accuracy(self.final_accuracies)


def run_experiment(cfg: ExperimentConfig,
                   on_round: Callable[[Simulation, RoundRecord], None] | None = None,
                   dataset: LabeledDataset | None = None) -> ExperimentResult:
    """Run ``cfg.T`` rounds and evaluate every client on its own test split."""
    from .baselines import make_algorithm

    cfg.validate()
    sim = Simulation(cfg, make_algorithm(cfg), dataset)
    initial = sim.evaluate()
    for t in range(cfg.T):
        record = sim.run_round(t)
        if on_round is not None:
            on_round(sim, record)
    final = sim.evaluate()
    return ExperimentResult(sim.records, [c.model for c in sim.clients], initial, final, sim)


def checkpoint_meta(sim: Simulation) -> str:
    """JSON describing the run a checkpoint belongs to."""
    return json.dumps({"algorithm": sim.algorithm.name, "config": sim.cfg.to_dict(),
                       "rounds_done": len(sim.records)}, sort_keys=True)
