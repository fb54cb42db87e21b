"""Reference algorithms that run on the same simulation engine as FedSSA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, canonical_algorithm
from .errors import ConfigError, ProtocolError
from .metrics import flops_estimate
from .models import ClassificationHeader, ClassRow, LocalModel, forward
from .numerics import Layer
from .protocol import (Algorithm, FedSSA, HeaderAlgorithm, RoundStats, local_train,
                       train_with_header)


class Standalone(Algorithm):
    """Every client trains alone each round; nothing is transmitted."""

    name = "standalone"

    def run_round(self, sim, ctx):
        stats = RoundStats()
        for state in sim.clients:
            stats.add(train_with_header(state, sim.dataset, state.model.header,
                                        sim.training, ctx.client_seed(state.client_id)))
        return stats


# -- header-replacement ablations -----------------------------------------------

def case_a_replace(local: ClassificationHeader, global_header: ClassificationHeader) -> ClassificationHeader:
    if local.weight.shape != global_header.weight.shape:
        raise ProtocolError(f"header shapes {local.weight.shape} vs {global_header.weight.shape}")
    return global_header.copy()


def case_b_seen_replace(local: ClassificationHeader, global_rows: dict[int, ClassRow],
                        seen: Sequence[int]) -> ClassificationHeader:
    out = local.copy()
    for s in seen:
        if s not in global_rows:
            raise ProtocolError(f"no global row received for seen class {s}")
        w, b = global_rows[s]
        out.weight[s] = w
        out.bias[s] = b
    return out


class CaseA(HeaderAlgorithm):
    """Whole-header replacement (LG-FedAvg style): all S rows go down."""

    name = "case_a_replace"

    def downlink_classes(self, state, sim):
        return range(sim.n_classes)

    def merge(self, state, msg, t):
        full = ClassificationHeader(np.stack([msg.rows[s][0] for s in sorted(msg.rows)]),
                                    np.array([msg.rows[s][1] for s in sorted(msg.rows)]))
        return case_a_replace(state.model.header, full), 0


class CaseB(HeaderAlgorithm):
    name = "case_b_seen_replace"

    def merge(self, state, msg, t):
        return case_b_seen_replace(state.model.header, msg.rows, state.seen_classes), 0


# -- homogeneous FedAvg -------------------------------------------------------------

def weighted_average(models: Sequence[Sequence[Layer]], weights: Sequence[float]) -> list[Layer]:
    """``sum_k w_k * layers_k`` accumulated in the given order."""
    out = []
    for i in range(len(models[0])):
        W = weights[0] * models[0][i][0]
        b = weights[0] * models[0][i][1]
        for layers, w in zip(models[1:], weights[1:]):
            W = W + w * layers[i][0]
            b = b + w * layers[i][1]
        out.append((W, b))
    return out


class FedAvgHomo(Algorithm):
    """Full-model FedAvg with sample-count weights; needs one architecture."""

    name = "fedavg_homo"

    def __init__(self):
        self.global_model: LocalModel | None = None
        self.last_weights: list[float] = []

    def setup(self, sim):
        if len({s.hidden for s in sim.specs}) != 1:
            raise ConfigError("fedavg_homo needs a single-architecture zoo", "model_zoo")
        # common start: every client begins from client 0's initialisation
        self.global_model = sim.clients[0].model.copy()
        for c in sim.clients:
            c.model = self.global_model.copy()

    def run_round(self, sim, ctx):
        stats = RoundStats()
        n_params = sum(W.size + b.size for W, b in self.global_model.layers)
        trained, counts = [], []
        for k in ctx.sampled:
            state = sim.clients[k]
            state.model = self.global_model.copy()
            result = train_with_header(state, sim.dataset, state.model.header,
                                       sim.training, ctx.client_seed(k))
            stats.add(result)
            if result.skipped:
                continue
            stats.downlink += n_params
            stats.uplink += n_params
            trained.append(state.model.layers)
            counts.append(len(state.partition.train))
        if trained:
            total = sum(counts)
            self.last_weights = [n / total for n in counts]
            self.global_model.set_layers(weighted_average(trained, self.last_weights))
        return stats

    def checkpoint_arrays(self):
        return {f"global.layer.{i}.{n}": a for i, layer in enumerate(self.global_model.layers)
                for n, a in zip(("weight", "bias"), layer)}


# -- FedProto-lite -------------------------------------------------------------------

@dataclass
class PrototypeSet:
    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.vectors.values())


def compute_prototypes(model: LocalModel, features: np.ndarray, labels: np.ndarray,
                       classes: Sequence[int]) -> PrototypeSet:
    """Mean representation per class over the given samples."""
    protos = PrototypeSet()
    if len(labels) == 0:
        return protos
    rep, _ = forward(model, features)
    for s in sorted(classes):
        mask = labels == s
        n = int(mask.sum())
        if n:
            protos.vectors[s] = rep[mask].mean(axis=0)
            protos.counts[s] = n
    return protos


def aggregate_prototypes(uploads: Sequence[tuple[int, PrototypeSet]]) -> PrototypeSet:
    """Unweighted per-class mean over clients, summed in client-id order."""
    sums: dict[int, list] = {}
    for _, ps in sorted(uploads, key=lambda u: u[0]):
        for s, v in sorted(ps.vectors.items()):
            if s in sums:
                sums[s][0] = sums[s][0] + v
                sums[s][1] += 1
                sums[s][2] += ps.counts[s]
            else:
                sums[s] = [np.array(v, dtype=np.float64), 1, ps.counts[s]]
    out = PrototypeSet()
    for s in sorted(sums):
        acc, n, total = sums[s]
        out.vectors[s] = acc / n
        out.counts[s] = total
    return out


class FedProtoLite(Algorithm):
    """Class-prototype exchange with a squared-L2 pull toward global prototypes."""

    name = "fedproto_lite"

    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise ConfigError("must be >= 0", "algo_params.lambda")
        self.lam = lam
        self.global_protos = PrototypeSet()

    def run_round(self, sim, ctx):
        stats = RoundStats()
        uploads = []
        for k in ctx.sampled:
            state = sim.clients[k]
            down = {s: self.global_protos.vectors[s] for s in state.seen_classes
                    if s in self.global_protos.vectors}
            train_idx = state.partition.train
            if len(train_idx) == 0:
                stats.skipped.append(k)
                continue
            stats.downlink += sum(v.size for v in down.values())
            loss = local_train(state.model, sim.dataset, train_idx, sim.training,
                               np.random.default_rng(ctx.client_seed(k)), down, self.lam)
            if loss is not None:
                stats.losses.append(loss)
            stats.flops += flops_estimate(state.model, len(train_idx), sim.training.epochs, "train")
            protos = compute_prototypes(state.model, sim.dataset.features[train_idx],
                                        sim.dataset.labels[train_idx], state.seen_classes)
            stats.flops += flops_estimate(state.model, len(train_idx), 1, "infer")
            stats.uplink += protos.n_params
            uploads.append((k, protos))
        if uploads:
            fresh = aggregate_prototypes(uploads)
            merged = PrototypeSet(dict(self.global_protos.vectors), dict(self.global_protos.counts))
            merged.vectors.update(fresh.vectors)
            merged.counts.update(fresh.counts)
            self.global_protos = merged
        return stats


def make_algorithm(cfg: ExperimentConfig) -> Algorithm:
    name = canonical_algorithm(cfg.algorithm)
    p = cfg.algo_params
    if name == "fedssa":
        return FedSSA(p.mu0, p.T_stable, p.fusion)
    if name == "case_b_seen_replace":
        return CaseB()
    if name == "case_a_replace":
        return CaseA()
    if name == "standalone":
        return Standalone()
    if name == "fedavg_homo":
        return FedAvgHomo()
    if name == "fedproto_lite":
        return FedProtoLite(p.lam)
    raise ConfigError(f"unknown algorithm {name!r}", "algorithm")
