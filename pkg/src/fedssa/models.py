"""Split models: a client-specific MLP extractor spliced onto a shared header.

The header is the single output layer (d_rep -> S). Row ``s`` of its weight
together with ``bias[s]`` is the complete parameter block for class ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Layer, network_forward

ClassRow = tuple[np.ndarray, float]  # (weight row of length d_rep, bias)


@dataclass(frozen=True)
class ExtractorSpec:
    hidden: tuple[int, ...]
    input_dim: int
    d_rep: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if not self.hidden:
            raise ConfigError("extractor needs at least one hidden layer", "model_zoo")
        if min(self.hidden) <= 0 or self.input_dim <= 0 or self.d_rep <= 0:
            raise ConfigError("layer widths must be positive", "model_zoo")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.d_rep]


# Desk-scale stand-in for the five CNNs: widths shrink like their FC1 layers,
# and the second model is one layer deeper (it differs from the first only in
# conv filter count there). All share d_rep.
DEFAULT_ZOO_HIDDEN: tuple[tuple[int, ...], ...] = ((128,), (128, 96), (96,), (80,), (64,))


def default_zoo(input_dim: int, d_rep: int = 64) -> list[ExtractorSpec]:
    return [ExtractorSpec(h, input_dim, d_rep) for h in DEFAULT_ZOO_HIDDEN]


@dataclass
class ClassificationHeader:
    weight: np.ndarray  # S x d_rep
    bias: np.ndarray  # S

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"header weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def d_rep(self) -> int:
        return self.weight.shape[1]

    def row(self, s: int) -> ClassRow:
        return self.weight[s].copy(), float(self.bias[s])

    def rows(self, classes: Iterable[int]) -> dict[int, ClassRow]:
        return {int(s): self.row(s) for s in sorted(classes)}

    def copy(self) -> "ClassificationHeader":
        return ClassificationHeader(self.weight.copy(), self.bias.copy())

    def equals(self, other: "ClassificationHeader") -> bool:
        return np.array_equal(self.weight, other.weight) and np.array_equal(self.bias, other.bias)


@dataclass
class LocalModel:
    spec: ExtractorSpec
    extractor: list[Layer]
    header: ClassificationHeader

    def __post_init__(self):
        check_splice(self.extractor, self.header)

    @property
    def layers(self) -> list[Layer]:
        return [*self.extractor, (self.header.weight, self.header.bias)]

    def set_layers(self, layers: Sequence[Layer]) -> None:
        *ext, (W, b) = layers
        self.extractor = [(w.copy(), c.copy()) for w, c in ext]
        self.header = ClassificationHeader(W.copy(), b.copy())

    def copy(self) -> "LocalModel":
        return LocalModel(self.spec, [(W.copy(), b.copy()) for W, b in self.extractor],
                          self.header.copy())


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_header(n_classes: int, d_rep: int, rng: np.random.Generator) -> ClassificationHeader:
    return ClassificationHeader(xavier_uniform(rng, n_classes, d_rep), np.zeros(n_classes))


def build_model(
    spec: ExtractorSpec,
    n_classes: int,
    seed: int | np.random.Generator,
    d_rep: int | None = None,
) -> LocalModel:
    """Xavier-uniform weights, zero biases.

    ``d_rep`` is the representation width the caller's header expects; it
    must agree with the spec.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}", "S")
    if d_rep is not None and d_rep != spec.d_rep:
        raise DimensionError(f"spec has d_rep={spec.d_rep}, header requested {d_rep}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = spec.widths
    extractor = [(xavier_uniform(rng, fo, fi), np.zeros(fo))
                 for fi, fo in zip(widths[:-1], widths[1:])]
    return LocalModel(spec, extractor, init_header(n_classes, spec.d_rep, rng))


def check_splice(extractor: Sequence[Layer], header: ClassificationHeader) -> None:
    out_dim = extractor[-1][0].shape[0]
    if out_dim != header.d_rep:
        raise DimensionError(f"extractor emits {out_dim} features, header expects {header.d_rep}")


def split(model: LocalModel) -> tuple[list[Layer], ClassificationHeader]:
    """Detach extractor and header as independent copies."""
    return [(W.copy(), b.copy()) for W, b in model.extractor], model.header.copy()


def splice(extractor: Sequence[Layer], header: ClassificationHeader,
           spec: ExtractorSpec | None = None) -> LocalModel:
    check_splice(extractor, header)
    if spec is None:
        spec = ExtractorSpec(tuple(W.shape[0] for W, _ in extractor[:-1]),
                             extractor[0][0].shape[1], header.d_rep)
    return LocalModel(spec, [(W.copy(), b.copy()) for W, b in extractor], header.copy())


def forward(model: LocalModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise DimensionError(f"input shape {x.shape}, model expects {model.spec.input_dim} columns")
    return network_forward(model.layers, x)


def count_params(obj, rows: Iterable[int] | None = None) -> int:
    """Scalar parameter count of a model, a header, or a subset of header rows.

    Header rows count ``d_rep + 1`` each (weight row plus bias). For the
    weights-only convention use :func:`count_header_weights`.
    """
    if isinstance(obj, LocalModel):
        if rows is not None:
            return count_params(obj.header, rows)
        return sum(W.size + b.size for W, b in obj.layers)
    if isinstance(obj, ClassificationHeader):
        n_rows = obj.n_classes if rows is None else len(set(rows))
        return n_rows * (obj.d_rep + 1)
    if isinstance(obj, ExtractorSpec):
        w = obj.widths
        return sum(fi * fo + fo for fi, fo in zip(w[:-1], w[1:]))
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def count_header_weights(header: ClassificationHeader) -> int:
    return header.weight.size


def full_model_params(spec: ExtractorSpec, n_classes: int) -> int:
    return count_params(spec) + n_classes * (spec.d_rep + 1)


# -- checkpoints ------------------------------------------------------------
#
# A model checkpoint is an uncompressed .npz archive of float64 arrays named
#   extractor.<i>.weight, extractor.<i>.bias, header.weight, header.bias
# plus int64 arrays "spec.hidden", "spec.input_dim", "spec.d_rep".


def model_arrays(model: LocalModel, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {
        f"{prefix}spec.hidden": np.asarray(model.spec.hidden, dtype=np.int64),
        f"{prefix}spec.input_dim": np.asarray(model.spec.input_dim, dtype=np.int64),
        f"{prefix}spec.d_rep": np.asarray(model.spec.d_rep, dtype=np.int64),
        f"{prefix}header.weight": model.header.weight,
        f"{prefix}header.bias": model.header.bias,
    }
    for i, (W, b) in enumerate(model.extractor):
        arrays[f"{prefix}extractor.{i}.weight"] = W
        arrays[f"{prefix}extractor.{i}.bias"] = b
    return arrays


def model_from_arrays(arrays, prefix: str = "") -> LocalModel:
    spec = ExtractorSpec(tuple(int(v) for v in arrays[f"{prefix}spec.hidden"]),
                         int(arrays[f"{prefix}spec.input_dim"]),
                         int(arrays[f"{prefix}spec.d_rep"]))
    extractor = [(np.array(arrays[f"{prefix}extractor.{i}.weight"]),
                  np.array(arrays[f"{prefix}extractor.{i}.bias"]))
                 for i in range(len(spec.hidden) + 1)]
    header = ClassificationHeader(np.array(arrays[f"{prefix}header.weight"]),
                                  np.array(arrays[f"{prefix}header.bias"]))
    return LocalModel(spec, extractor, header)


def save_model(model: LocalModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **model_arrays(model))


def load_model(path: str | Path) -> LocalModel:
    with np.load(path) as arrays:
        return model_from_arrays(arrays)
