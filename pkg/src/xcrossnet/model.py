"""Full model assembly: topology, parameter registry, checkpoints.

The registry is the single flat view of every parameter array that the
optimizer, the finite-difference checks, and the checkpoint writer share.
Its ordering is fixed and documented (see ParamRegistry); random
initialization draws happen in exactly that order so a seed pins the whole
parameter vector bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import layers
from .errors import CheckpointError, DimensionError

CHECKPOINT_MAGIC = "xcrossnet-checkpoint"
CHECKPOINT_VERSION = 1

#: The two conventions for counting the dense-stage output dimension in the
#: balance index: "include_input" counts the copied raw input segment
#: (M * (depth + 1)); "cross_only" counts just the cross vectors (M * depth).
BALANCE_CONVENTIONS = ("include_input", "cross_only")

@dataclass
class ModelConfig:
    """Topology and init seed.

    The stock Criteo layout is dense_fields=13, sparse_fields=26,
    embed_dim=20, cross_depth=4, mlp_widths=(400, 400); product_size
    defaults to 100 so the sparse stage output (2T = 200) is of the same
    order as the dense stage output (65).
    """

    dense_fields: int
    sparse_fields: int
    vocab_sizes: tuple[int, ...]
    embed_dim: int = 20
    product_size: int = 100
    cross_depth: int = 4
    mlp_widths: tuple[int, ...] = (400, 400)
    seed: int = 0

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)

    @classmethod
    def criteo_default(cls, vocab_sizes, seed: int = 0) -> "ModelConfig":
        return cls(dense_fields=13, sparse_fields=26, vocab_sizes=tuple(vocab_sizes),
                   embed_dim=20, product_size=100, cross_depth=4,
                   mlp_widths=(400, 400), seed=seed)

    @property
    def x0_dim(self) -> int:
        """Width of the concatenated [dense out; sparse out] vector."""
        return self.dense_fields * (self.cross_depth + 1) + 2 * self.product_size

    @property
    def mlp_input_dim(self) -> int:
        return 2 * self.x0_dim

    def validate(self) -> list[str]:
        """Collect every problem instead of stopping at the first."""
        problems = []
        if self.dense_fields < 1:
            problems.append("dense_fields: must be >= 1")
        if self.sparse_fields < 1:
            problems.append("sparse_fields: must be >= 1")
        if len(self.vocab_sizes) != self.sparse_fields:
            problems.append(
                f"vocab_sizes: got {len(self.vocab_sizes)} entries for "
                f"{self.sparse_fields} sparse fields")
        if any(v < 1 for v in self.vocab_sizes):
            problems.append("vocab_sizes: every field needs at least one category")
        if self.embed_dim < 1:
            problems.append("embed_dim: must be >= 1")
        if self.product_size < 1:
            problems.append("product_size: must be >= 1")
        if self.cross_depth < 1:
            problems.append("cross_depth: must be >= 1")
        if any(w < 1 for w in self.mlp_widths):
            problems.append("mlp_widths: widths must be >= 1")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

@dataclass
class ParamEntry:
    name: str
    values: np.ndarray  # a direct reference to the layer's parameter array
    grad: np.ndarray    # same shape, owned by the registry

class ParamRegistry:
    """Deterministic flat enumeration of every parameter array.

    Ordering: cross stack (w0, b0, w1, b1, ...), embedding tables in field
    order, product theta then order-1 weights, concat weight then bias,
    MLP (w0, b0, ...), output weight, output bias. All flat views use
    C-order raveling of the underlying arrays.
    """

    def __init__(self, entries: list[ParamEntry]):
        self.entries = entries
        self._by_name = {e.name: e for e in entries}

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> ParamEntry:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def total_size(self) -> int:
        return sum(e.values.size for e in self.entries)

    def zero_grads(self) -> None:
        for e in self.entries:
            e.grad[...] = 0.0

    def scale_grads(self, factor: float) -> None:
        for e in self.entries:
            e.grad *= factor

    def get_flat(self) -> np.ndarray:
        return np.concatenate([e.values.ravel() for e in self.entries])

    def get_grad_flat(self) -> np.ndarray:
        return np.concatenate([e.grad.ravel() for e in self.entries])

    def set_flat(self, flat: np.ndarray) -> None:
        if flat.shape != (self.total_size(),):
            raise DimensionError(
                f"set_flat: got {flat.shape}, expected ({self.total_size()},)")
        offset = 0
        for e in self.entries:
            n = e.values.size
            e.values[...] = flat[offset:offset + n].reshape(e.values.shape)
            offset += n

class XCrossNetModel:
    """The four stages wired together, plus the shared parameter registry."""

    def __init__(self, config: ModelConfig, cross: layers.CrossStack,
                 embedding: layers.Embedding, product: layers.ProductLayer,
                 concat: layers.ConcatCross, mlp: layers.Mlp):
        self.config = config
        self.cross = cross
        self.embedding = embedding
        self.product = product
        self.concat = concat
        self.mlp = mlp
        self.registry = self._build_registry()

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig) -> "XCrossNetModel":
        """Seeded initialization; identical seeds give bit-identical models.

        Draw order follows the registry: cross weights (N(0, 0.01)),
        embedding tables (N(0, 0.01)), product theta and order-1 weights
        (N(0, 0.01)), concat weight (N(0, 0.01)), MLP matrices (uniform
        +- sqrt(6 / (fan_in + fan_out))). Biases start at zero and draw
        nothing.
        """
        problems = config.validate()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        rng = np.random.default_rng(config.seed)
        cross = layers.CrossStack.init(config.dense_fields, config.cross_depth, rng)
        embedding = layers.Embedding.init(config.vocab_sizes, config.embed_dim, rng)
        product = layers.ProductLayer.init(config.product_size, config.sparse_fields,
                                           config.embed_dim, rng)
        concat = layers.ConcatCross.init(config.x0_dim, rng)
        mlp = layers.Mlp.init(config.mlp_input_dim, config.mlp_widths, rng)
        return cls(config, cross, embedding, product, concat, mlp)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "XCrossNetModel":
        """Allocate the right shapes without spending random draws."""
        zero_rng = _ZeroDraws()
        cross = layers.CrossStack.init(config.dense_fields, config.cross_depth, zero_rng)
        embedding = layers.Embedding.init(config.vocab_sizes, config.embed_dim, zero_rng)
        product = layers.ProductLayer.init(config.product_size, config.sparse_fields,
                                           config.embed_dim, zero_rng)
        concat = layers.ConcatCross.init(config.x0_dim, zero_rng)
        mlp = layers.Mlp.init(config.mlp_input_dim, config.mlp_widths, zero_rng)
        return cls(config, cross, embedding, product, concat, mlp)

    def _build_registry(self) -> ParamRegistry:
        entries = []

        def add(name, arr):
            entries.append(ParamEntry(name, arr, np.zeros_like(arr)))

        for l in range(self.cross.depth):
            add(f"cross.w{l}", self.cross.weights[l])
            add(f"cross.b{l}", self.cross.biases[l])
        for i in range(self.embedding.n_fields):
            add(f"embed.field{i}", self.embedding.tables[i])
        add("product.theta", self.product.theta)
        add("product.order1", self.product.order1)
        add("concat.w", self.concat.weight)
        add("concat.b", self.concat.bias)
        for i in range(len(self.mlp.weights)):
            add(f"mlp.w{i}", self.mlp.weights[i])
            add(f"mlp.b{i}", self.mlp.biases[i])
        add("mlp.out_w", self.mlp.out_weight)
        add("mlp.out_b", self.mlp.out_bias)
        return ParamRegistry(entries)

    # -- forward / backward -------------------------------------------------

    def forward(self, instance) -> tuple[float, "ModelCache"]:
        """Probability in (0, 1) for one instance, plus the backward cache."""
        oc, cross_cache = layers.cross_forward(instance.dense, self.cross)
        e, embed_cache = layers.embed_forward(instance.sparse, self.embedding)
        op, product_cache = layers.product_forward(e, self.product)
        h0, concat_cache = layers.concat_cross_forward(oc, op, self.concat)
        prob, mlp_cache = layers.mlp_forward(h0, self.mlp)
        return prob, ModelCache(cross_cache, embed_cache, product_cache,
                                concat_cache, mlp_cache, prob)

    def backward(self, cache: "ModelCache", label: float) -> None:
        """Accumulate the single-instance logloss gradient into the registry.

        The sigmoid/logloss chain collapses to (prob - label) at the logit,
        so the pass starts there; callers zero_grad() before a batch and
        divide by the batch size afterwards to get the mean gradient.
        """
        grad_logit = cache.prob - label
        grad_h0, mlp_grads = layers.mlp_backward_logit(cache.mlp, grad_logit, self.mlp)
        grad_oc, grad_op, concat_grads = layers.concat_cross_backward(
            cache.concat, grad_h0, self.concat)
        grad_e, product_grads = layers.product_backward(
            cache.product, grad_op, self.product)
        embed_grads = layers.embed_backward(cache.embed, grad_e, self.embedding)
        _, cross_grads = layers.cross_backward(cache.cross, grad_oc, self.cross)

        reg = self.registry
        for l in range(self.cross.depth):
            reg[f"cross.w{l}"].grad += cross_grads.weights[l]
            reg[f"cross.b{l}"].grad += cross_grads.biases[l]
        for i in range(self.embedding.n_fields):
            reg[f"embed.field{i}"].grad += embed_grads.tables[i]
        reg["product.theta"].grad += product_grads.theta
        reg["product.order1"].grad += product_grads.order1
        reg["concat.w"].grad += concat_grads.weight
        reg["concat.b"].grad += concat_grads.bias
        for i in range(len(self.mlp.weights)):
            reg[f"mlp.w{i}"].grad += mlp_grads.weights[i]
            reg[f"mlp.b{i}"].grad += mlp_grads.biases[i]
        reg["mlp.out_w"].grad += mlp_grads.out_weight
        reg["mlp.out_b"].grad += mlp_grads.out_bias

    def zero_grad(self) -> None:
        self.registry.zero_grads()

    # -- reporting ----------------------------------------------------------

    def num_parameters(self) -> dict[str, int]:
        counts = {
            "cross": self.cross.param_count(),
            "embedding": self.embedding.param_count(),
            "product": self.product.param_count(),
            "concat": self.concat.param_count(),
            "mlp": self.mlp.param_count(),
        }
        counts["total"] = sum(counts.values())
        return counts

@dataclass
class ModelCache:
    cross: layers.CrossCache
    embed: layers.EmbedCache
    product: layers.ProductCache
    concat: layers.ConcatCache
    mlp: layers.MlpCache
    prob: float

class _ZeroDraws:
    """Stand-in generator whose draws are all zero (for shape allocation)."""

    def normal(self, loc, scale, size):
        return np.zeros(size)

    def uniform(self, low, high, size):
        return np.zeros(size)

def balance_index(config: ModelConfig, convention: str = "include_input") -> float:
    """(dense-out dim / sparse-out dim) / (dense fields / sparse fields).

    A value of 1 means the two representation branches are as wide,
    relative to each other, as the raw field counts are.
    """
    if convention not in BALANCE_CONVENTIONS:
        raise ValueError(
            f"convention must be one of {BALANCE_CONVENTIONS}, got {convention!r}")
    if convention == "include_input":
        oc_dim = config.dense_fields * (config.cross_depth + 1)
    else:
        oc_dim = config.dense_fields * config.cross_depth
    op_dim = 2 * config.product_size
    return (oc_dim / op_dim) / (config.dense_fields / config.sparse_fields)

# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# One file: a single JSON header line (format marker, version, config,
# per-stage parameter counts, registry ordering), a newline, then every
# parameter as little-endian float64 in registry order. Loading is bitwise
# exact.

def save_checkpoint(model: XCrossNetModel, path) -> None:
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "param_counts": model.num_parameters(),
        "registry": model.registry.names(),
    }
    flat = model.registry.get_flat().astype("<f8")
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(flat.tobytes())

def load_checkpoint(path) -> XCrossNetModel:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad format marker)")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('version')!r}, "
            f"this build reads version {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(header["config"])
    model = XCrossNetModel.zeros(config)
    expected = model.registry.total_size()
    if header.get("registry") != model.registry.names():
        raise CheckpointError("checkpoint registry ordering does not match config")
    if len(blob) != 8 * expected:
        raise CheckpointError(
            f"parameter blob has {len(blob)} bytes, expected {8 * expected}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    model.registry.set_flat(flat)
    return model
