"""Network specifications, builders and execution.

A :class:`NetworkSpec` is a declarative, JSON-serializable description of a
block graph. Node ``0`` is the raw input vector, nodes ``1..n`` are blocks
and node ``n + 1`` is the fully connected head. Every block receives the
outputs of its source nodes; when several sources meet they are flattened
and concatenated (most recent block first) into a single-channel sequence.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from math import comb
from pathlib import Path

import numpy as np

from spidernet import engine
from spidernet.engine import (
    BatchNorm,
    Conv1d,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    MaxPool1d,
    ReLU,
    Sequential,
    ShapeError,
)

INPUT = 0
ARCH_KINDS = ("spidernet", "cnn1d", "densenet1d", "fdensenet")
BLOCK_KINDS = ("conv", "fdense", "stem", "dense", "transition")


@dataclass(frozen=True)
class BlockSpec:
    """One block of a network.

    ``kind`` selects the block body:

    * ``conv``: dropout -> conv -> BN -> ReLU -> ``n_pool`` max-pools [-> GAP]
    * ``fdense``: dropout -> ``n_convs`` densely connected conv-BN-ReLU units
      -> ``n_pool`` max-pools [-> GAP]
    * ``stem``: DenseNet initial conv -> BN -> ReLU -> max-pool
    * ``dense``: DenseNet block of ``n_convs`` bottlenecked pre-activation
      units with growth ``filters`` [-> BN -> ReLU -> GAP]
    * ``transition``: BN -> ReLU -> 1x1 conv to ``filters`` channels -> max-pool
    """

    kind: str
    filters: int
    kernel: int = 3
    stride: int = 1
    n_pool: int = 1
    pool_kernel: int = 2
    pool_stride: int = 2
    input_dropout: float = 0.0
    has_gap: bool = False
    n_convs: int = 1
    bottleneck: int = 0


@dataclass(frozen=True)
class HeadSpec:
    hidden: int = 100
    dropout: float = 0.25
    input_dropout: float = 0.0
    classes: int = 2


@dataclass(frozen=True)
class NetworkSpec:
    arch_kind: str
    input_length: int
    blocks: tuple
    head: HeadSpec
    edges: tuple
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    name: str = ""

    def __post_init__(self):
        if self.arch_kind not in ARCH_KINDS:
            raise ValueError(f"unknown arch_kind {self.arch_kind!r}")
        n = len(self.blocks)
        for b in self.blocks:
            if b.kind not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {b.kind!r}")
            if not 0.0 <= b.input_dropout < 1.0:
                raise ValueError(f"block dropout must be in [0, 1), got {b.input_dropout}")
        for src, dst in self.edges:
            if not 0 <= src < dst <= n + 1:
                raise ValueError(f"edge ({src}, {dst}) is not a forward edge of a {n}-block network")
        for dst in range(1, n + 2):
            if not self.sources(dst):
                raise ValueError(f"node {dst} has no incoming edge")

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def head_index(self):
        return len(self.blocks) + 1

    def sources(self, dst):
        """Source nodes of ``dst`` in concatenation order (most recent first)."""
        return sorted({s for s, d in self.edges if d == dst}, reverse=True)

    def to_dict(self):
        d = asdict(self)
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            arch_kind=d["arch_kind"],
            input_length=int(d["input_length"]),
            blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
            head=HeadSpec(**d["head"]),
            edges=tuple(tuple(e) for e in d["edges"]),
            bn_eps=d.get("bn_eps", 1e-5),
            bn_momentum=d.get("bn_momentum", 0.9),
            name=d.get("name", ""),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# builders


def dropout_schedule(n_blocks, schedule="exp"):
    """Per-block input dropout rates for SpiderNet blocks 1..n.

    ``"exp"`` gives ``min(0.001 * k**4, 0.9)`` on blocks 4..n-1 and zero
    elsewhere; ``"zero"`` disables block dropout; a float applies one
    constant rate to every block; a sequence is used verbatim.
    """
    if isinstance(schedule, str):
        if schedule == "exp":
            return tuple(min(0.001 * k**4, 0.9) if 4 <= k <= n_blocks - 1 else 0.0 for k in range(1, n_blocks + 1))
        if schedule == "zero":
            return (0.0,) * n_blocks
        schedule = float(schedule)
    if isinstance(schedule, (int, float)):
        return (float(schedule),) * n_blocks
    rates = tuple(float(p) for p in schedule)
    if len(rates) != n_blocks:
        raise ValueError(f"dropout schedule has {len(rates)} entries for {n_blocks} blocks")
    return rates


def spidernet_edges(n_blocks):
    return ((INPUT, 1),) + tuple((i, j) for j in range(2, n_blocks + 1) for i in range(1, j)) + (
        (n_blocks, n_blocks + 1),
    )


def chain_edges(n_blocks):
    return tuple((i, i + 1) for i in range(n_blocks + 1))


def build_spidernet(
    n_blocks=6,
    filters=10,
    kernel=3,
    hidden=100,
    dropout=0.25,
    dropout_schedule_="exp",
    input_length=128,
    edges=None,
):
    """Fully connected residual network of ``n_blocks`` Spider-blocks.

    Block ``k < n`` carries ``n - k`` max-pools; the last block has one
    max-pool followed by global average pooling.
    """
    if n_blocks < 2:
        raise ValueError("SpiderNet needs at least 2 blocks")
    if n_blocks > 10:
        raise ValueError("SpiderNet supports at most 10 blocks")
    if input_length < 2 ** (n_blocks - 1):
        warnings.warn(
            f"input_length {input_length} < 2**(n_blocks-1); deep pooling stacks will pass through",
            stacklevel=2,
        )
    rates = dropout_schedule(n_blocks, dropout_schedule_)
    blocks = tuple(
        BlockSpec(
            kind="conv",
            filters=filters,
            kernel=kernel,
            n_pool=(n_blocks - k) if k < n_blocks else 1,
            input_dropout=rates[k - 1],
            has_gap=(k == n_blocks),
        )
        for k in range(1, n_blocks + 1)
    )
    return NetworkSpec(
        arch_kind="spidernet",
        input_length=input_length,
        blocks=blocks,
        head=HeadSpec(hidden=hidden, dropout=dropout),
        edges=tuple(edges) if edges is not None else spidernet_edges(n_blocks),
        name=f"SpiderNet-{n_blocks}",
    )


def build_cnn1d(n_conv=8, filters=10, kernel=3, hidden=100, dropout=0.25, input_length=128):
    """Plain alternation of conv-BN-ReLU and max-pool, then the dense head."""
    if n_conv not in (3, 6, 8):
        raise ValueError(f"unsupported CNN depth {n_conv}; expected 3, 6 or 8")
    blocks = tuple(BlockSpec(kind="conv", filters=filters, kernel=kernel) for _ in range(n_conv))
    return NetworkSpec(
        arch_kind="cnn1d",
        input_length=input_length,
        blocks=blocks,
        head=HeadSpec(hidden=hidden, dropout=dropout),
        edges=chain_edges(n_conv),
        name=f"CNN-{n_conv}",
    )


def build_densenet1d(
    block_sizes=(4, 4),
    growth_k=5,
    bottleneck_size=2,
    theta=0.5,
    conv_kernel=3,
    initial_filters=5,
    initial_stride=1,
    initial_conv_width=5,
    initial_pool_width=2,
    initial_pool_stride=2,
    transition_pool_stride=1,
    hidden=100,
    dropout=0.25,
    input_length=163,
):
    """Classic DenseNet for 1D vectors: stem, dense blocks, compressing transitions."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    if not block_sizes:
        raise ValueError("block_sizes must be non-empty")
    blocks = [
        BlockSpec(
            kind="stem",
            filters=initial_filters,
            kernel=initial_conv_width,
            stride=initial_stride,
            pool_kernel=initial_pool_width,
            pool_stride=initial_pool_stride,
        )
    ]
    channels = initial_filters
    for i, size in enumerate(block_sizes):
        last = i == len(block_sizes) - 1
        blocks.append(
            BlockSpec(
                kind="dense",
                filters=growth_k,
                kernel=conv_kernel,
                n_convs=size,
                bottleneck=bottleneck_size,
                n_pool=0,
                has_gap=last,
            )
        )
        channels += growth_k * size
        if not last:
            channels = max(1, int(np.floor(theta * channels)))
            blocks.append(
                BlockSpec(kind="transition", filters=channels, kernel=1, pool_kernel=2, pool_stride=transition_pool_stride)
            )
    return NetworkSpec(
        arch_kind="densenet1d",
        input_length=input_length,
        blocks=tuple(blocks),
        head=HeadSpec(hidden=hidden, dropout=dropout),
        edges=chain_edges(len(blocks)),
        name=f"DenseNet-{sum(block_sizes)} {list(block_sizes)}",
    )


def build_fdensenet(
    convs_per_block=3,
    filters=15,
    kernel=7,
    hidden=60,
    dropout=0.25,
    input_length=128,
    n_blocks=2,
    pools=(3, 1),
):
    """Two fully connected convolutional blocks without a bottleneck between them.

    Block 2 and the head both receive concatenations that include an
    earlier node, so the 2-block form has exactly two skip edges:
    input -> block 2 and block 1 -> head.
    """
    if n_blocks != 2:
        raise ValueError("F-DenseNet is defined for 2 blocks")
    if convs_per_block not in (3, 4):
        raise ValueError(f"convs_per_block must be 3 or 4, got {convs_per_block}")
    blocks = (
        BlockSpec(kind="fdense", filters=filters, kernel=kernel, n_convs=convs_per_block, n_pool=pools[0]),
        BlockSpec(
            kind="fdense",
            filters=filters,
            kernel=kernel,
            n_convs=convs_per_block,
            n_pool=pools[1],
            input_dropout=dropout,
            has_gap=True,
        ),
    )
    edges = ((INPUT, 1), (INPUT, 2), (1, 2), (1, 3), (2, 3))
    return NetworkSpec(
        arch_kind="fdensenet",
        input_length=input_length,
        blocks=blocks,
        head=HeadSpec(hidden=hidden, dropout=dropout, input_dropout=dropout),
        edges=edges,
        name=f"F-DenseNet-{2 * convs_per_block} [{convs_per_block}; {convs_per_block}]",
    )


def build(arch, **kwargs):
    """Dispatch to a builder by CLI arch name."""
    builders = {
        "spidernet": build_spidernet,
        "cnn": build_cnn1d,
        "cnn1d": build_cnn1d,
        "densenet": build_densenet1d,
        "densenet1d": build_densenet1d,
        "fdensenet": build_fdensenet,
    }
    if arch not in builders:
        raise ValueError(f"unknown architecture {arch!r}")
    return builders[arch](**kwargs)


def count_connections(spec: NetworkSpec):
    """Return (total_edges, skip_edges); a skip edge jumps over at least one node."""
    skips = sum(1 for s, d in spec.edges if d != s + 1)
    return len(spec.edges), skips


def spidernet_skip_count(n_blocks):
    return comb(n_blocks, 2) - (n_blocks - 1)


# ---------------------------------------------------------------------------
# symbolic shape propagation


def _conv_len(length, kernel, stride):
    k = min(kernel, length)
    return (length - k) // stride + 1


def _pool_len(length, kernel, stride):
    if length < kernel:
        return length
    return (length - kernel) // stride + 1


def _first_stages(spec: NetworkSpec):
    b = spec.blocks[0]
    if b.kind not in ("conv", "stem"):
        return None
    n_pool = 1 if b.kind == "stem" else b.n_pool
    return [(b.kernel, b.stride, True)] + [(b.pool_kernel, b.pool_stride, False)] * n_pool


def input_coverage(spec: NetworkSpec, length=None):
    """Number of leading input positions that can influence block 1's output.

    Valid convolutions and floor-mode pools drop trailing positions, so a
    record vector may be read only partly. Blocks other than conv/stem are
    reported as fully covered.
    """
    length = spec.input_length if length is None else length
    stages = _first_stages(spec)
    if stages is None:
        return length
    lengths = [length]
    for k, s, is_conv in stages:
        lengths.append(_conv_len(lengths[-1], k, s) if is_conv else _pool_len(lengths[-1], k, s))
    last = lengths[-1] - 1
    for (k, s, is_conv), n_in in zip(reversed(stages), reversed(lengths[:-1])):
        if not is_conv and n_in < k:
            continue
        last = last * s + min(k, n_in) - 1
    return last + 1


def input_padding(spec: NetworkSpec):
    """Smallest number of trailing zero columns after which block 1 reads every real column."""
    n = spec.input_length
    pad = 0
    while input_coverage(spec, n + pad) < n:
        pad += 1
    return pad


def _block_out_shape(b: BlockSpec, channels, length):
    if b.kind in ("conv", "stem"):
        channels, length = b.filters, _conv_len(length, b.kernel, b.stride)
        n_pool = 1 if b.kind == "stem" else b.n_pool
        for _ in range(n_pool):
            length = _pool_len(length, b.pool_kernel, b.pool_stride)
    elif b.kind == "fdense":
        lengths = [length]
        for _ in range(b.n_convs):
            lengths.append(_conv_len(min(lengths), b.kernel, 1))
        channels, length = b.filters * b.n_convs, min(lengths)
        for _ in range(b.n_pool):
            length = _pool_len(length, b.pool_kernel, b.pool_stride)
    elif b.kind == "dense":
        for _ in range(b.n_convs):
            length = _conv_len(length, b.kernel, 1)
        channels = channels + b.filters * b.n_convs
    elif b.kind == "transition":
        channels = b.filters
        length = _pool_len(length, b.pool_kernel, b.pool_stride)
    if b.has_gap:
        return (channels,)
    return (channels, length)


def _merged_shape(spec, shapes, dst):
    srcs = spec.sources(dst)
    if len(srcs) == 1 and spec.arch_kind in ("cnn1d", "densenet1d"):
        return shapes[srcs[0]]
    return (1, int(sum(np.prod(shapes[s]) for s in srcs)))


def shape_trace(spec: NetworkSpec):
    """Symbolic per-node shapes (without batch axis), computed from the spec alone.

    Returns a list ``[(in_shape, out_shape)]`` for nodes 0..n+1; node 0 is
    the input and the last entry is the head (flattened input width, 2).
    """
    shapes = {INPUT: (1, spec.input_length)}
    trace = [((1, spec.input_length), (1, spec.input_length))]
    for k, b in enumerate(spec.blocks, start=1):
        in_shape = _merged_shape(spec, shapes, k)
        out = _block_out_shape(b, *in_shape)
        if min(out) < 1:
            raise ShapeError(f"block {k} produces non-positive shape {out}")
        shapes[k] = out
        trace.append((in_shape, out))
    h = spec.head_index
    width = int(sum(np.prod(shapes[s]) for s in spec.sources(h)))
    trace.append(((width,), (spec.head.classes,)))
    return trace


# ---------------------------------------------------------------------------
# executable blocks


def _crop(x, length):
    start = (x.shape[2] - length) // 2
    return x[:, :, start : start + length]


def _uncrop(g, length):
    out = np.zeros(g.shape[:2] + (length,))
    start = (length - g.shape[2]) // 2
    out[:, :, start : start + g.shape[2]] = g
    return out


class DenseStack(Layer):
    """Units fed with the channel-concatenation of all earlier feature maps.

    Valid convolutions shrink the length, so earlier maps are center-cropped
    to the shortest length before each concatenation.
    """

    kind = "concat"

    def __init__(self, units, keep_input):
        super().__init__()
        self.layers = list(units)
        self.keep_input = keep_input
        self.params = [p for u in self.layers for p in u.params]

    def forward(self, x, train=False, rng=None):
        feats = [x]
        steps = []
        for unit in self.layers:
            length = min(f.shape[2] for f in feats)
            inp = np.concatenate([_crop(f, length) for f in feats], axis=1)
            steps.append(([f.shape for f in feats], length))
            feats.append(unit.forward(inp, train, rng))
        keep = feats if self.keep_input else feats[1:]
        length = min(f.shape[2] for f in keep)
        self.cache = (steps, [f.shape for f in feats], length)
        return np.concatenate([_crop(f, length) for f in keep], axis=1)

    def backward(self, grad_out):
        steps, shapes, length = self._need_cache()
        grads = [np.zeros(s) for s in shapes]
        keep_idx = range(len(shapes)) if self.keep_input else range(1, len(shapes))
        offset = 0
        for i in keep_idx:
            c = shapes[i][1]
            grads[i] += _uncrop(grad_out[:, offset : offset + c], shapes[i][2])
            offset += c
        for j in reversed(range(len(self.layers))):
            g = self.layers[j].backward(grads[j + 1])
            in_shapes, ln = steps[j]
            offset = 0
            for i, s in enumerate(in_shapes):
                grads[i] += _uncrop(g[:, offset : offset + s[1]], s[2])
                offset += s[1]
        return grads[0]


def _conv(cin, cout, kernel, length, stride, rng, name):
    return Conv1d(cin, cout, min(kernel, length), stride, rng=rng, name=name)


def make_block(b: BlockSpec, in_shape, rng, name, eps=1e-5, momentum=0.9):
    """Instantiate the layers of one block for a given (channels, length) input."""
    cin, length = in_shape
    layers = []
    if b.input_dropout > 0:
        layers.append(Dropout(b.input_dropout))
    if b.kind in ("conv", "stem"):
        layers += [
            _conv(cin, b.filters, b.kernel, length, b.stride, rng, f"{name}.conv"),
            BatchNorm(b.filters, eps, momentum, name=f"{name}.bn"),
            ReLU(),
        ]
        layers += [MaxPool1d(b.pool_kernel, b.pool_stride) for _ in range(1 if b.kind == "stem" else b.n_pool)]
    elif b.kind == "fdense":
        units, channels, ln = [], cin, length
        for j in range(b.n_convs):
            conv = _conv(channels, b.filters, b.kernel, ln, 1, rng, f"{name}.u{j}.conv")
            units.append(Sequential([conv, BatchNorm(b.filters, eps, momentum, name=f"{name}.u{j}.bn"), ReLU()]))
            ln = ln - conv.kernel + 1
            channels += b.filters
        layers.append(DenseStack(units, keep_input=False))
        layers += [MaxPool1d(b.pool_kernel, b.pool_stride) for _ in range(b.n_pool)]
    elif b.kind == "dense":
        units, channels, ln = [], cin, length
        width = b.bottleneck * b.filters if b.bottleneck else channels
        for j in range(b.n_convs):
            unit = [BatchNorm(channels, eps, momentum, name=f"{name}.u{j}.bn1"), ReLU()]
            mid = channels
            if b.bottleneck:
                unit += [
                    Conv1d(channels, width, 1, rng=rng, name=f"{name}.u{j}.bottleneck"),
                    BatchNorm(width, eps, momentum, name=f"{name}.u{j}.bn2"),
                    ReLU(),
                ]
                mid = width
            conv = _conv(mid, b.filters, b.kernel, ln, 1, rng, f"{name}.u{j}.conv")
            unit.append(conv)
            units.append(Sequential(unit))
            ln = ln - conv.kernel + 1
            channels += b.filters
        layers.append(DenseStack(units, keep_input=True))
        if b.has_gap:
            layers += [BatchNorm(channels, eps, momentum, name=f"{name}.bn_out"), ReLU()]
    elif b.kind == "transition":
        layers += [
            BatchNorm(cin, eps, momentum, name=f"{name}.bn"),
            ReLU(),
            Conv1d(cin, b.filters, 1, rng=rng, name=f"{name}.conv"),
            MaxPool1d(b.pool_kernel, b.pool_stride),
        ]
    if b.has_gap:
        layers.append(GlobalAvgPool())
    return Sequential(layers)


def _flatten(a):
    return a.reshape(a.shape[0], -1)


class Network:
    """Executable network with parameters, built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.trace = shape_trace(spec)
        self.blocks = []
        for k, b in enumerate(spec.blocks, start=1):
            in_shape = self.trace[k][0]
            self.blocks.append(make_block(b, in_shape, rng, f"block{k}", spec.bn_eps, spec.bn_momentum))
        width = self.trace[-1][0][0]
        h = spec.head
        head = []
        if h.input_dropout > 0:
            head.append(Dropout(h.input_dropout))
        head += [
            Dense(width, h.hidden, rng=rng, name="head.fc1"),
            ReLU(),
            Dropout(h.dropout),
            Dense(h.hidden, h.classes, rng=rng, name="head.fc2"),
        ]
        self.head = Sequential(head)
        self.last_shapes = None

    @property
    def params(self):
        return [p for blk in self.blocks for p in blk.params] + self.head.params

    @property
    def n_params(self):
        return int(sum(p.value.size for p in self.params))

    def batchnorms(self):
        return [l for blk in self.blocks + [self.head] for l in engine.iter_layers(blk) if isinstance(l, BatchNorm)]

    def _merge(self, outs, dst):
        srcs = self.spec.sources(dst)
        if len(srcs) == 1 and self.spec.arch_kind in ("cnn1d", "densenet1d"):
            return outs[srcs[0]], None
        parts = [_flatten(outs[s]) for s in srcs]
        widths = [p.shape[1] for p in parts]
        return np.concatenate(parts, axis=1)[:, None, :], (srcs, widths)

    def forward(self, x, train=False, rng=None):
        """Logits of shape (batch, 2) for inputs of shape (batch, 1, L) or (batch, L)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.spec.input_length:
            raise ShapeError(f"expected input (batch, 1, {self.spec.input_length}), got {x.shape}")
        outs = {INPUT: x}
        self._merges = {}
        shapes = [(x.shape[1:], x.shape[1:])]
        for k, blk in enumerate(self.blocks, start=1):
            inp, info = self._merge(outs, k)
            self._merges[k] = info
            outs[k] = blk.forward(inp, train, rng)
            shapes.append((inp.shape[1:], outs[k].shape[1:]))
        h = self.spec.head_index
        srcs = self.spec.sources(h)
        parts = [_flatten(outs[s]) for s in srcs]
        self._merges[h] = (srcs, [p.shape[1] for p in parts])
        feats = np.concatenate(parts, axis=1)
        logits = self.head.forward(feats, train, rng)
        shapes.append((feats.shape[1:], logits.shape[1:]))
        self._out_shapes = {k: v.shape for k, v in outs.items()}
        self.last_shapes = shapes
        return logits

    def backward(self, grad_logits):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        grads = {k: np.zeros(s) for k, s in self._out_shapes.items()}

        def scatter(info, g):
            srcs, widths = info
            offset = 0
            for s, w in zip(srcs, widths):
                grads[s] += g[:, offset : offset + w].reshape(grads[s].shape)
                offset += w

        h = self.spec.head_index
        scatter(self._merges[h], self.head.backward(grad_logits))
        for k in range(len(self.blocks), 0, -1):
            g = self.blocks[k - 1].backward(grads[k])
            info = self._merges[k]
            if info is None:
                grads[self.spec.sources(k)[0]] += g
            else:
                scatter(info, g[:, 0, :])
        return grads[INPUT]

    def predict_proba(self, x, batch_size=1024):
        """Eval-mode class probabilities, computed in chunks."""
        x = np.asarray(x, dtype=np.float64)
        out = [engine.softmax(self.forward(x[i : i + batch_size], train=False)) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2))

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    # -- state -------------------------------------------------------------

    def state_dict(self):
        state = {p.name: p.value.copy() for p in self.params}
        for bn in self.batchnorms():
            state[f"{bn.name}.running_mean"] = bn.running_mean.copy()
            state[f"{bn.name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        for p in self.params:
            if state[p.name].shape != p.value.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]
        for bn in self.batchnorms():
            bn.running_mean[...] = state[f"{bn.name}.running_mean"]
            bn.running_var[...] = state[f"{bn.name}.running_var"]


def forward(net: Network, batch, mode="eval", rng=None):
    """Class probabilities (rows sum to 1) for a batch of shape (B, 1, L)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return engine.softmax(net.forward(batch, train=(mode == "train"), rng=rng))


def with_edges(spec: NetworkSpec, edges):
    return replace(spec, edges=tuple(tuple(e) for e in edges))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: Network, extra=None):
    """Write spec, named parameter arrays and BN statistics to one ``.npz`` file."""
    meta = {"spec": net.spec.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in net.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return Path(path)


def load_checkpoint(path):
    """Return (network, extra metadata) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        state = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
    net = Network(NetworkSpec.from_dict(meta["spec"]))
    net.load_state_dict(state)
    return net, meta["extra"]
