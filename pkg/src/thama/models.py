"""Model assembly (FCN, CNN, concatenation fusion, THAMA), parameter counting, checkpoints.

Parameter shapes are a pure function of :class:`ModelSpec`; see
:func:`param_layout`. The closed-form parameter count is

    conv block      : 1*3*64 + 64 + 64*3*128 + 128 + 128*3*256 + 256 = 123_520
    flat dim  d'    : 256 * floor(floor(floor(d/2)/2)/2)
    FCN head on n   : n*128 + 128 + 128*64 + 64 + 64 + 1
    fcn             : head(d)
    cnn             : block + head(d')
    concat          : 2*block + head(d1' + d2')
    thama (full)    : 2*block + (d1' + d2')*d_f + d_f**3 + head(d_f)
    thama (factored): 2*block + (d1' + d2')*d_f + r1*r2*r3 + d_f*(r1 + r2 + r3) + head(d_f)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from thama import fusion
from thama.autodiff import ComputeGraph
from thama.errors import ConfigError, CorruptCheckpointError, ShapeError, SpecMismatchError
from thama.layers import KERNEL_WIDTH, ParamInfo, init_parameters

KINDS = ("fcn", "cnn", "concat", "thama")
FUSION_KINDS = ("concat", "thama")
CONV_CHANNELS = (64, 128, 256)
HIDDEN = (128, 64)
CONV_BLOCK_PARAMS = sum(
    c_in * KERNEL_WIDTH * c_out + c_out for c_in, c_out in zip((1,) + CONV_CHANNELS[:-1], CONV_CHANNELS)
)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    kind: Literal["fcn", "cnn", "concat", "thama"]
    d1: int
    d2: int | None = None
    d_f: int = 96
    core: Literal["full", "factored"] = "full"
    ranks: tuple[int, int, int] = (32, 32, 32)
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.kind in FUSION_KINDS:
            if self.d2 is None:
                raise ConfigError(f"{self.kind} needs two input dims")
        elif self.d2 is not None:
            raise ConfigError(f"{self.kind} takes a single view; d2 must be unset")
        min_dim = 1 if self.kind == "fcn" else 8
        for d in (self.d1, self.d2):
            if d is not None and d < min_dim:
                raise ConfigError(f"{self.kind}: input dim {d} < {min_dim} (three pool-2 stages need d >= 8)")
        if self.d_f < 1:
            raise ConfigError("d_f must be >= 1")
        if self.core not in ("full", "factored"):
            raise ConfigError(f"unknown core kind {self.core!r}")
        if self.kind == "thama" and self.core == "factored":
            if len(self.ranks) != 3 or not all(1 <= r <= self.d_f for r in self.ranks):
                raise ConfigError(f"ranks {self.ranks} must be three values in [1, d_f={self.d_f}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_views(self):
        return 2 if self.kind in FUSION_KINDS else 1

    def to_dict(self):
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model spec: {exc}") from None


def flat_dim(d: int) -> int:
    return CONV_CHANNELS[-1] * (d // 2 // 2 // 2)


def _head_layout(n_in: int) -> dict[str, ParamInfo]:
    h1, h2 = HIDDEN
    return {
        "fcn.dense1.weight": ParamInfo((n_in, h1), "he", n_in, h1),
        "fcn.dense1.bias": ParamInfo((h1,), "zeros"),
        "fcn.dense2.weight": ParamInfo((h1, h2), "he", h1, h2),
        "fcn.dense2.bias": ParamInfo((h2,), "zeros"),
        "out.weight": ParamInfo((h2, 1), "glorot", h2, 1),
        "out.bias": ParamInfo((1,), "zeros"),
    }


def _conv_layout(view: int) -> dict[str, ParamInfo]:
    layout = {}
    c_in = 1
    for i, c_out in enumerate(CONV_CHANNELS, start=1):
        layout[f"view{view}.conv{i}.kernel"] = ParamInfo(
            (c_out, c_in, KERNEL_WIDTH), "he", c_in * KERNEL_WIDTH, c_out * KERNEL_WIDTH
        )
        layout[f"view{view}.conv{i}.bias"] = ParamInfo((c_out,), "zeros")
        c_in = c_out
    return layout


def param_layout(spec: ModelSpec) -> dict[str, ParamInfo]:
    """Ordered name -> (shape, initializer) map for every trainable tensor."""
    if spec.kind == "fcn":
        return _head_layout(spec.d1)
    if spec.kind == "cnn":
        return {**_conv_layout(1), **_head_layout(flat_dim(spec.d1))}
    layout = {**_conv_layout(1), **_conv_layout(2)}
    f1, f2 = flat_dim(spec.d1), flat_dim(spec.d2)
    if spec.kind == "concat":
        return {**layout, **_head_layout(f1 + f2)}
    d_f = spec.d_f
    layout["proj1.weight"] = ParamInfo((f1, d_f), "glorot", f1, d_f)
    layout["proj2.weight"] = ParamInfo((f2, d_f), "glorot", f2, d_f)
    if spec.core == "full":
        layout["core.T"] = ParamInfo((d_f, d_f, d_f), "glorot", d_f * d_f, d_f)
    else:
        r1, r2, r3 = spec.ranks
        layout["core.G"] = ParamInfo((r1, r2, r3), "glorot", r1 * r2, r3)
        layout["core.A"] = ParamInfo((d_f, r1), "glorot", d_f, r1)
        layout["core.B"] = ParamInfo((d_f, r2), "glorot", d_f, r2)
        layout["core.C"] = ParamInfo((d_f, r3), "glorot", r3, d_f)
    return {**layout, **_head_layout(d_f)}


def analytic_param_count(spec: ModelSpec) -> int:
    """Closed-form trainable parameter count (module docstring)."""
    h1, h2 = HIDDEN

    def head(n):
        return n * h1 + h1 + h1 * h2 + h2 + h2 + 1

    if spec.kind == "fcn":
        return head(spec.d1)
    if spec.kind == "cnn":
        return CONV_BLOCK_PARAMS + head(flat_dim(spec.d1))
    f1, f2 = flat_dim(spec.d1), flat_dim(spec.d2)
    if spec.kind == "concat":
        return 2 * CONV_BLOCK_PARAMS + head(f1 + f2)
    d_f = spec.d_f
    if spec.core == "full":
        core = d_f**3
    else:
        r1, r2, r3 = spec.ranks
        core = r1 * r2 * r3 + d_f * (r1 + r2 + r3)
    return 2 * CONV_BLOCK_PARAMS + (f1 + f2) * d_f + core + head(d_f)


@dataclass
class ModelInstance:
    spec: ModelSpec
    graph: ComputeGraph

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.params

    @property
    def input_names(self):
        return ("x1", "x2")[: self.spec.n_views]

    def set_params(self, params):
        layout = param_layout(self.spec)
        for name, info in layout.items():
            value = np.asarray(params[name])
            if value.shape != info.shape:
                raise SpecMismatchError(f"parameter {name!r}: shape {value.shape} != {info.shape}")
            self.graph.params[name] = value.astype(self.graph.dtype, copy=True)

    def copy_params(self):
        return {k: v.copy() for k, v in self.graph.params.items()}

    def bindings(self, views, labels=None):
        if len(views) != self.spec.n_views:
            raise ShapeError(f"{self.spec.kind} expects {self.spec.n_views} view(s), got {len(views)}")
        b = dict(zip(self.input_names, views))
        if labels is not None:
            b["y"] = np.asarray(labels, dtype=self.graph.dtype).reshape(-1, 1)
        return b


def _conv_block(g, x, view):
    h = g.reshape(x, (1, x.shape[0]), name=f"view{view}.seq")
    for i in range(1, len(CONV_CHANNELS) + 1):
        k = g.node(f"view{view}.conv{i}.kernel")
        b = g.node(f"view{view}.conv{i}.bias")
        h = g.maxpool1d(g.relu(g.conv1d(h, k, b)))
    return g.flatten(h, name=f"view{view}.flat")


def _dense(g, x, prefix):
    return g.add(g.matmul(x, g.node(f"{prefix}.weight")), g.node(f"{prefix}.bias"))


def _fcn_head(g, x, dropout):
    h = g.dropout(g.relu(_dense(g, x, "fcn.dense1")), dropout, name="drop1")
    h = g.dropout(g.relu(_dense(g, h, "fcn.dense2")), dropout, name="drop2")
    logit = g.add(g.matmul(h, g.node("out.weight")), g.node("out.bias"), name="logit")
    return logit, g.sigmoid(logit, name="prob")


def build_model(spec: ModelSpec, dtype=np.float32, params=None) -> ModelInstance:
    """Compile the static graph for ``spec`` with seeded (or given) parameters."""
    layout = param_layout(spec)
    if params is None:
        params = init_parameters(layout, spec.seed, dtype)
    g = ComputeGraph(dtype=dtype)
    for name, info in layout.items():
        value = np.asarray(params[name])
        if value.shape != info.shape:
            raise SpecMismatchError(f"parameter {name!r}: shape {value.shape} != {info.shape}")
        g.param(name, value)

    x1 = g.input("x1", (spec.d1,))
    if spec.kind == "fcn":
        features = x1
    elif spec.kind == "cnn":
        features = _conv_block(g, x1, 1)
    else:
        x2 = g.input("x2", (spec.d2,))
        flat1, flat2 = _conv_block(g, x1, 1), _conv_block(g, x2, 2)
        if spec.kind == "concat":
            features = g.concat([flat1, flat2], name="concat")
        else:
            F1 = fusion.graph_project(g, flat1, g.node("proj1.weight"))
            F2 = fusion.graph_project(g, flat2, g.node("proj2.weight"))
            if spec.core == "full":
                Z = fusion.graph_tucker_full(g, F1, F2, g.node("core.T"))
            else:
                Z = fusion.graph_tucker_factored(
                    g, F1, F2, *(g.node(f"core.{m}") for m in "GABC")
                )
            features = fusion.graph_hadamard_square(g, Z)
    logit, _ = _fcn_head(g, features, spec.dropout)
    y = g.input("y", (1,))
    g.bce_logits(logit, y, name="loss")
    return ModelInstance(spec, g)


def predict_batch(model: ModelInstance, views, batch_size: int = 512) -> np.ndarray:
    """Inference-mode probability of "fake" for each record."""
    views = [np.asarray(v) for v in views]
    if len(views) != model.spec.n_views:
        raise ShapeError(f"{model.spec.kind} expects {model.spec.n_views} view(s), got {len(views)}")
    n = views[0].shape[0]
    if any(v.shape[0] != n for v in views):
        raise ShapeError("views have different record counts")
    out = np.empty(n, dtype=model.graph.dtype)
    for start in range(0, n, batch_size):
        chunk = [v[start : start + batch_size] for v in views]
        ev = model.graph.forward(model.bindings(chunk), outputs=["prob"])
        out[start : start + batch_size] = ev["prob"][:, 0]
    return out


def param_count(model: ModelInstance) -> int:
    return int(sum(model.params[name].size for name in model.graph.trainable))


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_model(self, dtype=np.float32) -> ModelInstance:
        return build_model(self.spec, dtype=dtype, params=self.params)


def save_checkpoint(model: ModelInstance | Checkpoint, path, meta: dict | None = None) -> None:
    """Write CKPT1: magic, u32 version, u32-prefixed JSON header, then tensor records."""
    if isinstance(model, Checkpoint):
        spec, params, meta = model.spec, model.params, {**model.meta, **(meta or {})}
    else:
        spec, params, meta = model.spec, model.params, meta or {}
    header = json.dumps({"spec": spec.to_dict(), "meta": meta}, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    for name in param_layout(spec):
        value = np.asarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self):
        return self.pos == len(self.data)


def read_checkpoint(path, expected: ModelSpec | str | None = None) -> Checkpoint:
    """Parse a CKPT1 file.

    ``expected`` may be a full spec (must match exactly) or a model kind.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CorruptCheckpointError("not a CKPT1 file (bad magic)")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    header_len = r.u32("header length")
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"checkpoint header unreadable: {exc}") from None
    if isinstance(expected, str):
        if spec.kind != expected:
            raise SpecMismatchError(f"checkpoint holds a {spec.kind} model, expected {expected}")
    elif expected is not None and spec != expected:
        raise SpecMismatchError(f"checkpoint holds {spec}, expected {expected}")
    layout = param_layout(spec)
    params = {}
    while not r.done:
        idx = len(params)
        name_len = r.u32(f"record {idx} name length")
        try:
            name = r.take(name_len, f"record {idx} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError(f"record {idx}: name is not UTF-8") from None
        rank = r.u32(f"record {idx} rank")
        if rank > 8:
            raise CorruptCheckpointError(f"record {idx} ({name}): implausible rank {rank}")
        shape = tuple(r.u32(f"record {idx} extents") for _ in range(rank))
        if name not in layout:
            raise SpecMismatchError(f"checkpoint parameter {name!r} does not belong to a {spec.kind} model")
        if name in params:
            raise CorruptCheckpointError(f"duplicate parameter record {name!r}")
        if shape != layout[name].shape:
            raise SpecMismatchError(f"parameter {name!r}: stored shape {shape} != {layout[name].shape}")
        count = int(np.prod(shape))
        raw = r.take(4 * count, f"record {idx} ({name}) data")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    missing = [n for n in layout if n not in params]
    if missing:
        raise CorruptCheckpointError(f"checkpoint truncated: missing parameters {missing}")
    return Checkpoint(spec, params, meta)


def load_checkpoint(path, expected: ModelSpec | str | None = None, dtype=np.float32) -> ModelInstance:
    return read_checkpoint(path, expected).to_model(dtype)
