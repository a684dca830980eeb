"""Full frame-synthesis model: shared convolutional embedding, positional
maps, attention encoder/decoder stacks, query initialization, and the
two-stage U-shaped synthesis network mapping decoded features back to RGB.

Layer recipe (post-norm): every sublayer output is residually added to its
input (removable via config) and group-normalized. The encoder layer runs
[self-attention, feed-forward]; the decoder layer runs [query
self-attention, cross-attention against the encoded memory, feed-forward].

The synthesis network is two cascaded U-structures: the first maps features
to a 3-channel image, the second refines that image, and the first stage's
output is added to the second's as a residual to form the final frame.
Downsampling is 2x average pooling after each pooled block, upsampling is
2x nearest-neighbor, and skip connections concatenate channelwise at
matching resolutions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import engine, posenc
from .attention import HeadParams, conv_self_attention, cross_attention
from .engine import ConvParams, Tensor
from .synthdata import FrameSequence

_POSENC_MODES = ("per_layer", "once", "off")


@dataclass
class ModelConfig:
    d_model: int
    heads: int
    layers: int
    embed_layers: int = 4
    leaky_slope: float = 0.1
    sffn1_down: tuple = (256, 512)
    sffn1_up: tuple = (256, 128)
    sffn1_head: tuple = (64, 32)
    sffn2_down: tuple = (32, 64, 128, 256, 512)
    sffn2_up: tuple = (256, 128, 64, 32)
    sffn2_head: tuple = ()
    posenc_mode: str = "per_layer"
    residual: bool = True
    ff_layers: int = 1
    groups: Optional[int] = None  # default: min(8, d_model)

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.posenc_mode not in _POSENC_MODES:
            raise ValueError(
                f"posenc_mode must be one of {_POSENC_MODES}, got {self.posenc_mode!r}")
        if self.ff_layers not in (1, 2):
            raise ValueError(f"ff_layers must be 1 or 2, got {self.ff_layers}")
        if self.embed_layers < 1 or self.layers < 0:
            raise ValueError("embed_layers must be >= 1 and layers >= 0")
        for down, up in ((self.sffn1_down, self.sffn1_up),
                         (self.sffn2_down, self.sffn2_up)):
            if len(up) < 1 or len(down) < len(up):
                raise ValueError(
                    f"synthesis stage needs len(down) >= len(up) >= 1, "
                    f"got {down} / {up}")
        if self.d_model % self.effective_groups != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by norm groups "
                f"{self.effective_groups}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def effective_groups(self) -> int:
        return self.groups if self.groups is not None else min(8, self.d_model)

    @property
    def synth_divisor(self) -> int:
        return 2 ** max(len(self.sffn1_up), len(self.sffn2_up))

    @classmethod
    def reference(cls) -> "ModelConfig":
        """Full-scale configuration: 128 channels, 4 heads, 7+7 layers."""
        return cls(d_model=128, heads=4, layers=7)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """CPU-minutes scale for training tests; synthesis widths follow
        d_model so the stage structure matches the full model."""
        return cls(d_model=16, heads=2, layers=2,
                   sffn1_down=(32, 64), sffn1_up=(32, 16), sffn1_head=(8, 4),
                   sffn2_down=(4, 8, 16, 32, 64), sffn2_up=(32, 16, 8, 4))

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Smallest config that still exercises every code path; the second
        synthesis stage is shallower so 8x8 frames survive the pooling."""
        return cls(d_model=4, heads=2, layers=1,
                   sffn1_down=(8, 16), sffn1_up=(8, 4), sffn1_head=(4,),
                   sffn2_down=(4, 4, 8), sffn2_up=(8, 4))

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        try:
            return {"reference": cls.reference, "desk": cls.desk,
                    "micro": cls.micro}[name]()
        except KeyError:
            raise ValueError(f"unknown preset {name!r}") from None

    def to_manifest(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return str(v)

        keys = ("d_model", "heads", "layers", "embed_layers", "leaky_slope",
                "sffn1_down", "sffn1_up", "sffn1_head", "sffn2_down",
                "sffn2_up", "sffn2_head", "posenc_mode", "residual",
                "ff_layers", "groups")
        return "\n".join(f"{k}={fmt(getattr(self, k))}" for k in keys) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key] = value
        def tup(v):
            return tuple(int(x) for x in v.split(",")) if v else ()
        return cls(
            d_model=int(raw["d_model"]), heads=int(raw["heads"]),
            layers=int(raw["layers"]), embed_layers=int(raw["embed_layers"]),
            leaky_slope=float(raw["leaky_slope"]),
            sffn1_down=tup(raw["sffn1_down"]), sffn1_up=tup(raw["sffn1_up"]),
            sffn1_head=tup(raw["sffn1_head"]), sffn2_down=tup(raw["sffn2_down"]),
            sffn2_up=tup(raw["sffn2_up"]), sffn2_head=tup(raw["sffn2_head"]),
            posenc_mode=raw["posenc_mode"],
            residual=raw["residual"] == "True",
            ff_layers=int(raw["ff_layers"]),
            groups=None if raw["groups"] == "None" else int(raw["groups"]))


@dataclass
class SynthesisRequest:
    """Inputs for one synthesis call. Extrapolation takes 4 frames and
    predicts the next 1..3; interpolation takes 6 frames flanking a gap and
    predicts the 3 mid frames."""
    mode: str  # "extrapolate" | "interpolate"
    frames: np.ndarray  # (n, 3, h, w) in [0, 1]
    positions: list
    target_count: int = 1

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        n = self.frames.shape[0]
        if len(self.positions) != n:
            raise ValueError(f"{len(self.positions)} positions for {n} frames")
        if self.mode == "extrapolate":
            if n != 4:
                raise ValueError(f"extrapolation takes 4 input frames, got {n}")
            if not 1 <= self.target_count <= 3:
                raise ValueError(
                    f"extrapolation targets must be 1..3, got {self.target_count}")
        elif self.mode == "interpolate":
            if n != 6:
                raise ValueError(f"interpolation takes 6 input frames, got {n}")
            if self.target_count != 3:
                raise ValueError("interpolation synthesizes exactly 3 mid frames")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")


class ParameterStore:
    """Named, insertion-ordered map of parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.numel() for t in self._params.values())

    def conv(self, name: str, stride: int = 1) -> ConvParams:
        kernel = self._params[name + ".kernel"]
        kh = kernel.shape[2]
        return ConvParams(kernel, self._params[name + ".bias"],
                          stride=stride, padding=kh // 2)

    def arrays(self) -> dict:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
            t.grad = None


def _add_conv(store: ParameterStore, rng, name: str, in_c: int, out_c: int,
              ksize: int) -> None:
    # fan-in-scaled uniform for kernel and bias; a zero bias would let the
    # deep synthesis cascade collapse activations onto the rectifier kink
    fan_in = in_c * ksize * ksize
    bound = float(np.sqrt(1.0 / fan_in))
    kernel = rng.uniform(-bound, bound, size=(out_c, in_c, ksize, ksize))
    bias = rng.uniform(-bound, bound, size=(1, out_c, 1, 1))
    dt = engine.default_dtype()
    store.add(name + ".kernel", Tensor(kernel.astype(dt), requires_grad=True))
    store.add(name + ".bias", Tensor(bias.astype(dt), requires_grad=True))


def _add_norm(store: ParameterStore, name: str, channels: int) -> None:
    dt = engine.default_dtype()
    store.add(name + ".gamma",
              Tensor(np.ones((1, channels, 1, 1), dtype=dt), requires_grad=True))
    store.add(name + ".beta",
              Tensor(np.zeros((1, channels, 1, 1), dtype=dt), requires_grad=True))


def _add_heads(store: ParameterStore, rng, prefix: str, cfg: ModelConfig) -> None:
    for k in range(cfg.heads):
        _add_conv(store, rng, f"{prefix}.h{k}.q", cfg.d_model, cfg.d_head, 3)
        _add_conv(store, rng, f"{prefix}.h{k}.kv", cfg.d_model, 2 * cfg.d_head, 3)
        _add_conv(store, rng, f"{prefix}.h{k}.att", 2 * cfg.d_head, 1, 3)


def _add_ff(store: ParameterStore, rng, prefix: str, cfg: ModelConfig) -> None:
    for j in range(cfg.ff_layers):
        _add_conv(store, rng, f"{prefix}.ff{j}", cfg.d_model, cfg.d_model, 3)


def _add_sffn_stage(store: ParameterStore, rng, prefix: str, in_c: int,
                    down: tuple, up: tuple, head: tuple) -> None:
    n_up = len(up)
    skip_widths = []
    c = in_c
    for b, width in enumerate(down):
        _add_conv(store, rng, f"{prefix}.down{b}.c0", c, width, 3)
        _add_conv(store, rng, f"{prefix}.down{b}.c1", width, width, 3)
        if b < n_up:
            skip_widths.append(width)
        c = width
    for m, width in enumerate(up):
        c_in = c + skip_widths[n_up - 1 - m]
        _add_conv(store, rng, f"{prefix}.up{m}.c0", c_in, width, 3)
        _add_conv(store, rng, f"{prefix}.up{m}.c1", width, width, 3)
        c = width
    for j, width in enumerate(head):
        _add_conv(store, rng, f"{prefix}.head{j}", c, width, 3)
        c = width
    _add_conv(store, rng, f"{prefix}.out", c, 3, 1)


def build_parameters(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Initialize every parameter tensor: kernels uniform in
    +-sqrt(1/fan_in), biases zero, norm scales one."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    c = 3
    for i in range(config.embed_layers):
        _add_conv(store, rng, f"embed.{i}", c, config.d_model, 3)
        c = config.d_model
    for layer in range(config.layers):
        _add_heads(store, rng, f"enc.{layer}.att", config)
        _add_norm(store, f"enc.{layer}.norm1", config.d_model)
        _add_ff(store, rng, f"enc.{layer}", config)
        _add_norm(store, f"enc.{layer}.norm2", config.d_model)
    for layer in range(config.layers):
        _add_heads(store, rng, f"dec.{layer}.self", config)
        _add_norm(store, f"dec.{layer}.norm1", config.d_model)
        _add_heads(store, rng, f"dec.{layer}.cross", config)
        _add_norm(store, f"dec.{layer}.norm2", config.d_model)
        _add_ff(store, rng, f"dec.{layer}", config)
        _add_norm(store, f"dec.{layer}.norm3", config.d_model)
    _add_sffn_stage(store, rng, "sffn1", config.d_model,
                    config.sffn1_down, config.sffn1_up, config.sffn1_head)
    _add_sffn_stage(store, rng, "sffn2", 3,
                    config.sffn2_down, config.sffn2_up, config.sffn2_head)
    return store


def _heads_of(store: ParameterStore, prefix: str, cfg: ModelConfig) -> list:
    return [HeadParams(q_net=store.conv(f"{prefix}.h{k}.q"),
                       kv_net=store.conv(f"{prefix}.h{k}.kv"),
                       att_net=store.conv(f"{prefix}.h{k}.att"))
            for k in range(cfg.heads)]


# ---------------------------------------------------------------------------
# forward stages

def embed(frames: Tensor, store: ParameterStore, config: ModelConfig) -> Tensor:
    """Shared per-frame feature extractor: embed_layers 3x3 convs with the
    leaky rectifier after each."""
    if frames.shape[1] != 3:
        raise ValueError(f"embedding expects RGB frames, got {frames.shape[1]} channels")
    x = frames
    for i in range(config.embed_layers):
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"embed.{i}")),
                              config.leaky_slope)
    return x


def _residual_norm(x: Tensor, sub: Tensor, store: ParameterStore, name: str,
                   cfg: ModelConfig) -> Tensor:
    merged = engine.add(x, sub) if cfg.residual else sub
    return engine.group_norm(merged, store[name + ".gamma"], store[name + ".beta"],
                             cfg.effective_groups)


def _feed_forward(x: Tensor, store: ParameterStore, prefix: str,
                  cfg: ModelConfig) -> Tensor:
    y = engine.conv2d(x, store.conv(f"{prefix}.ff0"))
    if cfg.ff_layers == 2:
        y = engine.conv2d(engine.leaky_relu(y, cfg.leaky_slope),
                          store.conv(f"{prefix}.ff1"))
    return y


def encode(z: Tensor, positions: Sequence[float], store: ParameterStore,
           config: ModelConfig, sink: Optional[dict] = None,
           parallel: bool = False) -> Tensor:
    """Encoder stack over the positioned input features."""
    x = z
    collect = sink is not None
    for layer in range(config.layers):
        if config.posenc_mode == "per_layer":
            x = posenc.add_positional(x, positions)
        att, maps = conv_self_attention(x, _heads_of(store, f"enc.{layer}.att", config),
                                        collect_maps=collect, parallel=parallel)
        x = _residual_norm(x, att, store, f"enc.{layer}.norm1", config)
        ff = _feed_forward(x, store, f"enc.{layer}", config)
        x = _residual_norm(x, ff, store, f"enc.{layer}.norm2", config)
        if collect:
            sink["encoder"].append(maps)
    return x


def init_queries(request: SynthesisRequest, embedded: Tensor):
    """Decoder query maps and their position tokens, before any positional
    addition: copies of the last frame's embedding for extrapolation, the
    average of the two flanking embeddings for interpolation."""
    n = embedded.shape[0]
    if request.frames.shape[0] != n:
        raise ValueError(
            f"embedded {n} frames but request carries {request.frames.shape[0]}")
    positions = [float(p) for p in request.positions]
    if request.mode == "extrapolate":
        last = engine.narrow(embedded, 0, n - 1, 1)
        q = engine.concat([last] * request.target_count, axis=0) \
            if request.target_count > 1 else last
        qpos = [positions[-1] + k for k in range(1, request.target_count + 1)]
    else:
        left = engine.narrow(embedded, 0, 2, 1)
        right = engine.narrow(embedded, 0, 3, 1)
        mid = engine.scale(engine.add(left, right), 0.5)
        q = engine.concat([mid] * 3, axis=0)
        t = 0.5 * (positions[2] + positions[3])
        qpos = [t - 0.5, t, t + 0.5]
    return q, qpos


def decode(queries: Tensor, query_positions: Sequence[float], memory: Tensor,
           store: ParameterStore, config: ModelConfig,
           sink: Optional[dict] = None, parallel: bool = False,
           key_mask=None) -> Tensor:
    """Decoder stack: query self-attention, cross-attention against the
    encoded memory, feed-forward; each residual+norm wrapped."""
    x = queries
    collect = sink is not None
    for layer in range(config.layers):
        if config.posenc_mode == "per_layer":
            x = posenc.add_positional(x, query_positions)
        satt, smaps = conv_self_attention(
            x, _heads_of(store, f"dec.{layer}.self", config),
            collect_maps=collect, parallel=parallel)
        x = _residual_norm(x, satt, store, f"dec.{layer}.norm1", config)
        catt, cmaps = cross_attention(
            x, memory, _heads_of(store, f"dec.{layer}.cross", config),
            key_mask=key_mask, collect_maps=collect, parallel=parallel)
        x = _residual_norm(x, catt, store, f"dec.{layer}.norm2", config)
        ff = _feed_forward(x, store, f"dec.{layer}", config)
        x = _residual_norm(x, ff, store, f"dec.{layer}.norm3", config)
        if collect:
            sink["decoder_self"].append(smaps)
            sink["decoder_cross"].append(cmaps)
    return x


def _sffn_stage(x: Tensor, store: ParameterStore, prefix: str, down: tuple,
                up: tuple, head: tuple, slope: float) -> Tensor:
    n_up = len(up)
    skips = []
    for b in range(len(down)):
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"{prefix}.down{b}.c0")), slope)
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"{prefix}.down{b}.c1")), slope)
        if b < n_up:
            skips.append(x)
            x = engine.avg_pool2(x)
    for m in range(n_up):
        x = engine.upsample2_nearest(x)
        x = engine.concat([x, skips.pop()], axis=1)
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"{prefix}.up{m}.c0")), slope)
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"{prefix}.up{m}.c1")), slope)
    for j in range(len(head)):
        x = engine.leaky_relu(engine.conv2d(x, store.conv(f"{prefix}.head{j}")), slope)
    return engine.conv2d(x, store.conv(f"{prefix}.out"))


def synthesize(decoded: Tensor, store: ParameterStore, config: ModelConfig) -> Tensor:
    """Two cascaded U-stages; the first stage's 3-channel output is added to
    the second stage's output. Unclamped (training needs raw values)."""
    h, w = decoded.shape[2], decoded.shape[3]
    div = config.synth_divisor
    if h % div or w % div:
        raise ValueError(
            f"spatial dims {h}x{w} must be divisible by {div} for the "
            f"synthesis pooling stack")
    first = _sffn_stage(decoded, store, "sffn1", config.sffn1_down,
                        config.sffn1_up, config.sffn1_head, config.leaky_slope)
    second = _sffn_stage(first, store, "sffn2", config.sffn2_down,
                         config.sffn2_up, config.sffn2_head, config.leaky_slope)
    return engine.add(first, second)


def _pipeline(request: SynthesisRequest, store: ParameterStore,
              config: ModelConfig, sink: Optional[dict] = None,
              parallel: bool = False):
    frames = engine.tensor(request.frames)
    emb = embed(frames, store, config)
    positions = [float(p) for p in request.positions]
    z = posenc.add_positional(emb, positions) if config.posenc_mode == "once" else emb
    memory = encode(z, positions, store, config, sink=sink, parallel=parallel)
    queries, qpos = init_queries(request, emb)
    if config.posenc_mode == "once":
        queries = posenc.add_positional(queries, qpos)
    decoded = decode(queries, qpos, memory, store, config, sink=sink,
                     parallel=parallel)
    return synthesize(decoded, store, config), qpos


def forward_training(request: SynthesisRequest, store: ParameterStore,
                     config: ModelConfig):
    """Unclamped prediction tensor plus target position tokens; keeps the
    graph alive for a backward pass."""
    return _pipeline(request, store, config)


def forward(request: SynthesisRequest, store: ParameterStore,
            config: ModelConfig, collect_attention: bool = False,
            parallel: bool = False):
    """Synthesis at inference: predicted frames clamped to [0,1]. With
    collect_attention, also returns the per-layer attention maps."""
    sink = {"encoder": [], "decoder_self": [], "decoder_cross": []} \
        if collect_attention else None
    pred, qpos = _pipeline(request, store, config, sink=sink, parallel=parallel)
    seq = FrameSequence(frames=np.clip(pred.data, 0.0, 1.0), positions=qpos)
    return (seq, sink) if collect_attention else seq


def request_from_sequence(seq: FrameSequence, mode: str, target_count: int = None):
    """Split a stored sequence into a synthesis request plus its ground
    truth. Extrapolation uses the first 4 frames as inputs and what follows
    as targets; interpolation expects the 9-sample layout (3 before, 3 mid,
    3 after)."""
    frames, positions = seq.frames, [float(p) for p in seq.positions]
    if mode == "extrapolate":
        avail = frames.shape[0] - 4
        m = avail if target_count is None else target_count
        if not 1 <= m <= min(3, avail):
            raise ValueError(
                f"sequence of {frames.shape[0]} frames supports 1..{min(3, avail)} "
                f"targets, requested {m}")
        req = SynthesisRequest(mode=mode, frames=frames[:4],
                               positions=positions[:4], target_count=m)
        return req, frames[4:4 + m], positions[4:4 + m]
    if mode == "interpolate":
        if frames.shape[0] != 9:
            raise ValueError(
                f"interpolation sequences carry 9 frames (3+3+3), got {frames.shape[0]}")
        idx_in = [0, 1, 2, 6, 7, 8]
        idx_t = [3, 4, 5]
        req = SynthesisRequest(mode=mode, frames=frames[idx_in],
                               positions=[positions[i] for i in idx_in],
                               target_count=3)
        return req, frames[idx_t], [positions[i] for i in idx_t]
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"CVTX1"


def save_checkpoint(path, store: ParameterStore, config: ModelConfig) -> None:
    """Sectioned binary container: magic, length-prefixed text manifest,
    then per-parameter records (u32 name length, name, u32 rank, u32 dims,
    raw little-endian float32 data)."""
    manifest = config.to_manifest().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for name, t in store.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back: (config, store). Parameter values are the
    stored float32 bits, widened to the engine's active dtype."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:5]!r}")
    pos = len(_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_manifest(take(mlen).decode("utf-8"))
    arrays = {}
    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = data
    store = build_parameters(config, seed=0)
    dt = engine.default_dtype()
    if set(arrays) != set(store.names()):
        missing = set(store.names()) - set(arrays)
        extra = set(arrays) - set(store.names())
        raise ValueError(
            f"{path}: parameter names do not match the manifest config "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, arr in arrays.items():
        t = store[name]
        if arr.shape != t.shape:
            raise ValueError(f"{path}: {name} shape {arr.shape} vs {t.shape}")
        t.data = arr.astype(dt)
        t.grad = None
    return config, store
