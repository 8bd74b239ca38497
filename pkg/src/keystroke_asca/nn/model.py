"""Convolution + relative self-attention keystroke classifier.

The network is a toy-scale CoAtNet layout: a strided 3x3 stem (no norm), two depthwise-
separable convolution stages, two global relative-attention stages (each
preceded by a 2x2 average-pool and 1x1 projection), global average pooling
and a linear head.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..errors import ConfigError, IoError, ShapeError
from . import functional as F
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (1, 64, 64)
    stem_channels: int = 16
    stem_stride: int = 2
    stem_norm: bool = False
    stage_channels: tuple = (32, 64, 96, 128)
    conv_stages: int = 2
    attention_stages: int = 2
    attention_heads: int = 4
    max_relative_offset: int = 7
    n_classes: int = 36

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if len(self.stage_channels) != self.conv_stages + self.attention_stages:
            raise ConfigError("stage_channels needs one entry per stage")
        for c in self.stage_channels[self.conv_stages :]:
            if c % self.attention_heads:
                raise ConfigError(f"attention width {c} not divisible by {self.attention_heads} heads")
        _, h, w = self.input_shape
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride must be 1 or 2")
        n_down = len(self.stage_channels) + (self.stem_stride == 2)
        if h % (2**n_down) or w % (2**n_down):
            raise ConfigError(f"input {h}x{w} cannot be halved {n_down} times")


def _kaiming_uniform(rng, shape, fan_in, dtype):
    # matches the common framework default kaiming_uniform(a=sqrt(5)): bound = 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_parameters(cfg: ModelConfig, seed=0, dtype=np.float32):
    """Build the ordered parameter dictionary for ``cfg``."""
    rng = np.random.default_rng(seed)
    p = OrderedDict()
    cin = cfg.input_shape[0]
    stem = cfg.stem_channels
    p["stem.weight"] = _kaiming_uniform(rng, (stem, cin, 3, 3), cin * 9, dtype)
    p["stem.bias"] = np.zeros(stem, dtype)
    if cfg.stem_norm:
        p["stem.norm.gamma"] = np.ones(stem, dtype)
        p["stem.norm.beta"] = np.zeros(stem, dtype)
    c = stem
    for i in range(cfg.conv_stages):
        co = cfg.stage_channels[i]
        pre = f"conv{i}"
        p[f"{pre}.dw.weight"] = _kaiming_uniform(rng, (c, 3, 3), 9, dtype)
        p[f"{pre}.dw.bias"] = np.zeros(c, dtype)
        p[f"{pre}.pw.weight"] = _kaiming_uniform(rng, (co, c), c, dtype)
        p[f"{pre}.pw.bias"] = np.zeros(co, dtype)
        p[f"{pre}.norm.gamma"] = np.ones(co, dtype)
        p[f"{pre}.norm.beta"] = np.zeros(co, dtype)
        c = co
    side = 2 * cfg.max_relative_offset + 1
    for i in range(cfg.attention_stages):
        co = cfg.stage_channels[cfg.conv_stages + i]
        pre = f"attn{i}"
        p[f"{pre}.proj.weight"] = _kaiming_uniform(rng, (co, c), c, dtype)
        p[f"{pre}.proj.bias"] = np.zeros(co, dtype)
        p[f"{pre}.qkv.weight"] = _kaiming_uniform(rng, (3 * co, co), co, dtype)
        p[f"{pre}.qkv.bias"] = np.zeros(3 * co, dtype)
        p[f"{pre}.rel_bias"] = np.zeros((cfg.attention_heads, side, side), dtype)
        p[f"{pre}.out.weight"] = _kaiming_uniform(rng, (co, co), co, dtype)
        p[f"{pre}.out.bias"] = np.zeros(co, dtype)
        p[f"{pre}.norm.gamma"] = np.ones(co, dtype)
        p[f"{pre}.norm.beta"] = np.zeros(co, dtype)
        c = co
    p["head.weight"] = _kaiming_uniform(rng, (cfg.n_classes, c), c, dtype)
    p["head.bias"] = np.zeros(cfg.n_classes, dtype)
    return p


def conv_stage(x, params, stride=2, norm=True, activation=True):
    """Depthwise 3x3 -> pointwise 1x1 -> channel layer norm -> GELU.

    ``params`` keys: ``dw.weight`` (C,3,3), optional ``dw.bias``,
    ``pw.weight`` (C',C), optional ``pw.bias``, ``norm.gamma``/``norm.beta``.
    """
    C = x.shape[1]
    dw = params["dw.weight"]
    if dw.shape[0] != C or params["pw.weight"].shape[1] != C:
        raise ShapeError(f"conv stage parameters expect {dw.shape[0]} channels, input has {C}")
    h = F.depthwise_conv2d(x, dw, params.get("dw.bias"), stride=stride, padding=1)
    h = F.pointwise_conv2d(h, params["pw.weight"], params.get("pw.bias"))
    if norm:
        h = F.layer_norm(h, params["norm.gamma"], params["norm.beta"], axis=1)
    if activation:
        h = F.gelu(h)
    return h


@lru_cache(maxsize=32)
def relative_index(height, width, max_offset):
    """Row/column table indices for every (query, key) pair on a grid."""
    rows, cols = np.divmod(np.arange(height * width), width)
    dr = np.clip(rows[:, None] - rows[None, :], -max_offset, max_offset) + max_offset
    dc = np.clip(cols[:, None] - cols[None, :], -max_offset, max_offset) + max_offset
    dr.setflags(write=False)
    dc.setflags(write=False)
    return dr, dc


def attention_weights(x, params, heads, max_offset=7):
    """Return (attention probabilities (B,h,L,L), values (B,h,L,d), tokens (B,L,C))."""
    B, C, H, W = x.shape
    if C % heads:
        raise ConfigError(f"{C} channels not divisible into {heads} heads")
    L, d = H * W, C // heads
    tokens = x.reshape(B, C, L).transpose(0, 2, 1)
    qkv = F.linear(tokens, params["qkv.weight"], params.get("qkv.bias"))
    qkv = qkv.reshape(B, L, 3, heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    dr, dc = relative_index(H, W, max_offset)
    scores = scores + F.gather_relative_bias(params["rel_bias"], dr, dc)
    return F.softmax(scores, axis=-1), v, tokens


def relative_attention_stage(x, params, heads, max_offset=7):
    """Global multi-head self-attention with a learned relative-offset bias.

    Tokens are the H*W positions; the block is post-norm:
    ``LayerNorm(x + Proj(Attention(x)))``.
    """
    B, C, H, W = x.shape
    attn, v, tokens = attention_weights(x, params, heads, max_offset)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, H * W, C)
    out = F.linear(ctx, params["out.weight"], params.get("out.bias"))
    out = F.layer_norm(tokens + out, params["norm.gamma"], params["norm.beta"], axis=-1)
    return out.transpose(0, 2, 1).reshape(B, C, H, W)


def _subparams(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


class Classifier:
    """Parameter container plus the forward pass. ``mode`` is 'train' or 'eval'."""

    def __init__(self, config: ModelConfig | None = None, seed=0, dtype=np.float32, parameters=None):
        self.config = config or ModelConfig()
        arrays = parameters if parameters is not None else init_parameters(self.config, seed, dtype)
        self.params = OrderedDict((name, Tensor(arr, requires_grad=True, name=name)) for name, arr in arrays.items())
        self.mode = "train"

    # -- bookkeeping ----------------------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise ShapeError(f"missing parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.zero_grad()

    def copy(self, dtype=None):
        state = self.state_dict()
        if dtype is not None:
            state = OrderedDict((k, v.astype(dtype)) for k, v in state.items())
        clone = Classifier(self.config, parameters=state)
        clone.mode = self.mode
        return clone

    # -- computation ----------------------------------------------------------
    def forward(self, batch):
        cfg = self.config
        x = as_tensor(batch, self.dtype) if not isinstance(batch, Tensor) else batch
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
            raise ShapeError(f"expected batch of shape (B, {', '.join(map(str, cfg.input_shape))}), got {x.shape}")
        p = self.params
        h = F.conv2d(x, p["stem.weight"], p["stem.bias"], stride=cfg.stem_stride, padding=1)
        if cfg.stem_norm:
            h = F.layer_norm(h, p["stem.norm.gamma"], p["stem.norm.beta"], axis=1)
        h = F.gelu(h)
        for i in range(cfg.conv_stages):
            h = conv_stage(h, _subparams(p, f"conv{i}"), stride=2)
        for i in range(cfg.attention_stages):
            sp = _subparams(p, f"attn{i}")
            h = F.pointwise_conv2d(F.avg_pool2d(h, 2), sp["proj.weight"], sp["proj.bias"])
            h = relative_attention_stage(h, sp, cfg.attention_heads, cfg.max_relative_offset)
        pooled = F.global_avg_pool(h)
        return F.linear(pooled, p["head.weight"], p["head.bias"])

    __call__ = forward

    def logits(self, batch, batch_size=64):
        """Inference without recording a tape; returns a numpy array."""
        batch = np.asarray(batch)
        out = []
        for start in range(0, len(batch), batch_size):
            chunk = Tensor(batch[start : start + batch_size].astype(self.dtype))
            out.append(self._forward_untracked(chunk))
        if not out:
            return np.zeros((0, self.config.n_classes), dtype=self.dtype)
        return np.concatenate(out, axis=0)

    def _forward_untracked(self, x):
        flags = {k: p.requires_grad for k, p in self.params.items()}
        try:
            for p in self.params.values():
                p.requires_grad = False
            return self.forward(x).data
        finally:
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    # -- checkpoint I/O -------------------------------------------------------
    def save(self, path):
        """Write a JSON header line block followed by a float32 parameter blob.

        Layout: 8-byte little-endian header length, UTF-8 JSON header, blob.
        """
        manifest = []
        offset = 0
        blobs = []
        for name, p in self.params.items():
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
            blobs.append(arr.tobytes())
        header = json.dumps({"model_config": _config_to_json(self.config), "parameters": manifest}, sort_keys=True).encode()
        try:
            with open(path, "wb") as fh:
                fh.write(struct.pack("<Q", len(header)))
                fh.write(header)
                for b in blobs:
                    fh.write(b)
        except OSError as exc:
            raise IoError(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
        (n,) = struct.unpack_from("<Q", raw, 0)
        header = json.loads(raw[8 : 8 + n].decode())
        blob = memoryview(raw)[8 + n :]
        cfg = ModelConfig(**header["model_config"])
        expected = init_parameters(cfg, seed=0)
        state = OrderedDict()
        for entry in header["parameters"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected or expected[name].shape != shape:
                raise ShapeError(f"checkpoint parameter {name} has unexpected shape {shape}")
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            if start + 4 * count > len(blob):
                raise ShapeError(f"checkpoint blob truncated at parameter {name}")
            state[name] = np.frombuffer(blob[start : start + 4 * count], dtype="<f4").reshape(shape).astype(np.float32)
        missing = set(expected) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)}")
        return cls(cfg, parameters=OrderedDict((k, state[k]) for k in expected))


def _config_to_json(cfg):
    d = asdict(cfg)
    d["input_shape"] = list(cfg.input_shape)
    d["stage_channels"] = list(cfg.stage_channels)
    return d


def softmax_np(logits):
    return np.exp(F.log_softmax_np(np.asarray(logits, dtype=np.float64)))


def topk_from_logits(logits, k):
    """Indices of the k largest logits per row; ties go to the lower class index."""
    logits = np.asarray(logits)
    n_classes = logits.shape[-1]
    if not 1 <= k <= n_classes:
        raise ConfigError(f"k must be in [1, {n_classes}], got {k}")
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def predict_topk(model: Classifier, batch, k):
    return topk_from_logits(model.logits(batch), k)
