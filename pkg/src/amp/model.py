"""Toy vision transformer with independently sized per-block MLP hidden layers.

The model is a pre-norm ViT encoder (LN -> attention -> residual,
LN -> MLP -> residual) with a class token and learned positional embeddings.
The only prunable unit is an fc1 output neuron after the GELU: removing
neuron k drops one fc1 column, its bias entry and one fc2 row, so the
model's output dimensions never change.

Checkpoints are a fixed little-endian binary format: magic, version, a
JSON config record (human-readable), then all tensors in declaration order,
each prefixed by name, rank and dims. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, CaptureHandle
from .errors import ConfigError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"AMPCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    num_blocks: int
    num_heads: int
    mlp_hidden: int
    in_channels: int = 3
    per_block_hidden: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.per_block_hidden:
            self.per_block_hidden = [self.mlp_hidden] * self.num_blocks
        self.validate()

    def validate(self) -> None:
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_blocks,
               self.num_heads, self.mlp_hidden, self.in_channels) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if len(self.per_block_hidden) != self.num_blocks:
            raise ConfigError("per_block_hidden length must equal num_blocks")
        for m in self.per_block_hidden:
            if not 0 <= m <= self.mlp_hidden:
                raise ConfigError(
                    f"per-block hidden size {m} outside [0, {self.mlp_hidden}]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        # patch tokens plus the class token
        return self.num_patches + 1

    def copy(self) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "per_block_hidden": list(self.per_block_hidden)})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declaration-order parameter schema; also fixes checkpoint tensor order."""
    c = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed_w": (config.patch_size**2 * config.in_channels, c),
        "patch_embed_b": (c,),
        "cls_token": (1, 1, c),
        "pos_embed": (1, config.seq_len, c),
    }
    for l in range(config.num_blocks):
        m = config.per_block_hidden[l]
        shapes.update({
            f"block{l}.ln1_g": (c,), f"block{l}.ln1_b": (c,),
            f"block{l}.wq": (c, c), f"block{l}.bq": (c,),
            f"block{l}.wk": (c, c), f"block{l}.bk": (c,),
            f"block{l}.wv": (c, c), f"block{l}.bv": (c,),
            f"block{l}.wo": (c, c), f"block{l}.bo": (c,),
            f"block{l}.ln2_g": (c,), f"block{l}.ln2_b": (c,),
            f"block{l}.fc1_w": (c, m), f"block{l}.fc1_b": (m,),
            f"block{l}.fc2_w": (m, c), f"block{l}.fc2_b": (c,),
        })
    shapes["final_ln_g"] = (c,)
    shapes["final_ln_b"] = (c,)
    return shapes


class VitModel:
    """Parameter container plus forward pass.

    ``hidden_masks[l]`` optionally holds a 0/1 float vector over block l's
    hidden neurons; the forward pass multiplies the post-GELU activation by
    it. Pruning search uses these masks so candidates are O(1) to roll back;
    real weight removal happens once in ``amp.pruner.apply_surgery``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            raise ConfigError("parameter names do not match the model schema")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True)
        self.hidden_masks: list[np.ndarray | None] = [None] * config.num_blocks

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


@dataclass
class ForwardRecord:
    """Outputs of one forward pass (tensors stay attached to the tape)."""
    z_cls: Tensor                      # B x C, final-layernorm class token
    z_patch: Tensor                    # B x N x C, final-layernorm patch tokens
    hidden_captures: dict[int, CaptureHandle]  # block -> B x T x M post-GELU fc1


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_random(config: ModelConfig, seed: int) -> VitModel:
    """Deterministic random init: truncated-normal weights, zero biases, unit LN gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_g",)):
            params[name] = np.ones(shape)
        elif name.endswith(("_b", ".bq", ".bk", ".bv", ".bo")):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape, std=0.02)
    return VitModel(config, params)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """B x H x W x ch -> B x N x (p*p*ch), row-major patch order."""
    b, h, w, ch = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * ch)


def _rowvec(t: Tensor, ndim: int) -> Tensor:
    return ad.reshape(t, (1,) * (ndim - 1) + (t.shape[-1],))


def forward(model: VitModel, images: np.ndarray,
            capture_blocks: tuple[int, ...] = ()) -> ForwardRecord:
    """Run the encoder; optionally capture post-GELU fc1 outputs per block."""
    cfg = model.config
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ShapeError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, "
            f"{cfg.in_channels}), got {images.shape}")
    for l in capture_blocks:
        if not 0 <= l < cfg.num_blocks:
            raise ShapeError(f"capture block {l} out of range [0, {cfg.num_blocks})")

    p = model.params
    bsz = images.shape[0]
    c, nh = cfg.embed_dim, cfg.num_heads
    dh = c // nh

    tokens = Tensor(patchify(np.asarray(images, dtype=np.float64), cfg.patch_size))
    x = ad.matmul(tokens, p["patch_embed_w"]) + _rowvec(p["patch_embed_b"], 3)
    cls = ad.broadcast_to(p["cls_token"], (bsz, 1, c))
    x = ad.concat([cls, x], axis=1)
    x = x + p["pos_embed"]
    t = x.shape[1]

    captures: dict[int, CaptureHandle] = {}
    for l in range(cfg.num_blocks):
        h = ad.layernorm(x, p[f"block{l}.ln1_g"], p[f"block{l}.ln1_b"])
        q = ad.matmul(h, p[f"block{l}.wq"]) + _rowvec(p[f"block{l}.bq"], 3)
        k = ad.matmul(h, p[f"block{l}.wk"]) + _rowvec(p[f"block{l}.bk"], 3)
        v = ad.matmul(h, p[f"block{l}.wv"]) + _rowvec(p[f"block{l}.bv"], 3)
        q = ad.transpose(q.reshape(bsz, t, nh, dh), (0, 2, 1, 3))
        k = ad.transpose(k.reshape(bsz, t, nh, dh), (0, 2, 1, 3))
        v = ad.transpose(v.reshape(bsz, t, nh, dh), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        o = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)).reshape(bsz, t, c)
        x = x + (ad.matmul(o, p[f"block{l}.wo"]) + _rowvec(p[f"block{l}.bo"], 3))

        h2 = ad.layernorm(x, p[f"block{l}.ln2_g"], p[f"block{l}.ln2_b"])
        a = ad.gelu(ad.matmul(h2, p[f"block{l}.fc1_w"]) + _rowvec(p[f"block{l}.fc1_b"], 3))
        mask = model.hidden_masks[l]
        if mask is not None:
            a = a * Tensor(mask.reshape(1, 1, -1))
        if l in capture_blocks:
            captures[l] = ad.capture_intermediate(a)
        x = x + (ad.matmul(a, p[f"block{l}.fc2_w"]) + _rowvec(p[f"block{l}.fc2_b"], 3))

    xf = ad.layernorm(x, p["final_ln_g"], p["final_ln_b"])
    return ForwardRecord(z_cls=xf[:, 0, :], z_patch=xf[:, 1:, :], hidden_captures=captures)


# ---------------------------------------------------------------------------
# accounting


def count_params(model: VitModel) -> int:
    """Exact tensor-element count over all parameters."""
    return sum(t.size for t in model.params.values())


def count_mlp_hidden_params(model: VitModel) -> int:
    """Prunable MLP parameters: one fc1 column + bias + one fc2 row per neuron."""
    c = model.config.embed_dim
    return sum(m * (2 * c + 1) for m in model.config.per_block_hidden)


def count_flops(model: VitModel, image_size: int | None = None) -> int:
    """FLOPs of one forward pass at the given resolution.

    Counted as 2 x multiply-accumulates of every matmul:
      patch embed          2 * N * (p^2 * ch) * C
      q/k/v/out per block  4 * 2 * T * C * C
      attention scores     2 * T * T * C   (h heads of T x d @ d x T)
      attention values     2 * T * T * C
      fc1 / fc2 per block  2 * T * C * M  each
    Layernorm, softmax and GELU are not matmuls and are excluded.
    """
    cfg = model.config
    size = cfg.image_size if image_size is None else image_size
    if size % cfg.patch_size != 0:
        raise ConfigError(f"image size {size} not divisible by patch size {cfg.patch_size}")
    n = (size // cfg.patch_size) ** 2
    t = n + 1
    c = cfg.embed_dim
    flops = 2 * n * (cfg.patch_size**2 * cfg.in_channels) * c
    for m in cfg.per_block_hidden:
        flops += 4 * 2 * t * c * c        # q, k, v, out projections
        flops += 2 * 2 * t * t * c        # attention scores + weighted values
        flops += 2 * 2 * t * c * m        # fc1 + fc2
    return flops


# ---------------------------------------------------------------------------
# checkpoint format


def _write_tensors(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IOError("truncated checkpoint file")
    return buf


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(fh, numel * 8), dtype="<f8")
        arrays[name] = data.reshape(shape).astype(np.float64)
    return arrays


def save_tensors(arrays: dict[str, np.ndarray], path) -> None:
    """Bare named-tensor file (same framing as checkpoints, no config record)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", 0))  # empty config record
        _write_tensors(fh, arrays)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<Q", _read_exact(fh, 8))
        _read_exact(fh, clen)
        return _read_tensors(fh)


def save_checkpoint(model: VitModel, path) -> None:
    config_json = json.dumps(asdict(model.config), sort_keys=True, indent=2)
    raw = config_json.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        _write_tensors(fh, model.param_arrays())


def load_checkpoint(path) -> VitModel:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            config = ModelConfig(**json.loads(_read_exact(fh, clen).decode("utf-8")))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"bad config record in {path}: {exc}") from exc
        arrays = _read_tensors(fh)
    return VitModel(config, arrays)
