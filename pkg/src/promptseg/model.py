"""Desk-scale promptable segmentation network in the SAM mould.

The network has three parameter groups, addressed by name prefix:

* ``encoder`` - ViT-style patch encoder; frozen during fine-tuning so its
  output can be computed once and cached.
* ``prompt_encoder`` - random-Fourier positional encoding of box corners plus
  two learned corner-role vectors.
* ``decoder`` - two-way transformer over (mask token + corner tokens) and the
  image tokens, transposed-conv upsampling, and a hypernetwork head that emits
  one logit map per prompt.

Every prompt is decoded as its own batch row, so the mask for prompt *i*
never depends on the other prompts passed in the same call.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import BBox

GROUPS = ("encoder", "prompt_encoder", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_heads: int = 4
    logit_grid: int = 32
    pe_seed: int = 0
    pe_scale: float = 1.0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def upscale_stages(self) -> int:
        return int(round(math.log2(self.logit_grid // self.grid)))

    def validate(self) -> "ModelConfig":
        ints = [f.name for f in fields(self) if f.name != "pe_scale"]
        for name in ints:
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ValueError(f"{name} must be an integer")
        for name in ints:
            if name != "pe_seed" and getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        for heads in ("encoder_heads", "decoder_heads"):
            if self.embed_dim % getattr(self, heads):
                raise ValueError(f"embed_dim must be divisible by {heads}")
        if self.logit_grid > self.image_size or self.image_size % self.logit_grid:
            raise ValueError("logit_grid must divide image_size")
        ratio, rem = divmod(self.logit_grid, self.grid)
        if rem or ratio & (ratio - 1):
            raise ValueError("logit_grid must be a power-of-two multiple of image_size/patch_size")
        if not (math.isfinite(self.pe_scale) and self.pe_scale > 0):
            raise ValueError("pe_scale must be a positive finite number")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kv[key] = float(value) if key == "pe_scale" else int(value)
        return cls(**kv).validate()


# --------------------------------------------------------------------------
# positional encoding

def fourier_matrix(pe_seed: int, pe_scale: float, embed_dim: int) -> np.ndarray:
    """The fixed ``(embed_dim/2, 2)`` Gaussian frequency matrix, drawn with Philox."""
    if embed_dim % 2:
        raise ValueError("embed_dim must be even")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([pe_seed, 0x5045])))
    return rng.standard_normal((embed_dim // 2, 2)) * pe_scale


def _fourier(points: Tensor, gaussian: Tensor) -> Tensor:
    proj = 2 * math.pi * points @ gaussian.T
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def fourier_position_encoding(points, pe_seed: int, pe_scale: float, embed_dim: int) -> Tensor:
    """Encode ``(M, 2)`` normalized ``(x, y)`` points as ``[sin 2πBx, cos 2πBx]``."""
    pts = torch.as_tensor(points, dtype=torch.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must have shape (M, 2), got {tuple(pts.shape)}")
    if not torch.all((pts >= 0) & (pts <= 1)):
        raise ValueError("point coordinates must lie in [0, 1]")
    return _fourier(pts, torch.from_numpy(fourier_matrix(pe_seed, pe_scale, embed_dim)))


# --------------------------------------------------------------------------
# building blocks

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        # a key bias shifts every score of a query equally and cancels in the softmax
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2)
        return self.out_proj(out.reshape(out.shape[0], out.shape[1], -1))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(1, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.grid * cfg.grid, d))
        self.blocks = nn.ModuleList(Block(d, cfg.encoder_heads) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, images: Tensor) -> Tensor:
        # images: (B, H, W) -> (B, G, G, D)
        b = images.shape[0]
        x = self.patch_embed(images[:, None])
        g = x.shape[-1]
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(b, g, g, -1)


class PromptEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        gauss = torch.from_numpy(fourier_matrix(cfg.pe_seed, cfg.pe_scale, cfg.embed_dim))
        self.register_buffer("gaussian", gauss.float(), persistent=False)
        # row 0: top-left corner role, row 1: bottom-right corner role
        self.corner_embed = nn.Parameter(torch.zeros(2, cfg.embed_dim))
        self.image_size = cfg.image_size
        self.grid = cfg.grid

    def forward(self, boxes: Tensor) -> Tensor:
        # boxes: (N, 4) pixel edges -> (N, 2, D)
        corners = boxes.reshape(-1, 2, 2).to(self.gaussian.dtype) / self.image_size
        return _fourier(corners, self.gaussian) + self.corner_embed

    def dense_pe(self) -> Tensor:
        """Encoding of the patch-grid centres, ``(G*G, D)``."""
        c = (torch.arange(self.grid, dtype=self.gaussian.dtype) + 0.5) / self.grid
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        return _fourier(torch.stack([xx, yy], dim=-1).reshape(-1, 2), self.gaussian)


class TwoWayLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_t2i = nn.LayerNorm(dim)
        self.norm_keys = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim)
        self.norm_i2t = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, heads)

    def forward(self, q: Tensor, keys: Tensor, q_pe: Tensor, k_pe: Tensor) -> tuple[Tensor, Tensor]:
        h = self.norm_self(q)
        q = q + self.self_attn(h + q_pe, h + q_pe, h)
        h, k = self.norm_t2i(q), self.norm_keys(keys)
        q = q + self.cross_t2i(h + q_pe, k + k_pe, k)
        q = q + self.mlp(self.norm_mlp(q))
        k = self.norm_i2t(keys)
        keys = keys + self.cross_i2t(k + k_pe, q + q_pe, q)
        return q, keys


class LayerNorm2d(nn.LayerNorm):
    def forward(self, x: Tensor) -> Tensor:
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def upscale_channels(embed_dim: int, stages: int) -> list[int]:
    return [max(embed_dim // 2 ** (i + 2), 4) for i in range(stages)]


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, d))
        self.layers = nn.ModuleList(TwoWayLayer(d, cfg.decoder_heads) for _ in range(cfg.decoder_depth))
        self.norm_final_q = nn.LayerNorm(d)
        self.norm_final_k = nn.LayerNorm(d)
        self.final_attn = Attention(d, cfg.decoder_heads)
        self.norm_out = nn.LayerNorm(d)
        chans = upscale_channels(d, cfg.upscale_stages)
        ups: list[nn.Module] = []
        prev = d
        for i, c in enumerate(chans):
            ups.append(nn.ConvTranspose2d(prev, c, kernel_size=2, stride=2))
            if i < len(chans) - 1:
                ups.append(LayerNorm2d(c))
            ups.append(nn.GELU())
            prev = c
        self.upscale = nn.Sequential(*ups)
        self.hyper = MLP(d, d, prev)
        self.image_size = cfg.image_size
        self.grid = cfg.grid

    def forward(self, embedding: Tensor, prompts: Tensor, image_pe: Tensor) -> Tensor:
        # embedding: (N, G, G, D) one row per prompt; prompts: (N, 2, D) -> logits (N, H, W)
        n = prompts.shape[0]
        tokens = torch.cat([self.mask_token.expand(n, -1, -1), prompts], dim=1)
        q, q_pe = tokens, tokens
        keys = embedding.reshape(n, self.grid * self.grid, -1)
        k_pe = image_pe.expand(n, -1, -1)
        for layer in self.layers:
            q, keys = layer(q, keys, q_pe, k_pe)
        h, k = self.norm_final_q(q), self.norm_final_k(keys)
        q = self.norm_out(q + self.final_attn(h + q_pe, k + k_pe, k))
        feat = keys.transpose(1, 2).reshape(n, -1, self.grid, self.grid)
        feat = self.upscale(feat)
        weights = self.hyper(q[:, 0])
        low = torch.einsum("nc,nchw->nhw", weights, feat)
        return F.interpolate(low[:, None], size=(self.image_size, self.image_size),
                             mode="bilinear", align_corners=False)[:, 0]


# --------------------------------------------------------------------------
# the model

def boxes_tensor(boxes: Sequence[BBox], image_size: int) -> Tensor:
    if len(boxes) == 0:
        raise ValueError("at least one box prompt is required")
    for b in boxes:
        if not isinstance(b, BBox):
            raise TypeError(f"expected BBox, got {type(b).__name__}")
        if not b.fits((image_size, image_size)):
            raise ValueError(f"box {b.as_tuple()} outside {image_size}x{image_size} image")
    return torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float64)


class PromptSegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.decoder = MaskDecoder(config)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.mask_token.dtype

    def _check_image(self, image) -> Tensor:
        img = torch.as_tensor(np.asarray(image) if not isinstance(image, Tensor) else image)
        s = self.config.image_size
        if img.shape[-2:] != (s, s) or img.ndim not in (2, 3):
            raise ValueError(f"image must be {s}x{s}, got {tuple(img.shape)}")
        if not torch.isfinite(img).all():
            raise ValueError("image contains non-finite values")
        return img.to(self.dtype)

    def encode_image(self, image) -> Tensor:
        """``(H, W)`` image -> ``(G, G, D)`` embedding; ``(B, H, W)`` batches work too."""
        img = self._check_image(image)
        if img.ndim == 2:
            return self.encoder(img[None])[0]
        return self.encoder(img)

    def encode_prompts(self, boxes: Sequence[BBox]) -> Tensor:
        """List of boxes -> ``(N, 2, D)`` corner tokens."""
        return self.prompt_encoder(boxes_tensor(boxes, self.config.image_size)).to(self.dtype)

    def decode_masks(self, embedding: Tensor, prompts: Tensor) -> Tensor:
        """Decode ``(N, 2, D)`` prompt tokens against one ``(G, G, D)`` embedding,
        or against ``(N, G, G, D)`` per-prompt embeddings. Returns ``(N, H, W)`` logits."""
        cfg = self.config
        g, d = cfg.grid, cfg.embed_dim
        if prompts.ndim != 3 or prompts.shape[1:] != (2, d) or prompts.shape[0] < 1:
            raise ValueError(f"prompts must be (N, 2, {d}), got {tuple(prompts.shape)}")
        n = prompts.shape[0]
        if embedding.shape == (g, g, d):
            embedding = embedding.expand(n, g, g, d)
        elif embedding.shape != (n, g, g, d):
            raise ValueError(f"embedding must be ({g}, {g}, {d}) or ({n}, {g}, {g}, {d}), got {tuple(embedding.shape)}")
        pe = self.prompt_encoder.dense_pe().to(self.dtype)
        return self.decoder(embedding.to(self.dtype), prompts, pe)

    def forward(self, image, boxes: Sequence[BBox], embedding: Tensor | None = None) -> Tensor:
        if embedding is None:
            embedding = self.encode_image(image)
        return self.decode_masks(embedding, self.encode_prompts(boxes))

    def group_parameters(self, group: str) -> dict[str, nn.Parameter]:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        return {f"{group}.{k}": p for k, p in getattr(self, group).named_parameters()}

    def set_trainable(self, encoder: bool = False, prompt_encoder: bool = True, decoder: bool = True) -> None:
        flags = {"encoder": encoder, "prompt_encoder": prompt_encoder, "decoder": decoder}
        for group, flag in flags.items():
            for p in getattr(self, group).parameters():
                p.requires_grad_(flag)

    def trainable_groups(self) -> list[str]:
        return [g for g in GROUPS if all(p.requires_grad for p in getattr(self, g).parameters())]


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if "upscale" in name and len(shape) == 4:
        return shape[0]  # ConvTranspose2d stores (in, out, k, k)
    return int(np.prod(shape[1:]))


def init_model(config: ModelConfig, seed: int) -> PromptSegModel:
    """Build a model with deterministic weights.

    Matrices and kernels are N(0, 1/fan_in) drawn from a Philox stream keyed by
    ``(seed, crc32(name))``; LayerNorm scales start at 1, biases at 0.
    """
    model = PromptSegModel(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                key = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
                rng = np.random.Generator(np.random.Philox(key))
                std = 1.0 / math.sqrt(_fan_in(name, tuple(p.shape)))
                p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * std))
            elif isinstance(_owner(model, name), nn.LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                p.zero_()
    model.set_trainable()
    return model


def _owner(model: nn.Module, name: str) -> nn.Module:
    return model.get_submodule(name.rsplit(".", 1)[0])


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# checkpoint codec

CKPT_MAGIC = b"PSCK"
CKPT_VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: PromptSegModel) -> bytes:
    """Serialize config + named tensors.

    Layout (little-endian): ``PSCK``, u8 version, u32 config length, config
    text (``key=value`` lines, sorted), u32 tensor count, then per tensor in
    name order: u16 name length, UTF-8 name, u8 dtype (0 f32, 1 f64), u8 ndim,
    ndim x u32 dims, raw row-major data.
    """
    cfg = model.config.to_text().encode("utf-8")
    state = model.state_dict()
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(cfg)) + cfg)
    out.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        code = _DTYPE_CODES[t.dtype]
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, t.ndim))
        out.write(struct.pack(f"<{t.ndim}I", *t.shape))
        out.write(t.numpy().astype(_DTYPES[code][1], copy=False).tobytes())
    return out.getvalue()


def save_checkpoint(model: PromptSegModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> PromptSegModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> PromptSegModel:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    version, cfg_len = struct.unpack("<BI", take(5, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_text(bytes(take(cfg_len, "config")).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dtype, np_dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(take(nbytes, f"{name} data"), dtype=np_dtype).reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    model = PromptSegModel(config)
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    model.load_state_dict(state, strict=True)
    model.set_trainable()
    return model


# --------------------------------------------------------------------------
# embedding cache

class EmbeddingCache:
    """Content-addressed store of frozen-encoder outputs.

    Keys hash the encoder weights together with the image bytes, so the cache
    is only meaningful while the encoder stays frozen. With ``directory`` set,
    entries are also persisted as ``.npy`` files and reloaded bit-exactly.
    Reads are lock-free; inserts take an exclusive lock.
    """

    def __init__(self, model: PromptSegModel, directory: str | Path | None = None):
        self.model = model
        self.directory = Path(directory) if directory is not None else None
        self._store: dict[str, Tensor] = {}
        self._lock = threading.Lock()
        h = hashlib.sha256()
        for name, t in sorted(model.encoder.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        self._encoder_digest = h.digest()
        self.hits = 0
        self.misses = 0

    def key(self, image) -> str:
        img = self.model._check_image(image)
        h = hashlib.sha256(self._encoder_digest)
        h.update(str(img.dtype).encode())
        h.update(img.contiguous().numpy().tobytes())
        return h.hexdigest()

    def get(self, image) -> Tensor:
        k = self.key(image)
        hit = self._store.get(k)
        if hit is not None:
            self.hits += 1
            return hit
        path = self.directory / f"{k}.npy" if self.directory is not None else None
        if path is not None and path.exists():
            emb = torch.from_numpy(np.load(path))
        else:
            with torch.no_grad():
                emb = self.model.encode_image(image).detach().clone()
            if path is not None:
                with self._lock:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_suffix(".tmp.npy")
                    np.save(tmp, emb.numpy())
                    tmp.replace(path)
        self.misses += 1
        with self._lock:
            self._store.setdefault(k, emb)
        return self._store[k]
