"""Encoders for the two visual pathways and the scanpath tower.

* :class:`SemanticEncoder` is frozen: a hand-crafted feature recipe (sorted
  coarse luminance grid, per-channel colour histogram, rotation-invariant
  edge statistics) multiplied by a fixed seeded projection.  Every feature is
  invariant to where things sit in the frame.  It has no trainable state.
* :class:`GazeImageEncoder` is a small patch transformer producing one token
  per patch; its mean-pooled output is the image-side embedding.
* :class:`ScanpathEncoder` embeds fixation sequences.

Embedding tables and weight files use little-endian float32 payloads; the
byte layouts are documented on :func:`write_embedding_table` and
:func:`save_weights`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataio import Scanpath


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    patch_size: int = 8
    n_layers: int = 2
    n_heads: int = 4
    trainable: bool = True
    init_seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    ffn_mult: int = 2

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise EncoderConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        h, w = self.image_size
        if self.patch_size < 1 or h % self.patch_size or w % self.patch_size:
            raise EncoderConfigError(f"patch_size={self.patch_size} must divide image size {self.image_size}")
        if self.n_layers < 0:
            raise EncoderConfigError("n_layers must be >= 0")

    @property
    def n_tokens(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)


# ---------------------------------------------------------------------------
# frozen semantic encoder


@dataclass(frozen=True)
class SemanticConfig:
    d: int = 64
    seed: int = 0
    grid: int = 4
    hist_bins: int = 8
    edge_threshold: float = 0.1
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        h, w = self.image_size
        if self.grid < 1 or h % self.grid or w % self.grid:
            raise EncoderConfigError(f"luminance grid {self.grid} must divide image size {self.image_size}")

    @property
    def n_features(self) -> int:
        return self.grid * self.grid + self.channels * self.hist_bins + 4


LUMA = np.array([0.299, 0.587, 0.114])


class SemanticEncoder:
    """Frozen content encoder: fixed features times a fixed projection."""

    trainable_parameters: tuple = ()

    def __init__(self, config: SemanticConfig = SemanticConfig()):
        self.config = config
        rng = np.random.Generator(np.random.Philox(config.seed))
        bound = 1.0 / math.sqrt(config.n_features)
        proj = rng.uniform(-bound, bound, size=(config.n_features, config.d)) * math.sqrt(3.0)
        proj.setflags(write=False)
        self.projection = proj

    def features(self, pixels: np.ndarray) -> np.ndarray:
        """Feature vector(s) for an ``(H, W, C)`` image or an ``(N, H, W, C)`` batch."""
        cfg = self.config
        x = np.asarray(pixels, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != (*cfg.image_size, cfg.channels):
            raise EncoderConfigError(f"image shape {x.shape[1:]} does not match {(*cfg.image_size, cfg.channels)}")
        n, h, w, c = x.shape
        lum = x @ LUMA if c == 3 else x.mean(axis=-1)
        g = cfg.grid
        # sorted cells: the luminance profile without its layout
        grid = np.sort(lum.reshape(n, g, h // g, g, w // g).mean(axis=(2, 4)).reshape(n, -1), axis=1)

        bins = np.floor(np.clip(x, 0.0, 1.0) * cfg.hist_bins).clip(max=cfg.hist_bins - 1).astype(np.int64)
        hist = np.zeros((n, c, cfg.hist_bins))
        for ch in range(c):
            idx = bins[..., ch].reshape(n, -1)
            for i in range(n):
                hist[i, ch] = np.bincount(idx[i], minlength=cfg.hist_bins)
        hist = hist.reshape(n, -1) / (h * w)

        gx = np.diff(lum, axis=2)[:, :-1, :]
        gy = np.diff(lum, axis=1)[:, :, :-1]
        mag = np.sqrt(gx**2 + gy**2).reshape(n, -1)
        edge = np.stack([
            (mag > cfg.edge_threshold).mean(axis=1),
            mag.mean(axis=1),
            mag.std(axis=1),
            np.percentile(mag, 99, axis=1),
        ], axis=1)
        feats = np.concatenate([grid, hist, edge], axis=1)
        return feats[0] if single else feats

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return self.features(pixels) @ self.projection

    __call__ = encode


def encode_semantic(pixels: np.ndarray, encoder: SemanticEncoder | None = None) -> np.ndarray:
    return (encoder or SemanticEncoder()).encode(pixels)


# ---------------------------------------------------------------------------
# transformer building blocks


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, key_mask=None):
        b, t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block: attention and feed-forward, each residual."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.ffn(self.ln2(x))


def init_fan_in_(module: nn.Module, seed: int) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norms.

    Parameters are visited in ``named_parameters`` order with one seeded
    generator, so the result depends only on ``seed`` and the architecture.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            elif p.dim() >= 2:
                fan_in = p.shape[getattr(owner, "fan_in_axis", -1)]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
            else:
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * 0.02)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(1e-12)


def grid_positions(rows: int, cols: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Row code in the first ``d/2`` channels, column code in the rest, raster order."""
    half = d // 2
    r = sinusoidal_positions(rows, half, torch.float64)
    c = sinusoidal_positions(cols, d - half, torch.float64)
    out = torch.cat([r[:, None, :].expand(rows, cols, half), c[None, :, :].expand(rows, cols, d - half)], dim=-1)
    return out.reshape(rows * cols, d).to(dtype)


class GazeImageEncoder(nn.Module):
    """Patch transformer image tower.

    Input ``(B, H, W, C)`` in [0, 1]; output ``(B, T, d)`` tokens with
    ``T = (H/p)(W/p)``.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        p, c, d = config.patch_size, config.channels, config.d
        self.patch = nn.Linear(p * p * c, d)
        self.pos = nn.Parameter(torch.zeros(config.n_tokens, d))
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.ffn_mult) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        init_fan_in_(self, config.init_seed)
        with torch.no_grad():
            self.pos.copy_(grid_positions(config.image_size[0] // p, config.image_size[1] // p, d))
        self.requires_grad_(config.trainable)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.dim() == 3:
            images = images[None]
        if tuple(images.shape[1:]) != (*cfg.image_size, cfg.channels):
            raise EncoderConfigError(
                f"image shape {tuple(images.shape[1:])} does not match {(*cfg.image_size, cfg.channels)}")
        b, h, w, c = images.shape
        p = cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch(self.patchify(images) - 0.5) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def pooled(self, images: torch.Tensor, normalize: bool = False) -> torch.Tensor:
        v = self(images).mean(dim=1)
        return l2_normalize(v) if normalize else v


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / d)
    out = torch.zeros(n, d, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return out.to(dtype)


def fixation_features(scanpaths: Sequence[Scanpath], dtype=torch.float32):
    """Pad scanpaths into ``(B, L, 3)`` features ``(x, y, log seconds)`` plus a validity mask."""
    n = max(len(sp.fixations) for sp in scanpaths)
    feats = torch.zeros(len(scanpaths), n, 3, dtype=torch.float64)
    mask = torch.zeros(len(scanpaths), n, dtype=torch.bool)
    for i, sp in enumerate(scanpaths):
        arr = torch.as_tensor(sp.as_array())
        arr[:, 2] = torch.log(arr[:, 2] / 1000.0)
        feats[i, : len(arr)] = arr
        mask[i, : len(arr)] = True
    return feats.to(dtype), mask


class ScanpathEncoder(nn.Module):
    """Fixation-sequence tower: linear token map + sinusoidal order code, blocks, masked mean-pool."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), max_len: int = 256):
        super().__init__()
        self.config = config
        d = config.d
        self.embed = nn.Linear(3, d)
        self.register_buffer("order", sinusoidal_positions(max_len, d), persistent=False)
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.ffn_mult) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        init_fan_in_(self, config.init_seed + 7919)
        self.requires_grad_(config.trainable)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Un-normalized pooled embedding ``(B, d)``."""
        L = feats.shape[1]
        x = self.embed(feats) + self.order[:L].to(feats.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln_f(x)
        m = mask[..., None].to(x.dtype)
        return (x * m).sum(dim=1) / m.sum(dim=1)

    def encode(self, scanpaths: Sequence[Scanpath]) -> torch.Tensor:
        dtype = self.embed.weight.dtype
        feats, mask = fixation_features(scanpaths, dtype)
        return l2_normalize(self(feats, mask))


# ---------------------------------------------------------------------------
# embedding tables

TABLE_MAGIC = "AQAEMB"


class MissingIdError(KeyError):
    pass


@dataclass
class EmbeddingTable:
    ids: list[str]
    values: np.ndarray  # (n, d) or (n, T, d)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim not in (2, 3) or self.values.shape[0] != len(self.ids):
            raise EncoderConfigError(f"table values shape {self.values.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise EncoderConfigError("duplicate ids in embedding table")
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def width(self) -> int:
        return int(self.values.shape[-1])

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.values[self._index[key]]
        except KeyError:
            raise MissingIdError(f"id {key!r} not in embedding table") from None

    def lookup(self, keys: Sequence[str]) -> np.ndarray:
        missing = [k for k in keys if k not in self._index]
        if missing:
            raise MissingIdError(f"{len(missing)} id(s) not in embedding table, e.g. {missing[0]!r}")
        return self.values[[self._index[k] for k in keys]]


def write_embedding_table(path, table: EmbeddingTable) -> None:
    """Write ``table``.

    Layout: an ASCII header line ``AQAEMB 1 n=<n> d=<d> t=<T> dtype=float32le``
    (``t=1`` for plain vectors), then ``n`` UTF-8 id lines, then ``n*T*d``
    little-endian float32 values in row-major order.
    """
    vals = np.asarray(table.values)
    t = 1 if vals.ndim == 2 else vals.shape[1]
    with open(path, "wb") as fh:
        fh.write(f"{TABLE_MAGIC} 1 n={len(table)} d={table.width} t={t} dtype=float32le\n".encode("ascii"))
        for k in table.ids:
            if "\n" in k:
                raise EncoderConfigError(f"id {k!r} contains a newline")
            fh.write(k.encode("utf-8") + b"\n")
        fh.write(vals.astype("<f4").tobytes(order="C"))


def load_embedding_table(path, expected_width: int | None = None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) < 2 or header[0] != TABLE_MAGIC:
            raise EncoderConfigError(f"{path}: not an embedding table")
        kv = dict(item.split("=", 1) for item in header[2:])
        if kv.get("dtype") != "float32le":
            raise EncoderConfigError(f"{path}: unsupported dtype {kv.get('dtype')!r}")
        n, d, t = int(kv["n"]), int(kv["d"]), int(kv.get("t", 1))
        ids = [fh.readline().decode("utf-8").rstrip("\n") for _ in range(n)]
        payload = fh.read()
    if len(payload) != 4 * n * t * d:
        raise EncoderConfigError(f"{path}: payload has {len(payload)} bytes, expected {4 * n * t * d}")
    vals = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    vals = vals.reshape((n, d) if t == 1 else (n, t, d))
    if expected_width is not None and d != expected_width:
        raise EncoderConfigError(f"{path}: width {d} does not match expected {expected_width}")
    return EmbeddingTable(ids, vals)


# ---------------------------------------------------------------------------
# weight containers

WEIGHTS_MAGIC = b"AQAW"
WEIGHTS_VERSION = 1


def save_weights(path, tensors: dict[str, torch.Tensor | np.ndarray], config: dict) -> None:
    """Write a versioned weight container.

    Layout: 4-byte magic ``AQAW``, uint32 LE version, uint32 LE header length,
    a UTF-8 JSON header ``{"config": ..., "tensors": [{"name", "shape",
    "offset"}]}`` with sorted keys, then the concatenated little-endian
    float32 tensor payloads.  Identical inputs give identical bytes.
    """
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise EncoderConfigError(f"{path}: not a weights file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != WEIGHTS_VERSION:
        raise EncoderConfigError(f"{path}: unsupported weights version {version}")
    header = json.loads(data[12: 12 + hlen].decode("utf-8"))
    body = data[12 + hlen:]
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return out, header["config"]


def module_state(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_state(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    own = module.state_dict()
    state = {}
    for k, v in own.items():
        if prefix + k not in arrays:
            raise EncoderConfigError(f"weights missing tensor {prefix + k!r}")
        state[k] = torch.as_tensor(arrays[prefix + k], dtype=v.dtype)
    module.load_state_dict(state)


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
