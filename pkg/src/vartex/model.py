"""The forecasting network.

Per-variable patch tokens are embedded into R parallel streams; each stream
collapses its V variable embeddings into one representative token via
single-query cross-attention, then alternating encoder blocks process the
streams spatially and mix them across the R axis. A two-layer MLP head maps
concatenated streams back to patches.

Crops are first-class: positional embeddings are indexed by absolute token
position in the full grid, so a cropped forward pass shares geometry with the
global one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import (
    BadMagic,
    ConfigMismatch,
    HeaderCorrupt,
    HeadDivisibility,
    IndivisibleGrid,
    NonFiniteInput,
    PayloadTruncated,
    ShapeMismatch,
    VariableCountMismatch,
    VersionMismatch,
)
from .griddata import Region


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (32, 64)
    patch_size: int = 2
    embed_dim: int = 1024
    num_representatives: int = 2
    stream_dim: Optional[int] = None      # defaults to embed_dim / R
    num_blocks: int = 8
    heads: int = 16
    mlp_ratio: int = 4
    mixing_interval: int = 4              # 0 disables stream mixing entirely
    share_spatial_weights: bool = False
    head_depth: int = 2
    head_hidden: int = 1024
    drop_rate: float = 0.1
    drop_path: float = 0.1
    num_variables: int = 47
    output_variables: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))

    # -- derived quantities --

    @property
    def resolved_stream_dim(self) -> int:
        if self.stream_dim is not None:
            return self.stream_dim
        if self.embed_dim % self.num_representatives:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_representatives {self.num_representatives}")
        return self.embed_dim // self.num_representatives

    @property
    def width(self) -> int:
        """Token width before splitting: R * d_r."""
        return self.num_representatives * self.resolved_stream_dim

    @property
    def token_grid(self) -> tuple:
        H, W = self.image_size
        return H // self.patch_size, W // self.patch_size

    @property
    def num_tokens(self) -> int:
        nh, nw = self.token_grid
        return nh * nw

    @property
    def resolved_output_variables(self) -> int:
        return self.output_variables if self.output_variables is not None else self.num_variables

    def validate(self) -> "ModelConfig":
        H, W = self.image_size
        p = self.patch_size
        if H % p or W % p:
            raise IndivisibleGrid(f"image_size {H}x{W} not divisible by patch_size {p}")
        if self.num_representatives < 1:
            raise ValueError("num_representatives must be >= 1")
        d_r = self.resolved_stream_dim
        if d_r % self.heads:
            raise HeadDivisibility(f"stream_dim {d_r} not divisible by heads {self.heads}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if not (0 <= self.mixing_interval <= self.num_blocks):
            raise ValueError(
                f"mixing_interval must lie in [0, num_blocks={self.num_blocks}], "
                f"got {self.mixing_interval}")
        if self.head_depth < 1:
            raise ValueError("head_depth must be >= 1")
        if self.num_variables < 1:
            raise ValueError("num_variables must be >= 1")
        for fname in ("drop_rate", "drop_path"):
            v = getattr(self, fname)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{fname} must be in [0, 1), got {v}")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["image_size"] = tuple(obj["image_size"])
        return cls(**obj)


def config_diff(a: ModelConfig, b: ModelConfig) -> list:
    """Names of fields on which two configs disagree."""
    da, db = a.to_json(), b.to_json()
    return sorted(k for k in da if da[k] != db[k])


# -- tokenization (plain arrays) --------------------------------------------------


def patchify(sample: np.ndarray, patch_size: int) -> np.ndarray:
    """[V, H, W] (or [B, V, H, W]) -> [N, V, p*p] per-variable patches, row-major."""
    p = patch_size
    single = sample.ndim == 3
    x = sample[None] if single else sample
    if x.ndim != 4:
        raise ShapeMismatch(f"patchify expects [V, H, W] or [B, V, H, W], got {sample.shape}")
    B, V, H, W = x.shape
    if H % p or W % p:
        raise IndivisibleGrid(f"grid {H}x{W} not divisible by patch size {p}")
    nh, nw = H // p, W // p
    out = (x.reshape(B, V, nh, p, nw, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(B, nh * nw, V, p * p))
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, hw: tuple) -> np.ndarray:
    """Inverse of patchify for [N, V, p*p] (or batched)."""
    p = patch_size
    h, w = hw
    single = patches.ndim == 3
    x = patches[None] if single else patches
    B, N, V, pp = x.shape
    nh, nw = h // p, w // p
    if N != nh * nw or pp != p * p:
        raise ShapeMismatch(f"patches {x.shape} do not fit grid {h}x{w} at patch {p}")
    out = (x.reshape(B, nh, nw, V, p, p)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(B, V, h, w))
    return out[0] if single else out


def token_indices(config: ModelConfig, region: Region) -> np.ndarray:
    """Absolute token positions (row-major over the full grid) covered by a region."""
    p = config.patch_size
    if region.row_off % p or region.col_off % p:
        raise IndivisibleGrid(f"region offset ({region.row_off}, {region.col_off}) "
                              f"not aligned to patch size {p}")
    if region.height % p or region.width % p:
        raise IndivisibleGrid(f"region extent {region.height}x{region.width} "
                              f"not a multiple of patch size {p}")
    _, nw_full = config.token_grid
    r0, c0 = region.row_off // p, region.col_off // p
    nh, nw = region.height // p, region.width // p
    rows = (r0 + np.arange(nh))[:, None] * nw_full
    cols = (c0 + np.arange(nw))[None, :]
    return (rows + cols).reshape(-1)


# -- differentiable building blocks ------------------------------------------------


def split_streams(tokens: nx.Tensor, num_streams: int) -> list:
    """Contiguous equal slices of the embedding axis; concat restores the input."""
    width = tokens.value.shape[-1]
    if width % num_streams:
        raise ShapeMismatch(f"width {width} not divisible into {num_streams} streams")
    return nx.split(tokens, num_streams, axis=-1)


def aggregate_variables(stream: nx.Tensor, query: nx.Tensor, key_w: nx.Tensor,
                        value_w: nx.Tensor) -> nx.Tensor:
    """Collapse the variable axis: softmax(q . (X W_K) / sqrt(d)) weighted X W_V.

    ``stream`` is [..., V, d_r]; attention runs independently at every leading
    position and the weights sum to 1 over V.
    """
    d = stream.value.shape[-1]
    if query.value.shape != (d,):
        raise ShapeMismatch(f"query must be [{d}], got {query.value.shape}")
    if key_w.value.shape != (d, d) or value_w.value.shape != (d, d):
        raise ShapeMismatch(f"key/value maps must be [{d}, {d}]")
    keys = nx.matmul(stream, key_w)                       # [..., V, d]
    logits = nx.matmul(keys, nx.reshape(query, (d, 1)))   # [..., V, 1]
    lead = stream.value.shape[:-2]
    v_count = stream.value.shape[-2]
    logits = nx.reshape(logits, lead + (v_count,))
    weights = nx.softmax(nx.scale(logits, 1.0 / np.sqrt(d)), axis=-1)
    values = nx.matmul(stream, value_w)                   # [..., V, d]
    pooled = nx.matmul(nx.reshape(weights, lead + (1, v_count)), values)
    return nx.reshape(pooled, lead + (d,))


@dataclass
class BlockParams:
    ln1_gain: nx.Tensor
    ln1_bias: nx.Tensor
    attn: nx.AttentionParams
    ln2_gain: nx.Tensor
    ln2_bias: nx.Tensor
    mlp_w1: nx.Tensor
    mlp_b1: nx.Tensor
    mlp_w2: nx.Tensor
    mlp_b2: nx.Tensor


def encoder_block(x: nx.Tensor, bp: BlockParams, heads: int, drop_rate: float,
                  drop_path_rate: float, mode: str = "eval", rng=None) -> nx.Tensor:
    """Pre-norm attention + MLP with residuals; drop_path gates both branches.

    Attends over the second-to-last axis, so the same block serves the spatial
    token sequence and the length-R stream sequence.
    """
    a = nx.multi_head_self_attention(
        nx.layer_norm(x, bp.ln1_gain, bp.ln1_bias), bp.attn, heads)
    a = nx.dropout(a, drop_rate, mode, rng)
    x = nx.add(x, nx.drop_path(a, drop_path_rate, mode, rng))
    h = nx.gelu(nx.linear(nx.layer_norm(x, bp.ln2_gain, bp.ln2_bias), bp.mlp_w1, bp.mlp_b1))
    h = nx.dropout(h, drop_rate, mode, rng)
    h = nx.linear(h, bp.mlp_w2, bp.mlp_b2)
    h = nx.dropout(h, drop_rate, mode, rng)
    return nx.add(x, nx.drop_path(h, drop_path_rate, mode, rng))


# -- the model ---------------------------------------------------------------------


class VartexModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.params = nx.ParameterStore(seed, dtype=dtype)
        self._build()

    # parameter layout; creation order fixes the store enumeration order
    def _build(self):
        cfg = self.config
        P = self.params
        V = cfg.num_variables
        p2 = cfg.patch_size ** 2
        width = cfg.width
        d = cfg.resolved_stream_dim
        hidden = cfg.mlp_ratio * d

        self.patch_w = P.add("embed.patch_w", (V, p2, width))
        self.patch_b = P.add("embed.patch_b", (V, width), init="zeros")
        self.var_embed = P.add("embed.variable", (V, width))
        self.pos_embed = P.add("embed.position", (cfg.num_tokens, width))

        self.agg = []
        for k in range(cfg.num_representatives):
            self.agg.append((
                P.add(f"aggregate.{k}.query", (d,)),
                P.add(f"aggregate.{k}.key_w", (d, d)),
                P.add(f"aggregate.{k}.value_w", (d, d)),
            ))

        def block_params(prefix: str) -> BlockParams:
            # residual-branch output projections start at zero, so a fresh
            # encoder is exactly the identity on its streams
            return BlockParams(
                ln1_gain=P.add(f"{prefix}.ln1.gain", (d,), init="ones"),
                ln1_bias=P.add(f"{prefix}.ln1.bias", (d,), init="zeros"),
                attn=nx.AttentionParams(
                    wq=P.add(f"{prefix}.attn.wq", (d, d)),
                    bq=P.add(f"{prefix}.attn.bq", (d,), init="zeros"),
                    wk=P.add(f"{prefix}.attn.wk", (d, d)),
                    bk=P.add(f"{prefix}.attn.bk", (d,), init="zeros"),
                    wv=P.add(f"{prefix}.attn.wv", (d, d)),
                    bv=P.add(f"{prefix}.attn.bv", (d,), init="zeros"),
                    wo=P.add(f"{prefix}.attn.wo", (d, d), init="zeros"),
                    bo=P.add(f"{prefix}.attn.bo", (d,), init="zeros"),
                ),
                ln2_gain=P.add(f"{prefix}.ln2.gain", (d,), init="ones"),
                ln2_bias=P.add(f"{prefix}.ln2.bias", (d,), init="zeros"),
                mlp_w1=P.add(f"{prefix}.mlp.w1", (d, hidden)),
                mlp_b1=P.add(f"{prefix}.mlp.b1", (hidden,), init="zeros"),
                mlp_w2=P.add(f"{prefix}.mlp.w2", (hidden, d), init="zeros"),
                mlp_b2=P.add(f"{prefix}.mlp.b2", (d,), init="zeros"),
            )

        self.spatial = []
        for b in range(cfg.num_blocks):
            if cfg.share_spatial_weights:
                shared = block_params(f"block.{b:02d}.shared")
                self.spatial.append([shared] * cfg.num_representatives)
            else:
                self.spatial.append([block_params(f"block.{b:02d}.s{k}")
                                     for k in range(cfg.num_representatives)])

        self.mixing = []
        if cfg.mixing_interval >= 1:
            for j in range(cfg.num_blocks // cfg.mixing_interval):
                self.mixing.append(block_params(f"mix.{j:02d}"))

        self.head_norms = []
        for k in range(cfg.num_representatives):
            self.head_norms.append((
                P.add(f"head.norm.{k}.gain", (d,), init="ones"),
                P.add(f"head.norm.{k}.bias", (d,), init="zeros"),
            ))
        dims = [width] + [cfg.head_hidden] * (cfg.head_depth - 1) \
            + [cfg.resolved_output_variables * p2]
        self.head_layers = []
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            self.head_layers.append((
                P.add(f"head.{i}.w", (din, dout)),
                P.add(f"head.{i}.b", (dout,), init="zeros"),
            ))

    # -- forward pieces --

    def embed(self, patches: nx.Tensor, indices: np.ndarray) -> nx.Tensor:
        """[..., n, V, p*p] patches -> [..., n, V, width] tokens."""
        V = self.config.num_variables
        if patches.value.shape[-2] != V:
            raise VariableCountMismatch(
                f"input has {patches.value.shape[-2]} variables, config says {V}")
        lead = patches.value.shape[:-1]
        p2 = patches.value.shape[-1]
        x = nx.reshape(patches, lead + (1, p2))
        tok = nx.matmul(x, self.patch_w)                  # [..., n, V, 1, width]
        tok = nx.reshape(tok, lead + (self.config.width,))
        tok = nx.add(tok, self.patch_b)
        tok = nx.add(tok, self.var_embed)
        pos = nx.take_rows(self.pos_embed, indices)       # [n, width]
        pos = nx.reshape(pos, (len(indices), 1, self.config.width))
        return nx.add(tok, pos)

    def encode(self, streams: list, mode: str = "eval", rng=None) -> list:
        cfg = self.config
        mix_idx = 0
        for b in range(cfg.num_blocks):
            streams = [encoder_block(s, self.spatial[b][k], cfg.heads, cfg.drop_rate,
                                     cfg.drop_path, mode, rng)
                       for k, s in enumerate(streams)]
            if cfg.mixing_interval >= 1 and (b + 1) % cfg.mixing_interval == 0:
                z = nx.stack(streams, axis=-2)            # [..., n, R, d]
                z = encoder_block(z, self.mixing[mix_idx], cfg.heads, cfg.drop_rate,
                                  cfg.drop_path, mode, rng)
                mix_idx += 1
                parts = nx.split(z, cfg.num_representatives, axis=-2)
                d = cfg.resolved_stream_dim
                streams = [nx.reshape(part, part.value.shape[:-2] + (d,))
                           for part in parts]
        return streams

    def head(self, streams: list, hw: tuple) -> nx.Tensor:
        cfg = self.config
        normed = [nx.layer_norm(s, g, bvec) for s, (g, bvec) in zip(streams, self.head_norms)]
        x = normed[0] if len(normed) == 1 else nx.concat(normed, axis=-1)
        for i, (w, bvec) in enumerate(self.head_layers):
            if i > 0:
                x = nx.gelu(x)
            x = nx.linear(x, w, bvec)
        h, w_ = hw
        p = cfg.patch_size
        nh, nw = h // p, w_ // p
        lead = x.value.shape[:-2]
        V_out = cfg.resolved_output_variables
        x = nx.reshape(x, lead + (nh, nw, V_out, p, p))
        nl = len(lead)
        axes = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1, nl + 4)
        x = nx.permute(x, axes)
        return nx.reshape(x, lead + (V_out, h, w_))

    def forward(self, x, region: Optional[Region] = None, mode: str = "eval",
                rng=None) -> nx.Tensor:
        """[V, h, w] or [B, V, h, w] standardized input -> forecast of same spatial size."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4:
            raise ShapeMismatch(f"input must be [V, h, w] or [B, V, h, w], got {x.shape}")
        if not np.isfinite(x).all():
            raise NonFiniteInput("forward received NaN/Inf input")
        B, V, h, w = x.shape
        if V != cfg.num_variables:
            raise VariableCountMismatch(f"input has {V} variables, config says {cfg.num_variables}")
        H, W = cfg.image_size
        if region is None:
            region = Region.full(H, W)
        region.validate(H, W)
        if (h, w) != (region.height, region.width):
            raise ShapeMismatch(
                f"input spatial size {h}x{w} != region {region.height}x{region.width}")
        idx = token_indices(cfg, region)

        patches = patchify(x, cfg.patch_size).astype(self.params.dtype)
        tokens = self.embed(nx.leaf_input(patches), idx)
        streams = split_streams(tokens, cfg.num_representatives)
        streams = [aggregate_variables(s, q, kw, vw)
                   for s, (q, kw, vw) in zip(streams, self.agg)]
        streams = self.encode(streams, mode, rng)
        out = self.head(streams, (h, w))
        if single:
            out = nx.reshape(out, out.value.shape[1:])
        return out

    def parameter_census(self) -> dict:
        """Group totals from walking the store; must equal count_parameters exactly."""
        groups = {"embeddings": 0, "aggregation": 0, "spatial_blocks": 0,
                  "mixing_blocks": 0, "head": 0}
        prefix_map = {"embed": "embeddings", "aggregate": "aggregation",
                      "block": "spatial_blocks", "mix": "mixing_blocks", "head": "head"}
        seen = set()
        for name, t in self.params.items():
            if id(t) in seen:
                continue
            seen.add(id(t))
            groups[prefix_map[name.split(".")[0]]] += t.value.size
        groups["total"] = self.params.total_count
        return groups


def _encoder_block_param_count(d: int, mlp_ratio: int) -> int:
    attn = 4 * (d * d + d)
    norms = 2 * 2 * d
    hidden = mlp_ratio * d
    mlp = d * hidden + hidden + hidden * d + d
    return attn + norms + mlp


def count_parameters(config: ModelConfig) -> dict:
    """Analytic per-group parameter counts from the config alone."""
    cfg = config.validate()
    V = cfg.num_variables
    p2 = cfg.patch_size ** 2
    width = cfg.width
    d = cfg.resolved_stream_dim
    R = cfg.num_representatives

    embeddings = V * (p2 * width + width) + V * width + cfg.num_tokens * width
    aggregation = R * (d + 2 * d * d)
    per_block = _encoder_block_param_count(d, cfg.mlp_ratio)
    sets_per_block = 1 if cfg.share_spatial_weights else R
    spatial = cfg.num_blocks * sets_per_block * per_block
    mixing = (cfg.num_blocks // cfg.mixing_interval) * per_block \
        if cfg.mixing_interval >= 1 else 0
    dims = [width] + [cfg.head_hidden] * (cfg.head_depth - 1) \
        + [cfg.resolved_output_variables * p2]
    head = R * 2 * d + sum(a * b + b for a, b in zip(dims, dims[1:]))

    return {
        "embeddings": embeddings,
        "aggregation": aggregation,
        "spatial_blocks": spatial,
        "mixing_blocks": mixing,
        "head": head,
        "total": embeddings + aggregation + spatial + mixing + head,
    }


# -- versioned checkpoint container -------------------------------------------------

CONTAINER_MAGIC = b"VTXC"
CONTAINER_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_container(path, meta: dict, arrays: dict):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        wire = _DTYPES[str(arr.dtype)]
        blob = np.ascontiguousarray(arr, dtype=wire).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": wire,
                        "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": entries},
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(bytes([CONTAINER_VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CONTAINER_MAGIC:
        raise BadMagic(f"{path}: expected magic {CONTAINER_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 9:
        raise HeaderCorrupt(f"{path}: file ends inside the fixed header")
    if blob[4] != CONTAINER_VERSION:
        raise VersionMismatch(f"{path}: container version {blob[4]}, "
                              f"expected {CONTAINER_VERSION}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise HeaderCorrupt(f"{path}: declared header length {header_len} overruns the file")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
        meta = header["meta"]
        entries = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise HeaderCorrupt(f"{path}: bad container header ({e})") from None
    expected = sum(e["nbytes"] for e in entries)
    actual = len(blob) - 9 - header_len
    if actual != expected:
        raise PayloadTruncated(expected, actual, detail=str(path))
    arrays = {}
    offset = 9 + header_len
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=offset)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
        offset += e["nbytes"]
    return meta, arrays


def save_model(path, model: VartexModel):
    write_container(path, {"kind": "model", "config": model.config.to_json()},
                    model.params.state_dict())


def load_model(path, expected_config: Optional[ModelConfig] = None) -> VartexModel:
    meta, arrays = read_container(path)
    if meta.get("kind") not in ("model", "train"):
        raise HeaderCorrupt(f"{path}: container kind {meta.get('kind')!r} is not loadable")
    config = ModelConfig.from_json(meta["config"])
    if expected_config is not None:
        diff = config_diff(config, expected_config)
        if diff:
            raise ConfigMismatch(f"{path}: checkpoint config differs on fields {diff}")
    model = VartexModel(config, seed=0)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model.params.load_state_dict(params)
    return model
