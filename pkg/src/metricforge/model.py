"""The embedding network: a small residual conv backbone with attention gates.

Attention blocks compute a sigmoid gate map from two 1x1 convolutions
(squeeze to C/r channels, ReLU, excite back to C) and residually re-add the
gated map: out = x * gate + x. They sit on the outputs of stages 2..4. The
final stage uses a PReLU activation; everything upstream uses ReLU.
Downsampling is spatial average pooling throughout, so 3x3 convolutions can
stay shape-preserving regardless of the odd input width.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .features import NUM_BINS, NUM_FRAMES
from .tensor import Tensor, no_grad

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    se_reduction: int = 4
    embedding_dim: int = 128
    stem_pool: int = 2
    num_classes: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise ContractError("need at least two stages")
        if self.embedding_dim < 2:
            raise ContractError("embedding_dim must be >= 2")
        if self.se_reduction < 1:
            raise ContractError("se_reduction must be >= 1")
        for c in self.stage_channels:
            if c % self.se_reduction:
                raise ContractError(
                    f"stage channels {self.stage_channels} must be divisible by "
                    f"se_reduction={self.se_reduction}"
                )
        if self.blocks_per_stage < 1:
            raise ContractError("blocks_per_stage must be >= 1")
        if self.stem_pool < 1:
            raise ContractError("stem_pool must be >= 1")
        if self.num_classes < 0:
            raise ContractError("num_classes must be >= 0")


@dataclass
class SEBlockParams:
    """1x1 squeeze/excite kernels (C -> C/r -> C) with biases."""

    conv_in_w: Tensor
    conv_in_b: Tensor
    conv_out_w: Tensor
    conv_out_b: Tensor


@dataclass
class Embedding:
    vector: np.ndarray
    normalized: bool = True


def se_block(x: Tensor, p: SEBlockParams) -> Tensor:
    """Gate a feature map with sigmoid attention and re-add it: x * m + x."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"se_block expects a 3-D or 4-D feature map, got {x.shape}")
    m = x.conv2d(p.conv_in_w).add_channel_bias(p.conv_in_b).relu()
    m = m.conv2d(p.conv_out_w).add_channel_bias(p.conv_out_b).sigmoid()
    return x * m + x


def param_spec(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered parameter-name -> shape map; the single source of layout truth."""
    spec: dict[str, tuple] = {}
    c0 = cfg.stage_channels[0]
    spec["stem.conv.w"] = (c0, 3, 3, 3)
    spec["stem.conv.b"] = (c0,)
    c_prev = c0
    n_stages = len(cfg.stage_channels)
    for si, c in enumerate(cfg.stage_channels, start=1):
        for bi in range(1, cfg.blocks_per_stage + 1):
            cin = c_prev if bi == 1 else c
            pre = f"stage{si}.block{bi}"
            spec[f"{pre}.conv1.w"] = (c, cin, 3, 3)
            spec[f"{pre}.conv1.b"] = (c,)
            spec[f"{pre}.conv2.w"] = (c, c, 3, 3)
            spec[f"{pre}.conv2.b"] = (c,)
            if cin != c:
                spec[f"{pre}.proj.w"] = (c, cin, 1, 1)
                spec[f"{pre}.proj.b"] = (c,)
        if si >= 2:
            cr = c // cfg.se_reduction
            spec[f"stage{si}.se.conv_in.w"] = (cr, c, 1, 1)
            spec[f"stage{si}.se.conv_in.b"] = (cr,)
            spec[f"stage{si}.se.conv_out.w"] = (c, cr, 1, 1)
            spec[f"stage{si}.se.conv_out.b"] = (c,)
        if si == n_stages:
            spec[f"stage{si}.prelu.slopes"] = (c,)
        c_prev = c
    spec["head.w"] = (c_prev, cfg.embedding_dim)
    spec["head.b"] = (cfg.embedding_dim,)
    if cfg.num_classes:
        spec["cls.w"] = (cfg.embedding_dim, cfg.num_classes)
        spec["cls.b"] = (cfg.num_classes,)
    return spec


def _init_gain(name: str) -> float:
    """Gain on the 1/sqrt(fan_in) scale, chosen by layer role.

    ReLU-fed convolutions take the classic sqrt(2); residual-branch outputs
    are tempered so stacked skip-adds do not inflate activation variance;
    attention gate outputs start near zero so gates open at ~0.5; plain
    linear layers take gain 1.
    """
    if name.endswith("conv2.w"):
        return np.sqrt(2.0) * 0.5
    if name.endswith("se.conv_out.w"):
        return 0.1
    if name.endswith(("proj.w", "head.w", "cls.w")):
        return 1.0
    return np.sqrt(2.0)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fan-in scaled normal weights, zero biases, PReLU slopes at 0.25."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_spec(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.endswith("prelu.slopes"):
            data = np.full(shape, 0.25)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.normal(0.0, _init_gain(name) / np.sqrt(fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _se_params(params: dict[str, Tensor], prefix: str) -> SEBlockParams:
    return SEBlockParams(
        conv_in_w=params[f"{prefix}.conv_in.w"],
        conv_in_b=params[f"{prefix}.conv_in.b"],
        conv_out_w=params[f"{prefix}.conv_out.w"],
        conv_out_b=params[f"{prefix}.conv_out.b"],
    )


def _res_block(h: Tensor, params, prefix: str, final_slopes: Tensor | None) -> Tensor:
    y = h.conv2d(params[f"{prefix}.conv1.w"], 1, 1).add_channel_bias(params[f"{prefix}.conv1.b"])
    y = y.relu()
    y = y.conv2d(params[f"{prefix}.conv2.w"], 1, 1).add_channel_bias(params[f"{prefix}.conv2.b"])
    if f"{prefix}.proj.w" in params:
        skip = h.conv2d(params[f"{prefix}.proj.w"]).add_channel_bias(params[f"{prefix}.proj.b"])
    else:
        skip = h
    out = y + skip
    return out.prelu(final_slopes) if final_slopes is not None else out.relu()


def normalize_rows(m: Tensor) -> Tensor:
    """Scale each row of (B, D) to unit L2 norm."""
    inv = ((m * m).sum(axis=1)) ** -0.5
    return m.scale_rows(inv)


def forward(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor], want_logits: bool = False):
    """Run a (B, 3, H, W) batch through the backbone.

    Returns (raw, unit, logits): pre-normalization embeddings, unit-norm
    embeddings, and classifier logits (None unless requested).
    """
    if x.ndim != 4:
        raise ShapeError(f"forward expects (B, 3, H, W), got {x.shape}")
    h = x.avg_pool2d(cfg.stem_pool) if cfg.stem_pool > 1 else x
    h = h.conv2d(params["stem.conv.w"], 1, 1).add_channel_bias(params["stem.conv.b"]).relu()
    h = h.avg_pool2d(2)
    n_stages = len(cfg.stage_channels)
    for si in range(1, n_stages + 1):
        for bi in range(1, cfg.blocks_per_stage + 1):
            last = si == n_stages and bi == cfg.blocks_per_stage
            slopes = params[f"stage{si}.prelu.slopes"] if last else None
            h = _res_block(h, params, f"stage{si}.block{bi}", slopes)
        if si >= 2:
            h = se_block(h, _se_params(params, f"stage{si}.se"))
        if si < n_stages:
            h = h.avg_pool2d(2)
    pooled = h.global_avg_pool()
    raw = pooled.matmul(params["head.w"]).add_channel_bias(params["head.b"])
    unit = normalize_rows(raw)
    logits = None
    if want_logits:
        if "cls.w" not in params:
            raise ContractError("model has no classifier head (num_classes == 0)")
        logits = raw.matmul(params["cls.w"]).add_channel_bias(params["cls.b"])
    return raw, unit, logits


def forward_embed(crop, cfg: ModelConfig, params: dict[str, Tensor]) -> Embedding:
    """Embed a single 3x300x161 feature crop into a unit-norm vector."""
    data = np.asarray(getattr(crop, "data", crop), dtype=np.float64)
    if data.shape != (3, NUM_FRAMES, NUM_BINS):
        raise ShapeError(f"expected a (3, {NUM_FRAMES}, {NUM_BINS}) crop, got {data.shape}")
    with no_grad():
        _, unit, _ = forward(Tensor(data[None]), cfg, params)
    return Embedding(vector=unit.data[0].copy(), normalized=True)


def embed_batch(crops: np.ndarray, cfg: ModelConfig, params: dict[str, Tensor]) -> np.ndarray:
    """Unit-norm embeddings for a (B, 3, 300, 161) array, no graph recorded."""
    with no_grad():
        _, unit, _ = forward(Tensor(crops), cfg, params)
    return unit.data


def save_checkpoint(ckpt_dir, cfg: ModelConfig, params: dict[str, Tensor],
                    features: dict | None = None):
    """Write manifest.json plus one flat little-endian float64 blob per parameter."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(cfg),
        "features": features or {},
        "params": [{"name": n, "shape": list(t.shape), "file": f"{n}.bin"}
                   for n, t in params.items()],
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for name, t in params.items():
        (ckpt_dir / f"{name}.bin").write_bytes(t.data.astype("<f8").tobytes())


def load_checkpoint(ckpt_dir):
    """Load (config, params, features) and validate shapes against the config."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{ckpt_dir}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{ckpt_dir}: unsupported checkpoint format "
                        f"{manifest.get('format_version')!r}")
    cfg = ModelConfig(**manifest["config"])
    expected = param_spec(cfg)
    entries = {e["name"]: e for e in manifest["params"]}
    if set(entries) != set(expected):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise DataError(f"{ckpt_dir}: parameter set mismatch "
                        f"(missing {missing}, unexpected {extra})")
    params: dict[str, Tensor] = {}
    for name, shape in expected.items():
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise DataError(f"{ckpt_dir}: {name} has shape {entry['shape']}, "
                            f"config implies {list(shape)}")
        blob = ckpt_dir / entry["file"]
        if not blob.exists():
            raise DataError(f"{ckpt_dir}: missing blob {entry['file']}")
        raw = blob.read_bytes()
        if len(raw) != 8 * int(np.prod(shape)):
            raise DataError(f"{blob}: {len(raw)} bytes does not match shape {list(shape)}")
        params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(),
                              requires_grad=True)
    return cfg, params, manifest.get("features", {})
