"""Toy hierarchical backbone built from structure-aware scan blocks.

Four stages of blocks with 2x downsampling between them, an overlapped
three-conv stem (4x reduction), and an average-pool + linear head. Each
block has two pre-norm residual sub-layers:

    x <- x + SSMBranch(LN(LPU(x)))
    x <- x + FFN(LN(LPU(x)))

where the SSM branch projects C -> E (E = expand * C) twice: a value path
(depthwise 3x3 -> SiLU -> selective scan with state fusion at width E) and
a SiLU gate path, multiplied and projected back E -> C. LPU is a residual
depthwise 3x3 and feeds only its sub-layer, so zeroed output projections
make the whole block an exact identity.

Weights live in a flat name -> array dict; names containing "running" are
batch-norm statistics, not trainable parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .fusion import FusionKernel, identity_kernel
from .ssm import SsmParams, ssm_layer_backward, ssm_layer_forward
from .tensor import ShapeError, flatten_scan_order, unflatten_scan_order

CHECKPOINT_MAGIC = b"SSMW"
CHECKPOINT_VERSION = 1


@dataclass
class BlockConfig:
    channels: int
    expand: int = 2
    ffn_ratio: int = 4
    n_state: int = 1
    dilations: tuple[int, ...] = (1, 3, 5)

    def __post_init__(self):
        if self.expand < 1 or self.channels < 1 or self.ffn_ratio < 1 or self.n_state < 1:
            raise ValueError("block dimensions must be positive, expand >= 1")

    @property
    def inner(self) -> int:
        return self.expand * self.channels


@dataclass
class ModelConfig:
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    n_state: int = 1
    dilations: tuple[int, ...] = (1, 3, 5)
    expand: int = 2
    ffn_ratio: int = 4
    num_classes: int = 2
    input_hw: tuple[int, int] = (16, 16)

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_channels = tuple(self.stage_channels)
        self.dilations = tuple(self.dilations)
        self.input_hw = tuple(self.input_hw)
        if len(self.stage_depths) != 4 or len(self.stage_channels) != 4:
            raise ValueError("exactly four stages are expected")

    def block(self, stage: int) -> BlockConfig:
        return BlockConfig(
            channels=self.stage_channels[stage],
            expand=self.expand,
            ffn_ratio=self.ffn_ratio,
            n_state=self.n_state,
            dilations=self.dilations,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage_depths": list(self.stage_depths),
                "stage_channels": list(self.stage_channels),
                "n_state": self.n_state,
                "dilations": list(self.dilations),
                "expand": self.expand,
                "ffn_ratio": self.ffn_ratio,
                "num_classes": self.num_classes,
                "input_hw": list(self.input_hw),
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        raw = json.loads(text)
        return ModelConfig(**raw)


def trunc_normal(rng, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


# ------------------------------------------------------------------ weights

def init_block_weights(w: dict, prefix: str, cfg: BlockConfig, rng) -> None:
    c, e = cfg.channels, cfg.inner
    p = prefix + "." if prefix else ""
    w[f"{p}lpu1.k"] = trunc_normal(rng, (c, 3, 3))
    w[f"{p}ln1.gamma"] = np.ones(c)
    w[f"{p}ln1.beta"] = np.zeros(c)
    w[f"{p}val.w"] = trunc_normal(rng, (c, e))
    w[f"{p}val.b"] = np.zeros(e)
    w[f"{p}gate.w"] = trunc_normal(rng, (c, e))
    w[f"{p}gate.b"] = np.zeros(e)
    w[f"{p}dw.k"] = trunc_normal(rng, (e, 3, 3))
    w[f"{p}ssm.a_log"] = np.zeros((e, cfg.n_state))
    w[f"{p}ssm.d"] = np.ones(e)
    w[f"{p}ssm.w_delta"] = trunc_normal(rng, (e, e))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
    w[f"{p}ssm.b_delta"] = np.log(np.expm1(dt))
    w[f"{p}ssm.w_b"] = trunc_normal(rng, (e, cfg.n_state))
    w[f"{p}ssm.w_c"] = trunc_normal(rng, (e, cfg.n_state))
    w[f"{p}fuse.k"] = identity_kernel(e, cfg.dilations).weights
    w[f"{p}out.w"] = trunc_normal(rng, (e, c))
    w[f"{p}out.b"] = np.zeros(c)
    w[f"{p}lpu2.k"] = trunc_normal(rng, (c, 3, 3))
    w[f"{p}ln2.gamma"] = np.ones(c)
    w[f"{p}ln2.beta"] = np.zeros(c)
    hidden = cfg.ffn_ratio * c
    w[f"{p}ffn.w1"] = trunc_normal(rng, (c, hidden))
    w[f"{p}ffn.b1"] = np.zeros(hidden)
    w[f"{p}ffn.w2"] = trunc_normal(rng, (hidden, c))
    w[f"{p}ffn.b2"] = np.zeros(c)


def _init_bn(w: dict, prefix: str, channels: int) -> None:
    w[f"{prefix}.gamma"] = np.ones(channels)
    w[f"{prefix}.beta"] = np.zeros(channels)
    w[f"{prefix}.running_mean"] = np.zeros(channels)
    w[f"{prefix}.running_var"] = np.ones(channels)


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh weight dict: truncated-normal projections, zero biases,
    identity fusion taps (an untrained model fuses nothing)."""
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    c0 = cfg.stage_channels[0]
    w["stem.conv1.k"] = trunc_normal(rng, (3, 3, 3, c0))
    w["stem.conv1.b"] = np.zeros(c0)
    _init_bn(w, "stem.bn1", c0)
    w["stem.conv2.k"] = trunc_normal(rng, (3, 3, c0, c0))
    w["stem.conv2.b"] = np.zeros(c0)
    _init_bn(w, "stem.bn2", c0)
    w["stem.conv3.k"] = trunc_normal(rng, (3, 3, c0, c0))
    w["stem.conv3.b"] = np.zeros(c0)
    _init_bn(w, "stem.bn3", c0)
    for s in range(4):
        for d in range(cfg.stage_depths[s]):
            init_block_weights(w, f"stage{s}.block{d}", cfg.block(s), rng)
        if s < 3:
            cin, cout = cfg.stage_channels[s], cfg.stage_channels[s + 1]
            w[f"down{s}.conv.k"] = trunc_normal(rng, (3, 3, cin, cout))
            w[f"down{s}.conv.b"] = np.zeros(cout)
            w[f"down{s}.ln.gamma"] = np.ones(cout)
            w[f"down{s}.ln.beta"] = np.zeros(cout)
    w["head.w"] = trunc_normal(rng, (cfg.stage_channels[3], cfg.num_classes))
    w["head.b"] = np.zeros(cfg.num_classes)
    return w


def trainable_names(weights: dict) -> list[str]:
    return [k for k in weights if "running" not in k]


def block_ssm_params(weights: dict, prefix: str, cfg: BlockConfig) -> SsmParams:
    p = prefix + "." if prefix else ""
    return SsmParams(
        n_state=cfg.n_state,
        channels=cfg.inner,
        a_log=weights[f"{p}ssm.a_log"],
        d_skip=weights[f"{p}ssm.d"],
        w_delta=weights[f"{p}ssm.w_delta"],
        b_delta=weights[f"{p}ssm.b_delta"],
        w_b=weights[f"{p}ssm.w_b"],
        w_c=weights[f"{p}ssm.w_c"],
    )


def block_fusion_kernel(weights: dict, prefix: str, cfg: BlockConfig) -> FusionKernel:
    p = prefix + "." if prefix else ""
    return FusionKernel(cfg.dilations, weights[f"{p}fuse.k"])


# ------------------------------------------------------------------ forward

def lpu_apply(x: np.ndarray, k3: np.ndarray) -> np.ndarray:
    """Local perception: x + depthwise3x3(x)."""
    y, _ = lpu_fwd(x, k3)
    return y


def lpu_fwd(x: np.ndarray, k3: np.ndarray):
    d, cache = ops.depthwise3x3_fwd(x, k3)
    return x + d, cache


def lpu_bwd(cache, g):
    gd, gk = ops.depthwise3x3_bwd(cache, g)
    return g + gd, gk


def block_forward(x: np.ndarray, weights: dict, cfg: BlockConfig, prefix: str = "",
                  use_fusion: bool = True, threads: int = 1) -> np.ndarray:
    y, _ = block_fwd(x, weights, cfg, prefix, use_fusion=use_fusion, threads=threads)
    return y


def block_fwd(x: np.ndarray, weights: dict, cfg: BlockConfig, prefix: str = "",
              use_fusion: bool = True, threads: int = 1):
    if x.ndim != 3 or x.shape[2] != cfg.channels:
        raise ShapeError(f"block expects [H,W,{cfg.channels}], got {x.shape}")
    height, width, _ = x.shape
    p = prefix + "." if prefix else ""
    cache: dict = {"prefix": prefix, "cfg": cfg, "hw": (height, width)}

    t1, cache["lpu1"] = lpu_fwd(x, weights[f"{p}lpu1.k"])
    n1, cache["ln1"] = ops.layernorm_fwd(t1, weights[f"{p}ln1.gamma"], weights[f"{p}ln1.beta"])
    val, cache["val"] = ops.linear_fwd(n1, weights[f"{p}val.w"], weights[f"{p}val.b"])
    gate, cache["gate"] = ops.linear_fwd(n1, weights[f"{p}gate.w"], weights[f"{p}gate.b"])
    vc, cache["dw"] = ops.depthwise3x3_fwd(val, weights[f"{p}dw.k"])
    va, cache["val_act"] = ops.silu_fwd(vc)

    params = block_ssm_params(weights, prefix, cfg)
    kernel = block_fusion_kernel(weights, prefix, cfg) if use_fusion else None
    u = flatten_scan_order(va)
    y_seq, cache["ssm"] = ssm_layer_forward(u, params, kernel, (height, width), threads=threads)
    y_grid = unflatten_scan_order(y_seq, height, width)

    ga, cache["gate_act"] = ops.silu_fwd(gate)
    mixed = y_grid * ga
    cache["mix"] = (y_grid, ga)
    out, cache["out"] = ops.linear_fwd(mixed, weights[f"{p}out.w"], weights[f"{p}out.b"])
    x2 = x + out

    t2, cache["lpu2"] = lpu_fwd(x2, weights[f"{p}lpu2.k"])
    n2, cache["ln2"] = ops.layernorm_fwd(t2, weights[f"{p}ln2.gamma"], weights[f"{p}ln2.beta"])
    f1, cache["ffn1"] = ops.linear_fwd(n2, weights[f"{p}ffn.w1"], weights[f"{p}ffn.b1"])
    fa, cache["ffn_act"] = ops.gelu_fwd(f1)
    f2, cache["ffn2"] = ops.linear_fwd(fa, weights[f"{p}ffn.w2"], weights[f"{p}ffn.b2"])
    return x2 + f2, cache


def block_bwd(cache, g: np.ndarray):
    """Gradients of block_fwd: returns (g_x, {local name -> grad})."""
    prefix = cache["prefix"]
    p = prefix + "." if prefix else ""
    height, width = cache["hw"]
    grads: dict[str, np.ndarray] = {}

    # second sub-layer: out = x2 + ffn(ln(lpu(x2)))
    g_f2 = g
    g_fa, grads[f"{p}ffn.w2"], grads[f"{p}ffn.b2"] = ops.linear_bwd(cache["ffn2"], g_f2)
    g_f1 = ops.gelu_bwd(cache["ffn_act"], g_fa)
    g_n2, grads[f"{p}ffn.w1"], grads[f"{p}ffn.b1"] = ops.linear_bwd(cache["ffn1"], g_f1)
    g_t2, grads[f"{p}ln2.gamma"], grads[f"{p}ln2.beta"] = ops.layernorm_bwd(cache["ln2"], g_n2)
    g_x2, grads[f"{p}lpu2.k"] = lpu_bwd(cache["lpu2"], g_t2)
    g_x2 = g_x2 + g  # residual skip

    # first sub-layer: x2 = x + out(mixed)
    g_mixed, grads[f"{p}out.w"], grads[f"{p}out.b"] = ops.linear_bwd(cache["out"], g_x2)
    y_grid, ga = cache["mix"]
    g_y_grid = g_mixed * ga
    g_ga = g_mixed * y_grid
    g_gate = ops.silu_bwd(cache["gate_act"], g_ga)

    g_y_seq = flatten_scan_order(g_y_grid)
    g_u, ssm_grads = ssm_layer_backward(cache["ssm"], g_y_seq)
    grads[f"{p}ssm.a_log"] = ssm_grads.a_log
    grads[f"{p}ssm.d"] = ssm_grads.d_skip
    grads[f"{p}ssm.w_delta"] = ssm_grads.w_delta
    grads[f"{p}ssm.b_delta"] = ssm_grads.b_delta
    grads[f"{p}ssm.w_b"] = ssm_grads.w_b
    grads[f"{p}ssm.w_c"] = ssm_grads.w_c
    if ssm_grads.kernel_taps is not None:
        grads[f"{p}fuse.k"] = ssm_grads.kernel_taps

    g_va = unflatten_scan_order(g_u, height, width)
    g_vc = ops.silu_bwd(cache["val_act"], g_va)
    g_val, grads[f"{p}dw.k"] = ops.depthwise3x3_bwd(cache["dw"], g_vc)
    g_n1_a, grads[f"{p}val.w"], grads[f"{p}val.b"] = ops.linear_bwd(cache["val"], g_val)
    g_n1_b, grads[f"{p}gate.w"], grads[f"{p}gate.b"] = ops.linear_bwd(cache["gate"], g_gate)
    g_n1 = g_n1_a + g_n1_b
    g_t1, grads[f"{p}ln1.gamma"], grads[f"{p}ln1.beta"] = ops.layernorm_bwd(cache["ln1"], g_n1)
    g_x, grads[f"{p}lpu1.k"] = lpu_bwd(cache["lpu1"], g_t1)
    g_x = g_x + g_x2  # residual skip
    return g_x, grads


def stem_forward(img: np.ndarray, weights: dict, training: bool = False) -> np.ndarray:
    y, _ = stem_fwd(img, weights, training=training)
    return y


def _conv_bn(x, weights, conv_name, bn_name, stride, training, cache, act=None):
    y, cache[conv_name] = ops.conv3x3_fwd(
        x, weights[f"{conv_name}.k"], weights[f"{conv_name}.b"], stride=stride
    )
    y, cache[bn_name], new_mean, new_var = ops.batchnorm_fwd(
        y,
        weights[f"{bn_name}.gamma"],
        weights[f"{bn_name}.beta"],
        weights[f"{bn_name}.running_mean"],
        weights[f"{bn_name}.running_var"],
        training,
    )
    if training:
        weights[f"{bn_name}.running_mean"] = new_mean
        weights[f"{bn_name}.running_var"] = new_var
    if act is not None:
        y, cache[f"{bn_name}.act"] = act(y)
    return y


def stem_fwd(img: np.ndarray, weights: dict, training: bool = False):
    """conv3x3/s2 + BN + GELU, conv3x3/s1 + BN, conv3x3/s2 + BN: 4x reduction."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"stem expects [H,W,3], got {img.shape}")
    if img.shape[0] % 4 or img.shape[1] % 4:
        raise ShapeError(f"stem needs H, W divisible by 4, got {img.shape[:2]}")
    cache: dict = {}
    y = _conv_bn(img, weights, "stem.conv1", "stem.bn1", 2, training, cache, act=ops.gelu_fwd)
    y = _conv_bn(y, weights, "stem.conv2", "stem.bn2", 1, training, cache)
    y = _conv_bn(y, weights, "stem.conv3", "stem.bn3", 2, training, cache)
    return y, cache


def stem_bwd(cache, g: np.ndarray):
    grads: dict[str, np.ndarray] = {}
    g, grads["stem.bn3.gamma"], grads["stem.bn3.beta"] = ops.batchnorm_bwd(cache["stem.bn3"], g)
    g, grads["stem.conv3.k"], grads["stem.conv3.b"] = ops.conv3x3_bwd(cache["stem.conv3"], g)
    g, grads["stem.bn2.gamma"], grads["stem.bn2.beta"] = ops.batchnorm_bwd(cache["stem.bn2"], g)
    g, grads["stem.conv2.k"], grads["stem.conv2.b"] = ops.conv3x3_bwd(cache["stem.conv2"], g)
    g = ops.gelu_bwd(cache["stem.bn1.act"], g)
    g, grads["stem.bn1.gamma"], grads["stem.bn1.beta"] = ops.batchnorm_bwd(cache["stem.bn1"], g)
    g, grads["stem.conv1.k"], grads["stem.conv1.b"] = ops.conv3x3_bwd(cache["stem.conv1"], g)
    return g, grads


def downsample_forward(x: np.ndarray, weights: dict, index: int) -> np.ndarray:
    y, _ = downsample_fwd(x, weights, index)
    return y


def downsample_fwd(x: np.ndarray, weights: dict, index: int):
    """conv3x3/s2 + channel layer norm. Extents must be even (or already 1,
    the degenerate late-stage grid, which a stride-2 conv maps back to 1)."""
    for extent in x.shape[:2]:
        if extent % 2 and extent != 1:
            raise ShapeError(f"downsample needs even extents, got {x.shape[:2]}")
    cache: dict = {}
    y, cache["conv"] = ops.conv3x3_fwd(
        x, weights[f"down{index}.conv.k"], weights[f"down{index}.conv.b"], stride=2
    )
    y, cache["ln"] = ops.layernorm_fwd(
        y, weights[f"down{index}.ln.gamma"], weights[f"down{index}.ln.beta"]
    )
    cache["index"] = index
    return y, cache


def downsample_bwd(cache, g: np.ndarray):
    i = cache["index"]
    grads: dict[str, np.ndarray] = {}
    g, grads[f"down{i}.ln.gamma"], grads[f"down{i}.ln.beta"] = ops.layernorm_bwd(cache["ln"], g)
    g, grads[f"down{i}.conv.k"], grads[f"down{i}.conv.b"] = ops.conv3x3_bwd(cache["conv"], g)
    return g, grads


def expected_stage_grids(input_hw: tuple[int, int]) -> list[tuple[int, int]]:
    height, width = input_hw
    grids = [(height // 4, width // 4)]
    for _ in range(3):
        h, w = grids[-1]
        grids.append(((h + 1) // 2 if h > 1 else 1, (w + 1) // 2 if w > 1 else 1))
    return grids


def model_forward(img: np.ndarray, cfg: ModelConfig, weights: dict,
                  training: bool = False, use_fusion: bool = True, threads: int = 1) -> np.ndarray:
    logits, _ = model_fwd(img, cfg, weights, training=training, use_fusion=use_fusion, threads=threads)
    return logits


def model_fwd(img: np.ndarray, cfg: ModelConfig, weights: dict,
              training: bool = False, use_fusion: bool = True, threads: int = 1):
    if img.shape[:2] != cfg.input_hw:
        raise ShapeError(f"input {img.shape[:2]} != configured {cfg.input_hw}")
    cache: dict = {"cfg": cfg}
    x, cache["stem"] = stem_fwd(img, weights, training=training)
    grids = expected_stage_grids(cfg.input_hw)
    cache["blocks"] = []
    cache["downs"] = []
    for s in range(4):
        assert x.shape[:2] == grids[s], f"stage {s}: grid {x.shape[:2]} != expected {grids[s]}"
        for d in range(cfg.stage_depths[s]):
            x, bc = block_fwd(
                x, weights, cfg.block(s), f"stage{s}.block{d}",
                use_fusion=use_fusion, threads=threads,
            )
            cache["blocks"].append(bc)
        if s < 3:
            x, dc = downsample_fwd(x, weights, s)
            cache["downs"].append(dc)
    pooled, cache["pool"] = ops.global_avgpool_fwd(x)
    logits, cache["head"] = ops.linear_fwd(pooled, weights["head.w"], weights["head.b"])
    return logits, cache


def model_bwd(cache, g_logits: np.ndarray):
    """Gradients of model_fwd for every trainable weight; returns
    (g_img, grads dict)."""
    grads: dict[str, np.ndarray] = {}
    g, grads["head.w"], grads["head.b"] = ops.linear_bwd(cache["head"], g_logits)
    g = ops.global_avgpool_bwd(cache["pool"], g)
    cfg: ModelConfig = cache["cfg"]
    blocks = list(cache["blocks"])
    downs = list(cache["downs"])
    for s in range(3, -1, -1):
        if s < 3:
            g, dg = downsample_bwd(downs[s], g)
            grads.update(dg)
        for _ in range(cfg.stage_depths[s]):
            g, bg = block_bwd(blocks.pop(), g)
            grads.update(bg)
    g, sg = stem_bwd(cache["stem"], g)
    grads.update(sg)
    return g, grads


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, weights: dict) -> None:
    """Little-endian binary: magic, version u32, count u32, then sorted
    entries of {name_len u32, name, rank u32, extents u32[], float64 data}."""
    names = sorted(weights)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(weights[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).copy()
        offset += 8 * size
        weights[name] = data.reshape(shape)
    return weights
