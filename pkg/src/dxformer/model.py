"""Encoder + decoders assembled from DA blocks.

The encoder maps frame features to initial class logits. Each decoder takes
the class-softmax of the previous stage and refines it; decoder block ``j``
cross-attends to the output of encoder block ``j``. With
``cross_connections=False`` every decoder block instead sees the last block
output of the preceding stage, which is the single-link wiring used by the
baseline family.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tn
from .attention import BlockSpec, CROSS_QV_MODES, attention_dim, block_param_shapes, da_block_forward, dropout
from .errors import ConfigError, InputError, WiringError
from .tensor import Tensor


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    model_dim: int = 64
    blocks_per_stage: int = 9
    num_decoders: int = 3
    cross_qv_mode: str = "qk"
    cross_connections: bool = True
    dual_attention: bool = True
    attn_dim: int = 0  # 0 -> max(4, model_dim // 4)
    feature_dropout: float = 0.3  # channel dropout on encoder input, training only
    block_dropout: float = 0.3  # dropout on each block's fused branch output, training only
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.model_dim < 1:
            raise ConfigError(f"model_dim must be >= 1, got {self.model_dim}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.num_decoders < 0:
            raise ConfigError(f"num_decoders must be >= 0, got {self.num_decoders}")
        if self.cross_qv_mode not in CROSS_QV_MODES:
            raise ConfigError(f"cross_qv_mode must be one of {CROSS_QV_MODES}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        for name in ("feature_dropout", "block_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.attn_dim < 0:
            raise ConfigError(f"attn_dim must be >= 0, got {self.attn_dim}")

    @classmethod
    def preset(cls, name, input_dim, num_classes, **overrides):
        """``small`` (9 blocks per stage) or ``large`` (7 blocks per stage)."""
        blocks = {"small": 9, "large": 7}
        if name not in blocks:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(blocks)}")
        overrides.setdefault("blocks_per_stage", blocks[name])
        return cls(input_dim=input_dim, num_classes=num_classes, **overrides)

    @property
    def d_attn(self):
        return self.attn_dim or attention_dim(self.model_dim)

    def block_spec(self, i, role):
        return BlockSpec(i, self.blocks_per_stage, role, self.dual_attention, self.cross_qv_mode)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageOutput:
    logits: Tensor
    block_feats: list
    # activations entering each block, before any cross input is mixed in
    block_inputs: list = field(default_factory=list)


def stage_prefixes(cfg):
    return ["enc"] + [f"dec{s}" for s in range(1, cfg.num_decoders + 1)]


def param_shapes(cfg):
    """Ordered name -> shape for every parameter implied by ``cfg``."""
    f, c, k = cfg.model_dim, cfg.num_classes, cfg.kernel_size
    shapes = {}
    for prefix in stage_prefixes(cfg):
        role = "encoder" if prefix == "enc" else "decoder"
        in_dim = cfg.input_dim if role == "encoder" else c
        shapes[f"{prefix}.in.w"] = (f, in_dim, 1)
        shapes[f"{prefix}.in.b"] = (f,)
        for i in range(1, cfg.blocks_per_stage + 1):
            block = block_param_shapes(f, cfg.block_spec(i, role), cfg.d_attn, k)
            for name, shape in block.items():
                shapes[f"{prefix}.b{i}.{name}"] = shape
        shapes[f"{prefix}.out.w"] = (c, f, 1)
        shapes[f"{prefix}.out.b"] = (c,)
    return shapes


def param_count(cfg):
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg, dtype=np.float32):
    """Seeded uniform fan-in init (``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``), zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[1] * shape[2])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def as_tensors(params, requires_grad=False):
    """Wrap a name -> ndarray mapping as name -> Tensor (no copies for contiguous arrays)."""
    return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in params.items()}


def _sub(params, prefix):
    n = len(prefix)
    return {name[n:]: t for name, t in params.items() if name.startswith(prefix)}


def _check_finite(x):
    if not np.isfinite(x.data).all():
        raise InputError("input features contain NaN or Inf")


def encoder_forward(features, params, cfg, pad_mask=None, rng=None):
    """``features[D, T]`` -> StageOutput with logits ``[C, T]`` and N block maps ``[F, T]``.

    Dropout is applied only when a training generator ``rng`` is given.
    """
    _check_finite(features)
    features = dropout(features, cfg.feature_dropout, rng, channels=True)
    f = tn.mask_frames(tn.conv1d(features, params["enc.in.w"], params["enc.in.b"]), pad_mask)
    feats, inputs = [], []
    for i in range(1, cfg.blocks_per_stage + 1):
        inputs.append(f)
        f = da_block_forward(f, None, cfg.block_spec(i, "encoder"), _sub(params, f"enc.b{i}."), pad_mask,
                             rng, cfg.block_dropout)
        feats.append(f)
    logits = tn.mask_frames(tn.conv1d(f, params["enc.out.w"], params["enc.out.b"]), pad_mask)
    return StageOutput(logits, feats, inputs)


def decoder_forward(prev_probs, enc_feats, params, cfg, pad_mask=None, stage=1, rng=None):
    """Refine ``prev_probs[C, T]``; block ``j`` cross-attends to ``enc_feats[j]``."""
    n = cfg.blocks_per_stage
    if len(enc_feats) != n:
        raise WiringError(f"decoder needs {n} cross feature maps, got {len(enc_feats)}")
    p = f"dec{stage}"
    f = tn.mask_frames(tn.conv1d(prev_probs, params[f"{p}.in.w"], params[f"{p}.in.b"]), pad_mask)
    feats, inputs = [], []
    for i in range(1, n + 1):
        inputs.append(f)
        f = da_block_forward(f, enc_feats[i - 1], cfg.block_spec(i, "decoder"), _sub(params, f"{p}.b{i}."),
                             pad_mask, rng, cfg.block_dropout)
        feats.append(f)
    logits = tn.mask_frames(tn.conv1d(f, params[f"{p}.out.w"], params[f"{p}.out.b"]), pad_mask)
    return StageOutput(logits, feats, inputs)


def dxformer_forward(features, params, cfg, pad_mask=None, rng=None):
    """All stages, encoder first; the prediction is the argmax of the last stage."""
    enc = encoder_forward(features, params, cfg, pad_mask, rng)
    stages = [enc]
    for s in range(1, cfg.num_decoders + 1):
        prev = stages[-1]
        probs = tn.mask_frames(tn.softmax(prev.logits, axis=0), pad_mask)
        if cfg.cross_connections:
            cross = enc.block_feats
        else:
            cross = [prev.block_feats[-1]] * cfg.blocks_per_stage
        stages.append(decoder_forward(probs, cross, params, cfg, pad_mask, stage=s, rng=rng))
    return stages


def predict_labels(stages):
    return np.argmax(stages[-1].logits.data, axis=0)


class DXFormer:
    """Convenience wrapper binding a config to a parameter set."""

    def __init__(self, cfg, params=None, dtype=np.float32):
        self.cfg = cfg
        self.params = init_params(cfg, dtype) if params is None else params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, features, pad_mask=None):
        x = features if isinstance(features, Tensor) else Tensor(features, dtype=self.dtype)
        return dxformer_forward(x, as_tensors(self.params), self.cfg, pad_mask)

    def predict(self, features, pad_mask=None):
        return predict_labels(self.forward(features, pad_mask))
