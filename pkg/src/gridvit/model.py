"""Grid vision transformer: patch tokens, pre-norm encoder, class-token readout.

Parameters live in a flat ``dict[str, ndarray]``. Names for the early-fusion /
single-modality model::

    embed            (P*P*C, D)      patch projection, no bias
    pos              (N+1, D)        learnable positional encodings
    cls_token        (D,)
    layers.{i}.ln1.gamma/beta, layers.{i}.attn.{q,k,v,o}.w, layers.{i}.attn.{q,v,o}.b,
    layers.{i}.ln2.gamma/beta, layers.{i}.mlp.fc1.w/b, layers.{i}.mlp.fc2.w/b
    norm.gamma/beta                  final LayerNorm on the class token
    head.w (D, classes), head.b

The key projection carries no bias: adding a constant to every key shifts each
attention row's scores uniformly, which softmax ignores.

Late fusion stores two towers without heads (``tower1.*``, ``tower2.*``) and a
``fusion_head.w`` of shape (2D, classes).

Parameter census (``T`` = one tower without head, ``h = mlp_ratio * D``)::

    T     = P^2*C*D + (N+1)*D + D + L*(4D + 4D^2 + 3D + 2*D*h + h + D) + 2D
    early = T + D*classes + classes
    late  = 2T + 2D*classes + classes      (each tower has C = 1)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError

FUSION_MODES = ("t1", "t2", "early", "late")


@dataclass(frozen=True)
class ModelConfig:
    k: int = 9
    slice_h: int = 64
    slice_w: int = 64
    patch_size: int = 16
    channels: int = 2
    embed_dim: int = 192
    layers: int = 6
    heads: int = 3
    mlp_ratio: int = 4
    num_classes: int = 3
    fusion: str = "early"
    modalities: Tuple[str, ...] = ("T1", "T2")
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        self.validate()

    def validate(self) -> None:
        for name in ("k", "slice_h", "slice_w", "patch_size", "channels", "embed_dim",
                     "layers", "heads", "mlp_ratio", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        s = math.isqrt(self.k)
        if s * s != self.k:
            raise ConfigError(f"k={self.k} is not a perfect square")
        if self.grid_h % self.patch_size or self.grid_w % self.patch_size:
            raise ConfigError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.fusion not in ("early", "late"):
            raise ConfigError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        if any(m not in ("T1", "T2") for m in self.modalities) or not self.modalities:
            raise ConfigError(f"bad modalities {self.modalities}")
        if self.fusion == "late":
            if self.channels != 1 or len(self.modalities) != 2:
                raise ConfigError("late fusion needs channels=1 per tower and two modalities")
        elif self.channels != len(self.modalities):
            raise ConfigError(
                f"channels={self.channels} but {len(self.modalities)} input modalities"
            )
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.k)

    @property
    def grid_h(self) -> int:
        return self.grid_side * self.slice_h

    @property
    def grid_w(self) -> int:
        return self.grid_side * self.slice_w

    @property
    def input_channels(self) -> int:
        """Channels of the packed image fed to the model."""
        return len(self.modalities)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.grid_h, self.grid_w, self.input_channels)

    @property
    def num_patches(self) -> int:
        return self.k * self.slice_h * self.slice_w // self.patch_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mode(self) -> str:
        if self.fusion == "late":
            return "late"
        if self.modalities == ("T1", "T2"):
            return "early"
        return self.modalities[0].lower()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def for_mode(cls, mode: str, **kwargs) -> "ModelConfig":
        """Config for one of the four input setups: t1, t2, early, late."""
        if mode not in FUSION_MODES:
            raise ConfigError(f"mode must be one of {FUSION_MODES}, got {mode!r}")
        kwargs = dict(kwargs)
        for key in ("fusion", "modalities", "channels"):
            kwargs.pop(key, None)
        if mode == "early":
            return cls(fusion="early", modalities=("T1", "T2"), channels=2, **kwargs)
        if mode == "late":
            return cls(fusion="late", modalities=("T1", "T2"), channels=1, **kwargs)
        return cls(fusion="early", modalities=(mode.upper(),), channels=1, **kwargs)


GRIDVIT_TINY = dict(embed_dim=192, layers=6, heads=3, mlp_ratio=4, patch_size=16)


# ---------------------------------------------------------------------------
# parameters


def _tower_shapes(cfg: ModelConfig, prefix: str = "") -> Dict[str, Tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    shapes = {
        f"{prefix}embed": (cfg.patch_dim, d),
        f"{prefix}pos": (cfg.num_tokens, d),
        f"{prefix}cls_token": (d,),
    }
    for i in range(cfg.layers):
        p = f"{prefix}layers.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for proj in "qkvo":
            shapes[p + f"attn.{proj}.w"] = (d, d)
            if proj != "k":
                shapes[p + f"attn.{proj}.b"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.fc1.w"] = (d, h)
        shapes[p + "mlp.fc1.b"] = (h,)
        shapes[p + "mlp.fc2.w"] = (h, d)
        shapes[p + "mlp.fc2.b"] = (d,)
    shapes[f"{prefix}norm.gamma"] = (d,)
    shapes[f"{prefix}norm.beta"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    d, c = cfg.embed_dim, cfg.num_classes
    if cfg.fusion == "late":
        shapes = {**_tower_shapes(cfg, "tower1."), **_tower_shapes(cfg, "tower2.")}
        shapes["fusion_head.w"] = (2 * d, c)
        shapes["fusion_head.b"] = (c,)
        return shapes
    shapes = _tower_shapes(cfg)
    shapes["head.w"] = (d, c)
    shapes["head.b"] = (c,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form census (see module docstring)."""
    d, c, L = cfg.embed_dim, cfg.num_classes, cfg.layers
    h = cfg.mlp_ratio * d
    tower = (cfg.patch_dim * d + cfg.num_tokens * d + d
             + L * (4 * d + 4 * d * d + 3 * d + 2 * d * h + h + d) + 2 * d)
    if cfg.fusion == "late":
        return 2 * tower + 2 * d * c + c
    return tower + d * c + c


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample anything beyond two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed=0, std: float = 0.02) -> Dict[str, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = nx.default_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("cls_token") or leaf in ("b", "beta"):
            arr = np.zeros(shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ConfigError(f"parameter names disagree with config: missing {sorted(missing)[:5]}, "
                          f"unexpected {sorted(extra)[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(nx.value_of(params[name]))) != shape:
            raise ConfigError(f"{name}: shape {np.shape(nx.value_of(params[name]))}, config implies {shape}")


def sub_params(params: Mapping, prefix: str) -> Dict:
    """View of the entries under ``prefix`` with the prefix stripped."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# patches and tokens


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C); patches row-major, pixels flattened (row, col, channel)."""
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, gh, p, gw, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    *lead, npatch, dim = patches.shape
    p = patch_size
    c = dim // (p * p)
    gh, gw = height // p, width // p
    if gh * gw != npatch or c * p * p != dim:
        raise ConfigError(f"{npatch} patches of length {dim} cannot tile {height}x{width}")
    x = patches.reshape(*lead, gh, gw, p, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, c)


def build_token_sequence(patches, params: Mapping):
    """z0 = [cls; x_1 E; ...; x_N E] + pos, batched over leading axes of ``patches``."""
    embed, pos, cls = params["embed"], params["pos"], params["cls_token"]
    pv = nx.value_of(patches)
    if pv.shape[-1] != nx.value_of(embed).shape[0]:
        raise ConfigError(f"patch length {pv.shape[-1]} != embedding rows {nx.value_of(embed).shape[0]}")
    if pv.shape[-2] + 1 != nx.value_of(pos).shape[0]:
        raise ConfigError(
            f"{pv.shape[-2]} patches need {pv.shape[-2] + 1} positional rows, have {nx.value_of(pos).shape[0]}"
        )
    tokens = nx.matmul(patches, embed)
    d = nx.value_of(cls).shape[0]
    cls_row = nx.broadcast_to(nx.reshape(cls, (1, d)), pv.shape[:-2] + (1, d))
    z = nx.concat([cls_row, tokens], axis=-2)
    return nx.add(z, pos)


def attention(x, params: Mapping, prefix: str, heads: int, record: bool = False):
    """Multi-head self-attention on (B, T, D); returns output and optionally probs (B, H, T, T)."""
    b, t, d = nx.value_of(x).shape
    dh = d // heads

    def project(name):
        w = params[f"{prefix}{name}.w"]
        y = nx.matmul(x, w) if name == "k" else nx.linear(x, w, params[f"{prefix}{name}.b"])
        return nx.transpose(nx.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = project("q"), project("k"), project("v")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = nx.softmax(scores, axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    out = nx.linear(ctx, params[f"{prefix}o.w"], params[f"{prefix}o.b"])
    return out, (np.array(nx.value_of(probs)) if record else None)


def encoder_layer(z, params: Mapping, prefix: str, cfg: ModelConfig, record: bool = False):
    """z' = MSA(LN(z)) + z ; z_out = MLP(LN(z')) + z'."""
    eps = cfg.ln_eps
    h = nx.layer_norm(z, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"], eps)
    a, probs = attention(h, params, prefix + "attn.", cfg.heads, record)
    z1 = nx.add(a, z)
    h = nx.layer_norm(z1, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"], eps)
    h = nx.gelu(nx.linear(h, params[prefix + "mlp.fc1.w"], params[prefix + "mlp.fc1.b"]))
    h = nx.linear(h, params[prefix + "mlp.fc2.w"], params[prefix + "mlp.fc2.b"])
    return nx.add(h, z1), probs


def encode(images, params: Mapping, cfg: ModelConfig, record: bool = False):
    """Images (B, H, W, C) -> normalised class-token states (B, D) [+ (B, L, heads, T, T)]."""
    patches = patchify(np.asarray(images), cfg.patch_size)
    z = build_token_sequence(patches, params)
    stack = []
    for i in range(cfg.layers):
        z, probs = encoder_layer(z, params, f"layers.{i}.", cfg, record)
        if record:
            stack.append(probs)
    cls_state = nx.take(z, 0, axis=1)
    y = nx.layer_norm(cls_state, params["norm.gamma"], params["norm.beta"], cfg.ln_eps)
    return y, (np.stack(stack, axis=1) if record else None)


def _check_images(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != cfg.input_shape:
        raise ConfigError(
            f"input batch shape {images.shape} does not match config input {cfg.input_shape}"
        )
    return images


def forward_logits(images, params: Mapping, cfg: ModelConfig, record: bool = False):
    """Batched forward. Returns logits (B, classes), plus the attention record if asked.

    The record is an array (B, L, heads, T, T) for single-tower models and a
    pair of such arrays (T1 tower, T2 tower) for late fusion.
    """
    images = _check_images(images, cfg)
    dtype = nx.value_of(next(iter(params.values()))).dtype
    images = images.astype(dtype, copy=False)
    if cfg.fusion == "late":
        logits, stacks = forward_late_fusion(
            images[..., 0:1], images[..., 1:2],
            sub_params(params, "tower1."), sub_params(params, "tower2."),
            sub_params(params, "fusion_head."), cfg, record=record,
        )
        return (logits, stacks) if record else logits
    y, stack = encode(images, params, cfg, record)
    logits = nx.linear(y, params["head.w"], params["head.b"])
    return (logits, stack) if record else logits


def forward_classify(image: np.ndarray, params: Mapping, cfg: ModelConfig, record: bool = False):
    """Single packed image (H, W, C) -> logits (classes,) [+ attention stack (L, heads, T, T)]."""
    image = np.asarray(image)
    if image.shape != cfg.input_shape:
        raise ConfigError(f"image shape {image.shape} does not match config input {cfg.input_shape}")
    out = forward_logits(image[None], params, cfg, record)
    if not record:
        return nx.value_of(out)[0]
    logits, stack = out
    if isinstance(stack, tuple):
        return nx.value_of(logits)[0], tuple(s[0] for s in stack)
    return nx.value_of(logits)[0], stack[0]


def forward_late_fusion(t1_grid, t2_grid, tower1: Mapping, tower2: Mapping,
                        fusion_head: Mapping, cfg: ModelConfig,
                        record: bool = False, return_readout: bool = False):
    """Encode each modality with its own tower, concatenate class tokens, project.

    ``t1_grid``/``t2_grid`` are batches (B, H, W, 1). Returns ``(logits, stacks)``
    where ``stacks`` is ``None`` unless ``record``; with ``return_readout`` the
    concatenated (B, 2D) readout is appended.
    """
    if cfg.fusion != "late" or cfg.channels != 1:
        raise ConfigError("late fusion towers share one config with channels=1")
    expected = _tower_shapes(cfg)
    for label, tower in (("tower1", tower1), ("tower2", tower2)):
        for name, shape in expected.items():
            got = np.shape(nx.value_of(tower[name])) if name in tower else None
            if got != shape:
                raise ConfigError(f"{label}.{name}: shape {got}, shared config implies {shape}")
    y1, s1 = encode(t1_grid, tower1, cfg, record)
    y2, s2 = encode(t2_grid, tower2, cfg, record)
    readout = nx.concat([y1, y2], axis=-1)
    w = nx.value_of(fusion_head["w"])
    if w.shape != (2 * cfg.embed_dim, cfg.num_classes):
        raise ConfigError(f"fusion head shape {w.shape} != {(2 * cfg.embed_dim, cfg.num_classes)}")
    logits = nx.linear(readout, fusion_head["w"], fusion_head["b"])
    stacks = (s1, s2) if record else None
    if return_readout:
        return logits, stacks, readout
    return logits, stacks


def predict_proba(images, params: Mapping, cfg: ModelConfig, batch_size: int = 32) -> np.ndarray:
    out = []
    images = np.asarray(images)
    for i in range(0, len(images), batch_size):
        logits = np.asarray(forward_logits(images[i:i + batch_size], params, cfg), dtype=np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes))
