"""Encoder blocks over k-dimensional token grids and the end-to-end model.

A block is the standard encoder arrangement (attention sublayer, feed-forward
sublayer, residuals, layer norm; post-norm by default) with the attention
sublayer picked from the four variants.  The model pipeline is

    raw input -> patch embedding -> B blocks -> pooling head -> task output

with rotary phases added to queries/keys (per enabled mode, before pooling)
and a mean or flatten pooling head feeding an affine map to forecast values or
class logits.

Forward passes run on the autodiff tape, so the same code path serves
training and inference; all parameters live in a flat name -> array dict.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffops as ops
from .autodiff import Tape, Var
from .features import FeatureMapSpec, projection_matrix
from .io import read_tensor, write_tensor
from .tensor import as_tensor

VARIANTS = ("full-softmax", "full-linear", "factored-softmax", "factored-linear")


@dataclass(frozen=True)
class RotaryConfig:
    """Which token modes receive rotary phases, and the frequency base."""

    modes: tuple[int, ...] = ()
    base: float = 10000.0


@dataclass(frozen=True)
class PatchEmbedConfig:
    """Non-overlapping patch sizes per raw mode (stride = size, no padding)."""

    patch_sizes: tuple[int, ...]

    def __post_init__(self):
        if any(p < 1 for p in self.patch_sizes):
            raise ValueError("patch sizes must be >= 1")


@dataclass(frozen=True)
class HOTBlockConfig:
    dims: tuple[int, ...]
    d_model: int
    heads: int
    variant: str = "factored-softmax"
    ffn_dim: int = 0  # 0 means 4 * d_model
    mode_mask: tuple[bool, ...] = ()  # empty means all modes attend
    feature_spec: FeatureMapSpec | None = None
    ln_eps: float = 1e-5
    norm_placement: str = "post"
    pooling: str = "sum"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.mode_mask and len(self.mode_mask) != len(self.dims):
            raise ValueError("mode_mask length must equal the number of token modes")
        if self.norm_placement not in ("post", "pre"):
            raise ValueError("norm_placement must be 'post' or 'pre'")
        if "linear" in self.variant and self.feature_spec is None:
            raise ValueError(f"variant {self.variant} needs a feature_spec")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.d_model

    @property
    def enabled_modes(self) -> tuple[int, ...]:
        if not self.mode_mask:
            return tuple(range(len(self.dims)))
        return tuple(i for i, on in enumerate(self.mode_mask) if on)


@dataclass(frozen=True)
class HeadConfig:
    task: str  # "forecast" | "classify"
    pooling: str = "mean"  # "mean" | "flatten"
    horizon: int = 0
    n_series: int = 0
    num_classes: int = 0
    flatten_cap: int = 65536

    def __post_init__(self):
        if self.task not in ("forecast", "classify"):
            raise ValueError("task must be 'forecast' or 'classify'")
        if self.pooling not in ("mean", "flatten"):
            raise ValueError("pooling must be 'mean' or 'flatten'")
        if self.task == "forecast" and (self.horizon < 1 or self.n_series < 1):
            raise ValueError("forecast head needs horizon and n_series")
        if self.task == "classify" and self.num_classes < 2:
            raise ValueError("classify head needs num_classes >= 2")

    @property
    def out_dim(self) -> int:
        return self.horizon * self.n_series if self.task == "forecast" else self.num_classes


@dataclass(frozen=True)
class ModelConfig:
    raw_dims: tuple[int, ...]
    patch: PatchEmbedConfig
    rotary: RotaryConfig
    block: HOTBlockConfig
    num_blocks: int
    head: HeadConfig

    def __post_init__(self):
        if len(self.patch.patch_sizes) != len(self.raw_dims):
            raise ValueError("patch sizes must cover every raw mode")
        for d, p in zip(self.raw_dims, self.patch.patch_sizes):
            if d % p != 0:
                raise ValueError(f"raw mode of length {d} not divisible by patch {p}")
        if self.token_dims != self.block.dims:
            raise ValueError(
                f"block dims {self.block.dims} do not match patched dims {self.token_dims}"
            )
        for m in self.rotary.modes:
            if not 0 <= m < len(self.token_dims):
                raise ValueError(f"rotary mode {m} out of range")
        if self.rotary.modes and self.block.d_head % 2 != 0:
            raise ValueError("rotary phases need an even head dimension")
        if self.head.pooling == "flatten":
            flat = math.prod(self.token_dims) * self.block.d_model
            if flat > self.head.flatten_cap:
                raise ValueError(f"flatten head of width {flat} exceeds cap {self.head.flatten_cap}")
        if self.num_blocks < 1:
            raise ValueError("need at least one block")

    @property
    def token_dims(self) -> tuple[int, ...]:
        return tuple(d // p for d, p in zip(self.raw_dims, self.patch.patch_sizes))

    @property
    def patch_channels(self) -> int:
        return math.prod(self.patch.patch_sizes)


# ---------------------------------------------------------------------------
# rotary phases


def rotary_tables(n_positions: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine/sine tables of shape (n_positions, d_head), pairwise duplicated."""
    if d_head % 2 != 0:
        raise ValueError("rotary phases need an even head dimension")
    freqs = base ** (-np.arange(0, d_head, 2) / d_head)
    angles = np.arange(n_positions)[:, None] * freqs[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    return cos, sin


def _pair_swap(d_head: int) -> np.ndarray:
    """(x0, x1, x2, x3, ...) -> (-x1, x0, -x3, x2, ...) as a constant matrix."""
    p = np.zeros((d_head, d_head))
    for j in range(0, d_head, 2):
        p[j, j + 1] = -1.0
        p[j + 1, j] = 1.0
    return p


def rotary_encode(t: np.ndarray, cfg: RotaryConfig) -> np.ndarray:
    """Rotate feature pairs of an order-(k+1) tensor by position-dependent phases.

    Positions along each enabled mode advance the angle; position 0 is the
    identity rotation, and each rotation is an isometry of the feature pairs.
    """
    t = as_tensor(t)
    out = t
    swap = _pair_swap(t.shape[-1])
    for m in cfg.modes:
        cos, sin = rotary_tables(t.shape[m], t.shape[-1], cfg.base)
        shape = [1] * t.ndim
        shape[m] = t.shape[m]
        shape[-1] = t.shape[-1]
        out = out * cos.reshape(shape) + (out @ swap.T) * sin.reshape(shape)
    return out


def _rotary_v(t: Var, cfg: RotaryConfig, token_dims: tuple[int, ...], lead: int = 1) -> Var:
    """Batched Var version of :func:`rotary_encode`; token modes start at ``lead``."""
    if not cfg.modes:
        return t
    d_head = t.shape[-1]
    swap = ad.constant(_pair_swap(d_head))
    for m in cfg.modes:
        cos, sin = rotary_tables(token_dims[m], d_head, cfg.base)
        shape = [1] * t.value.ndim
        shape[lead + m] = token_dims[m]
        shape[-1] = d_head
        cos_c = ad.constant(cos.reshape(shape))
        sin_c = ad.constant(sin.reshape(shape))
        swapped = ad.matmul(t, swap, tb=True)
        t = ad.add(ad.mul(t, cos_c), ad.mul(swapped, sin_c))
    return t


# ---------------------------------------------------------------------------
# patch embedding


def patchify(x: np.ndarray, patch_sizes: tuple[int, ...]) -> np.ndarray:
    """Gather non-overlapping patches: (B, d_0, ..., d_{k-1}) -> (B, d_0/p_0, ..., C).

    The trailing channel axis concatenates the patch cells (C = prod of patch
    sizes).  Mode lengths must be divisible by their patch size; no padding.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = x.shape[1:]
    if len(patch_sizes) != len(dims):
        raise ValueError("patch sizes must cover every raw mode")
    split_shape = [x.shape[0]]
    for d, p in zip(dims, patch_sizes):
        if d % p != 0:
            raise ValueError(f"mode of length {d} not divisible by patch {p}")
        split_shape += [d // p, p]
    t = x.reshape(split_shape)
    k = len(dims)
    perm = [0] + [1 + 2 * i for i in range(k)] + [2 + 2 * i for i in range(k)]
    t = np.transpose(t, perm)
    token_dims = tuple(d // p for d, p in zip(dims, patch_sizes))
    return np.ascontiguousarray(t.reshape((x.shape[0],) + token_dims + (-1,)))


# ---------------------------------------------------------------------------
# attention sublayer (batched, differentiable)


def _pooled(t: Var, axis: int, pooling: str, lead: int = 2) -> Var:
    pooled = ops.sum_except_v(t, tuple(range(lead)) + (axis, t.value.ndim - 1))
    if pooling == "mean":
        count = math.prod(t.shape[lead:-1]) // t.shape[axis]
        pooled = ad.scale(pooled, 1.0 / count)
    return pooled


def _flatten_tokens(t: Var) -> Var:
    b, h, e = t.shape[0], t.shape[1], t.shape[-1]
    return ad.reshape(t, (b, h, t.value.size // (b * h * e), e))


def _split_heads(t: Var, heads: int, d_head: int) -> Var:
    """(B, tokens..., H*E) -> (B, H, tokens..., E)."""
    nd = t.value.ndim
    cube = ad.reshape(t, t.shape[:-1] + (heads, d_head))
    perm = (0, nd - 1) + tuple(range(1, nd - 1)) + (nd,)
    return ad.transpose(cube, perm)


def attention_sublayer_v(x: Var, cfg: HOTBlockConfig, rotary: RotaryConfig,
                         params: dict[str, Var], prefix: str) -> Var:
    """One multihead attention sublayer on (B, N_0, ..., N_{k-1}, D) input.

    Heads are stacked into one leading axis so projections, pooling, gate
    construction and mode application each run as a single broadcast matmul.
    """
    scale = 1.0 / math.sqrt(cfg.d_head)
    omega = projection_matrix(cfg.feature_spec) if cfg.feature_spec is not None else None
    heads, d_head = cfg.heads, cfg.d_head
    wq = ad.concat_last([params[f"{prefix}.h{h}.wq"] for h in range(heads)])
    wk = ad.concat_last([params[f"{prefix}.h{h}.wk"] for h in range(heads)])
    wv = ad.concat_last([params[f"{prefix}.h{h}.wv"] for h in range(heads)])

    q = _split_heads(ops.affine_v(x, wq), heads, d_head)  # (B, H, tokens..., E)
    kt = _split_heads(ops.affine_v(x, wk), heads, d_head)
    p = _split_heads(ops.affine_v(x, wv), heads, d_head)
    q = _rotary_v(q, rotary, cfg.dims, lead=2)
    kt = _rotary_v(kt, rotary, cfg.dims, lead=2)

    if cfg.variant == "factored-softmax":
        for i in cfg.enabled_modes:
            qt = _pooled(q, 2 + i, cfg.pooling)
            kk = _pooled(kt, 2 + i, cfg.pooling)
            logits = ad.scale(ad.matmul(qt, kk, tb=True), scale)
            p = ops.batched_mode_apply_v(p, ad.softmax_last(logits), 2 + i, lead=2)
    elif cfg.variant == "factored-linear":
        for i in cfg.enabled_modes:
            qt = _pooled(q, 2 + i, cfg.pooling)
            kk = _pooled(kt, 2 + i, cfg.pooling)
            p = ops.kernelized_mode_apply_v(p, qt, kk, 2 + i, cfg.feature_spec, omega, lead=2)
    elif cfg.variant == "full-softmax":
        qf, kf, pf = _flatten_tokens(q), _flatten_tokens(kt), _flatten_tokens(p)
        logits = ad.scale(ad.matmul(qf, kf, tb=True), scale)
        pf = ad.matmul(ad.softmax_last(logits), pf)
        p = ad.reshape(pf, p.shape)
    else:  # full-linear
        qf, kf, pf = _flatten_tokens(q), _flatten_tokens(kt), _flatten_tokens(p)
        pf = ops.kernelized_mode_apply_v(pf, qf, kf, 2, cfg.feature_spec, omega, lead=2)
        p = ad.reshape(pf, p.shape)

    # back to (B, tokens..., H*E); one matmul applies W_O and sums the heads
    nd = p.value.ndim
    merged = ad.reshape(ad.transpose(p, (0,) + tuple(range(2, nd - 1)) + (1, nd - 1)),
                        x.shape[:-1] + (heads * d_head,))
    wo = ad.concat_last([ad.transpose(params[f"{prefix}.h{h}.wo"], (1, 0)) for h in range(heads)])
    return ad.matmul(merged, wo, tb=True)


def ffn_v(x: Var, params: dict[str, Var], prefix: str) -> Var:
    hidden = ops.gelu_v(ops.affine_v(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ops.affine_v(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def block_forward_v(x: Var, cfg: HOTBlockConfig, rotary: RotaryConfig,
                    params: dict[str, Var], prefix: str) -> Var:
    """Encoder block: attention and feed-forward sublayers with residuals."""
    ln1 = lambda v: ops.layer_norm_v(v, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"], cfg.ln_eps)
    ln2 = lambda v: ops.layer_norm_v(v, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"], cfg.ln_eps)
    if cfg.norm_placement == "post":
        y1 = ln1(ad.add(x, attention_sublayer_v(x, cfg, rotary, params, f"{prefix}.attn")))
        return ln2(ad.add(y1, ffn_v(y1, params, f"{prefix}.ffn")))
    y1 = ad.add(x, attention_sublayer_v(ln1(x), cfg, rotary, params, f"{prefix}.attn"))
    return ad.add(y1, ffn_v(ln2(y1), params, f"{prefix}.ffn"))


# ---------------------------------------------------------------------------
# whole model


class HOTModel:
    """Patch embedding, a stack of encoder blocks, and a pooled task head."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "HOTModel":
        """Glorot-uniform weights, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        d = config.block.d_model
        dh = config.block.d_head
        f = config.block.hidden_dim
        params: dict[str, np.ndarray] = {}
        params["patch.w"] = glorot(config.patch_channels, d)
        params["patch.b"] = np.zeros(d)
        for b in range(config.num_blocks):
            pre = f"block{b}"
            for h in range(config.block.heads):
                params[f"{pre}.attn.h{h}.wq"] = glorot(d, dh)
                params[f"{pre}.attn.h{h}.wk"] = glorot(d, dh)
                params[f"{pre}.attn.h{h}.wv"] = glorot(d, dh)
                params[f"{pre}.attn.h{h}.wo"] = glorot(dh, d)
            params[f"{pre}.ln1.gamma"] = np.ones(d)
            params[f"{pre}.ln1.beta"] = np.zeros(d)
            params[f"{pre}.ffn.w1"] = glorot(d, f)
            params[f"{pre}.ffn.b1"] = np.zeros(f)
            params[f"{pre}.ffn.w2"] = glorot(f, d)
            params[f"{pre}.ffn.b2"] = np.zeros(d)
            params[f"{pre}.ln2.gamma"] = np.ones(d)
            params[f"{pre}.ln2.beta"] = np.zeros(d)
        pooled_dim = d if config.head.pooling == "mean" else math.prod(config.token_dims) * d
        params["head.w"] = glorot(pooled_dim, config.head.out_dim)
        params["head.b"] = np.zeros(config.head.out_dim)
        return cls(config, params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x_raw: np.ndarray, tape: Tape | None = None,
                param_vars: dict[str, Var] | None = None) -> Var:
        """Run the model; pass a tape (and optionally pre-made leaves) to track gradients."""
        cfg = self.config
        if param_vars is None:
            if tape is None:
                param_vars = {k: ad.constant(v) for k, v in self.params.items()}
            else:
                param_vars = {k: tape.var(v) for k, v in self.params.items()}
        if x_raw.shape[1:] != cfg.raw_dims:
            raise ValueError(f"raw input dims {x_raw.shape[1:]} != configured {cfg.raw_dims}")

        tokens = ad.constant(patchify(x_raw, cfg.patch.patch_sizes))
        x = ops.affine_v(tokens, param_vars["patch.w"], param_vars["patch.b"])
        for b in range(cfg.num_blocks):
            x = block_forward_v(x, cfg.block, cfg.rotary, param_vars, f"block{b}")

        if cfg.head.pooling == "mean":
            pooled = ad.scale(
                ops.sum_except_v(x, (0, x.value.ndim - 1)),
                1.0 / math.prod(cfg.token_dims),
            )
        else:
            pooled = ad.reshape(x, (x.shape[0], math.prod(cfg.token_dims) * cfg.block.d_model))
        out = ops.affine_v(pooled, param_vars["head.w"], param_vars["head.b"])
        if cfg.head.task == "forecast":
            out = ad.reshape(out, (x_raw.shape[0], cfg.head.horizon, cfg.head.n_series))
        return out

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        return self.forward(x_raw).value

    # -- checkpointing ------------------------------------------------------

    def save(self, directory) -> None:
        """One tensor file per parameter plus a JSON manifest with the config."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"config": _config_to_dict(self.config), "params": {}}
        for name, value in sorted(self.params.items()):
            fname = name.replace("/", "_") + ".hot"
            write_tensor(directory / fname, np.atleast_1d(value))
            manifest["params"][name] = fname
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "HOTModel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        config = _config_from_dict(manifest["config"])
        params = {
            name: read_tensor(directory / fname)
            for name, fname in manifest["params"].items()
        }
        return cls(config, params)


def _config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> ModelConfig:
    spec = d["block"].get("feature_spec")
    block = HOTBlockConfig(
        dims=tuple(d["block"]["dims"]),
        d_model=d["block"]["d_model"],
        heads=d["block"]["heads"],
        variant=d["block"]["variant"],
        ffn_dim=d["block"]["ffn_dim"],
        mode_mask=tuple(d["block"]["mode_mask"]),
        feature_spec=FeatureMapSpec(**spec) if spec else None,
        ln_eps=d["block"]["ln_eps"],
        norm_placement=d["block"]["norm_placement"],
        pooling=d["block"]["pooling"],
    )
    head = HeadConfig(**d["head"])
    return ModelConfig(
        raw_dims=tuple(d["raw_dims"]),
        patch=PatchEmbedConfig(patch_sizes=tuple(d["patch"]["patch_sizes"])),
        rotary=RotaryConfig(modes=tuple(d["rotary"]["modes"]), base=d["rotary"]["base"]),
        block=block,
        num_blocks=d["num_blocks"],
        head=head,
    )
