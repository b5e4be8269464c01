"""CircFormerMoE: shared conv + linear-attention backbone with species expert heads.

Layout of one forward pass::

    one-hot [B, L, C] -> input embedding (+ sinusoidal positions)
      -> local encoder: residual blocks x + conv(act(norm(x)))
      -> global encoder: pre-norm FAVOR+ attention and feed-forward blocks
      -> final norm = H [B, L, D]
      -> SSD: species head, per-position D->1   -> logits [B, L]
         SSP: pool(H), species head, D->1       -> logits [B]
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

TASKS = ("ssd", "ssp")
SHARED_HEAD = "__shared__"


class RoutingError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class ModelConfig:
    species: tuple[str, ...] = ("species0",)
    embed_dim: int = 64
    conv_blocks: int = 4
    kernel_size: int = 9
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    attn_blocks: int = 2
    heads: int = 4
    random_features: int = 64
    ffn_mult: int = 2
    activation: str = "relu"
    attention: str = "favor"  # or "exact"
    positional_encoding: bool = True
    moe: bool = True
    ssd_channels: int = 5
    ssp_channels: int = 6
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.species = tuple(self.species)
        self.dilations = tuple(self.dilations)
        self.validate()

    def validate(self) -> None:
        if not self.species or len(set(self.species)) != len(self.species):
            raise ValueError("species list must be non-empty and unique")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.random_features < 1:
            raise ValueError("random_features must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if len(self.dilations) != self.conv_blocks:
            raise ValueError(f"need {self.conv_blocks} dilations, got {len(self.dilations)}")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.attention not in ("favor", "exact"):
            raise ValueError(f"unknown attention {self.attention!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- attention

@dataclass
class RandomFeatureMap:
    """Fixed Gaussian projection w [d_head, m] for positive random features."""

    w: np.ndarray

    @classmethod
    def draw(cls, d_head: int, m: int, seed) -> "RandomFeatureMap":
        return cls(np.random.default_rng(seed).standard_normal((d_head, m)))

    @property
    def m(self) -> int:
        return self.w.shape[1]


def random_feature_map(x, fmap: RandomFeatureMap) -> Tensor:
    """phi(x) = exp(w^T x - |x|^2 / 2) / sqrt(m), row-wise over the last axis."""
    x = T.as_tensor(x)
    w = Tensor(fmap.w, dtype=x.dtype)
    expo = T.sub(x @ w, T.mul(T.sum(x * x, axis=-1, keepdims=True), 0.5))
    out = T.mul(T.exp(expo), 1.0 / math.sqrt(fmap.m))
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("random feature map overflowed; pre-scale the inputs")
    return out


def _stabilized_features(x: Tensor, w: Tensor, per_row: bool) -> Tensor:
    # Subtracting a constant from the exponent rescales phi by exp(-c):
    # per query row, or once per batch item for keys.  Both factors cancel in
    # the normalized attention, so the output is unchanged.
    expo = T.sub(x @ w, T.mul(T.sum(x * x, axis=-1, keepdims=True), 0.5))
    axes = -1 if per_row else (-2, -1)
    shift = Tensor(expo.data.max(axis=axes, keepdims=True), dtype=x.dtype)
    return T.exp(T.sub(expo, shift))


def favor_plus_attention(q, k, v, fmap: RandomFeatureMap) -> Tensor:
    """Normalized kernel attention D^-1 phi(Q) (phi(K)^T V), linear in length.

    q, k, v: [L, d] or [B, L, d].  Q and K are scaled by d^-1/4 so the kernel
    estimates exp(q.k / sqrt(d)).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    scale = d ** -0.25
    w = Tensor(fmap.w, dtype=q.dtype)
    phi_q = _stabilized_features(T.mul(q, scale), w, per_row=True)
    phi_k = _stabilized_features(T.mul(k, scale), w, per_row=False)
    kv = T.transpose(phi_k) @ v                              # [.., m, d]
    num = phi_q @ kv                                         # [.., L, d]
    k_sum = T.sum(phi_k, axis=-2, keepdims=True)             # [.., 1, m]
    den = T.sum(phi_q * k_sum, axis=-1, keepdims=True)       # [.., L, 1]
    if not np.all(den.data > 0):
        raise FloatingPointError("FAVOR+ normalizer is not positive")
    return num / den


def exact_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    scores = T.mul(q @ T.transpose(k), 1.0 / math.sqrt(d))
    shift = Tensor(scores.data.max(axis=-1, keepdims=True), dtype=q.dtype)
    e = T.exp(T.sub(scores, shift))
    return (e / T.sum(e, axis=-1, keepdims=True)) @ v


# ---------------------------------------------------------------- helpers

def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [.., Din] @ w [Din, Dout] (+ b), flattening leading axes for one GEMM."""
    lead = x.shape[:-1]
    y = T.reshape(x, (-1, x.shape[-1])) @ w
    if b is not None:
        y = y + b
    return T.reshape(y, lead + (w.shape[-1],))


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------- model

class CircFormerMoE:
    def __init__(self, config: ModelConfig, dtype=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype or T.default_dtype()).type
        self.params: dict[str, Parameter] = {}
        self._init_params()
        dh, m = config.head_dim, config.random_features
        self.feature_maps = [[RandomFeatureMap.draw(dh, m, [config.seed, 7919, layer, h])
                              for h in range(config.heads)]
                             for layer in range(config.attn_blocks)]
        self._pe_cache: dict[int, np.ndarray] = {}

    # -- construction
    def _add(self, name, data):
        self.params[name] = Parameter(name, data, dtype=self.dtype)

    def _init_params(self):
        c = self.config
        rng = np.random.default_rng([c.seed, 1])
        d, k = c.embed_dim, c.kernel_size
        dt = self.dtype
        self._add("input.ssd.weight", _uniform(rng, (c.ssd_channels, d), c.ssd_channels, dt))
        self._add("input.ssd.bias", np.zeros(d, dt))
        self._add("input.ssp.weight", _uniform(rng, (c.ssp_channels, d), c.ssp_channels, dt))
        self._add("input.ssp.bias", np.zeros(d, dt))
        for i in range(c.conv_blocks):
            p = f"local.block{i}"
            self._add(f"{p}.norm.gain", np.ones(d, dt))
            self._add(f"{p}.norm.offset", np.zeros(d, dt))
            self._add(f"{p}.conv.weight", _uniform(rng, (k, d, d), k * d, dt))
            self._add(f"{p}.conv.bias", np.zeros(d, dt))
        f = c.ffn_mult * d
        for i in range(c.attn_blocks):
            p = f"global.block{i}"
            for n in ("norm1", "norm2"):
                self._add(f"{p}.{n}.gain", np.ones(d, dt))
                self._add(f"{p}.{n}.offset", np.zeros(d, dt))
            for n in ("q", "k", "v", "out"):
                self._add(f"{p}.attn.{n}.weight", _uniform(rng, (d, d), d, dt))
                self._add(f"{p}.attn.{n}.bias", np.zeros(d, dt))
            self._add(f"{p}.ffn.in.weight", _uniform(rng, (d, f), d, dt))
            self._add(f"{p}.ffn.in.bias", np.zeros(f, dt))
            self._add(f"{p}.ffn.out.weight", _uniform(rng, (f, d), f, dt))
            self._add(f"{p}.ffn.out.bias", np.zeros(d, dt))
        self._add("final_norm.gain", np.ones(d, dt))
        self._add("final_norm.offset", np.zeros(d, dt))
        for sp in self.head_keys:
            for task in TASKS:
                self._add(f"heads.{sp}.{task}.weight", _uniform(rng, (d, 1), d, dt))
                self._add(f"heads.{sp}.{task}.bias", np.zeros(1, dt))

    @property
    def head_keys(self) -> tuple[str, ...]:
        return self.config.species if self.config.moe else (SHARED_HEAD,)

    # -- parameter access
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def backbone_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("heads.")]

    def head_parameters(self, species: str, task: str | None = None) -> list[Parameter]:
        key = species if self.config.moe else SHARED_HEAD
        tasks = TASKS if task is None else (task,)
        return [self.params[f"heads.{key}.{t}.{n}"] for t in tasks for n in ("weight", "bias")]

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if arr.shape != self.params[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=self.dtype)
            self.params[n].m = self.params[n].v = None
            self.params[n].step = 0

    def copy(self, dtype=None) -> "CircFormerMoE":
        other = CircFormerMoE(dataclasses.replace(self.config), dtype=dtype or self.dtype)
        other.load_state_dict(self.state_dict())
        return other

    def reset_ssp_embedding(self, seed: int | None = None) -> None:
        """Copy the nucleotide rows of the SSD embedding into the SSP one; fresh spacer row."""
        c = self.config
        rng = np.random.default_rng([c.seed if seed is None else seed, 2])
        w = self.params["input.ssp.weight"]
        w.data[:c.ssd_channels] = self.params["input.ssd.weight"].data
        w.data[c.ssd_channels:] = _uniform(rng, (c.ssp_channels - c.ssd_channels, c.embed_dim),
                                           c.ssp_channels, self.dtype)
        self.params["input.ssp.bias"].data[:] = self.params["input.ssd.bias"].data

    # -- routing
    def route_to_expert(self, species: str, task: str) -> tuple[Parameter, Parameter]:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if species not in self.config.species:
            raise RoutingError(f"unregistered species {species!r}; known: {list(self.config.species)}")
        key = species if self.config.moe else SHARED_HEAD
        return self.params[f"heads.{key}.{task}.weight"], self.params[f"heads.{key}.{task}.bias"]

    def _species_list(self, species, n: int) -> list[str]:
        if isinstance(species, str):
            species = [species] * n
        species = list(species)
        if len(species) != n:
            raise ValueError(f"{len(species)} species labels for batch of {n}")
        for sp in species:
            if sp not in self.config.species:
                raise RoutingError(f"unregistered species {sp!r}; known: {list(self.config.species)}")
        return species

    def _apply_heads(self, feats: Tensor, species: list[str], task: str) -> Tensor:
        groups: dict[str, list[int]] = {}
        for i, sp in enumerate(species):
            key = sp if self.config.moe else SHARED_HEAD
            groups.setdefault(key, []).append(i)
        outs, rows = [], []
        for key, idx in groups.items():
            w, b = self.params[f"heads.{key}.{task}.weight"], self.params[f"heads.{key}.{task}.bias"]
            part = feats if len(groups) == 1 else T.take_rows(feats, idx)
            outs.append(linear(part, w, b))
            rows.append(idx)
        if len(outs) == 1:
            return outs[0]
        return T.assemble_rows(outs, rows, len(species))

    # -- forward
    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x), dtype=self.dtype)

    def _positions(self, length: int) -> np.ndarray:
        if length not in self._pe_cache:
            self._pe_cache[length] = sinusoidal_positions(length, self.config.embed_dim).astype(self.dtype)
        return self._pe_cache[length]

    def embed(self, x: Tensor, task: str) -> Tensor:
        w, b = self.params[f"input.{task}.weight"], self.params[f"input.{task}.bias"]
        if x.ndim != 3 or x.shape[2] != w.shape[0]:
            raise ValueError(f"{task} input must be [B, L, {w.shape[0]}], got {x.shape}")
        h = linear(x, w, b)
        if self.config.positional_encoding:
            h = h + Tensor(self._positions(x.shape[1]), dtype=self.dtype)
        return h

    def local_encoder(self, h: Tensor) -> Tensor:
        c = self.config
        act = T.ACTIVATIONS[c.activation]
        for i, dil in enumerate(c.dilations):
            p = f"local.block{i}"
            y = T.layer_norm(h, self.params[f"{p}.norm.gain"], self.params[f"{p}.norm.offset"], c.ln_eps)
            y = T.conv1d(act(y), self.params[f"{p}.conv.weight"], self.params[f"{p}.conv.bias"], dil)
            h = h + y
        return h

    def attention_block(self, h: Tensor, layer: int) -> Tensor:
        c = self.config
        p = f"global.block{layer}"
        prm = self.params
        y = T.layer_norm(h, prm[f"{p}.norm1.gain"], prm[f"{p}.norm1.offset"], c.ln_eps)
        q = linear(y, prm[f"{p}.attn.q.weight"], prm[f"{p}.attn.q.bias"])
        k = linear(y, prm[f"{p}.attn.k.weight"], prm[f"{p}.attn.k.bias"])
        v = linear(y, prm[f"{p}.attn.v.weight"], prm[f"{p}.attn.v.bias"])
        dh = c.head_dim
        heads = []
        for hi in range(c.heads):
            sl = (slice(None), slice(None), slice(hi * dh, (hi + 1) * dh))
            if c.attention == "favor":
                heads.append(favor_plus_attention(q[sl], k[sl], v[sl], self.feature_maps[layer][hi]))
            else:
                heads.append(exact_attention(q[sl], k[sl], v[sl]))
        a = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
        h = h + linear(a, prm[f"{p}.attn.out.weight"], prm[f"{p}.attn.out.bias"])
        y = T.layer_norm(h, prm[f"{p}.norm2.gain"], prm[f"{p}.norm2.offset"], c.ln_eps)
        y = T.ACTIVATIONS[c.activation](linear(y, prm[f"{p}.ffn.in.weight"], prm[f"{p}.ffn.in.bias"]))
        return h + linear(y, prm[f"{p}.ffn.out.weight"], prm[f"{p}.ffn.out.bias"])

    def global_encoder(self, h: Tensor) -> Tensor:
        for layer in range(self.config.attn_blocks):
            h = self.attention_block(h, layer)
        return h

    def backbone(self, x, task: str = "ssd") -> Tensor:
        """Shared features H [B, L, D]; never depends on species."""
        h = self.embed(self._as_input(x), task)
        h = self.global_encoder(self.local_encoder(h))
        return T.layer_norm(h, self.params["final_norm.gain"], self.params["final_norm.offset"],
                            self.config.ln_eps)

    def forward_ssd(self, x, species, return_features: bool = False):
        """Per-position splice-site logits [B, L]."""
        x = self._as_input(x)
        species = self._species_list(species, x.shape[0])
        h = self.backbone(x, "ssd")
        logits = self._apply_heads(h, species, "ssd")
        logits = T.reshape(logits, logits.shape[:2])
        return (logits, h) if return_features else logits

    def forward_ssp(self, x, species, return_features: bool = False):
        """Per-sample pairing logit [B]."""
        x = self._as_input(x)
        species = self._species_list(species, x.shape[0])
        h = self.backbone(x, "ssp")
        logits = self._apply_heads(T.global_avg_pool(h), species, "ssp")
        logits = T.reshape(logits, (logits.shape[0],))
        return (logits, h) if return_features else logits

    def receptive_radius(self) -> int:
        c = self.config
        return sum(c.dilations) * (c.kernel_size - 1) // 2


def predict_proba(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return T._sigmoid_np(np.asarray(z, dtype=np.float64))
