"""Decoder-only transformer with optional sparse mixture-of-experts FFN layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FFN_STYLES = ("gated", "two-matrix")


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    total_experts: int = 1
    active_experts: int = 1
    ffn_style: str = "gated"
    # grouped-query attention; None means one key/value head per query head
    n_kv_heads: int | None = None
    tie_embeddings: bool = False

    def __post_init__(self):
        sizes = (self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq_len)
        if min(sizes) < 1:
            raise ValueError("all model sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.active_experts <= self.total_experts:
            raise ValueError("need 1 <= active_experts <= total_experts")
        if self.ffn_style not in FFN_STYLES:
            raise ValueError(f"ffn_style must be one of {FFN_STYLES}")
        kv = self.kv_heads
        if kv < 1 or self.n_heads % kv:
            raise ValueError("n_heads must be a multiple of n_kv_heads")

    @property
    def kv_heads(self) -> int:
        return self.n_heads if self.n_kv_heads is None else self.n_kv_heads

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """8-Top2 topology at toy width over the 260-symbol byte vocabulary."""
    base = dict(
        n_layers=4, d_model=64, n_heads=4, d_ff=128, vocab_size=260, max_seq_len=256,
        total_experts=8, active_experts=2, ffn_style="gated",
    )
    base.update(overrides)
    return ModelConfig(**base)


def llama_3b_like(total_experts: int = 8, active_experts: int = 2) -> ModelConfig:
    return ModelConfig(
        n_layers=28, d_model=3072, n_heads=24, d_ff=8192, vocab_size=128256, max_seq_len=2048,
        total_experts=total_experts, active_experts=active_experts, ffn_style="gated",
        n_kv_heads=8, tie_embeddings=True,
    )


PRESETS = {"desk": desk_config, "llama-3.2-3b": llama_3b_like}


# ---------------------------------------------------------------- accounting


def _ffn_size(cfg: ModelConfig) -> int:
    mats = 3 if cfg.ffn_style == "gated" else 2
    return mats * cfg.d_model * cfg.d_ff


def _non_expert_size(cfg: ModelConfig) -> int:
    d = cfg.d_model
    kv = cfg.kv_heads * cfg.head_dim
    per_layer = 2 * d * d + 2 * d * kv + 4 * d + d * cfg.total_experts
    emb = cfg.vocab_size * d + cfg.max_seq_len * d
    head = 0 if cfg.tie_embeddings else d * cfg.vocab_size
    return emb + head + 2 * d + cfg.n_layers * per_layer


def count_parameters(cfg: ModelConfig) -> tuple[int, int]:
    """(total, activated) for the MoE form of ``cfg``; routers count as activated."""
    base = _non_expert_size(cfg)
    per_expert = _ffn_size(cfg) * cfg.n_layers
    return base + cfg.total_experts * per_expert, base + cfg.active_experts * per_expert


# ---------------------------------------------------------------- routing


def top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, largest first.

    Equal logits resolve toward the lower expert index.
    """
    if not np.all(np.isfinite(logits)):
        raise ad.NonFiniteError("non-finite router logits")
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def gate(x_token, router, k: int) -> tuple[list[int], list[float]]:
    """Route one token: top-k of ``x_token @ router`` and softmax over those k."""
    x = np.asarray(getattr(x_token, "data", x_token), dtype=np.float64)
    w = np.asarray(getattr(router, "data", router), dtype=np.float64)
    if k > w.shape[1]:
        raise ValueError("k exceeds the number of experts")
    logits = x @ w
    idx = top_k(logits, k)
    sel = logits[idx]
    e = np.exp(sel - sel.max())
    return [int(i) for i in idx], list(e / e.sum())


@dataclass
class RoutingTrace:
    """Routing decision for a single token at one MoE layer."""

    layer: int
    position: int
    experts: list[int]
    weights: list[float]
    logits: list[float]

    @property
    def argmax(self) -> int:
        return self.experts[0]


@dataclass
class LayerRouting:
    """Routing decisions of every token passing through one MoE layer.

    Rows are flattened (batch, position) pairs; ``valid`` marks tokens that
    count toward load statistics (padding excluded).
    """

    layer: int
    indices: np.ndarray  # [T, k]
    weights: np.ndarray  # [T, k]
    logits: np.ndarray  # [T, E]
    positions: np.ndarray  # [T]
    valid: np.ndarray  # [T] bool
    probs: Tensor | None = field(default=None, repr=False)  # full softmax [T, E]

    @property
    def n_experts(self) -> int:
        return self.logits.shape[1]

    @property
    def argmax(self) -> np.ndarray:
        return self.indices[self.valid, 0]

    def traces(self) -> Iterator[RoutingTrace]:
        for t in np.nonzero(self.valid)[0]:
            yield RoutingTrace(
                self.layer, int(self.positions[t]), self.indices[t].tolist(),
                self.weights[t].tolist(), self.logits[t].tolist(),
            )

    def select(self, mask: np.ndarray) -> "LayerRouting":
        keep = self.valid & mask
        return LayerRouting(self.layer, self.indices, self.weights, self.logits, self.positions, keep, self.probs)


# ---------------------------------------------------------------- models


class DenseTransformer:
    """Pre-norm decoder: x' = MSA(LN(x)) + x; x = FFN(LN(x')) + x'."""

    is_moe = False

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None else self._init_params(seed)
        self.expert_evals = 0

    # parameter layout -------------------------------------------------

    def _ffn_shapes(self) -> dict[str, tuple]:
        d, f = self.config.d_model, self.config.d_ff
        if self.config.ffn_style == "gated":
            return {"w_gate": (d, f), "w_up": (d, f), "w_down": (f, d)}
        return {"w_in": (d, f), "w_out": (f, d)}

    def _ffn_prefixes(self, i: int) -> list[str]:
        return [f"layers.{i}.ffn"]

    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        d, kv = c.d_model, c.kv_heads * c.head_dim
        shapes = {"tok_emb": (c.vocab_size, d), "pos_emb": (c.max_seq_len, d)}
        for i in range(c.n_layers):
            p = f"layers.{i}"
            shapes.update({
                f"{p}.ln1.weight": (d,), f"{p}.ln1.bias": (d,),
                f"{p}.attn.wq": (d, d), f"{p}.attn.wk": (d, kv), f"{p}.attn.wv": (d, kv), f"{p}.attn.wo": (d, d),
                f"{p}.ln2.weight": (d,), f"{p}.ln2.bias": (d,),
            })
            if self.is_moe:
                shapes[f"{p}.moe.router"] = (d, c.total_experts)
            for pre in self._ffn_prefixes(i):
                for name, shape in self._ffn_shapes().items():
                    shapes[f"{pre}.{name}"] = shape
        shapes["ln_f.weight"] = (d,)
        shapes["ln_f.bias"] = (d,)
        if not c.tie_embeddings:
            shapes["lm_head"] = (d, c.vocab_size)
        return shapes

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        out_std = 0.02 / math.sqrt(2 * self.config.n_layers)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
                arr = np.ones(shape)
            elif name.endswith(".bias"):
                arr = np.zeros(shape)
            elif name.endswith("wo") or name.endswith("w_down") or name.endswith("w_out"):
                arr = rng.normal(0.0, out_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return params

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # blocks ----------------------------------------------------------

    def attention_block(self, x: Tensor, layer: int) -> Tensor:
        """MSA(LN(x)) + x with causal masking; x is [B, L, d]."""
        c = self.config
        B, L, d = x.shape
        if L > c.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        P = self.params
        p = f"layers.{layer}"
        H, Hkv, hd = c.n_heads, c.kv_heads, c.head_dim
        h = ad.layer_norm(x, P[f"{p}.ln1.weight"], P[f"{p}.ln1.bias"])
        q = ad.transpose(ad.reshape(h @ P[f"{p}.attn.wq"], (B, L, H, hd)), (0, 2, 1, 3))
        k = ad.reshape(h @ P[f"{p}.attn.wk"], (B, L, Hkv, hd))
        v = ad.reshape(h @ P[f"{p}.attn.wv"], (B, L, Hkv, hd))
        if Hkv != H:
            group = np.arange(H) // (H // Hkv)
            k = ad.take(k, group, axis=2)
            v = ad.take(v, group, axis=2)
        kt = ad.transpose(k, (0, 2, 3, 1))
        v = ad.transpose(v, (0, 2, 1, 3))
        scores = ad.scale(q @ kt, 1.0 / math.sqrt(hd))
        causal = np.tril(np.ones((L, L), dtype=bool))
        att = ad.softmax(scores, mask=np.broadcast_to(causal, scores.shape))
        o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
        return (o @ P[f"{p}.attn.wo"]) + x

    def expert_ffn(self, h: Tensor, prefix: str) -> Tensor:
        P = self.params
        if self.config.ffn_style == "gated":
            a = ad.silu(h @ P[f"{prefix}.w_gate"]) * (h @ P[f"{prefix}.w_up"])
            return a @ P[f"{prefix}.w_down"]
        return ad.silu(h @ P[f"{prefix}.w_in"]) @ P[f"{prefix}.w_out"]

    def ffn_block(self, h: Tensor, layer: int, positions, valid) -> tuple[Tensor, LayerRouting | None]:
        flat = ad.reshape(h, (-1, h.shape[-1]))
        self.expert_evals += flat.shape[0]
        return ad.reshape(self.expert_ffn(flat, f"layers.{layer}.ffn"), h.shape), None

    def forward(self, tokens, token_mask=None) -> tuple[Tensor, list[LayerRouting]]:
        """Logits for ``tokens`` ([L] or [B, L]) and routing records of every MoE layer."""
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        c = self.config
        B, L = ids.shape
        if L > c.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ValueError("token id outside the vocabulary")
        valid = np.ones((B, L), bool) if token_mask is None else np.asarray(token_mask, bool).reshape(B, L)
        positions = np.broadcast_to(np.arange(L), (B, L))
        P = self.params
        x = ad.embedding(P["tok_emb"], ids) + ad.embedding(P["pos_emb"], positions)
        routing = []
        for i in range(c.n_layers):
            x = self.attention_block(x, i)
            h = ad.layer_norm(x, P[f"layers.{i}.ln2.weight"], P[f"layers.{i}.ln2.bias"])
            f, rec = self.ffn_block(h, i, positions.reshape(-1), valid.reshape(-1))
            x = f + x
            if rec is not None:
                routing.append(rec)
        x = ad.layer_norm(x, P["ln_f.weight"], P["ln_f.bias"])
        head = ad.transpose(P["tok_emb"], (1, 0)) if c.tie_embeddings else P["lm_head"]
        logits = x @ head
        if single:
            logits = ad.reshape(logits, (L, c.vocab_size))
        return logits, routing

    __call__ = forward


class MoETransformer(DenseTransformer):
    """Dense transformer whose FFNs are replaced by routed expert banks."""

    is_moe = True

    def __init__(self, config: ModelConfig, seed: int = 0, params=None, freeze_mask: dict[str, bool] | None = None):
        super().__init__(config, seed, params)
        if freeze_mask is None:
            freeze_mask = {n: False for n in self.params}
        self.freeze_mask = freeze_mask
        self.apply_freeze_mask()

    def _ffn_prefixes(self, i: int) -> list[str]:
        return [f"layers.{i}.moe.experts.{e}" for e in range(self.config.total_experts)]

    @staticmethod
    def is_moe_param(name: str) -> bool:
        return ".moe." in name

    def apply_freeze_mask(self) -> None:
        for name, p in self.params.items():
            p.requires_grad = not self.freeze_mask.get(name, False)
            if not p.requires_grad:
                p.grad = None

    def set_active_experts(self, k: int) -> None:
        if not 1 <= k <= self.config.total_experts:
            raise ValueError("need 1 <= k <= total_experts")
        self.config.active_experts = k

    def moe_layer_forward(self, h: Tensor, layer: int, k: int | None = None,
                          positions=None, valid=None) -> tuple[Tensor, LayerRouting]:
        """Sum of gate-weighted outputs of the k selected experts, per token of h[T, d]."""
        c = self.config
        k = c.active_experts if k is None else k
        T = h.shape[0]
        logits = h @ self.params[f"layers.{layer}.moe.router"]
        idx = top_k(logits.data, k)
        gates = ad.softmax(ad.take_along_last(logits, idx))
        probs = ad.softmax(logits)
        gflat = ad.reshape(gates, (T * k,))
        out = None
        for e in range(c.total_experts):
            rows, slot = np.nonzero(idx == e)
            if rows.size == 0:
                continue
            self.expert_evals += rows.size
            y = self.expert_ffn(ad.take(h, rows, 0, unique=True), f"layers.{layer}.moe.experts.{e}")
            w = ad.take(gflat, rows * k + slot, 0, unique=True)
            contrib = ad.scatter_rows(ad.scale_rows(y, w), rows, T, unique=True)
            out = contrib if out is None else out + contrib
        rec = LayerRouting(
            layer=layer,
            indices=idx,
            weights=gates.data.copy(),
            logits=logits.data.copy(),
            positions=np.arange(T) if positions is None else np.asarray(positions),
            valid=np.ones(T, bool) if valid is None else np.asarray(valid, bool),
            probs=probs,
        )
        return out, rec

    def ffn_block(self, h, layer, positions, valid):
        flat = ad.reshape(h, (-1, h.shape[-1]))
        out, rec = self.moe_layer_forward(flat, layer, positions=positions, valid=valid)
        return ad.reshape(out, h.shape), rec


# ---------------------------------------------------------------- upcycling


def upcycle_from_dense(dense: DenseTransformer, total_experts: int, active_experts: int,
                       seed: int = 0, router_std: float = 0.02) -> MoETransformer:
    """Copy every dense FFN into each expert slot; new routers ~ N(0, router_std)."""
    cfg = ModelConfig.from_dict({**dense.config.to_dict(), "total_experts": total_experts,
                                 "active_experts": active_experts})
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    dp = dense.params
    for name in MoETransformer(cfg, params={}).param_shapes():
        if ".moe.router" in name:
            arr = rng.normal(0.0, router_std, (cfg.d_model, total_experts))
        elif ".moe.experts." in name:
            layer, rest = name.split(".moe.experts.")
            src = f"{layer}.ffn.{rest.split('.', 1)[1]}"
            arr = dp[src].data.copy()
        else:
            arr = dp[name].data.copy()
        params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dp["tok_emb"].data.dtype)
    freeze = {n: not MoETransformer.is_moe_param(n) for n in params}
    return MoETransformer(cfg, params=params, freeze_mask=freeze)


# ---------------------------------------------------------------- decoding


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool


def generate(model: DenseTransformer, prompt, max_new_tokens: int, n_votes: int = 1, eos_id: int | None = None,
             temperature: float = 0.0, seed: int = 0) -> list[Generation]:
    """Greedy (temperature 0) or seeded-sampling continuation of ``prompt``.

    Greedy decoding is deterministic, so all ``n_votes`` samples coincide and
    the continuation is decoded once.
    """
    prompt = [int(t) for t in prompt]
    if len(prompt) + max_new_tokens > model.config.max_seq_len:
        raise ValueError("prompt length + max_new_tokens exceeds max_seq_len")
    if n_votes < 1:
        raise ValueError("n_votes must be >= 1")
    rng = np.random.default_rng(seed)

    def decode_one() -> Generation:
        seq = list(prompt)
        out: list[int] = []
        with ad.no_grad():
            for _ in range(max_new_tokens):
                logits, _ = model.forward(seq)
                last = logits.data[-1].astype(np.float64)
                if temperature > 0:
                    z = last / temperature
                    p = np.exp(z - z.max())
                    nxt = int(rng.choice(p.size, p=p / p.sum()))
                else:
                    nxt = int(np.argmax(last))
                out.append(nxt)
                seq.append(nxt)
                if eos_id is not None and nxt == eos_id:
                    return Generation(out, truncated=False)
        return Generation(out, truncated=eos_id is not None)

    if temperature > 0:
        return [decode_one() for _ in range(n_votes)]
    g = decode_one()
    return [Generation(list(g.tokens), g.truncated) for _ in range(n_votes)]
