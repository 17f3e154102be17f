"""A compact decoder-only transformer partitioned into client and server halves.

Each block is RMSNorm -> causal multi-head attention -> residual, then
RMSNorm -> SwiGLU feed-forward -> residual. The first block also owns a
learned additive position table so that ``client_forward`` with zero client
blocks is the identity on the token embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from ..core import Rng, Tensor
from ..core import tensor as T

LAYER_KINDS = (
    "rmsnorm-1", "query-proj", "key-proj", "value-proj", "output-proj",
    "rmsnorm-2", "up-proj", "gate-proj", "activation", "down-proj",
)
# rectangular maps: bypassing any of them removes the whole feed-forward branch
FFN_KINDS = ("up-proj", "gate-proj", "down-proj")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    hidden_dim: int = 32
    num_blocks: int = 6
    split_point: int = 1
    num_heads: int = 4
    ffn_dim: int = 64
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        for name in ("hidden_dim", "num_blocks", "num_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.split_point < self.num_blocks:
            raise ValueError(f"split_point must be in [0, {self.num_blocks})")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LayerRef:
    block_index: int
    layer_kind: str

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")

    def __str__(self) -> str:
        return f"b{self.block_index}.{self.layer_kind}"


def silu(x: Tensor) -> Tensor:
    """The sigmoid-weighted gate nonlinearity of SwiGLU: x * sigmoid(x)."""
    return T.mul(x, T.sigmoid(x))


@dataclass(frozen=True)
class Block:
    norm1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2: Tensor
    w_up: Tensor
    w_gate: Tensor
    w_down: Tensor
    pos: Optional[Tensor] = None
    bypassed: frozenset = field(default_factory=frozenset)

    PARAMS = ("norm1", "wq", "wk", "wv", "wo", "norm2", "w_up", "w_gate", "w_down", "pos")

    def _proj(self, kind: str, x: Tensor, w: Tensor) -> Tensor:
        return x if kind in self.bypassed else T.matmul(x, w)

    def forward(self, x: Tensor, num_heads: int, trace: Optional[dict] = None) -> Tensor:
        """Apply the block to ``(..., L, D)``.

        When ``trace`` is a dict it receives ``(input, output)`` pairs for
        every sub-layer, keyed by layer kind.
        """
        by = self.bypassed
        L, D = x.shape[-2], x.shape[-1]
        lead = x.shape[:-2]
        if self.pos is not None:
            if L > self.pos.shape[0]:
                raise ValueError(f"sequence length {L} exceeds max_seq_len {self.pos.shape[0]}")
            x = T.add(x, T.take_rows(self.pos, np.arange(L)))

        def rec(kind, inp, out):
            if trace is not None:
                trace[kind] = (inp, out)
            return out

        a = rec("rmsnorm-1", x, x if "rmsnorm-1" in by else T.rms_norm(x, self.norm1))
        q = rec("query-proj", a, self._proj("query-proj", a, self.wq))
        k = rec("key-proj", a, self._proj("key-proj", a, self.wk))
        v = rec("value-proj", a, self._proj("value-proj", a, self.wv))
        hd = D // num_heads

        def heads(t):
            return T.transpose(T.reshape(t, lead + (L, num_heads, hd)),
                               tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2)))

        qh, kh, vh = heads(q), heads(k), heads(v)
        nl = len(lead)
        kt = T.transpose(kh, tuple(range(nl)) + (nl, nl + 2, nl + 1))
        scores = T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(hd))
        att = T.matmul(T.causal_softmax(scores), vh)
        att = T.reshape(T.transpose(att, tuple(range(nl)) + (nl + 1, nl, nl + 2)), lead + (L, D))
        o = rec("output-proj", att, self._proj("output-proj", att, self.wo))
        x = T.add(x, o)

        b = rec("rmsnorm-2", x, x if "rmsnorm-2" in by else T.rms_norm(x, self.norm2))
        if by.intersection(FFN_KINDS):
            return x
        up = rec("up-proj", b, T.matmul(b, self.w_up))
        gate = rec("gate-proj", b, T.matmul(b, self.w_gate))
        act = rec("activation", gate, gate if "activation" in by else silu(gate))
        hidden = T.mul(act, up)
        down = rec("down-proj", hidden, T.matmul(hidden, self.w_down))
        return T.add(x, down)

    def sublayer(self, kind: str, z: Tensor) -> Tensor:
        """The isolated map of one sub-layer (ignores bypass flags)."""
        if kind == "rmsnorm-1":
            return T.rms_norm(z, self.norm1)
        if kind == "rmsnorm-2":
            return T.rms_norm(z, self.norm2)
        if kind == "activation":
            return silu(z)
        w = {"query-proj": self.wq, "key-proj": self.wk, "value-proj": self.wv,
             "output-proj": self.wo, "up-proj": self.w_up, "gate-proj": self.w_gate,
             "down-proj": self.w_down}[kind]
        return T.matmul(z, w)


@dataclass(frozen=True)
class SplitModel:
    config: ModelConfig
    embedding: Tensor
    blocks: tuple
    out_proj: Tensor

    @property
    def client_blocks(self) -> tuple:
        return self.blocks[:self.config.split_point]

    @property
    def server_blocks(self) -> tuple:
        return self.blocks[self.config.split_point:]

    def with_split(self, split_point: int) -> "SplitModel":
        return replace(self, config=replace(self.config, split_point=split_point))

    # ---------------------------------------------------------- forward
    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq_len")
        return T.take_rows(self.embedding, ids)

    def _run(self, blocks, h: Tensor) -> Tensor:
        if h.shape[-1] != self.config.hidden_dim:
            raise ValueError(f"hidden state has width {h.shape[-1]}, expected {self.config.hidden_dim}")
        for blk in blocks:
            h = blk.forward(h, self.config.num_heads)
        return h

    def client_forward(self, h0) -> Tensor:
        return self._run(self.client_blocks, T.as_tensor(h0))

    def server_forward(self, h) -> Tensor:
        h = self._run(self.server_blocks, T.as_tensor(h))
        return T.matmul(h, self.out_proj)

    def forward(self, ids) -> Tensor:
        """Unsplit reference forward, token ids to logits."""
        h = self._run(self.blocks, self.embed(ids))
        return T.matmul(h, self.out_proj)

    # ----------------------------------------------------- sub-layers
    def layer_input(self, layer: LayerRef, h0) -> Tensor:
        """Input of ``layer`` when the network runs on embeddings ``h0``."""
        self._check_layer(layer)
        h = T.as_tensor(h0)
        for blk in self.blocks[:layer.block_index]:
            h = blk.forward(h, self.config.num_heads)
        trace: dict = {}
        self.blocks[layer.block_index].forward(h, self.config.num_heads, trace=trace)
        if layer.layer_kind not in trace:
            raise ValueError(f"{layer} is inactive in this (bypassed) block")
        return trace[layer.layer_kind][0]

    def layer_forward(self, layer: LayerRef, z) -> Tensor:
        self._check_layer(layer)
        return self.blocks[layer.block_index].sublayer(layer.layer_kind, T.as_tensor(z))

    def _check_layer(self, layer: LayerRef):
        if not 0 <= layer.block_index < len(self.blocks):
            raise ValueError(f"block index {layer.block_index} out of range")

    def client_layers(self) -> list:
        return [LayerRef(b, k) for b in range(self.config.split_point) for k in LAYER_KINDS]

    def bypass(self, layer: LayerRef) -> "SplitModel":
        """Copy of the model with ``layer`` acting as the identity.

        Rectangular feed-forward projections cannot be identities; bypassing
        one of them drops the feed-forward branch so only the residual passes.
        """
        if not 0 <= layer.block_index < self.config.split_point:
            raise ValueError(f"{layer} is not in the client submodel")
        blk = self.blocks[layer.block_index]
        new = replace(blk, bypassed=blk.bypassed | {layer.layer_kind})
        blocks = self.blocks[:layer.block_index] + (new,) + self.blocks[layer.block_index + 1:]
        return replace(self, blocks=blocks)

    # ----------------------------------------------------- parameters
    def parameters(self) -> dict:
        out = {"embedding": self.embedding, "out_proj": self.out_proj}
        for i, blk in enumerate(self.blocks):
            for name in Block.PARAMS:
                t = getattr(blk, name)
                if t is not None:
                    out[f"blocks.{i}.{name}"] = t
        return out

    def with_parameters(self, params: dict) -> "SplitModel":
        def get(name):
            return T.as_tensor(params[name])

        blocks = []
        for i, blk in enumerate(self.blocks):
            kw = {n: get(f"blocks.{i}.{n}") for n in Block.PARAMS if f"blocks.{i}.{n}" in params}
            blocks.append(replace(blk, **kw))
        return replace(self, embedding=get("embedding"), out_proj=get("out_proj"), blocks=tuple(blocks))


def init_model(config: ModelConfig) -> SplitModel:
    """Gaussian init with standard deviation 1/sqrt(D); unit norm gains."""
    rng = Rng(config.seed)
    D, F, V = config.hidden_dim, config.ffn_dim, config.vocab_size
    s = 1.0 / math.sqrt(D)

    def w(*shape):
        return Tensor(rng.normal(size=shape, scale=s))

    blocks = []
    for i in range(config.num_blocks):
        blocks.append(Block(
            norm1=Tensor(np.ones(D)), wq=w(D, D), wk=w(D, D), wv=w(D, D), wo=w(D, D),
            norm2=Tensor(np.ones(D)), w_up=w(D, F), w_gate=w(D, F), w_down=w(F, D),
            pos=w(config.max_seq_len, D) if i == 0 else None,
        ))
    emb = w(V, D)
    out = w(D, V)
    return SplitModel(config=config, embedding=emb, blocks=tuple(blocks), out_proj=out)
