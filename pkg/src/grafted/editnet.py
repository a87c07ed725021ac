"""The structure-preserving editing network.

A pre-layer-norm transformer over the unified [instruction | source atoms |
target atoms] sequence.  Attention scores receive a structural bias: inside
the source block every layer sees a learned projection of the bond-state
embedding; inside the target block layer 0 sees the (possibly masked) target
bond embedding and deeper layers inherit the previous layer's post-softmax
attention; all cross-segment pairs get zero bias.  Three heads emit atom
logits, symmetrized bond logits, and instruction-token logits.

Parameters live in a flat ``{name: tensor}`` map and the forward pass is
functional, so autograd yields exact per-tensor gradients on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatch
from .molgraph import BondState
from .tokenizer import TokenSequence, Vocab


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    ffn: int = 512
    edge_embed: int = 32
    text_vocab: int = 64
    atom_vocab: int = 16
    edge_states: int = len(BondState)
    max_len: int = 192

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by the head count")
        for name in ("layers", "heads", "hidden", "ffn", "edge_embed", "text_vocab", "atom_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "edge_embed": self.edge_embed,
            "text_vocab": self.text_vocab,
            "atom_vocab": self.atom_vocab,
            "edge_states": self.edge_states,
            "max_len": self.max_len,
        }

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        return ModelConfig(**data)


Parameters = dict[str, torch.Tensor]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared shape of every parameter tensor."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "text_embed": (c.text_vocab, c.hidden),
        "atom_embed": (c.atom_vocab, c.hidden),
        "edge_embed": (c.edge_states, c.edge_embed),
        # Incident-bond summary added to each atom embedding: without it the
        # only path from revealed bond states into hidden states is the
        # scalar attention bias, which starves valence reasoning.
        "edge_input_embed": (c.edge_states, c.hidden),
        "pos_embed": (c.max_len, c.hidden),
        "seg_embed": (3, c.hidden),
        "ln_f.weight": (c.hidden,),
        "ln_f.bias": (c.hidden,),
        "node_head.w1": (c.hidden, c.hidden),
        "node_head.b1": (c.hidden,),
        "node_head.ln.weight": (c.hidden,),
        "node_head.ln.bias": (c.hidden,),
        "node_head.w2": (c.hidden, c.atom_vocab),
        "node_head.b2": (c.atom_vocab,),
        "edge_head.w1": (2 * c.hidden + 1, c.hidden),
        "edge_head.b1": (c.hidden,),
        "edge_head.w2": (c.hidden, c.edge_states),
        "edge_head.b2": (c.edge_states,),
        "text_head.w": (c.hidden, c.text_vocab),
        "text_head.b": (c.text_vocab,),
    }
    for l in range(c.layers):
        p = f"layers.{l}."
        shapes.update(
            {
                p + "ln1.weight": (c.hidden,),
                p + "ln1.bias": (c.hidden,),
                p + "ln2.weight": (c.hidden,),
                p + "ln2.bias": (c.hidden,),
                p + "attn.wq": (c.hidden, c.hidden),
                p + "attn.bq": (c.hidden,),
                p + "attn.wk": (c.hidden, c.hidden),
                p + "attn.bk": (c.hidden,),
                p + "attn.wv": (c.hidden, c.hidden),
                p + "attn.bv": (c.hidden,),
                p + "attn.wo": (c.hidden, c.hidden),
                p + "attn.bo": (c.hidden,),
                p + "ffn.w1": (c.hidden, c.ffn),
                p + "ffn.b1": (c.ffn,),
                p + "ffn.w2": (c.ffn, c.hidden),
                p + "ffn.b2": (c.hidden,),
                # Per-head scalar projections of edge embeddings (attention bias).
                p + "u_src": (c.heads, c.edge_embed),
                p + "u_tgt": (c.heads, c.edge_embed),
            }
        )
    return shapes


def init_params(
    config: ModelConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> Parameters:
    """Seeded initialization: weights N(0, 0.02), norms at one, biases zero."""
    gen = torch.Generator().manual_seed(seed)
    params: Parameters = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo", "text_head.b")):
            params[name] = torch.zeros(shape, dtype=dtype)
        elif name.endswith(".weight"):  # layer norms
            params[name] = torch.ones(shape, dtype=dtype)
        else:
            params[name] = torch.empty(shape, dtype=dtype).normal_(0.0, 0.02, generator=gen)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded tensors for a list of token sequences.

    Segments are block-aligned across the batch: text occupies columns
    [0, n_max), source atoms [n_max, n_max + k_max), target atoms the rest.
    Padding appends inside each block ([PAD], [PAD_ATOM], NONE edges) and is
    excluded from attention through the key mask.
    """

    text_ids: torch.Tensor  # (B, n_max) long
    src_ids: torch.Tensor  # (B, k_max) long
    tgt_ids: torch.Tensor  # (B, m_max) long
    src_edges: torch.Tensor  # (B, k_max, k_max) long
    tgt_edges: torch.Tensor  # (B, m_max, m_max) long
    n: torch.Tensor  # (B,) long
    k: torch.Tensor  # (B,) long
    m: torch.Tensor  # (B,) long

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.text_ids.shape[1], self.src_ids.shape[1], self.tgt_ids.shape[1]

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    def valid_mask(self) -> torch.Tensor:
        """(B, S) bool: True where the position holds a real token."""
        n_max, k_max, m_max = self.sizes
        ar_n = torch.arange(n_max).unsqueeze(0)
        ar_k = torch.arange(k_max).unsqueeze(0)
        ar_m = torch.arange(m_max).unsqueeze(0)
        return torch.cat(
            [
                ar_n < self.n.unsqueeze(1),
                ar_k < self.k.unsqueeze(1),
                ar_m < self.m.unsqueeze(1),
            ],
            dim=1,
        )


def make_batch(sequences: Sequence[TokenSequence], vocab: Vocab) -> Batch:
    """Pad a list of encoded samples into block-aligned tensors."""
    if not sequences:
        raise ValueError("cannot batch zero sequences")
    n_max = max(s.n for s in sequences)
    k_max = max(s.k for s in sequences)
    m_max = max(s.m for s in sequences)
    b = len(sequences)
    text_ids = torch.full((b, n_max), vocab.pad_id, dtype=torch.long)
    src_ids = torch.full((b, k_max), vocab.pad_atom_id, dtype=torch.long)
    tgt_ids = torch.full((b, m_max), vocab.pad_atom_id, dtype=torch.long)
    src_edges = torch.full((b, k_max, k_max), int(BondState.NONE), dtype=torch.long)
    tgt_edges = torch.full((b, m_max, m_max), int(BondState.NONE), dtype=torch.long)
    for i, s in enumerate(sequences):
        text_ids[i, : s.n] = torch.from_numpy(np.ascontiguousarray(s.text_ids))
        src_ids[i, : s.k] = torch.from_numpy(np.ascontiguousarray(s.src_ids))
        tgt_ids[i, : s.m] = torch.from_numpy(np.ascontiguousarray(s.tgt_ids))
        src_edges[i, : s.k, : s.k] = torch.from_numpy(s.src_edges.astype(np.int64))
        tgt_edges[i, : s.m, : s.m] = torch.from_numpy(s.tgt_edges.astype(np.int64))
    return Batch(
        text_ids=text_ids,
        src_ids=src_ids,
        tgt_ids=tgt_ids,
        src_edges=src_edges,
        tgt_edges=tgt_edges,
        n=torch.tensor([s.n for s in sequences], dtype=torch.long),
        k=torch.tensor([s.k for s in sequences], dtype=torch.long),
        m=torch.tensor([s.m for s in sequences], dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    node_logits: torch.Tensor  # (B, m_max, atom_vocab)
    edge_logits: torch.Tensor  # (B, m_max, m_max, edge_states), symmetrized
    text_logits: torch.Tensor  # (B, n_max, text_vocab)
    attentions: tuple[torch.Tensor, ...]  # L x (B, H, S, S) post-softmax
    biases: tuple[torch.Tensor, ...] = ()  # filled only when collect_bias=True


def _ln(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], w, b)


def forward(
    params: Parameters,
    batch: Batch,
    config: ModelConfig,
    collect_bias: bool = False,
) -> ForwardOutput:
    """Run the editing network over a padded batch."""
    n_max, k_max, m_max = batch.sizes
    seq_len = n_max + k_max + m_max
    if seq_len > config.max_len:
        raise ShapeMismatch(f"sequence length {seq_len} exceeds max_len {config.max_len}")
    if int(batch.text_ids.max()) >= config.text_vocab or int(batch.tgt_ids.max()) >= config.atom_vocab:
        raise ShapeMismatch("token id outside the configured vocabulary")
    dtype = params["text_embed"].dtype
    bsz = batch.batch_size
    h_cfg, d_k = config.heads, config.head_dim

    valid = batch.valid_mask()  # (B, S)
    src_lo, src_hi = n_max, n_max + k_max
    tgt_lo = n_max + k_max

    # Atom embeddings carry a summary of their currently visible bonds.
    edge_in = params["edge_input_embed"]
    k_valid = valid[:, src_lo:src_hi].to(dtype)  # (B, k)
    m_valid = valid[:, tgt_lo:].to(dtype)  # (B, m)
    src_bond_sum = torch.einsum("bijd,bj->bid", edge_in[batch.src_edges], k_valid)
    tgt_bond_sum = torch.einsum("bijd,bj->bid", edge_in[batch.tgt_edges], m_valid)
    h = torch.cat(
        [
            params["text_embed"][batch.text_ids],
            params["atom_embed"][batch.src_ids] + src_bond_sum,
            params["atom_embed"][batch.tgt_ids] + tgt_bond_sum,
        ],
        dim=1,
    )
    pos = torch.cat(
        [params["pos_embed"][:n_max], params["pos_embed"][:k_max], params["pos_embed"][:m_max]],
        dim=0,
    )
    seg = torch.cat(
        [
            params["seg_embed"][0].expand(n_max, -1),
            params["seg_embed"][1].expand(k_max, -1),
            params["seg_embed"][2].expand(m_max, -1),
        ],
        dim=0,
    )
    h = h + (pos + seg).unsqueeze(0)

    # Padding is excluded as attention keys; padded query rows still softmax
    # over the real keys, and their outputs are never read.
    key_mask = torch.where(valid, 0.0, float("-inf")).to(dtype)  # (B, S)
    attn_mask = key_mask.unsqueeze(1).unsqueeze(2)  # (B, 1, 1, S)

    src_edge_emb = params["edge_embed"][batch.src_edges]  # (B, k, k, d_e)
    tgt_edge_emb = params["edge_embed"][batch.tgt_edges]  # (B, m, m, d_e)

    attentions: list[torch.Tensor] = []
    collected_biases: list[torch.Tensor] = []
    prev_attn: torch.Tensor | None = None
    for l in range(config.layers):
        p = f"layers.{l}."
        x = _ln(h, params[p + "ln1.weight"], params[p + "ln1.bias"])
        q = (x @ params[p + "attn.wq"] + params[p + "attn.bq"]).view(bsz, seq_len, h_cfg, d_k)
        kk = (x @ params[p + "attn.wk"] + params[p + "attn.bk"]).view(bsz, seq_len, h_cfg, d_k)
        v = (x @ params[p + "attn.wv"] + params[p + "attn.bv"]).view(bsz, seq_len, h_cfg, d_k)
        scores = torch.einsum("bihd,bjhd->bhij", q, kk) / math.sqrt(d_k)

        src_bias = torch.einsum("bijd,hd->bhij", src_edge_emb, params[p + "u_src"])
        if l == 0:
            tgt_bias = torch.einsum("bijd,hd->bhij", tgt_edge_emb, params[p + "u_tgt"])
        else:
            assert prev_attn is not None
            tgt_bias = prev_attn[:, :, tgt_lo:, tgt_lo:]
        bias = F.pad(src_bias, (src_lo, m_max, src_lo, m_max)) + F.pad(
            tgt_bias, (tgt_lo, 0, tgt_lo, 0)
        )
        if collect_bias:
            collected_biases.append(bias.detach())

        attn = torch.softmax(scores + bias + attn_mask, dim=-1)  # (B, H, S, S)
        attentions.append(attn)
        prev_attn = attn

        ctx = torch.einsum("bhij,bjhd->bihd", attn, v).reshape(bsz, seq_len, config.hidden)
        h = h + ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]

        x = _ln(h, params[p + "ln2.weight"], params[p + "ln2.bias"])
        h = h + F.gelu(x @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]

    h = _ln(h, params["ln_f.weight"], params["ln_f.bias"])

    text_logits = h[:, :n_max] @ params["text_head.w"] + params["text_head.b"]

    h_tgt = h[:, tgt_lo:]
    z = F.gelu(h_tgt @ params["node_head.w1"] + params["node_head.b1"])
    z = _ln(z, params["node_head.ln.weight"], params["node_head.ln.bias"])
    node_logits = z @ params["node_head.w2"] + params["node_head.b2"]

    # Edge head: final hidden states of both endpoints plus the head-averaged
    # final-layer attention between them.
    attn_last = attentions[-1][:, :, tgt_lo:, tgt_lo:].mean(dim=1, keepdim=False)  # (B, m, m)
    hi = h_tgt.unsqueeze(2).expand(bsz, m_max, m_max, config.hidden)
    hj = h_tgt.unsqueeze(1).expand(bsz, m_max, m_max, config.hidden)
    pair = torch.cat([hi, hj, attn_last.unsqueeze(-1).to(dtype)], dim=-1)
    e = F.gelu(pair @ params["edge_head.w1"] + params["edge_head.b1"])
    edge_logits = e @ params["edge_head.w2"] + params["edge_head.b2"]
    edge_logits = 0.5 * (edge_logits + edge_logits.transpose(1, 2))

    return ForwardOutput(
        node_logits=node_logits,
        edge_logits=edge_logits,
        text_logits=text_logits,
        attentions=tuple(attentions),
        biases=tuple(collected_biases),
    )


def attention_bias(
    params: Parameters,
    layer: int,
    head: int,
    i: int,
    j: int,
    n: int,
    k: int,
    m: int,
    src_edges: np.ndarray,
    tgt_edges: np.ndarray,
    prev_attention: torch.Tensor | None,
) -> float:
    """Reference scalar form of the structural bias at one (layer, head, i, j).

    Positions are 0-based over the unpadded [text | source | target] layout.
    The vectorized forward pass must agree with this everywhere; tests compare
    the two.
    """
    src_lo, tgt_lo = n, n + k
    in_src = src_lo <= i < tgt_lo and src_lo <= j < tgt_lo
    in_tgt = tgt_lo <= i < n + k + m and tgt_lo <= j < n + k + m
    if in_src:
        state = int(src_edges[i - src_lo, j - src_lo])
        u = params[f"layers.{layer}.u_src"][head]
        return float(params["edge_embed"][state].to(torch.float64) @ u.to(torch.float64))
    if in_tgt and layer == 0:
        state = int(tgt_edges[i - tgt_lo, j - tgt_lo])
        u = params["layers.0.u_tgt"][head]
        return float(params["edge_embed"][state].to(torch.float64) @ u.to(torch.float64))
    if in_tgt and layer > 0:
        assert prev_attention is not None
        return float(prev_attention[head, i, j])
    return 0.0


def backward(
    params: Parameters,
    batch: Batch,
    config: ModelConfig,
    upstream: dict[str, torch.Tensor],
) -> Parameters:
    """Exact gradients of sum(head_logits * upstream) for the selected heads.

    ``upstream`` maps any subset of {"node", "edge", "text"} to tensors shaped
    like the corresponding logits.  Parameters that do not reach a selected
    head get zero gradients.
    """
    leaves = {name: t.detach().clone().requires_grad_(True) for name, t in params.items()}
    out = forward(leaves, batch, config)
    total = None
    for name, grad in upstream.items():
        logits = {"node": out.node_logits, "edge": out.edge_logits, "text": out.text_logits}[name]
        if logits.shape != grad.shape:
            raise ShapeMismatch(f"upstream grad for {name} has shape {tuple(grad.shape)}")
        term = (logits * grad).sum()
        total = term if total is None else total + term
    if total is None:
        return {name: torch.zeros_like(t) for name, t in params.items()}
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n]))
        for n, g in zip(names, grads)
    }


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

@dataclass
class EditModel:
    """Everything a sampler needs: weights, config, vocab, and size statistics.

    ``size_table`` is the empirical distribution of (target size - source
    size) in the training corpus; it drives target-size selection when the
    caller does not fix m.
    """

    config: ModelConfig
    params: Parameters
    vocab: Vocab
    size_table: dict[int, float] = field(default_factory=dict)

    def clone(self) -> "EditModel":
        return EditModel(
            config=self.config,
            params={k: v.detach().clone() for k, v in self.params.items()},
            vocab=self.vocab,
            size_table=dict(self.size_table),
        )
