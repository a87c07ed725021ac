"""Shared fixtures-in-plain-code for the test suite."""

from __future__ import annotations

import numpy as np
import torch

from grafted.dataset import EditSample
from grafted.editnet import EditModel, ModelConfig, init_params
from grafted.tokenizer import build_vocab

HBA_UP = "Add more hydrogen bond acceptors to this molecule [SMILE]."
MW_UP = "Help me increase the molecular weight of this molecule [SMILE]."


def tiny_corpus() -> list[EditSample]:
    return [EditSample(HBA_UP, "CC", "CCO"), EditSample(HBA_UP, "CCO", "OCCO")]


def build_tiny_model(
    hidden: int = 16,
    layers: int = 1,
    heads: int = 1,
    edge_embed: int = 8,
    dtype: torch.dtype = torch.float32,
    seed: int = 0,
    max_len: int = 48,
) -> tuple[EditModel, list[EditSample]]:
    samples = tiny_corpus()
    vocab = build_vocab(samples)
    config = ModelConfig(
        layers=layers,
        heads=heads,
        hidden=hidden,
        ffn=hidden * 2,
        edge_embed=edge_embed,
        text_vocab=vocab.text_size,
        atom_vocab=vocab.atom_size,
        max_len=max_len,
    )
    model = EditModel(config, init_params(config, seed, dtype=dtype), vocab, {1: 1.0})
    return model, samples


def relative_error(analytic: torch.Tensor, numeric: float, floor: float = 1.0) -> float:
    """|a - f| / max(|a|, |f|, floor): relative for large grads, absolute near zero."""
    a = float(analytic)
    return abs(a - numeric) / max(abs(a), abs(numeric), floor)


def permute_graph(graph, perm):
    import numpy as np

    from grafted.molgraph import MolecularGraph

    inv = {p: i for i, p in enumerate(perm)}
    bonds = np.zeros((len(graph), len(graph)), dtype=np.int8)
    for i, j, s in graph.edge_list():
        bonds[inv[i], inv[j]] = bonds[inv[j], inv[i]] = int(s)
    return MolecularGraph(tuple(graph.atoms[p] for p in perm), bonds)
