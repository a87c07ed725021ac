"""Absorbing-mask diffusion over target graphs.

Forward corruption masks every atom and every (upper-triangle) bond
independently; with the per-step masking rate 1/(T - t + 1) the survival
probability after t steps telescopes to exactly (T - t)/T.  Reverse sampling
is x0-parameterized: the network proposes a clean graph, and each masked
entry is revealed to its proposal with the closed-form posterior probability
stride/t when jumping from step t to t - stride.  Revealed entries never
re-mask, so any stride that divides T reaches a fully concrete graph.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ResidualMask
from .molgraph import Atom, BondState, MolecularGraph
from .editnet import EditModel, ForwardOutput, forward, make_batch
from .tokenizer import AtomToken, TokenSequence, Vocab, encode_sample


@dataclass(frozen=True)
class Schedule:
    """Masking schedule beta(t) = 1/(T - t + 1) for t in 1..T."""

    total_steps: int = 2000

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.total_steps:
            raise DomainError(f"t={t} outside 1..{self.total_steps}")
        return 1.0 / (self.total_steps - t + 1)

    def alpha_bar(self, t: int) -> float:
        """Survival probability after t steps: (T - t)/T, exactly."""
        if not 0 <= t <= self.total_steps:
            raise DomainError(f"t={t} outside 0..{self.total_steps}")
        return (self.total_steps - t) / self.total_steps

    def alpha_bar_fraction(self, t: int) -> Fraction:
        if not 0 <= t <= self.total_steps:
            raise DomainError(f"t={t} outside 0..{self.total_steps}")
        return Fraction(self.total_steps - t, self.total_steps)


def reveal_prob(t: int, stride: int) -> float:
    """Posterior probability that a masked entry un-masks on the jump t -> t - stride.

    Bayes on the absorbing chain with alpha_bar(t) = (T - t)/T gives
    (alpha_bar(t - stride) - alpha_bar(t)) / (1 - alpha_bar(t)) = stride / t.
    """
    if stride < 1 or stride > t:
        raise DomainError(f"stride={stride} must lie in 1..t (t={t})")
    return stride / t


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process knobs: steps x stride must equal the schedule's T."""

    steps: int = 40
    stride: int = 50
    top_k: int = 15
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.stride < 1:
            raise ValueError("steps and stride must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def check_schedule(self, schedule: Schedule) -> None:
        if self.steps * self.stride != schedule.total_steps:
            raise DomainError(
                f"steps ({self.steps}) x stride ({self.stride}) must equal T ({schedule.total_steps})"
            )


@dataclass(frozen=True)
class NoisyTargetState:
    """Target graph at diffusion step t; None nodes and MASK edges are hidden."""

    node_states: tuple[AtomToken | None, ...]
    edge_states: np.ndarray  # int8, symmetric, NONE diagonal, MASK allowed
    t: int

    def __post_init__(self) -> None:
        edges = np.asarray(self.edge_states, dtype=np.int8)
        m = len(self.node_states)
        if edges.shape != (m, m):
            raise ValueError("edge state grid must be m x m")
        if not np.array_equal(edges, edges.T):
            raise ValueError("edge states must be symmetric")
        if np.any(np.diag(edges) != int(BondState.NONE)):
            raise ValueError("diagonal must be NONE")
        edges = edges.copy()
        edges.flags.writeable = False
        object.__setattr__(self, "edge_states", edges)
        object.__setattr__(self, "node_states", tuple(self.node_states))

    @property
    def m(self) -> int:
        return len(self.node_states)

    def masked_nodes(self) -> list[int]:
        return [i for i, s in enumerate(self.node_states) if s is None]

    def masked_edges(self) -> list[tuple[int, int]]:
        out = []
        for i in range(self.m):
            for j in range(i + 1, self.m):
                if self.edge_states[i, j] == int(BondState.MASK):
                    out.append((i, j))
        return out

    def num_masked(self) -> int:
        return len(self.masked_nodes()) + len(self.masked_edges())

    def is_clean(self) -> bool:
        return self.num_masked() == 0


def state_from_graph(target: MolecularGraph, t: int = 0) -> NoisyTargetState:
    tokens = tuple((a.element, a.formal_charge) for a in target.atoms)
    return NoisyTargetState(tokens, np.asarray(target.bonds, dtype=np.int8), t)


def fully_masked_state(m: int, t: int) -> NoisyTargetState:
    edges = np.full((m, m), int(BondState.MASK), dtype=np.int8)
    np.fill_diagonal(edges, int(BondState.NONE))
    return NoisyTargetState((None,) * m, edges, t)


def state_to_graph(state: NoisyTargetState) -> MolecularGraph:
    """Concretize a clean state; aromatic flags derive from AROMATIC bonds."""
    if not state.is_clean():
        raise ResidualMask(f"{state.num_masked()} masked entries remain at t={state.t}")
    edges = np.asarray(state.edge_states, dtype=np.int8)
    aromatic = (edges == int(BondState.AROMATIC)).any(axis=1)
    atoms = tuple(
        Atom(element, charge, aromatic=bool(aromatic[i]))
        for i, (element, charge) in enumerate(state.node_states)  # type: ignore[misc]
    )
    return MolecularGraph(atoms, edges)


def corrupt(
    target: MolecularGraph,
    t: int,
    schedule: Schedule,
    rng: np.random.Generator,
) -> NoisyTargetState:
    """Draw the t-step corruption marginal: each entry masks with probability t/T."""
    keep = schedule.alpha_bar(t)
    m = len(target)
    node_draws = rng.random(m)
    tokens = [
        ((a.element, a.formal_charge) if node_draws[i] < keep else None)
        for i, a in enumerate(target.atoms)
    ]
    edges = np.asarray(target.bonds, dtype=np.int8).copy()
    iu, ju = np.triu_indices(m, k=1)
    hit = rng.random(len(iu)) >= keep
    edges[iu[hit], ju[hit]] = int(BondState.MASK)
    edges[ju[hit], iu[hit]] = int(BondState.MASK)
    return NoisyTargetState(tuple(tokens), edges, t)


# ---------------------------------------------------------------------------
# x0 prediction
# ---------------------------------------------------------------------------

def node_class_mask(vocab: Vocab, atom_vocab: int) -> torch.Tensor:
    """Bool (atom_vocab,): True at concrete (element, charge) ids."""
    mask = torch.zeros(atom_vocab, dtype=torch.bool)
    for idx in vocab.real_atom_ids():
        mask[idx] = True
    return mask


def edge_class_mask() -> torch.Tensor:
    """Bool (6,): every bond state except MASK."""
    mask = torch.ones(len(BondState), dtype=torch.bool)
    mask[int(BondState.MASK)] = False
    return mask


def policy_log_probs(
    logits: torch.Tensor,
    allowed: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Log probabilities of the x0 sampling distribution (specials excluded)."""
    scaled = logits / temperature
    scaled = scaled.masked_fill(~allowed, float("-inf"))
    return F.log_softmax(scaled, dim=-1)


def _sample_categorical(
    log_probs: torch.Tensor,
    top_k: int,
    gen: torch.Generator,
) -> torch.Tensor:
    """Top-k-truncated draw per row of (N, C) log probabilities."""
    probs = log_probs.exp()
    k = min(top_k, probs.shape[-1])
    if k == 1:
        return probs.argmax(dim=-1)
    top_vals, top_idx = probs.topk(k, dim=-1)
    total = top_vals.sum(dim=-1, keepdim=True)
    # Rows that are fully -inf cannot occur: every class set is non-empty.
    draw = torch.multinomial(top_vals / total, 1, generator=gen).squeeze(-1)
    return top_idx.gather(-1, draw.unsqueeze(-1)).squeeze(-1)


def predict_x0(
    output: ForwardOutput,
    state: NoisyTargetState,
    vocab: Vocab,
    config: SamplerConfig,
    gen: torch.Generator,
    batch_index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Propose a clean graph: sampled ids at masked entries, current values elsewhere.

    Returns (node_ids (m,), edge_ids (m, m)) in vocabulary/id space.
    """
    m = state.m
    node_logits = output.node_logits[batch_index, :m]
    edge_logits = output.edge_logits[batch_index, :m, :m]
    allowed_nodes = node_class_mask(vocab, node_logits.shape[-1])
    allowed_edges = edge_class_mask()

    node_lp = policy_log_probs(node_logits, allowed_nodes, config.temperature)
    node_draw = _sample_categorical(node_lp, config.top_k, gen)
    node_ids = np.empty(m, dtype=np.int64)
    for i, token in enumerate(state.node_states):
        node_ids[i] = int(node_draw[i]) if token is None else vocab.atom_id(token)

    edge_ids = np.asarray(state.edge_states, dtype=np.int64).copy()
    masked = state.masked_edges()
    if masked:
        rows = torch.tensor([i for i, _ in masked])
        cols = torch.tensor([j for _, j in masked])
        edge_lp = policy_log_probs(edge_logits[rows, cols], allowed_edges, config.temperature)
        edge_draw = _sample_categorical(edge_lp, config.top_k, gen)
        for (i, j), value in zip(masked, edge_draw.tolist()):
            edge_ids[i, j] = edge_ids[j, i] = int(value)
    return node_ids, edge_ids


def reveal(
    state: NoisyTargetState,
    proposal_nodes: Sequence[AtomToken],
    proposal_edges: np.ndarray,
    stride: int,
    rng: np.random.Generator,
) -> NoisyTargetState:
    """Un-mask each hidden entry to its proposal with probability stride/t."""
    p = reveal_prob(state.t, stride)
    tokens = list(state.node_states)
    for i in state.masked_nodes():
        if rng.random() < p:
            tokens[i] = proposal_nodes[i]
    edges = np.asarray(state.edge_states, dtype=np.int8).copy()
    for i, j in state.masked_edges():
        if rng.random() < p:
            edges[i, j] = edges[j, i] = np.int8(proposal_edges[i, j])
    return NoisyTargetState(tuple(tokens), edges, state.t - stride)


ProposalFn = Callable[[NoisyTargetState], tuple[Sequence[AtomToken], np.ndarray]]


def reverse_trajectory(
    propose: ProposalFn,
    m: int,
    schedule: Schedule,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> NoisyTargetState:
    """Run the full reverse chain from t=T with an arbitrary proposal source."""
    config.check_schedule(schedule)
    state = fully_masked_state(m, schedule.total_steps)
    while state.t > 0:
        nodes, edges = propose(state)
        state = reveal(state, nodes, edges, config.stride, rng)
    return state


# ---------------------------------------------------------------------------
# Model-driven sampling
# ---------------------------------------------------------------------------

def _model_forward_states(
    model: EditModel,
    instructions: Sequence[str],
    sources: Sequence[MolecularGraph],
    states: Sequence[NoisyTargetState],
) -> ForwardOutput:
    seqs = [
        encode_sample(instr, src, st, model.vocab)
        for instr, src, st in zip(instructions, sources, states)
    ]
    batch = make_batch(seqs, model.vocab)
    return forward(model.params, batch, model.config)


def denoise_step(
    model: EditModel,
    instruction: str,
    src: MolecularGraph,
    state: NoisyTargetState,
    stride: int,
    config: SamplerConfig,
    gen: torch.Generator,
    rng: np.random.Generator,
) -> NoisyTargetState:
    """One reverse jump t -> t - stride for a single prompt."""
    if state.is_clean():
        return replace(state, t=max(0, state.t - stride))
    with torch.no_grad():
        output = _model_forward_states(model, [instruction], [src], [state])
    node_ids, edge_ids = predict_x0(output, state, model.vocab, config, gen)
    table = model.vocab.atom_ids_reversed()
    tokens = [table[int(idx)] for idx in node_ids]
    return reveal(state, tokens, edge_ids, stride, rng)


def draw_target_size(k: int, size_table: dict[int, float], rng: np.random.Generator) -> int:
    """Sample m = k + delta from the stored size-shift distribution."""
    if not size_table:
        return k
    deltas = sorted(size_table)
    weights = np.array([size_table[d] for d in deltas], dtype=np.float64)
    weights = weights / weights.sum()
    delta = int(rng.choice(deltas, p=weights))
    return max(1, k + delta)


@dataclass
class SampleTrace:
    """States visited at each update time t (descending), plus the final graph ids."""

    states: list[NoisyTargetState]
    final_nodes: np.ndarray
    final_edges: np.ndarray


def sample_batch(
    model: EditModel,
    instructions: Sequence[str],
    sources: Sequence[MolecularGraph],
    sizes: Sequence[int | None],
    config: SamplerConfig,
    schedule: Schedule,
    seed: int,
    record: bool = False,
) -> tuple[list[MolecularGraph], list[SampleTrace]]:
    """Sample one edited molecule per prompt, all prompts advanced in lockstep."""
    config.check_schedule(schedule)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    states = []
    for src, m in zip(sources, sizes):
        m_eff = m if m is not None else draw_target_size(len(src), model.size_table, rng)
        states.append(fully_masked_state(max(1, m_eff), schedule.total_steps))
    traces = [SampleTrace([], np.empty(0), np.empty(0)) for _ in states]

    for step in range(config.steps):
        t = schedule.total_steps - step * config.stride
        if record:
            for trace, state in zip(traces, states):
                trace.states.append(state)
        with torch.no_grad():
            output = _model_forward_states(model, instructions, sources, states)
        new_states = []
        table = model.vocab.atom_ids_reversed()
        for idx, state in enumerate(states):
            node_ids, edge_ids = predict_x0(output, state, model.vocab, config, gen, batch_index=idx)
            tokens = [table[int(v)] for v in node_ids]
            new_states.append(reveal(state, tokens, edge_ids, config.stride, rng))
        states = new_states

    graphs = []
    for trace, state in zip(traces, states):
        graph = state_to_graph(state)
        graphs.append(graph)
        if record:
            trace.final_nodes = np.array(
                [model.vocab.atom_id(tok) for tok in state.node_states], dtype=np.int64
            )
            trace.final_edges = np.asarray(state.edge_states, dtype=np.int64).copy()
    return graphs, traces


def sample(
    model: EditModel,
    instruction: str,
    src: MolecularGraph,
    m: int | None,
    config: SamplerConfig,
    schedule: Schedule | None = None,
) -> MolecularGraph:
    """Generate one edited molecule; m=None draws the size from the model's table."""
    schedule = schedule or Schedule(config.steps * config.stride)
    graphs, _ = sample_batch(
        model, [instruction], [src], [m], config, schedule, seed=config.seed
    )
    return graphs[0]


# ---------------------------------------------------------------------------
# Pretraining objective
# ---------------------------------------------------------------------------

def _target_positions_ce(
    output: ForwardOutput,
    batch_tgt_ids: torch.Tensor,
    batch_tgt_edges: torch.Tensor,
    batch_text_ids: torch.Tensor,
    lengths: tuple[torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Summed CE terms (node, edge, text) over the full vocabularies."""
    n_len, m_len = lengths
    bsz, m_max, _ = output.node_logits.shape
    # Sums accumulate in 64-bit; storage and matmuls stay 32-bit.
    node_lp = F.log_softmax(output.node_logits, dim=-1)
    node_mask = torch.arange(m_max).unsqueeze(0) < m_len.unsqueeze(1)
    node_ce = -(node_lp.gather(-1, batch_tgt_ids.unsqueeze(-1)).squeeze(-1))[node_mask].double().sum()

    edge_lp = F.log_softmax(output.edge_logits, dim=-1)
    tri = torch.triu(torch.ones(m_max, m_max, dtype=torch.bool), diagonal=1)
    pair_mask = node_mask.unsqueeze(2) & node_mask.unsqueeze(1) & tri.unsqueeze(0)
    edge_ce = -(edge_lp.gather(-1, batch_tgt_edges.unsqueeze(-1)).squeeze(-1))[pair_mask].double().sum()

    n_max = output.text_logits.shape[1]
    text_lp = F.log_softmax(output.text_logits, dim=-1)
    text_mask = torch.arange(n_max).unsqueeze(0) < n_len.unsqueeze(1)
    text_ce = -(text_lp.gather(-1, batch_text_ids.unsqueeze(-1)).squeeze(-1))[text_mask].double().sum()
    return node_ce, edge_ce, text_ce


def pretrain_loss(
    model: EditModel,
    samples: Sequence,
    schedule: Schedule,
    rng: np.random.Generator,
    compute_grads: bool = True,
) -> tuple[float, dict[str, torch.Tensor], dict[str, float]]:
    """Masked-reconstruction objective over one batch.

    Per sample: draw t uniformly in 1..T, corrupt the target, run the network
    on (instruction, source, noisy target), and sum cross-entropies over all
    target atoms, all upper-triangle target bonds, and all instruction tokens.
    Returns (mean loss, gradient map, diagnostics).
    """
    if not samples:
        raise ValueError("empty batch")
    instructions, sources, clean_states, noisy_states = [], [], [], []
    for sample_ in samples:
        src = sample_.source_graph()
        tgt = sample_.target_graph()
        t = int(rng.integers(1, schedule.total_steps + 1))
        instructions.append(sample_.instruction)
        sources.append(src)
        clean_states.append(state_from_graph(tgt))
        noisy_states.append(corrupt(tgt, t, schedule, rng))

    vocab = model.vocab
    seqs = [
        encode_sample(instr, src, st, vocab)
        for instr, src, st in zip(instructions, sources, noisy_states)
    ]
    batch = make_batch(seqs, vocab)
    clean_seqs = [
        encode_sample(instr, src, st, vocab)
        for instr, src, st in zip(instructions, sources, clean_states)
    ]
    clean_batch = make_batch(clean_seqs, vocab)

    leaves = {k: v.detach().clone().requires_grad_(compute_grads) for k, v in model.params.items()}
    output = forward(leaves, batch, model.config)
    node_ce, edge_ce, text_ce = _target_positions_ce(
        output,
        clean_batch.tgt_ids,
        clean_batch.tgt_edges,
        batch.text_ids,
        (batch.n, batch.m),
    )
    loss = (node_ce + edge_ce + text_ce) / len(samples)
    diagnostics = {
        "node_ce": float(node_ce.detach()) / len(samples),
        "edge_ce": float(edge_ce.detach()) / len(samples),
        "text_ce": float(text_ce.detach()) / len(samples),
    }
    if not compute_grads:
        return float(loss.detach()), {}, diagnostics
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    grad_map = {
        n: (g.detach() if g is not None else torch.zeros_like(model.params[n]))
        for n, g in zip(names, grads)
    }
    return float(loss.detach()), grad_map, diagnostics
