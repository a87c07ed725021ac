"""Editing-aware reinforcement-learning fine-tuning.

Rollouts run the strided reverse process under the current policy, recording
the noisy state at every update time t in T = {t_s, 2*t_s, ..., T}.  The
terminal reward (0 / 0.2 / 1.0) is batch-normalized into advantages, and the
update minimizes

    mean_r [ A_r * sum_{t in T} CE(final atoms/bonds | G^t) ]
        + beta * mean_r sum_{t in T} KL(policy x0 || reference x0 | G^t)

with cross-entropies taken only at entries still masked in G^t (unmasked
entries carry no decision at that step).  Three strategies share the
machinery: FULL_KL (the default above), STEPWISE (per-transition REINFORCE:
CE only at entries revealed by that jump), and FINAL_ONLY (CE and KL at the
smallest t only).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import (
    NoisyTargetState,
    SamplerConfig,
    Schedule,
    edge_class_mask,
    node_class_mask,
    policy_log_probs,
    sample_batch,
)
from .editnet import EditModel, forward, make_batch
from .errors import DomainError
from .molgraph import BondState, MolecularGraph, check_validity
from .oracles import RewardSpec, reward as compute_reward
from .tokenizer import encode_sample
from .trainer import OptimizerState, clip_gradients, optimizer_step


class Strategy(Enum):
    FULL_KL = "full_kl"
    STEPWISE = "stepwise"
    FINAL_ONLY = "final_only"


def update_times(total_steps: int, stride: int) -> list[int]:
    """The update set: every t in 1..T with t mod stride == 0, descending."""
    if total_steps % stride != 0:
        raise DomainError(f"stride {stride} must divide T={total_steps}")
    return list(range(total_steps, 0, -stride))


@dataclass(frozen=True)
class Prompt:
    instruction: str
    src: MolecularGraph
    reward_spec: RewardSpec
    m: int | None = None  # None: draw the size from the model's table


@dataclass
class Rollout:
    """One sampled trajectory with everything the update step needs."""

    prompt: Prompt
    states: list[NoisyTargetState]  # at each t in update_times, descending
    final_nodes: np.ndarray  # atom ids, (m,)
    final_edges: np.ndarray  # edge ids, (m, m)
    final_graph: MolecularGraph
    reward: float
    advantage: float = 0.0

    @property
    def step_rewards(self) -> list[float]:
        """Rewards along the trajectory: zero everywhere except the last step."""
        return [0.0] * (len(self.states) - 1) + [self.reward]


@dataclass(frozen=True)
class FinetuneConfig:
    beta_kl: float = 0.01
    group_size: int = 8
    stride: int = 50
    lr: float = 1e-4
    updates: int = 200
    seed: int = 0
    diffusion_steps: int = 2000
    top_k: int = 15
    temperature: float = 1.0
    prompts_per_update: int = 2
    grad_clip: float = 1.0
    forward_chunk: int = 128

    def __post_init__(self) -> None:
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")
        if self.diffusion_steps % self.stride != 0:
            raise ValueError("stride must divide the diffusion step count")

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(
            steps=self.diffusion_steps // self.stride,
            stride=self.stride,
            top_k=self.top_k,
            temperature=self.temperature,
            seed=seed,
        )


def normalize_advantages(rewards: Sequence[float]) -> list[float]:
    """(r - mean) / (population std + 1e-6)."""
    if not rewards:
        raise ValueError("empty reward list")
    arr = np.asarray(rewards, dtype=np.float64)
    return list((arr - arr.mean()) / (arr.std() + 1e-6))


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

def collect_rollouts(
    policy: EditModel,
    prompts: Sequence[Prompt],
    group_size: int,
    sampler: SamplerConfig,
    schedule: Schedule,
    seed: int,
) -> list[Rollout]:
    """Sample ``group_size`` trajectories per prompt and score the endpoints."""
    expanded: list[Prompt] = [p for p in prompts for _ in range(group_size)]
    graphs, traces = sample_batch(
        policy,
        [p.instruction for p in expanded],
        [p.src for p in expanded],
        [p.m for p in expanded],
        sampler,
        schedule,
        seed=seed,
        record=True,
    )
    rollouts = []
    for prompt, graph, trace in zip(expanded, graphs, traces):
        r = compute_reward(prompt.reward_spec, prompt.src, graph)
        rollouts.append(
            Rollout(
                prompt=prompt,
                states=trace.states,
                final_nodes=trace.final_nodes,
                final_edges=trace.final_edges,
                final_graph=graph,
                reward=r,
            )
        )
    return rollouts


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------

@dataclass
class _Unit:
    """(rollout, stored state) pair flattened for batched forwards."""

    rollout_idx: int
    state: NoisyTargetState
    next_state: NoisyTargetState | None  # state after the jump (STEPWISE needs it)
    is_last: bool


def _units_of(rollouts: Sequence[Rollout]) -> list[_Unit]:
    units = []
    for r_idx, rollout in enumerate(rollouts):
        for s_idx, state in enumerate(rollout.states):
            nxt = rollout.states[s_idx + 1] if s_idx + 1 < len(rollout.states) else None
            units.append(_Unit(r_idx, state, nxt, s_idx == len(rollout.states) - 1))
    return units


def _ce_positions(unit: _Unit, strategy: Strategy, smallest_t: int) -> tuple[list[int], list[tuple[int, int]]]:
    """Which entries the CE covers at this stored state under each strategy."""
    state = unit.state
    if strategy == Strategy.FINAL_ONLY and state.t != smallest_t:
        return [], []
    nodes = state.masked_nodes()
    edges = state.masked_edges()
    if strategy == Strategy.STEPWISE:
        if unit.next_state is None:
            return nodes, edges  # final jump reveals everything still hidden
        nxt = unit.next_state
        nodes = [i for i in nodes if nxt.node_states[i] is not None]
        edges = [(i, j) for i, j in edges if nxt.edge_states[i, j] != int(BondState.MASK)]
    return nodes, edges


def finetune_loss(
    policy: EditModel,
    reference: EditModel,
    rollouts: Sequence[Rollout],
    config: FinetuneConfig,
    strategy: Strategy = Strategy.FULL_KL,
) -> tuple[torch.Tensor, dict[str, torch.Tensor], dict[str, float]]:
    """Build the KL-regularized reward-weighted CE loss over a rollout batch.

    Returns (scalar loss with graph, leaf parameter map, diagnostics).
    """
    vocab = policy.vocab
    units = _units_of(rollouts)
    smallest_t = min(u.state.t for u in units) if units else 0
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in policy.params.items()}

    node_allowed = node_class_mask(vocab, policy.config.atom_vocab)
    edge_allowed = edge_class_mask()

    total_ce = None
    total_kl = None
    kl_values = 0.0
    n_states = 0

    for start in range(0, len(units), config.forward_chunk):
        chunk = units[start : start + config.forward_chunk]
        seqs = [
            encode_sample(
                rollouts[u.rollout_idx].prompt.instruction,
                rollouts[u.rollout_idx].prompt.src,
                u.state,
                vocab,
            )
            for u in chunk
        ]
        batch = make_batch(seqs, vocab)
        out_policy = forward(leaves, batch, policy.config)
        if config.beta_kl > 0:
            with torch.no_grad():
                out_ref = forward(reference.params, batch, reference.config)

        node_lp = policy_log_probs(out_policy.node_logits, node_allowed, config.temperature)
        edge_lp = policy_log_probs(out_policy.edge_logits, edge_allowed, config.temperature)

        for b_idx, u in enumerate(chunk):
            rollout = rollouts[u.rollout_idx]
            adv = rollout.advantage
            nodes, edges = _ce_positions(u, strategy, smallest_t)
            ce = None
            if nodes:
                ids = torch.tensor([int(rollout.final_nodes[i]) for i in nodes])
                rows = torch.tensor(nodes)
                ce = -(node_lp[b_idx, rows, :].gather(1, ids.unsqueeze(1)).double().sum())
            if edges:
                rows = torch.tensor([i for i, _ in edges])
                cols = torch.tensor([j for _, j in edges])
                ids = torch.tensor([int(rollout.final_edges[i, j]) for i, j in edges])
                edge_ce = -(edge_lp[b_idx, rows, cols, :].gather(1, ids.unsqueeze(1)).double().sum())
                ce = edge_ce if ce is None else ce + edge_ce
            if ce is not None and adv != 0.0:
                term = adv * ce
                total_ce = term if total_ce is None else total_ce + term

            if config.beta_kl > 0 and (strategy != Strategy.FINAL_ONLY or u.state.t == smallest_t):
                kl = _state_kl(
                    node_lp[b_idx],
                    edge_lp[b_idx],
                    out_ref.node_logits[b_idx],
                    out_ref.edge_logits[b_idx],
                    u.state,
                    node_allowed,
                    edge_allowed,
                    config.temperature,
                )
                kl_values += float(kl.detach())
                n_states += 1
                total_kl = kl if total_kl is None else total_kl + kl

    n = max(1, len(rollouts))
    zero = torch.zeros((), dtype=torch.float64)
    loss = (total_ce if total_ce is not None else zero) / n
    if total_kl is not None:
        loss = loss + config.beta_kl * total_kl / n
    diagnostics = {
        "mean_reward": float(np.mean([r.reward for r in rollouts])) if rollouts else 0.0,
        "mean_kl": kl_values / n_states if n_states else 0.0,
        "validity": float(
            np.mean([1.0 if check_validity(r.final_graph).valid else 0.0 for r in rollouts])
        )
        if rollouts
        else 0.0,
    }
    return loss, leaves, diagnostics


def _state_kl(
    node_lp_policy: torch.Tensor,
    edge_lp_policy: torch.Tensor,
    node_logits_ref: torch.Tensor,
    edge_logits_ref: torch.Tensor,
    state: NoisyTargetState,
    node_allowed: torch.Tensor,
    edge_allowed: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Sum of categorical KLs over this state's masked entries (x0 factorization)."""
    node_ids = torch.nonzero(node_allowed).squeeze(-1)
    edge_ids = torch.nonzero(edge_allowed).squeeze(-1)
    # 64-bit accumulation keeps KL non-negative to ~1e-16 even in f32 models.
    total = None
    masked_nodes = state.masked_nodes()
    if masked_nodes:
        rows = torch.tensor(masked_nodes)
        lp_p = node_lp_policy[rows][:, node_ids].double()
        lp_r = policy_log_probs(node_logits_ref[rows], node_allowed, temperature)[:, node_ids].double()
        total = (lp_p.exp() * (lp_p - lp_r)).sum()
    masked_edges = state.masked_edges()
    if masked_edges:
        rows = torch.tensor([i for i, _ in masked_edges])
        cols = torch.tensor([j for _, j in masked_edges])
        lp_p = edge_lp_policy[rows, cols][:, edge_ids].double()
        lp_r = policy_log_probs(edge_logits_ref[rows, cols], edge_allowed, temperature)[:, edge_ids].double()
        term = (lp_p.exp() * (lp_p - lp_r)).sum()
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total


def kl_term(
    policy: EditModel,
    reference: EditModel,
    state: NoisyTargetState,
    prompt: Prompt,
    temperature: float = 1.0,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Factorized KL(policy x0 || reference x0) at one stored state, with gradients.

    Gradient flows only through the policy; the reference stays frozen.
    """
    vocab = policy.vocab
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in policy.params.items()}
    seq = encode_sample(prompt.instruction, prompt.src, state, vocab)
    batch = make_batch([seq], vocab)
    out_p = forward(leaves, batch, policy.config)
    with torch.no_grad():
        out_r = forward(reference.params, batch, reference.config)
    node_allowed = node_class_mask(vocab, policy.config.atom_vocab)
    edge_allowed = edge_class_mask()
    node_lp = policy_log_probs(out_p.node_logits[0], node_allowed, temperature)
    edge_lp = policy_log_probs(out_p.edge_logits[0], edge_allowed, temperature)
    kl = _state_kl(
        node_lp,
        edge_lp,
        out_r.node_logits[0],
        out_r.edge_logits[0],
        state,
        node_allowed,
        edge_allowed,
        temperature,
    )
    if kl.requires_grad:
        names = list(leaves)
        grads = torch.autograd.grad(kl, [leaves[n] for n in names], allow_unused=True)
        grad_map = {
            n: (g if g is not None else torch.zeros_like(policy.params[n]))
            for n, g in zip(names, grads)
        }
    else:
        grad_map = {n: torch.zeros_like(t) for n, t in policy.params.items()}
    return float(kl.detach()), grad_map


# ---------------------------------------------------------------------------
# Update step and training loop
# ---------------------------------------------------------------------------

def rl_update(
    policy: EditModel,
    reference: EditModel,
    rollouts: Sequence[Rollout],
    config: FinetuneConfig,
    optimizer: OptimizerState,
    strategy: Strategy = Strategy.FULL_KL,
) -> tuple[EditModel, OptimizerState, dict[str, float]]:
    """Normalize advantages, build the loss, and apply one optimizer step."""
    advantages = normalize_advantages([r.reward for r in rollouts])
    for rollout, adv in zip(rollouts, advantages):
        rollout.advantage = float(adv)
    loss, leaves, diagnostics = finetune_loss(policy, reference, rollouts, config, strategy)
    if loss.requires_grad:
        names = list(leaves)
        grads_list = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
        grads = {
            n: (g.detach() if g is not None else torch.zeros_like(policy.params[n]))
            for n, g in zip(names, grads_list)
        }
    else:
        grads = {n: torch.zeros_like(t) for n, t in policy.params.items()}
    grads, grad_norm = clip_gradients(grads, config.grad_clip)
    diagnostics["grad_norm"] = grad_norm
    diagnostics["loss"] = float(loss.detach())
    if grad_norm == 0.0:
        # Nothing to learn from this batch (e.g. all advantages zero, beta=0).
        return policy, optimizer, diagnostics
    new_params, new_opt = optimizer_step(policy.params, grads, optimizer)
    new_policy = EditModel(policy.config, new_params, policy.vocab, policy.size_table)
    return new_policy, new_opt, diagnostics


@dataclass
class UpdateRecord:
    step: int
    reward: float
    validity: float
    kl: float
    grad_norm: float

    def as_line(self) -> str:
        return f"{self.step}\t{self.reward:.6f}\t{self.validity:.6f}\t{self.kl:.6f}\t{self.grad_norm:.6f}"


def finetune_run(
    pretrained: EditModel,
    prompts: Sequence[Prompt],
    config: FinetuneConfig,
    strategy: Strategy = Strategy.FULL_KL,
    metrics_path: str | Path | None = None,
    on_update: Callable[[UpdateRecord], None] | None = None,
) -> tuple[EditModel, list[UpdateRecord]]:
    """Full fine-tuning loop against a frozen copy of the pretrained policy."""
    schedule = Schedule(config.diffusion_steps)
    reference = pretrained.clone()
    policy = pretrained.clone()
    optimizer = OptimizerState(lr=config.lr, weight_decay=0.0)
    seed_seq = np.random.SeedSequence(config.seed)
    update_seeds = seed_seq.generate_state(config.updates, dtype=np.uint32).tolist()
    rng = np.random.default_rng(config.seed)

    records: list[UpdateRecord] = []
    handle = open(metrics_path, "a", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for step in range(config.updates):
            batch_prompts = [
                prompts[int(i)]
                for i in rng.choice(
                    len(prompts), size=min(config.prompts_per_update, len(prompts)), replace=False
                )
            ]
            rollouts = collect_rollouts(
                policy,
                batch_prompts,
                config.group_size,
                config.sampler(update_seeds[step]),
                schedule,
                seed=update_seeds[step],
            )
            policy, optimizer, diag = rl_update(
                policy, reference, rollouts, config, optimizer, strategy
            )
            record = UpdateRecord(
                step=step,
                reward=diag["mean_reward"],
                validity=diag["validity"],
                kl=diag["mean_kl"],
                grad_norm=diag["grad_norm"],
            )
            records.append(record)
            if handle:
                handle.write(record.as_line() + "\n")
                handle.flush()
            if on_update:
                on_update(record)
    finally:
        if handle:
            handle.close()
    return policy, records


@dataclass
class AblationTask:
    pretrained: EditModel
    prompts: Sequence[Prompt]
    config: FinetuneConfig


def ablation_run(
    strategy: Strategy,
    task: AblationTask,
    budget: int,
    metrics_path: str | Path | None = None,
) -> list[UpdateRecord]:
    """Run one fine-tuning strategy for ``budget`` updates; returns its curve."""
    config = FinetuneConfig(
        **{
            **task.config.__dict__,
            "updates": budget,
        }
    )
    _, records = finetune_run(task.pretrained, task.prompts, config, strategy, metrics_path)
    return records
