"""Evaluation metrics: validity, thresholded edit accuracy, and FDD.

Acc_all(tau) counts an output as a success when it is chemically valid,
satisfies every property spec of its prompt, and stays within Tanimoto tau
of its source; Acc_valid(tau) divides by the valid count instead of the
total, so acc_all = acc_valid * validity holds exactly at the count level.

FDD (Frechet descriptor distance) replaces the neural-embedding Frechet
metric with the same functional form over an 8-dimensional physicochemical
descriptor vector.  The two are not numerically comparable; reports must say
"FDD".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateSet, EmptyInput
from .molgraph import MolecularGraph, check_validity, morgan_fingerprint, parse_smiles, tanimoto
from .oracles import (
    hydrogen_bond_acceptors,
    hydrogen_bond_donors,
    logp_proxy,
    molecular_weight,
    ring_count,
    rotatable_bonds,
    satisfies,
)
from .rlft import Prompt

DESCRIPTOR_DIM = 8


def descriptor_vector(graph: MolecularGraph) -> np.ndarray:
    """(MW, LogP, HBA, HBD, RotBonds, Rings, heavy atoms, aromatic fraction)."""
    heavy = len(graph)
    aromatic_fraction = sum(1 for a in graph.atoms if a.aromatic) / heavy
    return np.array(
        [
            molecular_weight(graph),
            logp_proxy(graph),
            hydrogen_bond_acceptors(graph),
            hydrogen_bond_donors(graph),
            rotatable_bonds(graph),
            ring_count(graph),
            float(heavy),
            aromatic_fraction,
        ],
        dtype=np.float64,
    )


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clamped at zero."""
    eigvals, eigvecs = np.linalg.eigh(matrix)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_descriptor_distance(
    set_a: Sequence[MolecularGraph],
    set_b: Sequence[MolecularGraph],
) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) in standardized units.

    Descriptors are standardized by pooled statistics so the distance is
    symmetric; zero-variance descriptors pass through unscaled.  Each set
    needs at least DESCRIPTOR_DIM + 1 members.
    """
    if len(set_a) < DESCRIPTOR_DIM + 1 or len(set_b) < DESCRIPTOR_DIM + 1:
        raise DegenerateSet(
            f"need at least {DESCRIPTOR_DIM + 1} molecules per set "
            f"(got {len(set_a)} and {len(set_b)})"
        )
    a = np.stack([descriptor_vector(g) for g in set_a])
    b = np.stack([descriptor_vector(g) for g in set_b])
    pooled = np.concatenate([a, b], axis=0)
    center = pooled.mean(axis=0)
    scale = pooled.std(axis=0)
    scale[scale == 0.0] = 1.0
    a = (a - center) / scale
    b = (b - center) / scale

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    sqrt_b = _psd_sqrt(cov_b)
    cross = _psd_sqrt(sqrt_b @ cov_a @ sqrt_b)
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return mean_term + trace_term


@dataclass
class EvalReport:
    n_total: int
    n_valid: int
    n_success: dict[float, int]
    validity: float
    acc_all: dict[float, float]
    acc_valid: dict[float, float]
    mean_similarity: float
    fdd: float


def evaluate(
    outputs: Sequence[tuple[Prompt, str | None]],
    references: Sequence[MolecularGraph],
    taus: Sequence[float] = (0.15, 0.65),
) -> EvalReport:
    """Score generated molecules against their prompts.

    ``outputs`` pairs each prompt with a generated SMILES or None for an
    unusable generation.  ``references`` feed the FDD term; when either side
    is too small for a covariance the FDD field is NaN.
    """
    if not outputs:
        raise EmptyInput("no outputs to evaluate")
    n_total = len(outputs)
    n_valid = 0
    successes = {tau: 0 for tau in taus}
    similarities: list[float] = []
    valid_graphs: list[MolecularGraph] = []

    for prompt, smiles in outputs:
        if smiles is None:
            continue
        try:
            graph = parse_smiles(smiles)
        except Exception:
            continue
        if not check_validity(graph).valid:
            continue
        n_valid += 1
        valid_graphs.append(graph)
        sim = tanimoto(morgan_fingerprint(prompt.src), morgan_fingerprint(graph))
        similarities.append(sim)
        properties_ok = all(satisfies(s, prompt.src, graph) for s in prompt.reward_spec.specs)
        if properties_ok:
            for tau in taus:
                if sim >= tau:
                    successes[tau] += 1

    validity = n_valid / n_total
    acc_all = {tau: successes[tau] / n_total for tau in taus}
    acc_valid = {tau: (successes[tau] / n_valid if n_valid else 0.0) for tau in taus}
    try:
        fdd = frechet_descriptor_distance(valid_graphs, list(references))
    except DegenerateSet:
        fdd = float("nan")
    return EvalReport(
        n_total=n_total,
        n_valid=n_valid,
        n_success=successes,
        validity=validity,
        acc_all=acc_all,
        acc_valid=acc_valid,
        mean_similarity=float(np.mean(similarities)) if similarities else 0.0,
        fdd=fdd,
    )


TSV_COLUMNS = (
    "task",
    "validity",
    "acc_all@0.65",
    "acc_valid@0.65",
    "acc_all@0.15",
    "acc_valid@0.15",
    "fdd",
)


def report_tsv_row(task: str, report: EvalReport) -> str:
    cells = [
        task,
        f"{report.validity:.4f}",
        f"{report.acc_all.get(0.65, float('nan')):.4f}",
        f"{report.acc_valid.get(0.65, float('nan')):.4f}",
        f"{report.acc_all.get(0.15, float('nan')):.4f}",
        f"{report.acc_valid.get(0.15, float('nan')):.4f}",
        f"{report.fdd:.4f}",
    ]
    return "\t".join(cells)


def write_report(path: str | Path, rows: Sequence[tuple[str, EvalReport]]) -> None:
    """Fixed-column TSV plus a small human-readable table."""
    lines = ["\t".join(TSV_COLUMNS)]
    for task, report in rows:
        lines.append(report_tsv_row(task, report))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_report(task: str, report: EvalReport) -> str:
    return (
        f"task {task}: n={report.n_total} validity={report.validity:.3f} "
        f"acc_all@0.65={report.acc_all.get(0.65, float('nan')):.3f} "
        f"acc_all@0.15={report.acc_all.get(0.15, float('nan')):.3f} "
        f"mean_sim={report.mean_similarity:.3f} fdd={report.fdd:.3f}"
    )
