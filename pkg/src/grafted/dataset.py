"""Desk-scale mining of instruction / source / target edit pairs.

Pairs come from bounded local-edit chains (element substitution, bond-order
change, terminal-fragment append, leaf deletion) applied to seed molecules;
a pair is kept when every requested property shift clears its threshold and
the fingerprint similarity stays above the mining floor.  Output is one JSON
object per line with a fixed field order.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, NoTemplate
from .molgraph import (
    AROMATIC_ELEMENTS,
    Atom,
    BondState,
    MolecularGraph,
    allowed_valences,
    check_validity,
    fnv1a64,
    morgan_fingerprint,
    parse_smiles,
    tanimoto,
    write_smiles,
)
from .oracles import Direction, PropertySpec, compute_property, satisfies


@functools.lru_cache(maxsize=65536)
def cached_parse(smiles: str) -> MolecularGraph:
    return parse_smiles(smiles)


@dataclass(frozen=True)
class EditSample:
    """One training record; molecules stored as canonical SMILES."""

    instruction: str
    source_smiles: str
    target_smiles: str
    deltas: dict[str, float] = field(default_factory=dict)
    similarity: float = 1.0

    def source_graph(self) -> MolecularGraph:
        return cached_parse(self.source_smiles)

    def target_graph(self) -> MolecularGraph:
        return cached_parse(self.target_smiles)

    def to_json(self) -> str:
        record = {
            "instruction": self.instruction,
            "source": self.source_smiles,
            "target": self.target_smiles,
            "deltas": self.deltas,
            "similarity": self.similarity,
        }
        return json.dumps(record, ensure_ascii=False)

    @staticmethod
    def from_json(line: str) -> "EditSample":
        data = json.loads(line)
        return EditSample(
            instruction=data["instruction"],
            source_smiles=data["source"],
            target_smiles=data["target"],
            deltas={k: float(v) for k, v in data["deltas"].items()},
            similarity=float(data["similarity"]),
        )


def write_samples(path: str | Path, samples: Sequence[EditSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(sample.to_json() + "\n")


def read_samples(path: str | Path) -> list[EditSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(EditSample.from_json(line))
    return out


# ---------------------------------------------------------------------------
# Instruction templates
# ---------------------------------------------------------------------------

# Single-property prompt texts; keys are lowercase property names.
_TEMPLATES: dict[tuple[str, Direction], str] = {
    ("drd2", Direction.INCREASE): "Optimize this molecule [SMILE] to increase its DRD2 binding affinity.",
    ("drd2", Direction.DECREASE): "Help me reduce the DRD2 binding activity of molecule [SMILE].",
    ("gsk3b", Direction.INCREASE): "Help me optimize this molecule [SMILE] to improve its GSK3β inhibitory activity.",
    ("gsk3b", Direction.DECREASE): "Reduce the GSK3β inhibition potential of this molecule [SMILE].",
    ("jnk3", Direction.INCREASE): "Enhance the JNK3 binding properties of molecule [SMILE].",
    ("jnk3", Direction.DECREASE): "Make changes to lower the JNK3 binding affinity of molecule [SMILE].",
    ("qed_proxy", Direction.INCREASE): "Optimize the QED score of molecule [SMILE] to make it more drug-like.",
    ("qed_proxy", Direction.DECREASE): "Decrease the QED value of this molecule [SMILE].",
    ("sa_proxy", Direction.INCREASE): "Make this molecule [SMILE] harder to synthesize.",
    ("sa_proxy", Direction.DECREASE): "Make this molecule [SMILE] easier to synthesize.",
    ("logp", Direction.INCREASE): "Help me increase the LogP value of molecule [SMILE] to enhance its fat solubility.",
    ("logp", Direction.DECREASE): "Help me decrease the LogP value of molecule [SMILE] to improve its water solubility.",
    ("mw", Direction.INCREASE): "Help me increase the molecular weight of this molecule [SMILE].",
    ("mw", Direction.DECREASE): "Help me reduce the molecular weight of this molecule [SMILE].",
    ("hba", Direction.INCREASE): "Add more hydrogen bond acceptors to this molecule [SMILE].",
    ("hba", Direction.DECREASE): "Reduce the number of hydrogen bond acceptors in molecule [SMILE].",
    ("hbd", Direction.INCREASE): "Help me increase the number of H-bond donors in [SMILE].",
    ("hbd", Direction.DECREASE): "Help me decrease the H-bond donor count in this molecule [SMILE].",
    ("rotbonds", Direction.INCREASE): "Add more rotatable bonds to this molecule [SMILE].",
    ("rotbonds", Direction.DECREASE): "Reduce the number of rotatable bonds in molecule [SMILE].",
}


def render_instruction(kind, direction: Direction, source_smiles: str | None = None) -> str:
    """Single-property instruction text with the [SMILE] placeholder intact.

    The named bioactivity / physicochemical tasks use their fixed prompts;
    anything else (ring count, unknown external oracles) falls back to a
    generic template that names the property.
    """
    template = _TEMPLATES.get((kind.name, direction))
    if template is None:
        if not kind.name:
            raise NoTemplate(f"no instruction template for {kind!r}")
        verb = "Increase" if direction == Direction.INCREASE else "Decrease"
        template = f"{verb} the {kind.name} of this molecule [SMILE]."
    return template


def render_task_instruction(specs: Sequence[PropertySpec]) -> str:
    """One instruction for a whole task; multi-property tasks get a joint sentence."""
    if len(specs) == 1:
        return render_instruction(specs[0].kind, specs[0].direction)
    clauses = []
    for spec in specs:
        verb = "increase" if spec.direction == Direction.INCREASE else "decrease"
        clauses.append(f"{verb} the {spec.kind.name}")
    return "Edit this molecule [SMILE] to " + " and ".join(clauses) + "."


# ---------------------------------------------------------------------------
# Local edit operators
# ---------------------------------------------------------------------------

# Terminal fragments: (element, bond state) attached at one open valence.
_FRAGMENTS: tuple[tuple[str, BondState], ...] = (
    ("C", BondState.SINGLE),   # methyl
    ("O", BondState.SINGLE),   # hydroxyl
    ("N", BondState.SINGLE),   # amino
    ("O", BondState.DOUBLE),   # carbonyl oxygen
    ("F", BondState.SINGLE),
    ("Cl", BondState.SINGLE),
)

_BOND_ORDER_VALUE = {BondState.SINGLE: 1.0, BondState.DOUBLE: 2.0, BondState.TRIPLE: 3.0}


def _discounted_order(graph: MolecularGraph, i: int) -> float:
    """Bond order with aromatic bonds at 1.0, matching the validity slack."""
    total = 0.0
    for j in graph.neighbors(i):
        state = graph.bond(i, j)
        total += 1.0 if state == BondState.AROMATIC else _BOND_ORDER_VALUE.get(state, 0.0)
    atom = graph.atoms[i]
    if atom.explicit_h is not None:
        total += atom.explicit_h
    return total


def _free_valence(graph: MolecularGraph, i: int) -> float:
    atom = graph.atoms[i]
    return max(allowed_valences(atom.element, atom.formal_charge)) - _discounted_order(graph, i)


def _with_atoms_bonds(atoms: Sequence[Atom], bonds: np.ndarray) -> MolecularGraph | None:
    try:
        graph = MolecularGraph(tuple(atoms), bonds)
    except ValueError:
        return None
    report = check_validity(graph)
    return graph if report.valid else None


def _wl_key(graph: MolecularGraph) -> tuple:
    """Cheap one-round refinement key for candidate deduplication.

    Much faster than canonical SMILES; may (rarely) merge non-isomorphic
    twins, which only costs a little mining diversity.
    """
    base = [
        (a.element, a.formal_charge, a.aromatic, graph.hydrogen_count(i))
        for i, a in enumerate(graph.atoms)
    ]
    refined = [
        (base[i], tuple(sorted((int(graph.bonds[i, j]), base[j]) for j in graph.neighbors(i))))
        for i in range(len(graph))
    ]
    edges = sorted(
        (int(state), *sorted((refined[i], refined[j])))
        for i, j, state in graph.edge_list()
    )
    return (tuple(sorted(refined)), tuple(edges))


def perturb(graph: MolecularGraph, rng: np.random.Generator, max_candidates: int | None = None) -> list[MolecularGraph]:
    """All single local edits of a molecule that stay valid and connected.

    Operators: element substitution within valence limits, bond-order change,
    terminal-fragment append, and leaf-atom deletion.  Invalid candidates are
    dropped silently; the result is deduplicated and deterministically ordered.
    """
    candidates: dict[tuple, MolecularGraph] = {}

    def consider(atoms: Sequence[Atom], bonds: np.ndarray) -> None:
        out = _with_atoms_bonds(atoms, bonds)
        if out is None:
            return
        candidates.setdefault(_wl_key(out), out)

    k = len(graph)
    bonds = np.asarray(graph.bonds, dtype=np.int8)

    # Element substitution (uncharged, bracket-free atoms only).
    for i, atom in enumerate(graph.atoms):
        if atom.formal_charge != 0 or atom.explicit_h is not None:
            continue
        order = _discounted_order(graph, i)
        for element in ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"):
            if element == atom.element:
                continue
            if atom.aromatic and element not in AROMATIC_ELEMENTS:
                continue
            if max(allowed_valences(element, 0)) < order - 1e-9:
                continue
            atoms = list(graph.atoms)
            atoms[i] = Atom(element, 0, atom.aromatic, None)
            consider(atoms, bonds.copy())

    # Bond-order change on existing non-aromatic bonds.
    for i, j, state in graph.edge_list():
        if state == BondState.AROMATIC:
            continue
        for new_state in (BondState.SINGLE, BondState.DOUBLE, BondState.TRIPLE):
            if new_state == state:
                continue
            extra = _BOND_ORDER_VALUE[new_state] - _BOND_ORDER_VALUE[state]
            if _free_valence(graph, i) < extra - 1e-9 or _free_valence(graph, j) < extra - 1e-9:
                continue
            new_bonds = bonds.copy()
            new_bonds[i, j] = new_bonds[j, i] = int(new_state)
            consider(list(graph.atoms), new_bonds)

    # Terminal-fragment append.
    for i in range(k):
        fv = _free_valence(graph, i)
        for element, bond_state in _FRAGMENTS:
            if fv < _BOND_ORDER_VALUE[bond_state] - 1e-9:
                continue
            atoms = list(graph.atoms) + [Atom(element)]
            new_bonds = np.zeros((k + 1, k + 1), dtype=np.int8)
            new_bonds[:k, :k] = bonds
            new_bonds[i, k] = new_bonds[k, i] = int(bond_state)
            consider(atoms, new_bonds)

    # Leaf deletion.
    if k >= 2:
        for i in range(k):
            if graph.heavy_degree(i) != 1:
                continue
            keep = [j for j in range(k) if j != i]
            atoms = [graph.atoms[j] for j in keep]
            new_bonds = bonds[np.ix_(keep, keep)].copy()
            consider(atoms, new_bonds)

    ordered = list(candidates.values())  # insertion order: deterministic
    if max_candidates is not None and len(ordered) > max_candidates:
        picked = rng.choice(len(ordered), size=max_candidates, replace=False)
        ordered = [ordered[int(p)] for p in sorted(picked)]
    return ordered


# ---------------------------------------------------------------------------
# Pair mining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiningLimits:
    max_edits: int = 3
    max_heavy_atoms: int = 20
    max_pairs: int | None = None
    max_pairs_per_seed: int = 60
    frontier_cap: int = 48


def _deltas_for(specs: Sequence[PropertySpec], source: MolecularGraph, target: MolecularGraph) -> dict[str, float]:
    out = {}
    for spec in specs:
        name = str(spec.kind)
        out[name] = compute_property(spec.kind, target) - compute_property(spec.kind, source)
    return out


def build_pairs(
    corpus: Iterable[str],
    task: Sequence[PropertySpec],
    min_similarity: float = 0.65,
    limits: MiningLimits = MiningLimits(),
    rng: np.random.Generator | None = None,
) -> list[EditSample]:
    """Mine (source, target) pairs whose property shifts clear every spec.

    Perturbation chains of up to ``limits.max_edits`` edits are explored per
    seed molecule; deterministic for a fixed corpus, task, and rng seed.
    """
    rng = rng or np.random.default_rng(0)
    instruction = render_task_instruction(task)
    samples: list[EditSample] = []
    seen_pairs: set[tuple[str, str]] = set()
    any_seed = False

    for raw in corpus:
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        any_seed = True
        try:
            seed_graph = cached_parse(raw)
        except Exception:
            continue
        if len(seed_graph) > limits.max_heavy_atoms:
            continue
        if not check_validity(seed_graph).valid:
            continue
        source_smiles = write_smiles(seed_graph)
        source_graph = cached_parse(source_smiles)
        source_fp = morgan_fingerprint(source_graph)
        source_values = [compute_property(s.kind, source_graph, checked=False) for s in task]
        thresholds = [s.resolved_min_delta() for s in task]

        kept_for_seed = 0
        frontier = [source_graph]
        visited = {_wl_key(source_graph)}
        for _depth in range(limits.max_edits):
            next_frontier: list[MolecularGraph] = []
            for parent in frontier:
                for cand in perturb(parent, rng):
                    key = _wl_key(cand)
                    if key in visited:
                        continue
                    visited.add(key)
                    sim = tanimoto(source_fp, morgan_fingerprint(cand, checked=False))
                    if sim < min_similarity:
                        continue
                    next_frontier.append(cand)
                    hit = True
                    for spec, src_value, threshold in zip(task, source_values, thresholds):
                        delta = compute_property(spec.kind, cand, checked=False) - src_value
                        wanted = delta >= threshold if spec.direction == Direction.INCREASE else delta <= -threshold
                        if not wanted:
                            hit = False
                            break
                    if hit:
                        smiles = write_smiles(cand)
                        if (source_smiles, smiles) in seen_pairs:
                            continue
                        seen_pairs.add((source_smiles, smiles))
                        samples.append(
                            EditSample(
                                instruction=instruction,
                                source_smiles=source_smiles,
                                target_smiles=smiles,
                                deltas=_deltas_for(task, source_graph, cand),
                                similarity=sim,
                            )
                        )
                        kept_for_seed += 1
                        if limits.max_pairs is not None and len(samples) >= limits.max_pairs:
                            return samples
                        if kept_for_seed >= limits.max_pairs_per_seed:
                            break
                if kept_for_seed >= limits.max_pairs_per_seed:
                    break
            if not next_frontier or kept_for_seed >= limits.max_pairs_per_seed:
                break
            if len(next_frontier) > limits.frontier_cap:
                picked = rng.choice(len(next_frontier), size=limits.frontier_cap, replace=False)
                next_frontier = [next_frontier[int(p)] for p in sorted(picked)]
            frontier = next_frontier

    if not any_seed:
        raise EmptyCorpus("no seed molecules in the corpus")
    return samples


def split_of(source_smiles: str) -> str:
    """Deterministic 90/5/5 split keyed on the canonical source molecule."""
    bucket = fnv1a64(source_smiles.encode("utf-8")) % 100
    if bucket < 90:
        return "train"
    if bucket < 95:
        return "val"
    return "test"


def split_samples(samples: Sequence[EditSample]) -> dict[str, list[EditSample]]:
    out: dict[str, list[EditSample]] = {"train": [], "val": [], "test": []}
    for sample in samples:
        out[split_of(sample.source_smiles)].append(sample)
    return out


# ---------------------------------------------------------------------------
# Seed corpus generation (testing / demo convenience)
# ---------------------------------------------------------------------------

_SCAFFOLDS = (
    "c1ccccc1",
    "C1CCCCC1",
    "C1CCCC1",
    "c1ccncc1",
    "c1ccoc1",
    "c1ccsc1",
    "CCCCC",
    "CCCC",
    "CC(C)C",
    "CCOCC",
    "CCNCC",
)


# Growth fragments are mostly carbon so seeds look organic rather than a
# heteroatom soup; mining decides property-relevant decorations separately.
_GROWTH_WEIGHTS = (0.55, 0.15, 0.15, 0.05, 0.05, 0.05)


def random_seed_corpus(n: int, max_atoms: int = 12, seed: int = 0) -> list[str]:
    """Grow n distinct molecules from small scaffolds by random valid appends."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n and attempts < n * 60:
        attempts += 1
        graph = cached_parse(str(rng.choice(_SCAFFOLDS)))
        grow_steps = int(rng.integers(0, max(1, max_atoms - len(graph)) + 1))
        for _ in range(grow_steps):
            if len(graph) >= max_atoms:
                break
            spots = [i for i in range(len(graph)) if _free_valence(graph, i) >= 1.0]
            if not spots:
                break
            i = int(rng.choice(spots))
            element, bond_state = _FRAGMENTS[int(rng.choice(len(_FRAGMENTS), p=_GROWTH_WEIGHTS))]
            if _free_valence(graph, i) < _BOND_ORDER_VALUE[bond_state] - 1e-9:
                continue
            k = len(graph)
            bonds = np.zeros((k + 1, k + 1), dtype=np.int8)
            bonds[:k, :k] = np.asarray(graph.bonds)
            bonds[i, k] = bonds[k, i] = int(bond_state)
            candidate = _with_atoms_bonds(list(graph.atoms) + [Atom(element)], bonds)
            if candidate is not None:
                graph = candidate
        if not check_validity(graph).valid:
            continue
        smiles = write_smiles(graph)
        if smiles not in seen:
            seen.add(smiles)
            out.append(smiles)
    return out
