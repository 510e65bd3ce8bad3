"""Molecule container and a parser for a small SMILES subset.

Supported: organic-subset atoms (B C N O P S F Cl Br I and aromatic b c n o p s),
bond symbols ``- = #``, branches, and single-digit ring closures. Aromatic bonds
are kept as order 1 with an aromatic flag; no kekulization is attempted.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
HALOGENS = frozenset({"F", "Cl", "Br", "I"})
MAX_DEGREE = 5
FEATURE_DIM = len(ELEMENTS) + MAX_DEGREE + 1 + 1

_AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_BOND = {"-": 1, "=": 2, "#": 3}


class SmilesError(ValueError):
    def __init__(self, message: str, smiles: str, position: int):
        super().__init__(f"{message} at position {position} in {smiles!r}")
        self.position = position


@dataclass
class Molecule:
    atoms: list[str]
    bonds: list[tuple[int, int, int]]
    smiles: str = ""
    aromatic_atoms: list[bool] = field(default_factory=list)
    aromatic_bonds: set[tuple[int, int]] = field(default_factory=set)
    coords: np.ndarray | None = None

    def __post_init__(self):
        if not self.aromatic_atoms:
            self.aromatic_atoms = [False] * len(self.atoms)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
        self.validate()

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def validate(self) -> None:
        n = len(self.atoms)
        seen = set()
        for i, j, order in self.bonds:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) out of range for {n} atoms")
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            if order not in (1, 2, 3):
                raise ValueError(f"bond order {order} not in 1..3")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)
        if self.coords is not None and self.coords.shape != (n, 3):
            raise ValueError(f"coords shape {self.coords.shape} does not match {n} atoms")

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def degrees(self) -> list[int]:
        return [len(n) for n in self.neighbors()]

    def ring_bonds(self) -> set[tuple[int, int]]:
        """Bonds lying on at least one cycle (i.e. bonds that are not bridges)."""
        adj = self.neighbors()
        out = set()
        for i, j, _ in self.bonds:
            # j reachable from i without the direct edge?
            seen = {i}
            queue = deque([i])
            found = False
            while queue and not found:
                u = queue.popleft()
                for w in adj[u]:
                    if (u, w) in ((i, j), (j, i)) or w in seen:
                        continue
                    if w == j:
                        found = True
                        break
                    seen.add(w)
                    queue.append(w)
            if found:
                out.add((min(i, j), max(i, j)))
        return out

    def in_ring(self) -> list[bool]:
        flags = [False] * self.n_atoms
        for i, j in self.ring_bonds():
            flags[i] = flags[j] = True
        return flags

    def n_components(self) -> int:
        adj = self.neighbors()
        seen, comps = set(), 0
        for s in range(self.n_atoms):
            if s in seen:
                continue
            comps += 1
            stack = [s]
            seen.add(s)
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
        return comps

    def ring_count(self) -> int:
        """Cyclomatic number: independent cycles of the bond graph."""
        return len(self.bonds) - self.n_atoms + self.n_components()

    def features(self) -> np.ndarray:
        """Per-atom features: element one-hot, degree one-hot (0..5), in-ring flag."""
        f = np.zeros((self.n_atoms, FEATURE_DIM), dtype=np.float64)
        ring = self.in_ring()
        for i, (sym, deg) in enumerate(zip(self.atoms, self.degrees())):
            f[i, ELEMENTS.index(sym)] = 1.0
            f[i, len(ELEMENTS) + min(deg, MAX_DEGREE)] = 1.0
            f[i, -1] = float(ring[i])
        return f

    def element_ids(self) -> np.ndarray:
        return np.array([ELEMENTS.index(s) for s in self.atoms], dtype=np.int64)

    def permuted(self, perm) -> "Molecule":
        """Relabel atoms so that new atom k is old atom perm[k]."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return Molecule(
            atoms=[self.atoms[p] for p in perm],
            bonds=[(inv[i], inv[j], o) for i, j, o in self.bonds],
            smiles=self.smiles,
            aromatic_atoms=[self.aromatic_atoms[p] for p in perm],
            aromatic_bonds={(min(inv[i], inv[j]), max(inv[i], inv[j])) for i, j in self.aromatic_bonds},
            coords=None if self.coords is None else self.coords[perm],
        )

    def with_coords(self, coords) -> "Molecule":
        return Molecule(list(self.atoms), list(self.bonds), self.smiles, list(self.aromatic_atoms),
                        set(self.aromatic_bonds), coords)


def parse_smiles(smiles: str) -> Molecule:
    atoms: list[str] = []
    aromatic: list[bool] = []
    bonds: dict[tuple[int, int], int] = {}
    aromatic_bonds: set[tuple[int, int]] = set()
    branch_stack: list[int] = []
    rings: dict[str, tuple[int, int | None, int]] = {}
    prev: int | None = None
    pending: int | None = None
    pending_pos = 0
    i = 0

    def connect(a: int, b: int, order: int | None, pos: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise SmilesError("invalid bond", smiles, pos)
        if order is None:
            order = 1
            if aromatic[a] and aromatic[b]:
                aromatic_bonds.add(key)
        bonds[key] = order

    if not smiles:
        raise SmilesError("empty SMILES", smiles, 0)
    while i < len(smiles):
        ch = smiles[i]
        two = smiles[i:i + 2]
        if two in ("Cl", "Br"):
            sym, arom, width = two, False, 2
        elif ch in ELEMENTS:
            sym, arom, width = ch, False, 1
        elif ch in _AROMATIC:
            sym, arom, width = _AROMATIC[ch], True, 1
        else:
            sym = None
        if sym is not None:
            atoms.append(sym)
            aromatic.append(arom)
            idx = len(atoms) - 1
            if prev is not None:
                connect(prev, idx, pending, i)
            elif pending is not None:
                raise SmilesError("bond symbol without a preceding atom", smiles, pending_pos)
            prev, pending = idx, None
            i += width
            continue
        if ch in _BOND:
            if pending is not None or prev is None:
                raise SmilesError("misplaced bond symbol", smiles, i)
            pending, pending_pos = _BOND[ch], i
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch without a preceding atom", smiles, i)
            branch_stack.append(prev)
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unmatched ')'", smiles, i)
            if pending is not None:
                raise SmilesError("dangling bond symbol", smiles, pending_pos)
            prev = branch_stack.pop()
        elif ch.isdigit():
            if prev is None:
                raise SmilesError("ring closure without a preceding atom", smiles, i)
            if ch in rings:
                start, order, _ = rings.pop(ch)
                if order is not None and pending is not None and order != pending:
                    raise SmilesError("conflicting ring-closure bond orders", smiles, i)
                connect(start, prev, pending if pending is not None else order, i)
            else:
                rings[ch] = (prev, pending, i)
            pending = None
        else:
            raise SmilesError(f"unsupported character {ch!r}", smiles, i)
        i += 1
    if branch_stack:
        raise SmilesError("unmatched '('", smiles, len(smiles))
    if rings:
        label, (_, _, pos) = next(iter(rings.items()))
        raise SmilesError(f"dangling ring index {label}", smiles, pos)
    if pending is not None:
        raise SmilesError("dangling bond symbol", smiles, pending_pos)
    return Molecule(
        atoms=atoms,
        bonds=[(a, b, o) for (a, b), o in bonds.items()],
        smiles=smiles,
        aromatic_atoms=aromatic,
        aromatic_bonds=aromatic_bonds,
    )


def smiles_tokens(smiles: str) -> list[str]:
    """Atom-level SMILES tokens (two-letter halogens kept whole)."""
    out, i = [], 0
    while i < len(smiles):
        if smiles[i:i + 2] in ("Cl", "Br"):
            out.append(smiles[i:i + 2])
            i += 2
        else:
            out.append(smiles[i])
            i += 1
    return out
