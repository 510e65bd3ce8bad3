"""Synthetic molecule-caption corpus with view-specific planted signal.

Each caption states facts readable only from the bond graph (ring count,
halogen) and a fact readable only from coordinates (overall spread: compact or
elongated, from the largest pairwise distance). Coordinates are drawn
independently of the bond graph, so neither view alone determines a caption.
"""
from __future__ import annotations

import numpy as np

from ..numerics.rng import Rng
from .dataset import DatasetRecord
from .smiles import HALOGENS, Molecule, parse_smiles
from .structure import euclidean_distances

SPREAD_THRESHOLD = 4.0
_CHAIN_ATOMS = ("C", "C", "C", "N", "O")
_HALOGEN_WORD = {None: "nohalogen", "F": "fluorinated", "Cl": "chlorinated", "Br": "brominated", "I": "iodinated"}


def spread_bucket(coords: np.ndarray) -> str:
    return "elongated" if euclidean_distances(coords).max() > SPREAD_THRESHOLD else "compact"


def ring_token(m: Molecule) -> str:
    return f"rings{m.ring_count()}"


def halogen_word(m: Molecule) -> str:
    found = [a for a in m.atoms if a in HALOGENS]
    return _HALOGEN_WORD[found[0] if found else None]


def caption_for(m: Molecule) -> str:
    counts = {e: m.atoms.count(e) for e in ("C", "N", "O")}
    return (
        f"the {spread_bucket(m.coords)} molecule with {ring_token(m)} , {halogen_word(m)} , "
        f"carbons{counts['C']} nitrogens{counts['N']} oxygens{counts['O']} ."
    )


def _random_smiles(rng: Rng) -> str:
    """A carbon-led chain of 12-16 heavy atoms with 0-2 ring closures and an optional halogen.

    Composition and ring count are drawn independently: rings come from
    closure bonds between chain atoms (5- or 6-membered), not from extra ring
    atoms, so element counts carry no information about the ring count.
    """
    while True:
        n = int(rng.integers(12, 17))
        atoms = ["C"] + [str(rng.choice(_CHAIN_ATOMS)) for _ in range(n - 1)]
        closures = _place_rings(atoms, int(rng.integers(0, 3)), rng)
        if closures is not None:
            break
    marks: dict[int, str] = {}
    for label, (i, j) in enumerate(closures, start=1):
        marks[i] = marks.get(i, "") + str(label)
        marks[j] = marks.get(j, "") + str(label)
    smi = "".join(a + marks.get(i, "") for i, a in enumerate(atoms))
    halogen = [None, "F", "Cl", "Br"][int(rng.integers(0, 4))]
    return smi + (halogen or "")


def _place_rings(atoms: list[str], n_rings: int, rng: Rng, tries: int = 50):
    """Disjoint (i, j) closure pairs spanning 5- or 6-membered rings; O never closes a ring."""
    for _ in range(tries):
        spans, used = [], set()
        for _ in range(n_rings):
            size = int(rng.integers(5, 7))
            i = int(rng.integers(0, len(atoms) - size + 1))
            j = i + size - 1
            seg = set(range(i, j + 1))
            if seg & used or atoms[i] == "O" or atoms[j] == "O":
                break
            spans.append((i, j))
            used |= seg
        if len(spans) == n_rings:
            return sorted(spans)
    return None


def _coords(n: int, bucket: str, rng: Rng) -> np.ndarray:
    if bucket == "compact":
        p = rng.normal((n, 3), 0.55, np.float64)
    else:
        length = max(6.0, 1.4 * n)
        x = np.linspace(-length / 2, length / 2, n)[rng.permutation(n)]
        p = rng.normal((n, 3), 0.3, np.float64)
        p[:, 0] += x
    return p - p.mean(axis=0)


def _coords_for_bucket(n: int, bucket: str, rng: Rng) -> np.ndarray:
    for _ in range(100):
        p = _coords(n, bucket, rng)
        if spread_bucket(p) == bucket:
            return p
    raise RuntimeError(f"could not draw {bucket} coordinates for {n} atoms")


def gen_synthetic(n: int, seed: int) -> list[DatasetRecord]:
    """``n`` records with pairwise-distinct captions, fully determined by ``seed``."""
    rng = Rng(seed).child("synthetic")
    records: list[DatasetRecord] = []
    captions: set[str] = set()
    attempts = 0
    while len(records) < n:
        attempts += 1
        if attempts > 200 * (n + 10):
            raise RuntimeError(f"could not generate {n} distinct captions")
        mol = parse_smiles(_random_smiles(rng))
        bucket = "compact" if rng.random() < 0.5 else "elongated"
        mol = mol.with_coords(_coords_for_bucket(mol.n_atoms, bucket, rng))
        text = caption_for(mol)
        if text in captions:
            continue
        captions.add(text)
        records.append(DatasetRecord(f"syn-{seed}-{len(records):05d}", mol, text))
    return records


def shuffle_coords(records: list[DatasetRecord], seed: int) -> list[DatasetRecord]:
    """Break the coordinate/caption link: captions stay, spreads are permuted.

    Records receive fresh coordinates whose spread bucket is taken from a
    random permutation of the corpus' buckets.
    """
    rng = Rng(seed).child("shuffle")
    buckets = [spread_bucket(r.molecule.coords) for r in records]
    perm = rng.permutation(len(records))
    out = []
    for r, k in zip(records, perm):
        coords = _coords_for_bucket(r.molecule.n_atoms, buckets[k], rng)
        out.append(DatasetRecord(r.id, r.molecule.with_coords(coords), r.text))
    return out
