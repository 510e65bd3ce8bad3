"""Structural encoders producing per-atom representations.

``Encoder2D`` mixes three attention sources per layer: learned dot-product
attention, a distance kernel exp(-D) over bond-graph hop counts, and the
normalized adjacency A + I. ``Encoder3D`` sees element types and coordinates
only; coordinates enter solely through pairwise distances expanded in a
Gaussian basis, which feed a per-head attention bias and each atom's mean
radial profile added to its embedding, so its output is invariant to
rotation and translation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moldata import ELEMENTS, FEATURE_DIM, Molecule
from .moldata.structure import adjacency, euclidean_distances, hop_distances
from .numerics import AdamW, FeedForward, LayerNorm, Linear, Module, Rng, Tensor, no_grad
from .numerics import nn
from .numerics import tensor as T
from .numerics.nn import Parameter

N_ELEMENTS = len(ELEMENTS)
MASK_ELEMENT = N_ELEMENTS


@dataclass
class MolBatch:
    """Padded arrays for a list of molecules. ``atom_mask`` is True on real atoms."""

    features: np.ndarray      # (B, N, FEATURE_DIM)
    elements: np.ndarray      # (B, N) int
    atom_mask: np.ndarray     # (B, N) bool
    adjacency: np.ndarray     # (B, N, N)
    hops: np.ndarray          # (B, N, N)
    distances: np.ndarray | None  # (B, N, N), Euclidean

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_molecules(cls, mols: list[Molecule], need_coords: bool = False) -> "MolBatch":
        if not mols:
            raise ValueError("empty molecule batch")
        n = max(m.n_atoms for m in mols)
        if n == 0:
            raise ValueError("molecule has no atoms")
        b = len(mols)
        feats = np.zeros((b, n, FEATURE_DIM))
        elems = np.zeros((b, n), dtype=np.int64)
        mask = np.zeros((b, n), dtype=bool)
        adj = np.zeros((b, n, n))
        hops = np.zeros((b, n, n))
        have = all(m.coords is not None for m in mols)
        if need_coords and not have:
            missing = [i for i, m in enumerate(mols) if m.coords is None]
            raise ValueError(f"3D encoder needs coordinates; missing for batch items {missing}")
        dist = np.zeros((b, n, n)) if have else None
        for i, m in enumerate(mols):
            if m.n_atoms == 0:
                raise ValueError(f"batch item {i}: molecule has no atoms")
            k = m.n_atoms
            feats[i, :k] = m.features()
            elems[i, :k] = m.element_ids()
            mask[i, :k] = True
            adj[i, :k, :k] = adjacency(m)
            hops[i, :k, :k] = hop_distances(m)
            if have:
                dist[i, :k, :k] = euclidean_distances(m.coords)
        return cls(feats, elems, mask, adj, hops, dist)

    def subset(self, idx) -> "MolBatch":
        idx = np.asarray(idx)
        n = int(self.atom_mask[idx].sum(axis=1).max())
        sl = (idx, slice(0, n))
        return MolBatch(self.features[sl], self.elements[sl], self.atom_mask[sl],
                        self.adjacency[idx][:, :n, :n], self.hops[idx][:, :n, :n],
                        None if self.distances is None else self.distances[idx][:, :n, :n])


@dataclass
class EncoderOutput:
    H: Tensor               # (B, N, d_enc); padded rows are meaningless
    atom_mask: np.ndarray   # (B, N)
    view: str

    def per_molecule(self, i: int) -> np.ndarray:
        return self.H.data[i][self.atom_mask[i]]


def _row_normalize(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.where(mask[:, None, :], w, 0.0) * mask[:, :, None]
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


class _EncoderLayer(Module):
    def __init__(self, d: int, heads: int, rng: Rng, dtype):
        self.attn = nn.MultiHeadAttention(d, heads, rng.child("attn"), dtype=dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, 2 * d, rng.child("ffn"), dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)


class _Encoder(Module):
    view = ""

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def _key_mask(self, atom_mask):
        return ~atom_mask[:, None, None, :]


class Encoder2D(_Encoder):
    """Graph encoder over (atoms, features, adjacency)."""

    view = "2d"

    def __init__(self, d_enc: int = 64, layers: int = 2, heads: int = 4, rng: Rng | None = None,
                 dtype=np.float32, mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)):
        rng = rng or Rng(0)
        total = sum(mix)
        if total <= 0 or min(mix) < 0:
            raise ValueError("mixing weights must be non-negative with a positive sum")
        self.mix = tuple(m / total for m in mix)
        self.dtype = dtype
        self.heads = heads
        self.embed = Linear(FEATURE_DIM, d_enc, rng.child("embed"), dtype=dtype)
        self.layers = [_EncoderLayer(d_enc, heads, rng.child(f"layer{i}"), dtype) for i in range(layers)]

    def __call__(self, batch: MolBatch, features: np.ndarray | None = None) -> EncoderOutput:
        feats = batch.features if features is None else features
        mask = batch.atom_mask
        lam_a, lam_d, lam_g = self.mix
        dist_term = _row_normalize(np.exp(-batch.hops), mask)
        n = mask.shape[1]
        graph_term = _row_normalize(batch.adjacency + np.eye(n)[None], mask)
        fixed = (lam_d * dist_term + lam_g * graph_term)[:, None].astype(self.dtype)
        key_mask = self._key_mask(mask)
        h = self.embed(Tensor(feats.astype(self.dtype)))
        for layer in self.layers:
            att = layer.attn
            q = nn.split_heads(att.q(h), att.heads)
            k = nn.split_heads(att.k(h), att.heads)
            v = nn.split_heads(att.v(h), att.heads)
            scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(q.shape[-1]))
            probs = T.softmax(T.masked_fill(scores, key_mask), axis=-1)
            if lam_a == 0.0:
                probs = Tensor(np.broadcast_to(fixed, probs.shape).copy())
            elif lam_a != 1.0:
                probs = T.scale(probs, lam_a) + fixed
            mixed = att.o(nn.merge_heads(probs @ v))
            h = layer.norm1(h + mixed)
            h = layer.norm2(h + layer.ffn(h))
        return EncoderOutput(h, mask, self.view)


class GaussianBasis(Module):
    def __init__(self, n_basis: int = 16, cutoff: float = 10.0, dtype=np.float32):
        self.centers = Parameter(np.linspace(0.0, cutoff, n_basis).astype(dtype))
        self.log_widths = Parameter(np.zeros(n_basis, dtype))  # widths init 1.0

    @property
    def widths(self) -> np.ndarray:
        return np.exp(self.log_widths.data)

    def __call__(self, dist: Tensor) -> Tensor:
        """(B, N, N) distances -> (B, N, N, n_basis) radial features."""
        k = self.centers.shape[0]
        expanded = Tensor(np.repeat(dist.data[..., None], k, axis=-1))
        z = T.div(expanded - self.centers, T.exp(self.log_widths))
        return T.exp(T.scale(T.square(z), -0.5))


class Encoder3D(_Encoder):
    """Distance-biased transformer over (atoms, element types, coordinates)."""

    view = "3d"

    def __init__(self, d_enc: int = 64, layers: int = 2, heads: int = 4, rng: Rng | None = None,
                 dtype=np.float32, n_basis: int = 16, cutoff: float = 10.0):
        rng = rng or Rng(0)
        self.dtype = dtype
        self.heads = heads
        self.embed = nn.Embedding(N_ELEMENTS + 1, d_enc, rng.child("embed"), dtype=dtype, std=1.0)
        self.basis = GaussianBasis(n_basis, cutoff, dtype)
        self.radial = Linear(n_basis, d_enc, rng.child("radial"), dtype=dtype)
        self.pair_bias = [Linear(n_basis, heads, rng.child(f"bias{i}"), dtype=dtype) for i in range(layers)]
        self.layers = [_EncoderLayer(d_enc, heads, rng.child(f"layer{i}"), dtype) for i in range(layers)]

    def __call__(self, batch: MolBatch, elements: np.ndarray | None = None) -> EncoderOutput:
        if batch.distances is None:
            raise ValueError("3D encoder needs coordinates")
        elems = batch.elements if elements is None else elements
        mask = batch.atom_mask
        key_mask = self._key_mask(mask)
        rbf = self.basis(Tensor(batch.distances.astype(self.dtype)))
        pair = (mask[:, :, None] & mask[:, None, :]).astype(self.dtype)
        pair /= np.maximum(pair.sum(axis=2, keepdims=True), 1.0)
        profile = T.sum_(rbf * pair[..., None], axis=2)  # mean radial profile seen by each atom
        h = self.embed(elems) + self.radial(profile)
        for proj, layer in zip(self.pair_bias, self.layers):
            bias = T.transpose(proj(rbf), (0, 3, 1, 2))
            h = layer.norm1(h + layer.attn(h, mask=key_mask, bias=bias))
            h = layer.norm2(h + layer.ffn(h))
        return EncoderOutput(h, mask, self.view)


def encode_2d(m: Molecule, enc: Encoder2D) -> EncoderOutput:
    out = enc(MolBatch.from_molecules([m]))
    return EncoderOutput(Tensor(out.H.data[0]), out.atom_mask[0], "2d")


def encode_3d(m: Molecule, enc: Encoder3D) -> EncoderOutput:
    if m.coords is None:
        raise ValueError("encode_3d: molecule has no coordinates")
    out = enc(MolBatch.from_molecules([m], need_coords=True))
    return EncoderOutput(Tensor(out.H.data[0]), out.atom_mask[0], "3d")


class _MaskedAtomHead(Module):
    def __init__(self, d: int, rng: Rng, dtype):
        self.out = Linear(d, N_ELEMENTS, rng, dtype=dtype)


class _PairDistanceHead(Module):
    """Predicts d_ij / DIST_SCALE as the inner product of projected atom states."""

    def __init__(self, d: int, rng: Rng, dtype, width: int = 16):
        self.proj = Linear(d, width, rng, dtype=dtype)

    def __call__(self, H: Tensor) -> Tensor:
        z = self.proj(H)
        return T.matmul(z, T.transpose(z, (0, 2, 1)))


DIST_SCALE = 5.0


def _pooled(out: EncoderOutput) -> Tensor:
    w = out.atom_mask.astype(out.H.dtype)
    w = w / w.sum(axis=1, keepdims=True)
    return T.sum_(out.H * w[:, :, None], axis=1)


def pretrain_toy(encoder: _Encoder, molecules: list[Molecule], steps: int = 200, batch_size: int = 16,
                 lr: float = 3e-3, seed: int = 0, freeze: bool = True) -> dict:
    """Warm up an encoder by predicting one masked atom's element from mean-pooled H.

    The 3D encoder additionally regresses all pairwise distances from its
    unmasked output (a small version of 3D position recovery), which forces
    geometry into H instead of leaving it to a random attention bias.
    Returns a report with the final masked-atom accuracy on ``molecules``.
    """
    rng = Rng(seed).child(f"pretrain-{encoder.view}")
    encoder.unfreeze()
    d = encoder.layers[0].norm1.gain.shape[0]
    head = _MaskedAtomHead(d, rng.child("head"), encoder.dtype)
    need_coords = encoder.view == "3d"
    dist_head = _PairDistanceHead(d, rng.child("dist"), encoder.dtype) if need_coords else None
    full = MolBatch.from_molecules(molecules, need_coords=need_coords)
    named = list(encoder.named_parameters("encoder.")) + list(head.named_parameters("head."))
    if dist_head is not None:
        named += list(dist_head.named_parameters("dist."))
    opt = AdamW(named, lr=lr)

    def forward(batch: MolBatch, pick: np.ndarray):
        rows = np.arange(batch.size)
        targets = batch.elements[rows, pick]
        if need_coords:
            elems = batch.elements.copy()
            elems[rows, pick] = MASK_ELEMENT
            out = encoder(batch, elements=elems)
        else:
            feats = batch.features.copy()
            feats[rows, pick, :N_ELEMENTS] = 0.0
            out = encoder(batch, features=feats)
        return head.out(_pooled(out)), targets

    def draw(batch: MolBatch, r: Rng) -> np.ndarray:
        counts = batch.atom_mask.sum(axis=1)
        return np.array([int(r.integers(0, c)) for c in counts])

    for _ in range(steps):
        idx = rng.choice(len(molecules), size=min(batch_size, len(molecules)), replace=False)
        batch = full.subset(np.sort(idx))
        logits, targets = forward(batch, draw(batch, rng))
        loss = T.cross_entropy(logits, targets)
        if dist_head is not None:
            loss = loss + _distance_loss(encoder, dist_head, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()

    with no_grad():
        logits, targets = forward(full, draw(full, rng.child("eval")))
        dist_mse = float(_distance_loss(encoder, dist_head, full).data) if dist_head is not None else None
    acc = float((logits.data.argmax(axis=-1) == targets).mean())
    if freeze:
        encoder.freeze()
    report = {"view": encoder.view, "steps": steps, "masked_atom_accuracy": acc,
              "majority_baseline": float(np.bincount(targets, minlength=N_ELEMENTS).max() / len(targets))}
    if dist_mse is not None:
        report["distance_mse"] = dist_mse
    return report


def _distance_loss(encoder: _Encoder, head: _PairDistanceHead, batch: MolBatch) -> Tensor:
    pair = (batch.atom_mask[:, :, None] & batch.atom_mask[:, None, :]).astype(encoder.dtype)
    target = (batch.distances / DIST_SCALE).astype(encoder.dtype)
    err = T.square(head(encoder(batch).H) - target) * pair
    return T.scale(T.sum_(err), 1.0 / float(pair.sum()))
