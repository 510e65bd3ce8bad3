from .dataset import DatasetError, DatasetRecord, LoadReport, load_dataset, save_dataset
from .smiles import ELEMENTS, FEATURE_DIM, Molecule, SmilesError, parse_smiles, smiles_tokens
from .structure import UNREACHABLE, adjacency, hop_distances, structure_matrices
from .synthetic import caption_for, gen_synthetic, shuffle_coords, spread_bucket
from .vocab import (CLS, DEC, MAX_LEN, PAD, SEP, SPECIALS, UNK, TextSample, Vocabulary, build_vocab,
                    collate, detokenize, tokenize, words)

__all__ = [
    "DatasetError", "DatasetRecord", "LoadReport", "load_dataset", "save_dataset",
    "ELEMENTS", "FEATURE_DIM", "Molecule", "SmilesError", "parse_smiles", "smiles_tokens",
    "UNREACHABLE", "adjacency", "hop_distances", "structure_matrices",
    "caption_for", "gen_synthetic", "shuffle_coords", "spread_bucket",
    "CLS", "DEC", "MAX_LEN", "PAD", "SEP", "SPECIALS", "UNK", "TextSample", "Vocabulary",
    "build_vocab", "collate", "detokenize", "tokenize", "words",
]
