"""Line-delimited JSON dataset records."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .smiles import Molecule, SmilesError, parse_smiles

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetRecord:
    id: str
    molecule: Molecule
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"record {self.id}: empty text")

    def to_json(self) -> dict:
        coords = None if self.molecule.coords is None else self.molecule.coords.tolist()
        return {"id": self.id, "smiles": self.molecule.smiles, "coords": coords, "text": self.text}


@dataclass
class LoadReport:
    loaded: int = 0
    skipped_invalid_smiles: int = 0


def load_dataset(path, report: LoadReport | None = None) -> list[DatasetRecord]:
    """Read records; malformed lines raise, unparseable SMILES are skipped and counted."""
    report = report if report is not None else LoadReport()
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, smi, coords, text = obj["id"], obj["smiles"], obj.get("coords"), obj["text"]
                if not isinstance(rid, str) or not isinstance(smi, str) or not isinstance(text, str):
                    raise TypeError("id, smiles and text must be strings")
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record ({e})") from e
            try:
                mol = parse_smiles(smi)
            except SmilesError as e:
                report.skipped_invalid_smiles += 1
                log.warning("%s:%d: skipping invalid SMILES (%s)", path, lineno, e)
                continue
            if coords is not None:
                if len(coords) != mol.n_atoms:
                    raise DatasetError(f"{path}:{lineno}: {len(coords)} coordinate rows for {mol.n_atoms} atoms")
                try:
                    mol = mol.with_coords(coords)
                except ValueError as e:
                    raise DatasetError(f"{path}:{lineno}: {e}") from e
            try:
                records.append(DatasetRecord(rid, mol, text))
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from e
    report.loaded = len(records)
    return records


def save_dataset(records, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
