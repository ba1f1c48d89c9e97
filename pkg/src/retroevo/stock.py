"""Purchasable building blocks, held as a set of canonical SMILES."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .molgraph import Molecule, ParseError, parse_smiles

log = logging.getLogger(__name__)


@dataclass
class Stock:
    smiles: frozenset[str] = frozenset()
    source: str | None = None
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @classmethod
    def from_smiles(cls, items: Iterable[str], source: str | None = None) -> Stock:
        return cls(frozenset(parse_smiles(s).canonical_smiles for s in items), source)

    @property
    def count(self) -> int:
        return len(self.smiles)

    def __len__(self):
        return len(self.smiles)

    def __contains__(self, item) -> bool:
        if isinstance(item, Molecule):
            return item.canonical_smiles in self.smiles
        return item in self.smiles

    def __iter__(self):
        return iter(sorted(self.smiles))


def contains(s: Stock, m: Molecule) -> bool:
    return m.canonical_smiles in s.smiles


def load_stock(path: str | Path, strict: bool = False) -> Stock:
    """Read a ``.smi`` file: one SMILES per line, optional tab-separated id, ``#`` comments.

    Malformed lines raise ParseError (with the line number) when ``strict``;
    otherwise they are logged and listed in ``Stock.skipped``.
    """
    path = Path(path)
    entries: set[str] = set()
    skipped: list[tuple[int, str]] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):  # '#' inside a line is a triple bond
                continue
            text = line.split("\t")[0].split()[0]
            try:
                entries.add(parse_smiles(text).canonical_smiles)
            except ParseError as exc:
                if strict:
                    raise ParseError(f"{path}:{lineno}: {exc}") from exc
                log.warning("%s:%d: skipping %r (%s)", path, lineno, text, exc)
                skipped.append((lineno, text))
    return Stock(frozenset(entries), str(path), skipped)
