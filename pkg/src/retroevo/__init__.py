"""Retrosynthesis planning by evolving whole routes with a proposer model."""

from __future__ import annotations

from pathlib import Path

__version__ = "0.1.0"

TOY_WORLDS = ("planner", "twostep", "designer")


def toy_dir(name: str) -> Path:
    """Directory of a packaged toy world."""
    if name not in TOY_WORLDS:
        raise ValueError(f"unknown toy world {name!r}; choose from {', '.join(TOY_WORLDS)}")
    return Path(__file__).resolve().parent / "data" / "toy" / name
