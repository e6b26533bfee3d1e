"""Checkpoint exporter interface.

The converter from pretrained checkpoints is a separate component that is not
part of this package. This module fixes what it must produce so the engine can
consume it: the files named in ``ExportManifest``, golden logits stored under
``golden_key(prompt_id)`` in a tensor archive, and a manifest that
``verify`` checks against the engine.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import check_golden_parity, required_weights

MANIFEST_NAME = "export_manifest.json"


class UnsupportedArchitecture(Exception):
    """Raised by an exporter for modules it cannot map; lists their names."""

    def __init__(self, modules: list[str]):
        super().__init__("unsupported modules: " + ", ".join(modules))
        self.modules = modules


@dataclass
class WeightMapping:
    engine: str
    source: str
    transform: str = ""


@dataclass
class GoldenPrompt:
    id: str
    text: str
    tokens: list[int] = field(default_factory=list)


@dataclass
class ExportManifest:
    source: str
    weight_map: list[WeightMapping] = field(default_factory=list)
    golden_prompts: list[GoldenPrompt] = field(default_factory=list)
    archive: str = "model.rta"
    vocab: str = "vocab.json"
    merges: str = "merges.txt"
    config: str = "config.json"
    golden_file: str = "golden.rta"
    golden_positions: int = 8

    def to_json(self) -> dict:
        prompts = []
        for p in self.golden_prompts:
            entry = {"id": p.id, "text": p.text}
            if p.tokens:
                entry["tokens"] = p.tokens
            prompts.append(entry)
        return {
            "source": self.source,
            "files": {"archive": self.archive, "vocab": self.vocab, "merges": self.merges, "config": self.config},
            "weight_map": [asdict(w) for w in self.weight_map],
            "golden": {"file": self.golden_file, "positions": self.golden_positions, "prompts": prompts},
        }

    def missing_weights(self, config: dict) -> list[str]:
        mapped = {w.engine for w in self.weight_map}
        return sorted(set(required_weights(config)) - mapped)

    def write(self, dest: Path) -> None:
        Path(dest, MANIFEST_NAME).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def export(source: str, dest: Path) -> ExportManifest:
    """Convert `source` into engine files under `dest`. Not provided here."""
    raise NotImplementedError("checkpoint export is provided by the separate exporter component")


def dump_golden(source: str, prompts: list[GoldenPrompt], dest: Path) -> None:
    """Write reference logits for `prompts` from the source framework. Not provided here."""
    raise NotImplementedError("golden dumps are provided by the separate exporter component")


def verify(dest: Path, tolerance: float = 1e-3) -> dict:
    """Engine-side parity check of an export directory."""
    return check_golden_parity(Path(dest), tolerance)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="repmech-export")
    parser.add_argument("--source", required=True)
    parser.add_argument("--dest", required=True, type=Path)
    parser.add_argument("--golden-prompts", type=Path)
    args = parser.parse_args(argv)
    try:
        export(args.source, args.dest)
    except NotImplementedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
