"""Per-image attack records and their on-disk form (one JSON line per image)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from trail._validation import ContractError

RECORD_DIR = "records"


@dataclass
class AttackResult:
    image_id: int
    method: str
    surrogate: str
    true_label: int
    predictions: dict
    ssim: float
    losses: dict = field(default_factory=dict)
    jpeg_predictions: dict = field(default_factory=dict)
    adversarial_png: str = ""
    wall_clock: float = 0.0

    @property
    def success(self):
        """Target -> misclassified."""
        return {k: int(v) != self.true_label for k, v in self.predictions.items()}

    @property
    def jpeg_success(self):
        return {k: int(v) != self.true_label for k, v in self.jpeg_predictions.items()}

    def to_json(self):
        """One JSON line; wall-clock is kept out so records are reproducible."""
        d = asdict(self)
        d.pop("wall_clock")
        d["success"] = self.success
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        success = d.pop("success", None)
        r = cls(**d)
        if success is not None and success != r.success:
            raise ContractError(f"record {r.image_id}: success flags disagree with predictions")
        return r


def write_result(method_dir, result):
    path = Path(method_dir) / RECORD_DIR / f"{result.image_id:05d}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.to_json() + "\n")
    return path


def read_results(method_dir):
    """All records under ``method_dir``; returns ``(results, errors)`` where errors
    maps file names to messages for corrupt files."""
    results, errors = [], {}
    for path in sorted((Path(method_dir) / RECORD_DIR).glob("*.jsonl")):
        try:
            for line in path.read_text().splitlines():
                if line.strip():
                    results.append(AttackResult.from_json(line))
        except (ValueError, TypeError, KeyError) as exc:
            errors[path.name] = str(exc)
    return results, errors
