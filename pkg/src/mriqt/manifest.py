"""Dataset manifest: paired, HF-only and uLF-only volumes with subject-level splits."""

from __future__ import annotations

import dataclasses
import enum
import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional

from .errors import CorruptHeader, UnreadableFile, UnwritablePath

MANIFEST_VERSION = 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclasses.dataclass
class PairedEntry:
    ulf: str
    hf: str
    subject_id: str
    split: Split = Split.TRAIN
    label: Optional[int] = None


@dataclasses.dataclass
class SingleEntry:
    path: str
    subject_id: str
    split: Split = Split.TRAIN
    label: Optional[int] = None


@dataclasses.dataclass
class DatasetManifest:
    paired: List[PairedEntry] = dataclasses.field(default_factory=list)
    hf_only: List[SingleEntry] = dataclasses.field(default_factory=list)
    ulf_only: List[SingleEntry] = dataclasses.field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subjects_by_split(self) -> Dict[Split, set]:
        out: Dict[Split, set] = {s: set() for s in Split}
        for e in self._all_entries():
            out[Split(e.split)].add(e.subject_id)
        return out

    def _all_entries(self) -> Iterator:
        yield from self.paired
        yield from self.hf_only
        yield from self.ulf_only

    def validate(self) -> None:
        """Raise ValueError when a subject appears in more than one split."""
        seen: Dict[str, Split] = {}
        for e in self._all_entries():
            prev = seen.setdefault(e.subject_id, Split(e.split))
            if prev != Split(e.split):
                raise ValueError(f"subject {e.subject_id} appears in splits {prev.value} and {Split(e.split).value}")

    def pairs(self, split: Optional[Split] = None) -> List[PairedEntry]:
        return [e for e in self.paired if split is None or Split(e.split) == split]

    def hf(self, split: Optional[Split] = None) -> List[SingleEntry]:
        return [e for e in self.hf_only if split is None or Split(e.split) == split]

    def ulf(self, split: Optional[Split] = None) -> List[SingleEntry]:
        return [e for e in self.ulf_only if split is None or Split(e.split) == split]

    def to_dict(self) -> dict:
        def enc(e):
            d = dataclasses.asdict(e)
            d["split"] = Split(e.split).value
            return d

        return {
            "version": MANIFEST_VERSION,
            "paired": [enc(e) for e in self.paired],
            "hf_only": [enc(e) for e in self.hf_only],
            "ulf_only": [enc(e) for e in self.ulf_only],
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        except OSError as exc:
            raise UnwritablePath(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UnreadableFile(f"no such manifest: {path}") from exc
        except ValueError as exc:
            raise CorruptHeader(f"manifest {path} is not valid JSON: {exc}") from exc
        if raw.get("version") != MANIFEST_VERSION:
            raise CorruptHeader(f"manifest {path} has unsupported version {raw.get('version')}")
        try:
            m = cls(
                paired=[PairedEntry(**{**e, "split": Split(e["split"])}) for e in raw.get("paired", [])],
                hf_only=[SingleEntry(**{**e, "split": Split(e["split"])}) for e in raw.get("hf_only", [])],
                ulf_only=[SingleEntry(**{**e, "split": Split(e["split"])}) for e in raw.get("ulf_only", [])],
                root=path.parent,
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise CorruptHeader(f"manifest {path} has malformed entries: {exc}") from exc
        m.validate()
        return m
