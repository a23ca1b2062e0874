"""Laboratory name canonicalization.

A CanonMap collapses equivalent lab codes and spellings ("WBC", "White
Blood Cells", panel names like "CBC") onto canonical category ids so that
set comparisons are not distorted by coding variation. The map is a total
function: unmapped names fall back to their own folded spelling.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .aliases import fold


class CanonMapError(ValueError):
    pass


class CanonMap:
    def __init__(self, mapping: dict[str, str], version: str):
        self.version = version
        self._map = {fold(k): fold(v) for k, v in mapping.items()}
        # canonical targets must be fixed points, otherwise apply() is not idempotent
        for source, target in self._map.items():
            resolved = self._map.get(target, target)
            if resolved != target:
                raise CanonMapError(
                    f"canonical id {target!r} (from {source!r}) maps onward to {resolved!r}; "
                    "canonical ids must map to themselves"
                )

    @classmethod
    def identity(cls) -> "CanonMap":
        return cls({}, version="identity")

    @classmethod
    def from_tsv(cls, path: str | Path) -> "CanonMap":
        """Load a two-column TSV (source_code, canonical_id).

        The first non-blank line may be a "# version: ..." comment; a header
        row "source_code\tcanonical_id" is skipped when present.
        """
        path = Path(path)
        version = path.name
        mapping: dict[str, str] = {}
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.lower().startswith("version:"):
                    version = body.split(":", 1)[1].strip()
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CanonMapError(f"{path}:{line_no}: expected 2 tab-separated columns")
            if cols[0].strip().lower() == "source_code":
                continue
            mapping[cols[0]] = cols[1]
        return cls(mapping, version=version)

    def apply(self, name: str) -> str:
        folded = fold(name)
        return self._map.get(folded, folded)

    def apply_set(self, names: Iterable[str]) -> set[str]:
        return {self.apply(n) for n in names}

    def __contains__(self, name: str) -> bool:
        return fold(name) in self._map

    def __len__(self) -> int:
        return len(self._map)
