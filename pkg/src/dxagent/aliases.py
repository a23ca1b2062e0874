"""Normalization tables for imaging modalities and regions.

The default tables cover the spellings that show up in acute-abdomen
records and agent requests. Deployments can extend them from a JSON file
without touching code.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

_WS = re.compile(r"\s+")

# canonical modality -> accepted spellings (matched case-insensitively)
DEFAULT_MODALITY_ALIASES: dict[str, list[str]] = {
    "CT": ["ct", "ct scan", "cat scan", "computed tomography", "cta", "ct angiography"],
    "Ultrasound": [
        "ultrasound",
        "us",
        "sonogram",
        "sonography",
        "ultrasonography",
        "doppler ultrasound",
    ],
    "MRI": ["mri", "mr", "magnetic resonance imaging", "mr imaging"],
    "MRCP": ["mrcp", "mr cholangiopancreatography"],
    "X-ray": ["x-ray", "xray", "x ray", "radiograph", "plain film", "kub"],
    "HIDA": ["hida", "hida scan", "cholescintigraphy"],
    "ERCP": ["ercp"],
}

# canonical region -> accepted spellings
DEFAULT_REGION_ALIASES: dict[str, list[str]] = {
    "Abdomen": ["abdomen", "abdominal", "abd", "abdomen/pelvis", "abdomen and pelvis"],
    "Chest": ["chest", "thorax", "thoracic"],
    "Pelvis": ["pelvis", "pelvic"],
    "Right Upper Quadrant": ["right upper quadrant", "ruq"],
}


def fold(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return _WS.sub(" ", text.strip().lower())


class AliasTable:
    """Resolves modality and region spellings to canonical forms."""

    def __init__(
        self,
        modality_aliases: dict[str, list[str]] | None = None,
        region_aliases: dict[str, list[str]] | None = None,
    ):
        modality_aliases = modality_aliases or DEFAULT_MODALITY_ALIASES
        region_aliases = region_aliases or DEFAULT_REGION_ALIASES
        self._modality: dict[str, str] = {}
        for canonical, spellings in modality_aliases.items():
            self._modality[fold(canonical)] = canonical
            for s in spellings:
                self._modality[fold(s)] = canonical
        self._region: dict[str, str] = {}
        for canonical, spellings in region_aliases.items():
            self._region[fold(canonical)] = canonical
            for s in spellings:
                self._region[fold(s)] = canonical
        self._max_modality_tokens = max(
            len(key.split(" ")) for key in self._modality
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "AliasTable":
        """Load a table from JSON with top-level keys "modality" and "region".

        Entries are merged over the defaults.
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        modality = dict(DEFAULT_MODALITY_ALIASES)
        for canonical, spellings in data.get("modality", {}).items():
            modality[canonical] = list(modality.get(canonical, [])) + list(spellings)
        region = dict(DEFAULT_REGION_ALIASES)
        for canonical, spellings in data.get("region", {}).items():
            region[canonical] = list(region.get(canonical, [])) + list(spellings)
        return cls(modality, region)

    def normalize_modality(self, text: str) -> str | None:
        """Canonical modality name, or None when the spelling is unknown."""
        return self._modality.get(fold(text))

    def modality_key(self, text: str) -> str:
        """Folded comparison key: canonical form when known, folded input otherwise."""
        canonical = self.normalize_modality(text)
        return fold(canonical) if canonical else fold(text)

    def region_key(self, text: str) -> str:
        canonical = self._region.get(fold(text))
        return fold(canonical) if canonical else fold(text)

    def display_region(self, text: str) -> str:
        return self._region.get(fold(text), text.strip())

    def pair_key(self, modality: str, region: str) -> tuple[str, str]:
        """Comparison key for a (modality, region) request or record entry."""
        return (self.modality_key(modality), self.region_key(region))

    def split_region_modality(self, text: str) -> tuple[str, str] | None:
        """Split a "<REGION> <MODALITY>" phrase on the longest modality suffix.

        Returns (region, canonical modality), or None when no suffix matches
        the modality table or the region part would be empty. Multi-word
        regions such as "Right Upper Quadrant Ultrasound" parse correctly
        because the modality is taken as the longest matching suffix.
        """
        tokens = text.strip().split()
        if len(tokens) < 2:
            return None
        limit = min(self._max_modality_tokens, len(tokens) - 1)
        for width in range(limit, 0, -1):
            suffix = fold(" ".join(tokens[-width:]))
            canonical = self._modality.get(suffix)
            if canonical:
                region = " ".join(tokens[:-width]).strip()
                if region:
                    return region, canonical
        return None


DEFAULT_ALIASES = AliasTable()
