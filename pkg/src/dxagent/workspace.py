"""Engine configuration and on-disk workspace governance.

A workspace is a directory with `cohorts/`, `repos/`, `runs/`, and
`rulepacks/` plus a registry that records which role each encounter id
has been used in. The registry is what enforces the non-overlap rule:
once an id has fed accrual it can never be evaluated, and vice versa.
"""

from __future__ import annotations

import importlib.resources
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aliases import AliasTable, DEFAULT_ALIASES
from .canon import CanonMap
from .errors import ConfigurationError
from .feedback import RulePack, default_rule_packs, load_rule_packs
from .gateway import (
    DEFAULT_ALLOWED_HOSTS,
    Gateway,
    GenerationParams,
    HashingEmbedder,
    HttpBackend,
    HttpEmbedder,
    RecordingBackend,
    ScriptedEmbedder,
    scripted_backend_from_file,
)
from .guidelines import GuidelineIndex
from .prompts import ModelProfile
from .pubmed import PubMedClient
from .runner import EpisodeConfig

ROLE_ACCRUAL = "accrual"
ROLE_EVALUATION = "evaluation"
_ROLES = (ROLE_ACCRUAL, ROLE_EVALUATION)
_REGISTRY_NAME = "registry.json"

_CONFIG_SECTIONS = ("engine", "generation", "backend", "embedder", "paths", "pubmed")
_ENGINE_KEYS = {
    "profile",
    "max_steps",
    "dcp_enabled",
    "guidelines_enabled",
    "pubmed_enabled",
    "experience_search_cap",
    "compaction_threshold_chars",
    "retrieval_k",
    "similarity_floor",
    "guideline_k",
    "excerpt_chars",
    "pubmed_max_results",
}
_GENERATION_KEYS = {"temperature", "top_p", "top_k", "max_new_tokens"}


class GovernanceError(RuntimeError):
    """A cohort registration would break role non-overlap."""

    def __init__(self, message: str, conflicts: Iterable[str] = ()):  # noqa: B008
        super().__init__(message)
        self.conflicts = tuple(conflicts)


def load_profile(spec: str, base_dir: Path | None = None) -> ModelProfile:
    """Resolve a profile by bundled name ("plain", "chatml") or file path."""
    if "/" in spec or os.sep in spec or spec.endswith(".json"):
        path = Path(spec)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return ModelProfile.from_file(path)
    resource = importlib.resources.files("dxagent") / "profiles" / f"{spec}.json"
    if not resource.is_file():
        bundled = sorted(
            p.name[: -len(".json")]
            for p in (importlib.resources.files("dxagent") / "profiles").iterdir()
            if p.name.endswith(".json")
        )
        raise ConfigurationError(f"unknown profile {spec!r}; bundled profiles: {bundled}")
    return ModelProfile.from_mapping(json.loads(resource.read_text(encoding="utf-8")))


@dataclass
class EngineConfig:
    """Parsed TOML config; relative paths resolve against the file's directory."""

    base_dir: Path
    engine: dict
    generation: dict
    backend: dict
    embedder: dict
    paths: dict
    pubmed: dict

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            data = tomllib.loads(raw)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
        unknown = sorted(set(data) - set(_CONFIG_SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown config sections {unknown} in {path}")
        engine = dict(data.get("engine", {}))
        bad = sorted(set(engine) - _ENGINE_KEYS)
        if bad:
            raise ConfigurationError(f"unknown [engine] keys {bad} in {path}")
        generation = dict(data.get("generation", {}))
        bad = sorted(set(generation) - _GENERATION_KEYS)
        if bad:
            raise ConfigurationError(f"unknown [generation] keys {bad} in {path}")
        return cls(
            base_dir=path.parent,
            engine=engine,
            generation=generation,
            backend=dict(data.get("backend", {})),
            embedder=dict(data.get("embedder", {})),
            paths=dict(data.get("paths", {})),
            pubmed=dict(data.get("pubmed", {})),
        )

    @classmethod
    def defaults(cls, base_dir: str | Path = ".") -> "EngineConfig":
        return cls(
            base_dir=Path(base_dir),
            engine={},
            generation={},
            backend={},
            embedder={},
            paths={},
            pubmed={},
        )

    def resolve(self, path_value: str | Path) -> Path:
        path = Path(path_value)
        return path if path.is_absolute() else self.base_dir / path

    def generation_params(self) -> GenerationParams:
        return GenerationParams(**self.generation)

    def model_profile(self) -> ModelProfile:
        return load_profile(self.engine.get("profile", "plain"), self.base_dir)

    def episode_config(self, **overrides) -> EpisodeConfig:
        kwargs = {k: v for k, v in self.engine.items() if k != "profile"}
        kwargs["generation"] = self.generation_params()
        kwargs["profile"] = self.model_profile()
        kwargs.update(overrides)
        return EpisodeConfig(**kwargs)

    def build_backend(self) -> tuple[object, RecordingBackend | None]:
        """Returns (backend, recorder); recorder is set when [backend].record names a file."""
        kind = self.backend.get("kind", "scripted")
        if kind == "scripted":
            script = self.backend.get("script")
            if not script:
                raise ConfigurationError("[backend] kind='scripted' requires a script path")
            backend: object = scripted_backend_from_file(self.resolve(script))
        elif kind == "http":
            base_url = self.backend.get("base_url")
            model = self.backend.get("model")
            if not base_url or not model:
                raise ConfigurationError("[backend] kind='http' requires base_url and model")
            api_key = None
            key_env = self.backend.get("api_key_env")
            if key_env:
                api_key = os.environ.get(key_env)
            # absent key means the localhost allow-list, not "allow all"
            hosts = self.backend.get("allowed_hosts", DEFAULT_ALLOWED_HOSTS)
            backend = HttpBackend(
                base_url=base_url,
                model=model,
                allowed_hosts=hosts,
                retries=int(self.backend.get("retries", 3)),
                timeout=float(self.backend.get("timeout", 120.0)),
                api_key=api_key,
            )
        else:
            raise ConfigurationError(f"unknown backend kind {kind!r}")
        record = self.backend.get("record")
        if record:
            recorder = RecordingBackend(backend)
            return recorder, recorder
        return backend, None

    def build_embedder(self):
        kind = self.embedder.get("kind", "hashing")
        if kind == "hashing":
            return HashingEmbedder(dim=int(self.embedder.get("dim", 256)))
        if kind == "scripted":
            script = self.embedder.get("script")
            if not script:
                raise ConfigurationError("[embedder] kind='scripted' requires a script path")
            data = json.loads(self.resolve(script).read_text(encoding="utf-8"))
            mapping = data.get("vectors", data)
            dim = data.get("dim") if isinstance(data, dict) and "vectors" in data else None
            return ScriptedEmbedder(mapping, dim=dim)
        if kind == "http":
            base_url = self.embedder.get("base_url")
            model = self.embedder.get("model")
            if not base_url or not model:
                raise ConfigurationError("[embedder] kind='http' requires base_url and model")
            return HttpEmbedder(
                base_url=base_url,
                model=model,
                allowed_hosts=self.embedder.get("allowed_hosts", DEFAULT_ALLOWED_HOSTS),
            )
        raise ConfigurationError(f"unknown embedder kind {kind!r}")

    def build_gateway(self) -> tuple[Gateway, RecordingBackend | None]:
        backend, recorder = self.build_backend()
        gateway = Gateway(
            backend=backend,
            embedder=self.build_embedder(),
            params=self.generation_params(),
        )
        return gateway, recorder

    def canon_map(self) -> CanonMap:
        path = self.paths.get("canon_map")
        return CanonMap.from_tsv(self.resolve(path)) if path else CanonMap.identity()

    def alias_table(self) -> AliasTable:
        path = self.paths.get("aliases")
        return AliasTable.from_file(self.resolve(path)) if path else DEFAULT_ALIASES

    def rule_packs(self) -> dict[str, RulePack]:
        path = self.paths.get("rulepacks")
        if path:
            return load_rule_packs(self.resolve(path))
        return default_rule_packs()

    def guideline_index(self) -> GuidelineIndex | None:
        path = self.paths.get("guideline_index")
        if not path:
            return None
        return GuidelineIndex.load(self.resolve(path))

    def pubmed_client(self) -> PubMedClient | None:
        if not self.engine.get("pubmed_enabled", True):
            return None
        rate = self.pubmed.get("rate_per_sec", 3.0)
        return PubMedClient(rate_per_sec=None if rate in (0, None) else float(rate))


class Workspace:
    SUBDIRS = ("cohorts", "repos", "runs", "rulepacks")

    def __init__(self, root: str | Path, create: bool = True):
        self.root = Path(root)
        if create:
            for sub in self.SUBDIRS:
                (self.root / sub).mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise ConfigurationError(f"workspace {self.root} does not exist")

    @property
    def cohorts_dir(self) -> Path:
        return self.root / "cohorts"

    @property
    def repos_dir(self) -> Path:
        return self.root / "repos"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def rulepacks_dir(self) -> Path:
        return self.root / "rulepacks"

    @property
    def registry_path(self) -> Path:
        return self.root / _REGISTRY_NAME

    def load_registry(self) -> dict:
        if not self.registry_path.exists():
            return {"version": 1, "roles": {}, "cohorts": {}}
        return json.loads(self.registry_path.read_text(encoding="utf-8"))

    def _save_registry(self, registry: dict) -> None:
        tmp = self.registry_path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(registry, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        os.replace(tmp, self.registry_path)

    def registered_role(self, encounter_id: str) -> str | None:
        return self.load_registry()["roles"].get(encounter_id)

    def register_cohort(
        self,
        name: str,
        encounter_ids: Iterable[str],
        role: str,
        path: str | Path | None = None,
    ) -> None:
        """Claim ids for a role; refuses if any id holds the opposite role."""
        if role not in _ROLES:
            raise ConfigurationError(f"unknown cohort role {role!r}")
        ids = list(encounter_ids)
        registry = self.load_registry()
        other = ROLE_EVALUATION if role == ROLE_ACCRUAL else ROLE_ACCRUAL
        conflicts = sorted(i for i in ids if registry["roles"].get(i) == other)
        if conflicts:
            raise GovernanceError(
                f"refusing {role} registration of {name!r}: "
                f"{len(conflicts)} encounter id(s) already registered for {other}: "
                + ", ".join(conflicts),
                conflicts,
            )
        for encounter_id in ids:
            registry["roles"][encounter_id] = role
        registry["cohorts"][name] = {
            "role": role,
            "count": len(ids),
            "path": str(path) if path is not None else None,
        }
        self._save_registry(registry)

    def run_dir(self, name: str) -> Path:
        path = self.runs_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def repo_dir(self, name: str) -> Path:
        return self.repos_dir / name
