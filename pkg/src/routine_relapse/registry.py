"""Modality registry: the ordered list of hourly sensing streams in a template."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

ADDITIVE = "additive"
INTENSITY = "intensity"
N_HOURS = 24


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityRegistry:
    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise RegistryError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise RegistryError("duplicate modality names")
        bad = [k for k in self.kinds if k not in (ADDITIVE, INTENSITY)]
        if bad:
            raise RegistryError(f"unknown modality kind(s): {sorted(set(bad))}")
        object.__setattr__(self, "_lookup", {n: i for i, n in enumerate(self.names)})

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._lookup

    def index(self, name: str) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise RegistryError(f"unknown modality {name!r}") from None

    def is_additive(self, name: str) -> bool:
        return self.kinds[self.index(name)] == ADDITIVE

    @classmethod
    def from_mapping(cls, payload: dict) -> "ModalityRegistry":
        entries = payload.get("modalities")
        if not entries:
            raise RegistryError("registry has no 'modalities' list")
        try:
            return cls(names=tuple(str(e["name"]) for e in entries),
                       kinds=tuple(str(e["kind"]) for e in entries))
        except (KeyError, TypeError):
            raise RegistryError("every modality entry needs 'name' and 'kind'") from None

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ModalityRegistry":
        """Load a registry file; ``None`` gives the packaged 21-modality default."""
        if path is None:
            text = resources.files("routine_relapse").joinpath("data/modalities.yaml").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_mapping(yaml.safe_load(text))


_DEFAULT: ModalityRegistry | None = None


def default_registry() -> ModalityRegistry:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = ModalityRegistry.load()
    return _DEFAULT
