"""Tensor-to-component assignment and parameter accounting."""

from __future__ import annotations

import fnmatch
import json
import logging
import re
from dataclasses import dataclass, field
from os import PathLike

from .container import Checkpoint

log = logging.getLogger(__name__)

TEXT_ENCODER = "text_encoder"
IMAGE_GENERATOR = "image_generator"
EXCLUDED = "excluded"
COMPONENTS = (TEXT_ENCODER, IMAGE_GENERATOR, EXCLUDED)


def check_component(component: str) -> str:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; expected one of {', '.join(COMPONENTS)}")
    return component


def _check_glob(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern:
        raise ValueError(f"invalid glob pattern {pattern!r}")
    try:
        re.compile(fnmatch.translate(pattern))
    except re.error as exc:
        raise ValueError(f"invalid glob pattern {pattern!r}: {exc}") from None
    return pattern


@dataclass(frozen=True)
class Rule:
    pattern: str
    component: str

    def __post_init__(self):
        _check_glob(self.pattern)
        check_component(self.component)

    def matches(self, name: str) -> bool:
        return fnmatch.fnmatchcase(name, self.pattern)


@dataclass(frozen=True)
class PrunablePolicy:
    min_rank: int = 2
    exclude_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.min_rank < 1:
            raise ValueError(f"min_rank must be >= 1, got {self.min_rank}")
        object.__setattr__(self, "exclude_patterns", tuple(_check_glob(p) for p in self.exclude_patterns))

    def is_prunable(self, name: str, ndim: int) -> bool:
        if ndim < self.min_rank:
            return False
        return not any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)


@dataclass(frozen=True)
class Manifest:
    rules: tuple[Rule, ...] = ()
    prunable: PrunablePolicy = field(default_factory=PrunablePolicy)

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if not isinstance(d, dict):
            raise ValueError("manifest must be a JSON object")
        rules = []
        for i, r in enumerate(d.get("rules", [])):
            if not isinstance(r, dict) or "pattern" not in r or "component" not in r:
                raise ValueError(f"manifest rule {i} needs 'pattern' and 'component'")
            rules.append(Rule(r["pattern"], r["component"]))
        p = d.get("prunable", {}) or {}
        policy = PrunablePolicy(int(p.get("min_rank", 2)), tuple(p.get("exclude", ())))
        return cls(tuple(rules), policy)

    def to_dict(self) -> dict:
        return {
            "rules": [{"pattern": r.pattern, "component": r.component} for r in self.rules],
            "prunable": {"min_rank": self.prunable.min_rank, "exclude": list(self.prunable.exclude_patterns)},
        }

    def component_of(self, name: str) -> str | None:
        for rule in self.rules:
            if rule.matches(name):
                return rule.component
        return None


def load_manifest(path: str | PathLike) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"manifest {path}: invalid JSON: {exc}") from None
    return Manifest.from_dict(data)


def save_manifest(manifest: Manifest, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


class Assignment(dict):
    """``tensor name -> component``; ``warnings`` lists the unmatched tensors."""

    def __init__(self, *args, warnings=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.warnings = list(warnings)

    def members(self, component: str) -> list[str]:
        check_component(component)
        return [name for name, c in self.items() if c == component]


def classify_tensors(ckpt: Checkpoint, manifest: Manifest) -> Assignment:
    """First matching rule wins. Unmatched tensors go to ``excluded`` with a warning."""
    out = Assignment()
    for name in ckpt.names():
        comp = manifest.component_of(name)
        if comp is None:
            msg = f"tensor {name!r} matches no manifest rule; treated as {EXCLUDED}"
            log.warning(msg)
            out.warnings.append(msg)
            comp = EXCLUDED
        out[name] = comp
    return out


@dataclass(frozen=True)
class ComponentProfile:
    component: str
    total_params: int
    prunable_params: int
    tensor_names: tuple[str, ...] = ()


def component_profiles(
    ckpt: Checkpoint,
    assignment: dict[str, str],
    policy: PrunablePolicy | None = None,
) -> list[ComponentProfile]:
    """One profile per component, in ``COMPONENTS`` order."""
    policy = policy or PrunablePolicy()
    missing = [n for n in ckpt.names() if n not in assignment]
    if missing:
        raise ValueError(f"assignment does not cover tensors: {missing[:5]}")
    profiles = []
    for comp in COMPONENTS:
        names = [n for n in ckpt.names() if assignment[n] == comp]
        total = sum(ckpt[n].size for n in names)
        prunable = sum(ckpt[n].size for n in names if policy.is_prunable(n, ckpt[n].ndim))
        profiles.append(ComponentProfile(comp, total, prunable, tuple(names)))
    return profiles


def prunable_set(
    ckpt: Checkpoint,
    manifest: Manifest,
    component: str,
    assignment: dict[str, str] | None = None,
) -> list[str]:
    check_component(component)
    if component == EXCLUDED:
        return []
    if assignment is None:
        assignment = classify_tensors(ckpt, manifest)
    return [
        t.name
        for t in ckpt
        if assignment[t.name] == component and manifest.prunable.is_prunable(t.name, t.ndim)
    ]
