"""Prompt template catalog loaded from package asset files.

Templates are opaque text with named placeholders ({task}, {method},
{candidates}, {plan}, {previous_steps}, {plan_first}, {plan_second});
rendering replaces only known placeholders so literal braces in task
text survive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

# Stage-identifying phrases: each template's instruction must contain its
# cue, which is what scripted fixtures and the DFS oracle key on.
CUES: dict[tuple[str, str], str] = {
    ("task_retrieve", "select_sort"): "Select candidate steps and arrange them into a plan",
    ("plan_retrieve", "draft"): "Draft an initial plan",
    ("plan_retrieve", "select_sort"): "Compose the final plan from the candidate steps",
    ("stepwise", "propose"): "State the next step for the task",
    ("stepwise", "select"): "Pick the next step from the numbered candidates",
    ("dfs", "propose"): "Suggest the next action to explore",
    ("dfs", "select"): "Choose one numbered candidate to extend the plan",
    ("rewrite", "draft"): "Draft a plan using the reference steps",
    ("rewrite", "rewrite"): "Revise the plan so every step comes from the candidate list",
    ("judge", "pairwise"): "Decide which plan better accomplishes the task",
}


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    user: str

    def render(self, **fields: str) -> tuple[str, str]:
        return _substitute(self.instruction, fields), _substitute(self.user, fields)


def _substitute(text: str, fields: dict[str, str]) -> str:
    def repl(m: re.Match) -> str:
        name = m.group(1)
        return str(fields[name]) if name in fields else m.group(0)

    return _PLACEHOLDER.sub(repl, text)


def _parse_asset(text: str) -> PromptTemplate:
    section = None
    parts: dict[str, list[str]] = {"instruction": [], "user": []}
    for line in text.splitlines():
        tag = line.strip().lower()
        if tag in ("[instruction]", "[user]"):
            section = tag[1:-1]
            continue
        if section is not None:
            parts[section].append(line)
    return PromptTemplate(
        instruction="\n".join(parts["instruction"]).strip(),
        user="\n".join(parts["user"]).strip(),
    )


class PromptCatalog:
    """Templates keyed by (method, stage)."""

    def __init__(self, templates: dict[tuple[str, str], PromptTemplate]):
        self._templates = templates

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptCatalog":
        templates: dict[tuple[str, str], PromptTemplate] = {}
        if directory is not None:
            paths = sorted(Path(directory).glob("*.txt"))
            raw = {p.stem: p.read_text(encoding="utf-8") for p in paths}
        else:
            root = resources.files(__package__) / "prompts"
            raw = {
                p.name[: -len(".txt")]: p.read_text(encoding="utf-8")
                for p in root.iterdir()
                if p.name.endswith(".txt")
            }
        for stem, text in raw.items():
            method, _, stage = stem.partition(".")
            if not stage:
                continue
            templates[(method, stage)] = _parse_asset(text)
        return cls(templates)

    def get(self, method: str, stage: str) -> PromptTemplate:
        try:
            return self._templates[(method, stage)]
        except KeyError:
            raise KeyError(f"no prompt template for ({method!r}, {stage!r})") from None

    def keys(self) -> list[tuple[str, str]]:
        return sorted(self._templates)


def render_numbered(items: list[str]) -> str:
    return "\n".join(f"{i + 1}. {item}" for i, item in enumerate(items))


_DEFAULT: PromptCatalog | None = None


def default_catalog() -> PromptCatalog:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptCatalog.load()
    return _DEFAULT
