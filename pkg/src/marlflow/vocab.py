"""Token vocabulary with reserved control tokens and role-identity tokens.

Id layout is dense from 0: <pad>, <end>, <sep>, one role token per agent
role (in declaration order), then content tokens.
"""
from __future__ import annotations

from typing import Iterable, Sequence

PAD = 0
END = 1
SEP = 2
RESERVED_SURFACES = ("<pad>", "<end>", "<sep>")

MAX_SIZE = 256


class Vocabulary:
    def __init__(self, roles: Sequence[str], content: Sequence[str]):
        self.roles = tuple(roles)
        self.content = tuple(content)
        surfaces = list(RESERVED_SURFACES)
        surfaces += [f"<role:{r}>" for r in self.roles]
        surfaces += list(self.content)
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("vocabulary surfaces must be unique")
        if any(not s or any(c.isspace() for c in s) for s in surfaces):
            raise ValueError("vocabulary surfaces must be non-empty and "
                             "whitespace-free")
        if len(surfaces) > MAX_SIZE:
            raise ValueError(f"vocabulary size {len(surfaces)} exceeds {MAX_SIZE}")
        self._surfaces = tuple(surfaces)
        self._ids = {s: i for i, s in enumerate(surfaces)}
        self._content_start = len(RESERVED_SURFACES) + len(self.roles)

    @property
    def size(self) -> int:
        return len(self._surfaces)

    @property
    def n_roles(self) -> int:
        return len(self.roles)

    @property
    def feature_dim(self) -> int:
        """Bag-of-token counts over the full vocab plus a role one-hot block."""
        return self.size + self.n_roles

    def role_index(self, role_id: str) -> int:
        try:
            return self.roles.index(role_id)
        except ValueError:
            raise KeyError(f"role {role_id!r} has no identity token") from None

    def role_token(self, role_id: str) -> int:
        return len(RESERVED_SURFACES) + self.role_index(role_id)

    def id_of(self, surface: str) -> int:
        return self._ids[surface]

    def surface_of(self, token_id: int) -> str:
        return self._surfaces[token_id]

    def is_content(self, token_id: int) -> bool:
        return token_id >= self._content_start

    def encode(self, surfaces: Iterable[str]) -> tuple[int, ...]:
        return tuple(self._ids[s] for s in surfaces)

    def decode(self, token_ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self._surfaces[t] for t in token_ids)
