"""Token-id conventions shared by data, models, losses and decoders.

Layout for a vocabulary of size V: 0 blank, 1 unknown, 2..V-3 regular
tokens, V-2 start, V-1 end.
"""

from __future__ import annotations

from dataclasses import dataclass

BLANK = 0
UNK = 1
N_SPECIAL = 4


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < N_SPECIAL + 1:
            raise ValueError(f"vocabulary of size {self.size} leaves no regular tokens")

    @property
    def blank(self) -> int:
        return BLANK

    @property
    def unk(self) -> int:
        return UNK

    @property
    def sos(self) -> int:
        return self.size - 2

    @property
    def eos(self) -> int:
        return self.size - 1

    @property
    def n_tokens(self) -> int:
        return self.size - N_SPECIAL

    def token_id(self, k: int) -> int:
        """Id of the k-th regular token (0-based)."""
        return 2 + k

    def is_special(self, i: int) -> bool:
        return i in (BLANK, self.sos, self.eos)

    def strip(self, ids) -> list[int]:
        return [int(i) for i in ids if not self.is_special(int(i))]
