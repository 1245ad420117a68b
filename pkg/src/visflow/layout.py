"""Token segment bookkeeping for system / image / instruction positions."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import LayoutError


@dataclass(frozen=True)
class TokenLayout:
    """Index segments for the system prompt, image patches, and instruction.

    Segments are tuples of positions. Concatenated in order they must cover
    0..n-1 exactly, which enforces contiguity, ordering (system before image
    before instruction), and disjointness in one check. A segment may be
    empty; metrics that average over an empty segment reject it at call time.
    """

    sys: tuple[int, ...]
    img: tuple[int, ...]
    ins: tuple[int, ...]

    def __post_init__(self):
        combined = list(self.sys) + list(self.img) + list(self.ins)
        if combined != list(range(len(combined))):
            raise LayoutError(
                "segments must be contiguous, ordered sys < img < ins, "
                "and cover 0..n-1 exactly"
            )

    @classmethod
    def from_lengths(cls, sys_len: int, img_len: int, ins_len: int) -> "TokenLayout":
        if min(sys_len, img_len, ins_len) < 0:
            raise LayoutError("segment lengths must be non-negative")
        a, b = sys_len, sys_len + img_len
        return cls(
            tuple(range(a)),
            tuple(range(a, b)),
            tuple(range(b, b + ins_len)),
        )

    @property
    def seq_len(self) -> int:
        return len(self.sys) + len(self.img) + len(self.ins)

    def segment_of(self, position: int) -> str:
        if position in set(self.sys):
            return "sys"
        if position in set(self.img):
            return "img"
        if position in set(self.ins):
            return "ins"
        raise LayoutError(f"position {position} outside layout")

    def extended(self, extra_ins: int) -> "TokenLayout":
        """Layout with extra_ins generated positions appended to the instruction."""
        if extra_ins < 0:
            raise LayoutError("extra_ins must be non-negative")
        n = self.seq_len
        return TokenLayout(self.sys, self.img, self.ins + tuple(range(n, n + extra_ins)))
