"""Synthetic patch-color lookup task.

Each example presents a colored grid as image tokens, a short system prefix,
and an instruction naming a (row, col) cell; the answer is the color token of
that cell, read at the trailing answer-slot position. Sequence layout:

    [sys x sys_len] [grid_side^2 color tokens] [query x query_len] [answer slot]

The query repeats the (row word, column word) pair until it fills the query
window, so every instruction position carries signal instead of fixed filler.
Token ids are packed as colors, row words, column words, system tokens, then
the answer-slot marker. Everything is a pure function of the seeds involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .layout import TokenLayout


@dataclass(frozen=True)
class SyntheticTaskSpec:
    grid_side: int = 6
    n_colors: int = 8
    sys_len: int = 4
    query_len: int = 6
    seed: int = 42

    def __post_init__(self):
        if self.grid_side < 2:
            raise ConfigError("grid_side must be >= 2")
        if self.n_colors < 2:
            raise ConfigError("n_colors must be >= 2")
        if self.sys_len < 1:
            raise ConfigError("sys_len must be >= 1")
        # The (row, col) pair tiles the query window exactly.
        if self.query_len < 2 or self.query_len % 2 != 0:
            raise ConfigError("query_len must be an even count >= 2")

    @property
    def n_patches(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def seq_len(self) -> int:
        return self.sys_len + self.n_patches + self.query_len + 1

    # Token id blocks, in order.
    def color_id(self, color: int) -> int:
        return color

    def row_id(self, row: int) -> int:
        return self.n_colors + row

    def col_id(self, col: int) -> int:
        return self.n_colors + self.grid_side + col

    @property
    def sys_ids(self) -> tuple[int, ...]:
        base = self.n_colors + 2 * self.grid_side
        return tuple(base + i for i in range(self.sys_len))

    @property
    def answer_slot_id(self) -> int:
        return self.n_colors + 2 * self.grid_side + self.sys_len

    @property
    def vocab_size(self) -> int:
        return self.answer_slot_id + 1

    def layout(self) -> TokenLayout:
        return TokenLayout.from_lengths(self.sys_len, self.n_patches, self.query_len + 1)


@dataclass(frozen=True)
class SyntheticExample:
    tokens: tuple[int, ...]
    layout: TokenLayout
    gold: int
    queried_patch: int

    @property
    def answer_position(self) -> int:
        return len(self.tokens) - 1


def gen_dataset(spec: SyntheticTaskSpec, count: int, split_seed: int) -> list[SyntheticExample]:
    """Generate examples deterministically from (spec.seed, split_seed)."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng((spec.seed, split_seed))
    layout = spec.layout()
    out = []
    for _ in range(count):
        colors = rng.integers(0, spec.n_colors, size=spec.n_patches)
        r = int(rng.integers(0, spec.grid_side))
        c = int(rng.integers(0, spec.grid_side))
        patch = r * spec.grid_side + c
        tokens = (
            spec.sys_ids
            + tuple(spec.color_id(int(col)) for col in colors)
            + (spec.row_id(r), spec.col_id(c)) * (spec.query_len // 2)
            + (spec.answer_slot_id,)
        )
        out.append(SyntheticExample(
            tokens=tokens,
            layout=layout,
            gold=spec.color_id(int(colors[patch])),
            queried_patch=patch,
        ))
    return out


def example_to_dict(ex: SyntheticExample) -> dict:
    return {
        "tokens": list(ex.tokens),
        "sys_len": len(ex.layout.sys),
        "img_len": len(ex.layout.img),
        "ins_len": len(ex.layout.ins),
        "gold": ex.gold,
        "queried_patch": ex.queried_patch,
    }


def example_from_dict(obj: dict) -> SyntheticExample:
    layout = TokenLayout.from_lengths(obj["sys_len"], obj["img_len"], obj["ins_len"])
    return SyntheticExample(
        tokens=tuple(int(t) for t in obj["tokens"]),
        layout=layout,
        gold=int(obj["gold"]),
        queried_patch=int(obj["queried_patch"]),
    )


def save_jsonl(examples: Sequence[SyntheticExample], path) -> None:
    text = "".join(json.dumps(example_to_dict(ex), separators=(",", ":")) + "\n"
                   for ex in examples)
    Path(path).write_text(text, encoding="utf-8")


def load_jsonl(path) -> list[SyntheticExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(example_from_dict(json.loads(line)))
    return out
