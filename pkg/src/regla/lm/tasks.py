"""Synthetic diagnostic tasks and a byte-level corpus reader.

Every task draws batches as (tokens, mask): tokens is (B, T) int64, mask is
(B, T - 1) bool aligned with the next-token targets tokens[:, 1:].  Loss
and accuracy are computed only where the mask is set, so tasks can score
just the positions that are actually predictable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Protocol, Tuple

import numpy as np
import torch
from torch import Tensor


class Task(Protocol):
    name: str
    vocab: int

    def sample(self, rng: np.random.Generator, batch_size: int) -> Tuple[Tensor, Tensor]:
        ...


@dataclass
class AssocRecallTask:
    """Key-value recall: k1 v1 ... kn vn SEP kq -> vq.

    Keys are drawn without replacement from [0, n_keys), values with
    replacement from [n_keys, n_keys + n_values); SEP is the last vocab id.
    Only the answer position is scored.
    """

    n_pairs: int = 8
    n_keys: int = 16
    n_values: int = 16
    name: str = "assoc_recall"

    def __post_init__(self) -> None:
        if self.n_pairs < 1:
            raise ValueError("need at least one pair")
        if self.n_pairs > self.n_keys:
            raise ValueError(
                f"{self.n_pairs} pairs need distinct keys but only "
                f"{self.n_keys} key symbols exist"
            )

    @property
    def vocab(self) -> int:
        return self.n_keys + self.n_values + 1

    @property
    def sep(self) -> int:
        return self.vocab - 1

    def sample(self, rng: np.random.Generator, batch_size: int) -> Tuple[Tensor, Tensor]:
        n = self.n_pairs
        length = 2 * n + 3  # pairs, SEP, query key, answer
        tokens = np.empty((batch_size, length), dtype=np.int64)
        for b in range(batch_size):
            keys = rng.choice(self.n_keys, size=n, replace=False)
            values = self.n_keys + rng.integers(0, self.n_values, size=n)
            q = rng.integers(0, n)
            tokens[b, 0 : 2 * n : 2] = keys
            tokens[b, 1 : 2 * n : 2] = values
            tokens[b, 2 * n] = self.sep
            tokens[b, 2 * n + 1] = keys[q]
            tokens[b, 2 * n + 2] = values[q]
        mask = np.zeros((batch_size, length - 1), dtype=bool)
        mask[:, -1] = True  # score the answer token only
        return torch.from_numpy(tokens), torch.from_numpy(mask)


@dataclass
class CopyTask:
    """Repeat a random segment: s1 .. sn SEP s1 .. sn, scoring the copy."""

    seg_len: int = 12
    n_symbols: int = 16
    name: str = "copy"

    def __post_init__(self) -> None:
        if self.seg_len < 1 or self.n_symbols < 2:
            raise ValueError("segment length >= 1 and at least 2 symbols required")

    @property
    def vocab(self) -> int:
        return self.n_symbols + 1

    @property
    def sep(self) -> int:
        return self.n_symbols

    def sample(self, rng: np.random.Generator, batch_size: int) -> Tuple[Tensor, Tensor]:
        n = self.seg_len
        seg = rng.integers(0, self.n_symbols, size=(batch_size, n))
        tokens = np.concatenate(
            [seg, np.full((batch_size, 1), self.sep), seg], axis=1
        ).astype(np.int64)
        mask = np.zeros((batch_size, 2 * n), dtype=bool)
        mask[:, n:] = True  # targets after SEP reproduce the segment
        return torch.from_numpy(tokens), torch.from_numpy(mask)


@dataclass
class CharCorpusTask:
    """Byte-level language modeling over a text file; every position scores."""

    path: str
    seq_len: int = 128
    name: str = "char"
    vocab: int = 256

    def __post_init__(self) -> None:
        with open(self.path, "rb") as fh:
            self._data = np.frombuffer(fh.read(), dtype=np.uint8)
        if self._data.size < self.seq_len + 1:
            raise ValueError(
                f"corpus {self.path!r} has {self._data.size} bytes, "
                f"need at least seq_len + 1 = {self.seq_len + 1}"
            )

    def sample(self, rng: np.random.Generator, batch_size: int) -> Tuple[Tensor, Tensor]:
        starts = rng.integers(0, self._data.size - self.seq_len, size=batch_size)
        tokens = np.stack(
            [self._data[s : s + self.seq_len + 1] for s in starts]
        ).astype(np.int64)
        mask = np.ones((batch_size, self.seq_len), dtype=bool)
        return torch.from_numpy(tokens), torch.from_numpy(mask)

    def windows(self, n: int) -> Tensor:
        """First n non-overlapping (seq_len + 1)-byte windows, for eval."""
        span = self.seq_len + 1
        count = min(n, self._data.size // span)
        if count == 0:
            raise ValueError("corpus shorter than one evaluation window")
        return torch.from_numpy(
            np.stack([self._data[i * span : (i + 1) * span] for i in range(count)]).astype(
                np.int64
            )
        )


def make_task(name: str, char_path: str | None = None, **kwargs) -> Task:
    if name == "assoc_recall":
        return AssocRecallTask(**kwargs)
    if name == "copy":
        return CopyTask(**kwargs)
    if name == "char":
        if char_path is None or not os.path.exists(char_path):
            raise ValueError("char task needs an existing --char-path file")
        return CharCorpusTask(path=char_path, **kwargs)
    raise ValueError(f"unknown task {name!r} (expected assoc_recall, copy, or char)")
