"""Flat parameter dictionaries keyed by dotted paths."""

from __future__ import annotations

from typing import Iterator, Mapping, MutableMapping

import numpy as np

from .numerics import Parameter

ParamDict = MutableMapping[str, Parameter]


def scope(params: Mapping[str, Parameter], prefix: str) -> dict[str, Parameter]:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def merge(into: ParamDict, prefix: str, sub: Mapping[str, Parameter]) -> ParamDict:
    for k, v in sub.items():
        name = f"{prefix}.{k}" if prefix else k
        v.name = name
        into[name] = v
    return into


def iter_params(params: Mapping[str, Parameter]) -> Iterator[Parameter]:
    return iter(params.values())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def linear_params(rng: np.random.Generator, fan_in: int, fan_out: int, zero: bool = False) -> dict[str, Parameter]:
    w = np.zeros((fan_in, fan_out)) if zero else xavier(rng, fan_in, fan_out)
    return {"w": Parameter(w), "b": Parameter(np.zeros(fan_out))}


def norm_params(channels: int) -> dict[str, Parameter]:
    return {"gain": Parameter(np.ones(channels)), "shift": Parameter(np.zeros(channels))}


def count(params: Mapping[str, Parameter]) -> int:
    return int(sum(p.size for p in params.values()))
