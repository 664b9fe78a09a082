"""Shared plumbing: error types, deterministic RNG streams, float formatting."""

from __future__ import annotations

import hashlib

import numpy as np


class ConfigurationError(ValueError):
    """A config value is out of range or inconsistent with the data."""


class DegenerateCovarianceError(RuntimeError):
    """Covariance could not be decomposed even after jitter escalation."""


class DomainError(ValueError):
    """A point lies outside the region a component can handle."""


def _tag_to_int(tag: object) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_seed(master_seed: int, *tags: object) -> np.random.SeedSequence:
    """Derive an independent, reproducible seed stream from a master seed.

    Tags are arbitrary labels (strings, ints, floats); the same
    (master_seed, tags) pair always yields the same stream, and distinct
    tag tuples yield statistically independent streams.
    """
    spawn_key = tuple(_tag_to_int(t) for t in tags)
    return np.random.SeedSequence(entropy=master_seed, spawn_key=spawn_key)


def child_rng(master_seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, *tags))


def torch_seed_from(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed for a torch.Generator from a numpy stream."""
    return int(rng.integers(0, 2**63 - 1))


def fmt_float(v: float) -> str:
    """Shortest round-trip decimal form, stable across runs ('nan' for NaN)."""
    return repr(float(v))
