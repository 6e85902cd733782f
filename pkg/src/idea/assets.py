"""Triplet assets, the capacity-bounded library and its text serialization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import (
    AssetParseError,
    CorruptLibraryError,
    InvalidInputError,
    UnsupportedVersionError,
)
from .fusion import SoftPrompt
from .stats import FeatureStats, w2_distance

FORMAT_VERSION = "idea-assets/1"
FILE_SUFFIX = ".idea-assets"


@dataclass(frozen=True, eq=False)
class Asset:
    prompt: SoftPrompt
    coords: FeatureStats
    uncertainty: float

    def __post_init__(self):
        u = float(self.uncertainty)
        if not (math.isfinite(u) and u >= 0):
            raise InvalidInputError(f"uncertainty must be finite and >= 0, got {u}")
        if self.prompt.dim != self.coords.dim:
            raise InvalidInputError("prompt and coordinates disagree on the feature dimension")
        object.__setattr__(self, "uncertainty", u)

    def __eq__(self, other):
        if not isinstance(other, Asset):
            return NotImplemented
        return (
            self.prompt == other.prompt
            and self.coords == other.coords
            and self.uncertainty == other.uncertainty
        )

    __hash__ = None

    def averaged_with(self, other: "Asset") -> "Asset":
        return Asset(
            SoftPrompt(0.5 * (self.prompt.tokens + other.prompt.tokens)),
            FeatureStats(0.5 * (self.coords.mean + other.coords.mean), 0.5 * (self.coords.std + other.coords.std)),
            0.5 * (self.uncertainty + other.uncertainty),
        )


class AssetLibrary:
    """Ordered asset collection holding at most ``capacity`` entries.

    Writes must come from a single owner; concurrent readers need a snapshot.
    """

    def __init__(self, capacity: int = 32, prompt_len: Optional[int] = None,
                 feature_dim: Optional[int] = None, assets=()):
        if capacity < 1:
            raise InvalidInputError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.prompt_len = prompt_len
        self.feature_dim = feature_dim
        self._assets: list = []
        for a in assets:
            if len(self._assets) >= self.capacity:
                raise InvalidInputError("more assets than capacity")
            self._check(a)
            self._assets.append(a)

    def _check(self, asset: Asset):
        if self.prompt_len is None:
            self.prompt_len = asset.prompt.length
        if self.feature_dim is None:
            self.feature_dim = asset.coords.dim
        if asset.prompt.length != self.prompt_len or asset.coords.dim != self.feature_dim:
            raise InvalidInputError(
                f"asset dims (L={asset.prompt.length}, C={asset.coords.dim}) do not match "
                f"library (L={self.prompt_len}, C={self.feature_dim})"
            )

    def __len__(self):
        return len(self._assets)

    def __iter__(self) -> Iterator[Asset]:
        return iter(self._assets)

    def __getitem__(self, i) -> Asset:
        return self._assets[i]

    def __eq__(self, other):
        if not isinstance(other, AssetLibrary):
            return NotImplemented
        return (
            self.capacity == other.capacity
            and self.prompt_len == other.prompt_len
            and self.feature_dim == other.feature_dim
            and self._assets == other._assets
        )

    __hash__ = None

    def copy(self) -> "AssetLibrary":
        return AssetLibrary(self.capacity, self.prompt_len, self.feature_dim, self._assets)

    def nearest(self, coords: FeatureStats) -> int:
        """Index of the stored asset closest in W2; ties go to the lowest index."""
        if not self._assets:
            raise InvalidInputError("library is empty")
        dists = [w2_distance(a.coords, coords) for a in self._assets]
        return int(np.argmin(dists))

    def insert_or_merge(self, asset: Asset) -> int:
        """Append below capacity, else average into the nearest asset. Returns the slot index."""
        self._check(asset)
        if len(self._assets) < self.capacity:
            self._assets.append(asset)
            return len(self._assets) - 1
        k = self.nearest(asset.coords)
        self._assets[k] = self._assets[k].averaged_with(asset)
        return k


def insert_or_merge(lib: AssetLibrary, new_asset: Asset) -> AssetLibrary:
    lib.insert_or_merge(new_asset)
    return lib


def _num(x: float) -> str:
    # shortest repr round-trips exactly and keeps -0.0 a float
    return repr(float(x))


def _vec(v) -> str:
    return "[" + ", ".join(_num(x) for x in v) + "]"


def serialize(lib: AssetLibrary) -> bytes:
    lines = [
        "{",
        f'  "format": {json.dumps(FORMAT_VERSION)},',
        f'  "dims": {{"L": {json.dumps(lib.prompt_len)}, "C": {json.dumps(lib.feature_dim)}}},',
        f'  "capacity": {lib.capacity},',
    ]
    if not len(lib):
        lines.append('  "assets": []')
    else:
        lines.append('  "assets": [')
        entries = []
        for a in lib:
            rows = ",\n        ".join(_vec(r) for r in a.prompt.tokens)
            entries.append(
                "    {\n"
                f'      "prompt": [\n        {rows}\n      ],\n'
                f'      "mean": {_vec(a.coords.mean)},\n'
                f'      "std": {_vec(a.coords.std)},\n'
                f'      "uncertainty": {_num(a.uncertainty)}\n'
                "    }"
            )
        lines.append(",\n".join(entries))
        lines.append("  ]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _array(value, ndim, what):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise CorruptLibraryError(f"{what} is not numeric: {exc}") from None
    if arr.ndim != ndim:
        raise CorruptLibraryError(f"{what} must be a {ndim}-d array")
    return arr


def deserialize(data) -> AssetLibrary:
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AssetParseError(f"not UTF-8 text: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise AssetParseError(f"malformed asset document: {exc}") from None
    if not isinstance(doc, dict):
        raise AssetParseError("asset document must be an object")
    version = doc.get("format")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported asset format {version!r}")
    try:
        dims = doc["dims"]
        prompt_len, feature_dim = dims["L"], dims["C"]
        capacity = int(doc["capacity"])
        raw_assets = doc["assets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptLibraryError(f"missing or invalid field: {exc}") from None
    if not isinstance(raw_assets, list):
        raise CorruptLibraryError("assets must be an array")
    assets = []
    for i, entry in enumerate(raw_assets):
        try:
            prompt = _array(entry["prompt"], 2, f"asset {i} prompt")
            mean = _array(entry["mean"], 1, f"asset {i} mean")
            std = _array(entry["std"], 1, f"asset {i} std")
            u = float(entry["uncertainty"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptLibraryError(f"asset {i}: {exc}") from None
        if prompt.shape != (prompt_len, feature_dim) or mean.shape != (feature_dim,) or std.shape != (feature_dim,):
            raise CorruptLibraryError(f"asset {i} does not match dims L={prompt_len}, C={feature_dim}")
        try:
            assets.append(Asset(SoftPrompt(prompt), FeatureStats(mean, std), u))
        except InvalidInputError as exc:
            raise CorruptLibraryError(f"asset {i}: {exc}") from None
    try:
        return AssetLibrary(capacity, prompt_len, feature_dim, assets)
    except InvalidInputError as exc:
        raise CorruptLibraryError(str(exc)) from None


def save_library(lib: AssetLibrary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(lib))


def load_library(path) -> AssetLibrary:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
