"""Synthetic sample generation, config encoding, splits and on-disk format.

Directory layout (little-endian float32 tensors, row-major, sample-major)::

    manifest.json   sizes, splits, seeds, normalization, CRC32 per file
    images.f32      [n, resolution, resolution]
    configs.f32     [n, 14]
    targets.f32     [n, 201]
    samples.jsonl   one line per sample: pattern spec + stack description
"""

from __future__ import annotations

import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, physics
from .errors import DataError
from .fileio import atomic_write
from .physics import Layer, MaterialSpec, PatternKind, StackConfig

FORMAT_VERSION = 1
CONFIG_LEN = 14
LIBRARY_ID = "default-18-v1"
DEFAULT_SPLIT = (0.90, 0.05, 0.05)
PAPER_SPLIT = (0.99, 0.005, 0.005)

_RS_LOG_SPAN = math.log10(377.0 / physics.METALLIC_RS)
_F32 = np.dtype("<f4")

# (name, eps_r, tan_de, mu_r, tan_dm); typical datasheet values at ~10 GHz.
_LIBRARY = (
    ("rohacell_31hf", 1.05, 0.0017, 1.0, 0.0),
    ("rt_duroid_5880", 2.20, 0.0009, 1.0, 0.0),
    ("rt_duroid_5870", 2.33, 0.0012, 1.0, 0.0),
    ("ro3003", 3.00, 0.0010, 1.0, 0.0),
    ("ro4003c", 3.38, 0.0027, 1.0, 0.0),
    ("kapton_polyimide", 3.40, 0.0020, 1.0, 0.0),
    ("ro4350b", 3.48, 0.0037, 1.0, 0.0),
    ("taconic_rf35", 3.50, 0.0018, 1.0, 0.0),
    ("isola_370hr", 4.04, 0.0210, 1.0, 0.0),
    ("fr4", 4.30, 0.0250, 1.0, 0.0),
    ("tmm4", 4.50, 0.0020, 1.0, 0.0),
    ("tmm6", 6.00, 0.0023, 1.0, 0.0),
    ("ro3006", 6.15, 0.0020, 1.0, 0.0),
    ("rt_duroid_6006", 6.45, 0.0027, 1.0, 0.0),
    ("ro3010", 10.2, 0.0022, 1.0, 0.0),
    ("rt_duroid_6010", 10.2, 0.0023, 1.0, 0.0),
    ("magnetic_composite_a", 7.00, 0.0200, 1.5, 0.080),
    ("magnetic_composite_b", 9.50, 0.0250, 3.5, 0.100),
)


def material_library() -> dict[str, MaterialSpec]:
    """The 18 substrate materials, keyed by name in a fixed order."""
    return {
        name: MaterialSpec(eps, tde, mu, tdm, name) for name, eps, tde, mu, tdm in _LIBRARY
    }


# --- config vector -------------------------------------------------------


def _encode_layer(layer: Layer) -> list[float]:
    m = layer.material
    return [
        (m.eps_r - 1.0) / 11.0,
        m.tan_de / 0.1,
        (m.mu_r - 1.0) / 3.0,
        m.tan_dm / 0.1,
        (layer.thickness_mm - 0.1) / 4.9,
    ]


def _decode_layer(v) -> Layer:
    material = MaterialSpec(
        eps_r=1.0 + 11.0 * v[0],
        tan_de=0.1 * v[1],
        mu_r=1.0 + 3.0 * v[2],
        tan_dm=0.1 * v[3],
    )
    return Layer(material, 0.1 + 4.9 * v[4])


def encode_config(stack: StackConfig) -> np.ndarray:
    """14-entry [0, 1] vector; ``layers[0]`` (on the backing) is layer 1."""
    vec = np.zeros(CONFIG_LEN, dtype=np.float64)
    vec[0] = 1.0 if stack.n_layers == 2 else 0.0
    vec[1] = 1.0 if stack.pattern_kind is PatternKind.RESISTIVE else 0.0
    vec[2] = math.log10(stack.sheet_resistance / physics.METALLIC_RS) / _RS_LOG_SPAN
    for k, layer in enumerate(stack.layers):
        vec[3 + 5 * k : 8 + 5 * k] = _encode_layer(layer)
    vec[13] = (stack.period_mm - 3.0) / 12.0
    return vec


def decode_config(vec) -> StackConfig:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (CONFIG_LEN,):
        raise DataError(f"config vector must have {CONFIG_LEN} entries")
    n_layers = 2 if vec[0] >= 0.5 else 1
    layers = tuple(_decode_layer(vec[3 + 5 * k : 8 + 5 * k]) for k in range(n_layers))
    kind = PatternKind.RESISTIVE if vec[1] >= 0.5 else PatternKind.METALLIC
    if kind is PatternKind.METALLIC:
        rs = physics.METALLIC_RS
    else:
        rs = physics.METALLIC_RS * 10.0 ** (vec[2] * _RS_LOG_SPAN)
    return StackConfig(layers, kind, rs, 3.0 + 12.0 * vec[13], validate=False)


def normalize_db(s11_db):
    return (np.asarray(s11_db) - physics.DB_FLOOR) / (physics.DB_CEIL - physics.DB_FLOOR)


def denormalize(t):
    return 40.0 * np.asarray(t) - 40.0


# --- generation ------------------------------------------------------------


def sample_stream(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index``; depends on nothing else."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(seq))


def sample_stack(rng: np.random.Generator) -> StackConfig:
    library = list(material_library().values())
    n_layers = int(rng.integers(1, 3))
    lo, hi = physics.THICKNESS_RANGE_MM
    layers = tuple(
        Layer(library[int(rng.integers(len(library)))], float(rng.uniform(lo, hi)))
        for _ in range(n_layers)
    )
    if rng.random() < 0.5:
        kind, rs = PatternKind.METALLIC, physics.METALLIC_RS
    else:
        kind, rs = PatternKind.RESISTIVE, float(rng.uniform(*physics.RESISTIVE_RS_RANGE))
    period = float(rng.uniform(*physics.PERIOD_RANGE_MM))
    return StackConfig(layers, kind, rs, period)


@dataclass
class SampleRecord:
    pattern: geometry.PatternSpec
    stack: StackConfig

    def to_dict(self) -> dict:
        return {"pattern": self.pattern.to_dict(), "stack": self.stack.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(geometry.PatternSpec.from_dict(d["pattern"]), StackConfig.from_dict(d["stack"]))


def make_sample(master_seed: int, index: int, resolution: int):
    """Image, config vector, normalized target and record for one index."""
    rng = sample_stream(master_seed, index)
    pattern_class = geometry.CLASSES[index % len(geometry.CLASSES)]
    pattern = geometry.sample_pattern(pattern_class, rng, resolution)
    stack = sample_stack(rng)
    grid = geometry.render(pattern, resolution)
    s11 = physics.reflection_spectrum(stack, grid)
    return grid, encode_config(stack), normalize_db(s11), SampleRecord(pattern, stack)


@dataclass
class Dataset:
    images: np.ndarray  # [n, R, R] float32
    configs: np.ndarray  # [n, 14] float32
    targets: np.ndarray  # [n, 201] float32
    resolution: int
    master_seed: int
    records: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, name: str):
        """(images, configs, targets) for one named split."""
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        idx = np.asarray(self.splits[name], dtype=np.int64)
        return self.images[idx], self.configs[idx], self.targets[idx]

    def class_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in geometry.CLASSES}
        for r in self.records:
            counts[r.pattern.pattern_class.value] += 1
        return counts


def generate(
    n: int,
    resolution: int = geometry.DEFAULT_RESOLUTION,
    master_seed: int = 0,
    workers: int = 1,
) -> Dataset:
    """Generate ``n`` samples; sample ``i`` depends only on ``(master_seed, i)``.

    Classes cycle round-robin through the catalog, so every class appears
    once ``n >= 16``. ``workers > 1`` fans out over a thread pool; the
    result is bit-identical to the serial run.
    """
    if n < 20:
        raise DataError(f"need at least 20 samples, got {n}")
    images = np.empty((n, resolution, resolution), dtype=np.float32)
    configs = np.empty((n, CONFIG_LEN), dtype=np.float32)
    targets = np.empty((n, physics.N_FREQ), dtype=np.float32)
    records: list = [None] * n

    def fill(i):
        grid, cfg, tgt, rec = make_sample(master_seed, i, resolution)
        images[i], configs[i], targets[i], records[i] = grid, cfg, tgt, rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for i in range(n):
            fill(i)
    return Dataset(images, configs, targets, int(resolution), int(master_seed), records)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError("split fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_val - n_test
    for label, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count < 1:
            raise DataError(f"{label} split would be empty for n={n} and fractions {fractions}")
    return n_train, n_val, n_test


def split(dataset: Dataset, fractions=DEFAULT_SPLIT, seed: int = 0) -> dict:
    """Seeded shuffle then partition into train/val/test index lists."""
    n = len(dataset)
    n_train, n_val, _ = split_sizes(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    splits = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    dataset.splits = splits
    return splits


# --- persistence -----------------------------------------------------------

_TENSOR_FILES = ("images.f32", "configs.f32", "targets.f32")


def _crc(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


def save(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payloads = {
        "images.f32": np.ascontiguousarray(dataset.images, dtype=_F32).tobytes(),
        "configs.f32": np.ascontiguousarray(dataset.configs, dtype=_F32).tobytes(),
        "targets.f32": np.ascontiguousarray(dataset.targets, dtype=_F32).tobytes(),
        "samples.jsonl": "".join(
            json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in dataset.records
        ).encode("utf-8"),
    }
    manifest = {
        "format_version": FORMAT_VERSION,
        "sample_count": len(dataset),
        "resolution": dataset.resolution,
        "frequency_grid": {
            "start_ghz": physics.F_START_GHZ,
            "stop_ghz": physics.F_STOP_GHZ,
            "points": physics.N_FREQ,
        },
        "splits": dataset.splits,
        "master_seed": dataset.master_seed,
        "material_library": LIBRARY_ID,
        "normalization": {
            "target": "t = (s11_db - db_floor) / (db_ceil - db_floor)",
            "db_floor": physics.DB_FLOOR,
            "db_ceil": physics.DB_CEIL,
            "config_len": CONFIG_LEN,
        },
        "files": {
            name: {"bytes": len(data), "crc32": _crc(data)} for name, data in payloads.items()
        },
    }
    for name, data in payloads.items():
        atomic_write(directory / name, data)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    atomic_write(directory / "manifest.json", text.encode("utf-8"))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"dataset format version {manifest.get('format_version')} "
            f"is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def load(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    n = int(manifest["sample_count"])
    res = int(manifest["resolution"])
    shapes = {
        "images.f32": (n, res, res),
        "configs.f32": (n, CONFIG_LEN),
        "targets.f32": (n, physics.N_FREQ),
    }
    arrays = {}
    for name in _TENSOR_FILES:
        path = directory / name
        if not path.is_file():
            raise DataError(f"missing {name}")
        data = path.read_bytes()
        expected = int(np.prod(shapes[name])) * _F32.itemsize
        if len(data) != expected:
            raise DataError(
                f"{name} holds {len(data)} bytes, manifest implies {expected} "
                "(truncated file or wrong sample_count)"
            )
        if _crc(data) != manifest["files"][name]["crc32"]:
            raise DataError(f"checksum mismatch in {name}")
        arrays[name] = np.frombuffer(data, dtype=_F32).reshape(shapes[name]).astype(np.float32)
    records = []
    sample_path = directory / "samples.jsonl"
    if sample_path.is_file():
        data = sample_path.read_bytes()
        entry = manifest["files"].get("samples.jsonl")
        if entry and _crc(data) != entry["crc32"]:
            raise DataError("checksum mismatch in samples.jsonl")
        records = [SampleRecord.from_dict(json.loads(l)) for l in data.decode().splitlines()]
        if len(records) != n:
            raise DataError("samples.jsonl length does not match sample_count")
    splits = {k: list(v) for k, v in manifest.get("splits", {}).items()}
    return Dataset(
        arrays["images.f32"],
        arrays["configs.f32"],
        arrays["targets.f32"],
        res,
        int(manifest["master_seed"]),
        records,
        splits,
    )
