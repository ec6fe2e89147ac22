"""On-disk dataset: per-sample binary records plus a JSON manifest.

Record layout (all little-endian)::

    8 bytes   magic b"FGSAMPLE"
    uint32    format version
    uint32    reserved (0)
    uint64    metadata length n
    n bytes   UTF-8 JSON metadata
    float32   sketch, edge, spatial_ref, target (C order, shapes in metadata)

``manifest.json`` lists every record with its SHA-256 digest and split.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boundary import BoundarySample, SourceGeometrySpec, boundary_inputs
from .config import DatasetConfig
from .errors import CorruptionError, FormatError, SplitError
from .fdtd import SimulationConfig, run, snapshot_to_image

MAGIC = b"FGSAMPLE"
FORMAT_VERSION = 1
TENSOR_ORDER = ("sketch", "edge", "spatial_ref", "target")
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<Q")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_sample(sample: BoundarySample, index: int = 0) -> bytes:
    arrays = [np.ascontiguousarray(getattr(sample, n), dtype="<f4") for n in TENSOR_ORDER]
    meta = {
        "index": int(index),
        "seed": int(sample.seed),
        "split": sample.split,
        "geometry": sample.geometry.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(TENSOR_ORDER, arrays)],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, 0), _LEN.pack(len(blob)), blob]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def decode_sample(data: bytes) -> tuple[BoundarySample, dict]:
    if len(data) < _HEADER.size + _LEN.size:
        raise CorruptionError(f"record truncated: {len(data)} bytes")
    magic, version, _ = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported record version {version} (expected {FORMAT_VERSION})")
    (n,) = _LEN.unpack_from(data, _HEADER.size)
    start = _HEADER.size + _LEN.size
    if start + n > len(data):
        raise CorruptionError("record truncated inside metadata")
    try:
        meta = json.loads(data[start : start + n].decode("utf-8"))
        specs = [(t["name"], tuple(t["shape"])) for t in meta["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable metadata: {exc}") from exc
    if [s[0] for s in specs] != list(TENSOR_ORDER):
        raise FormatError(f"unexpected tensor order {[s[0] for s in specs]}")
    offset = start + n
    expected = offset + sum(4 * int(np.prod(shape)) for _, shape in specs)
    if expected != len(data):
        raise CorruptionError(f"payload size mismatch: expected {expected} bytes, found {len(data)}")
    arrays = {}
    for name, shape in specs:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    sample = BoundarySample(
        geometry=SourceGeometrySpec.from_dict(meta["geometry"]),
        seed=meta["seed"],
        split=meta["split"],
        **arrays,
    )
    return sample, meta


def write_sample(sample: BoundarySample, path: str | Path, index: int = 0) -> str:
    """Write one record and return its SHA-256 digest."""
    data = encode_sample(sample, index)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_sample(path: str | Path, digest: str | None = None) -> BoundarySample:
    data = Path(path).read_bytes()
    if digest is not None and hashlib.sha256(data).hexdigest() != digest:
        raise CorruptionError(f"{path}: digest mismatch")
    return decode_sample(data)[0]


@dataclass
class DatasetManifest:
    count: int
    height: int
    width: int
    seed: int
    samples: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    generator: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "count": self.count,
                "height": self.height,
                "width": self.width,
                "seed": self.seed,
                "generator": self.generator,
                "samples": self.samples,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        path = Path(root) / "manifest.json"
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise CorruptionError(f"no manifest at {path}") from exc
        except json.JSONDecodeError as exc:
            raise CorruptionError(f"unreadable manifest: {exc}") from exc
        if raw.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {raw.get('format_version')}")
        m = cls(
            count=raw["count"],
            height=raw["height"],
            width=raw["width"],
            seed=raw["seed"],
            samples=raw["samples"],
            generator=raw.get("generator", {}),
        )
        if m.count != len(m.samples):
            raise CorruptionError(f"manifest count {m.count} != {len(m.samples)} entries")
        return m

    def verify(self, root: str | Path) -> None:
        """Check that every listed file exists and matches its digest."""
        for entry in self.samples:
            path = Path(root) / entry["file"]
            if not path.is_file():
                raise CorruptionError(f"missing sample file {entry['file']}")
            if sha256_file(path) != entry["sha256"]:
                raise CorruptionError(f"{entry['file']}: digest mismatch")

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.samples) if e["split"] == split]


def check_disjoint(manifest: DatasetManifest) -> None:
    """Refuse datasets whose train and held-out splits share any record."""
    by_split: dict[str, set] = {"train": set(), "heldout": set()}
    for e in manifest.samples:
        if e["split"] not in by_split:
            raise SplitError(f"unknown split flag {e['split']!r}")
        by_split[e["split"]].add(e["file"])
        by_split[e["split"]].add(e["sha256"])
    shared = by_split["train"] & by_split["heldout"]
    if shared:
        raise SplitError(f"train and held-out splits overlap ({len(shared)} shared entries)")


def heldout_indices(n: int, fraction: float, seed: int) -> set[int]:
    """Seeded choice of the held-out records."""
    k = int(round(n * fraction))
    if n == 0 or k == 0:
        return set()
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return {int(i) for i in perm[:k]}


def random_geometry(cfg: DatasetConfig, rng: np.random.Generator) -> SourceGeometrySpec:
    w, h = (int(v) for v in rng.integers(cfg.min_size, cfg.max_size + 1, size=2))
    margin = cfg.pml_thickness
    x = int(rng.integers(margin, cfg.width - margin - w + 1))
    y = int(rng.integers(margin, cfg.height - margin - h + 1))
    # total injected power roughly independent of the source area
    return SourceGeometrySpec(x, y, w, h, amplitude=1.0 / float(np.sqrt(w * h)), wavelength=cfg.wavelength)


def simulation_config(cfg: DatasetConfig, geometry: SourceGeometrySpec) -> SimulationConfig:
    return SimulationConfig(
        nx=cfg.width,
        ny=cfg.height,
        source=geometry,
        dt=cfg.dt,
        n_steps=cfg.n_steps,
        pml_thickness=cfg.pml_thickness,
        pml_order=cfg.pml_order,
        pml_sigma_max=cfg.pml_sigma_max,
    )


def generate_sample(cfg: DatasetConfig, index: int, split: str = "train") -> BoundarySample:
    """Simulate one record; the RNG stream depends only on (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    geometry = random_geometry(cfg, rng)
    snapshot = run(simulation_config(cfg, geometry), seed=index)
    target = snapshot_to_image(snapshot, cfg.clip_amplitude)
    sketch, edge, ref = boundary_inputs(
        geometry, cfg.height, cfg.width, (cfg.canny_sigma, cfg.canny_lo, cfg.canny_hi)
    )
    return BoundarySample(sketch, edge, ref, target, geometry, seed=index, split=split)


def worker_count() -> int:
    cap = os.environ.get("FIELDGEN_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def _write_one(args) -> dict:
    cfg, index, split, root = args
    sample = generate_sample(cfg, index, split)
    name = f"samples/{index:06d}.bin"
    digest = write_sample(sample, Path(root) / name, index)
    return {"file": name, "sha256": digest, "split": split}


def generate_dataset(cfg: DatasetConfig, root: str | Path, workers: int | None = None) -> DatasetManifest:
    """Simulate ``cfg.n_samples`` records into ``root`` and write the manifest."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    held = heldout_indices(cfg.n_samples, cfg.heldout_fraction, cfg.seed)
    jobs = [(cfg, i, "heldout" if i in held else "train", str(root)) for i in range(cfg.n_samples)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_one, jobs, chunksize=4))
    else:
        entries = [_write_one(j) for j in jobs]
    manifest = DatasetManifest(
        count=len(entries),
        height=cfg.height,
        width=cfg.width,
        seed=cfg.seed,
        samples=entries,
        generator=cfg.model_dump(mode="json"),
    )
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(root: str | Path, split: str | None = None) -> tuple[DatasetManifest, list[BoundarySample]]:
    """Verify the manifest and read the records of one split (all if None)."""
    manifest = DatasetManifest.load(root)
    check_disjoint(manifest)
    entries = manifest.samples if split is None else [e for e in manifest.samples if e["split"] == split]
    samples = [read_sample(Path(root) / e["file"], e["sha256"]) for e in entries]
    for s in samples:
        if s.target.shape != (3, manifest.height, manifest.width):
            raise CorruptionError(f"sample extents {s.target.shape} disagree with manifest")
    return manifest, samples
