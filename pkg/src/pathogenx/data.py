"""Patient records, on-disk formats, fold splitting and the synthetic cohort.

Binary feature files (little-endian)::

    magic    4 bytes   b"PGXB" (image bag) or b"PGXG" (genomic vector)
    version  u16       1
    rows     u32       N (always 1 for genomic files)
    cols     u32       D
    payload  f32 * N*D row-major

The manifest is a CSV with columns ``patient_id,time_days,event,bag_path,genomic_path``;
paths are resolved relative to the manifest and ``genomic_path`` may be empty.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .survival import SurvivalOutcome

BAG_MAGIC = b"PGXB"
GENOMIC_MAGIC = b"PGXG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
MANIFEST_COLUMNS = ("patient_id", "time_days", "event", "bag_path", "genomic_path")


class FormatError(ValueError):
    """A feature file is malformed."""


class ManifestError(ValueError):
    """A manifest row or referenced file is invalid."""


@dataclass
class PatientRecord:
    id: str
    time: float
    event: int
    bag: np.ndarray
    genomic: np.ndarray | None = None

    def __post_init__(self):
        if self.bag.ndim != 2 or self.bag.shape[0] < 1:
            raise ValueError(f"patient {self.id}: bag must be N x D with N >= 1, got {self.bag.shape}")
        SurvivalOutcome(self.time, self.event)

    @property
    def outcome(self) -> SurvivalOutcome:
        return SurvivalOutcome(self.time, self.event)

    def without_genomic(self) -> "PatientRecord":
        return PatientRecord(self.id, self.time, self.event, self.bag, None)


def outcomes(records: Sequence[PatientRecord]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.array([r.time for r in records], dtype=np.float64),
        np.array([r.event for r in records], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Binary feature files


def encode_features(values: np.ndarray, magic: bytes) -> bytes:
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 1:
        values = values[None, :]
    rows, cols = values.shape
    return _HEADER.pack(magic, FORMAT_VERSION, rows, cols) + values.tobytes(order="C")


def decode_features(blob: bytes, magic: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(blob)} bytes)")
    got_magic, version, rows, cols = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"{source}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: version mismatch, file has {version}, reader supports {FORMAT_VERSION}")
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) < expected:
        raise FormatError(f"{source}: truncated payload ({len(blob)} of {expected} bytes)")
    if len(blob) > expected:
        raise FormatError(f"{source}: {len(blob) - expected} trailing bytes after payload")
    arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return arr.reshape(rows, cols).astype(np.float64)


def save_bag(path, bag: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(bag, BAG_MAGIC))


def load_bag(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), BAG_MAGIC, str(path))


def save_genomic(path, vector: np.ndarray) -> None:
    vector = np.asarray(vector)
    if vector.ndim != 1:
        raise ValueError(f"genomic vector must be 1-D, got shape {vector.shape}")
    Path(path).write_bytes(encode_features(vector, GENOMIC_MAGIC))


def load_genomic(path) -> np.ndarray:
    arr = decode_features(Path(path).read_bytes(), GENOMIC_MAGIC, str(path))
    if arr.shape[0] != 1:
        raise FormatError(f"{path}: genomic file must have exactly one row, found {arr.shape[0]}")
    return arr[0]


# ---------------------------------------------------------------------------
# Manifest


def save_dataset(records: Sequence[PatientRecord], out_dir, header: Iterable[str] = ()) -> Path:
    """Write bag/genomic files plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    if any(r.genomic is not None for r in records):
        (out / "genomic").mkdir(exist_ok=True)
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in records:
        bag_rel = f"bags/{r.id}.pgxb"
        save_bag(out / bag_rel, r.bag)
        gen_rel = ""
        if r.genomic is not None:
            gen_rel = f"genomic/{r.id}.pgxg"
            save_genomic(out / gen_rel, r.genomic)
        writer.writerow([r.id, repr(float(r.time)), r.event, bag_rel, gen_rel])
    manifest = out / "manifest.csv"
    manifest.write_text(buf.getvalue())
    return manifest


def load_manifest(
    path, d_in: int | None = None, d_genomic: int | None = None, with_genomic: bool = True
) -> list[PatientRecord]:
    """Read a manifest and every file it names.

    With ``with_genomic=False`` the genomic column is ignored entirely, so
    image-only consumers never open (or need) the genomic files.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[PatientRecord] = []
    header_seen = False
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        row = next(csv.reader([line]))
        if not header_seen:
            if tuple(row) != MANIFEST_COLUMNS:
                raise ManifestError(f"{path}:{lineno}: expected header {','.join(MANIFEST_COLUMNS)}")
            header_seen = True
            continue
        if not with_genomic and len(row) == len(MANIFEST_COLUMNS):
            row[-1] = ""
        records.append(_parse_row(row, base, f"{path}:{lineno}", d_in, d_genomic))
        # Later rows must agree with the first row's dimensions.
        d_in = records[-1].bag.shape[1] if d_in is None else d_in
        if d_genomic is None and records[-1].genomic is not None:
            d_genomic = records[-1].genomic.shape[0]
    if not header_seen:
        raise ManifestError(f"{path}: missing header row")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate patient ids")
    return records


def _parse_row(row, base: Path, where: str, d_in, d_genomic) -> PatientRecord:
    if len(row) != len(MANIFEST_COLUMNS):
        raise ManifestError(f"{where}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
    pid, time_s, event_s, bag_rel, gen_rel = row
    if not pid:
        raise ManifestError(f"{where}: empty patient_id")
    try:
        time = float(time_s)
    except ValueError:
        raise ManifestError(f"{where}: time_days {time_s!r} is not a number") from None
    if not (math.isfinite(time) and time > 0):
        raise ManifestError(f"{where}: time_days must be positive, got {time_s}")
    if event_s not in ("0", "1"):
        raise ManifestError(f"{where}: event must be 0 or 1, got {event_s!r}")
    try:
        bag = load_bag(base / bag_rel)
        genomic = load_genomic(base / gen_rel) if gen_rel else None
    except FileNotFoundError as exc:
        raise ManifestError(f"{where}: missing file {exc.filename}") from exc
    except FormatError as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    if d_in is not None and bag.shape[1] != d_in:
        raise ManifestError(f"{where}: bag feature dimension {bag.shape[1]} != expected {d_in}")
    if genomic is not None and d_genomic is not None and genomic.shape[0] != d_genomic:
        raise ManifestError(f"{where}: genomic dimension {genomic.shape[0]} != expected {d_genomic}")
    return PatientRecord(pid, time, int(event_s), bag, genomic)


# ---------------------------------------------------------------------------
# Cross-validation folds


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    k: int
    seed: int

    def fold_ids(self, fold: int) -> list[str]:
        return [pid for pid, f in self.assignments.items() if f == fold]

    def train_val(self, records: Sequence[PatientRecord], fold: int):
        train = [r for r in records if self.assignments[r.id] != fold]
        val = [r for r in records if self.assignments[r.id] == fold]
        return train, val


def kfold_split(ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if len(ids) < k:
        raise ValueError(f"too few patients ({len(ids)}) for {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[j]: pos % k for pos, j in enumerate(order)}
    return FoldSplit({pid: assignments[pid] for pid in ids}, k, seed)


# ---------------------------------------------------------------------------
# Synthetic cohort


@dataclass
class SynthConfig:
    n_patients: int = 400
    latent_dim: int = 8
    genomic_dim: int = 746
    feature_dim: int = 64
    patches_min: int = 8
    patches_max: int = 32
    informative_fraction: float = 0.25
    genomic_noise: float = 0.3
    imaging_noise: float = 2.0
    hazard_coef: float = 1.5
    censoring: float = 0.3
    median_survival: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 1 or self.latent_dim < 1 or self.genomic_dim < 1 or self.feature_dim < 1:
            raise ValueError("n_patients and all dimensions must be positive")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ValueError("need 1 <= patches_min <= patches_max")
        if not 0 < self.informative_fraction <= 1:
            raise ValueError("informative_fraction must lie in (0, 1]")
        if not 0 <= self.genomic_noise < self.imaging_noise:
            raise ValueError("imaging_noise must exceed genomic_noise (imaging is the weaker modality)")
        if not 0 <= self.censoring < 1:
            raise ValueError("censoring target must lie in [0, 1)")
        if self.median_survival <= 0:
            raise ValueError("median_survival must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SynthTruth:
    """Generator internals, kept for diagnostics and oracle checks."""

    genomic_map: np.ndarray
    image_map: np.ndarray
    hazard_direction: np.ndarray
    latents: np.ndarray
    censor_max: float
    extra: dict = field(default_factory=dict)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _calibrate_censoring(event_times: np.ndarray, unit: np.ndarray, target: float) -> float:
    """Pick c_max so that mean(c_max * unit < event_times) is closest to target."""
    if target == 0:
        return math.inf
    # Censored fraction only changes at the breakpoints event_times / unit.
    candidates = np.sort(event_times / unit)
    fractions = np.array([(c * unit < event_times).mean() for c in candidates])
    return float(candidates[int(np.argmin(np.abs(fractions - target)))])


def generate_synthetic(cfg: SynthConfig, return_truth: bool = False):
    """Paired cohort where genomics see the hazard-driving latent far more clearly than images.

    Each patient has a latent z ~ N(0, I). Genomics are a softplus of a noisy
    linear map of z; the bag holds ceil(rho * N) informative patches (another
    noisy linear map of z, much noisier) hidden among pure-noise patches.
    Event times are exponential with log-hazard ``hazard_coef * w.z``.
    """
    cfg.validate()
    structure_ss, patient_ss, censor_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    srng = np.random.default_rng(structure_ss)
    k = cfg.latent_dim
    genomic_map = srng.normal(0.0, 1.0 / math.sqrt(k), size=(cfg.genomic_dim, k))
    # Unit-variance signal per feature before noise, for both modalities.
    image_map = srng.normal(0.0, 1.0 / math.sqrt(k), size=(cfg.feature_dim, k))
    w = srng.normal(size=k)
    w /= np.linalg.norm(w)

    prng = np.random.default_rng(patient_ss)
    base_rate = math.log(2.0) / cfg.median_survival
    latents = np.empty((cfg.n_patients, k))
    bags, genomics, event_times = [], [], np.empty(cfg.n_patients)
    informative = []
    for i in range(cfg.n_patients):
        z = prng.normal(size=k)
        latents[i] = z
        g = genomic_map @ z + prng.normal(0.0, cfg.genomic_noise, size=cfg.genomic_dim)
        genomics.append(_f32(_softplus(g)))
        n = int(prng.integers(cfg.patches_min, cfg.patches_max + 1))
        n_inf = math.ceil(cfg.informative_fraction * n)
        bag = prng.normal(0.0, cfg.imaging_noise, size=(n, cfg.feature_dim))
        bag[:n_inf] += image_map @ z
        order = prng.permutation(n)
        bags.append(_f32(bag[order]))
        informative.append(order < n_inf)
        rate = base_rate * math.exp(cfg.hazard_coef * float(w @ z))
        event_times[i] = prng.exponential(1.0 / rate)

    crng = np.random.default_rng(censor_ss)
    unit = 1.0 - crng.random(cfg.n_patients)  # (0, 1]
    c_max = _calibrate_censoring(event_times, unit, cfg.censoring)
    censor_times = c_max * unit
    records = []
    width = len(str(cfg.n_patients - 1))
    for i in range(cfg.n_patients):
        event = int(event_times[i] <= censor_times[i])
        t = float(event_times[i] if event else censor_times[i])
        records.append(PatientRecord(f"P{i:0{width}d}", t, event, bags[i], genomics[i]))
    if return_truth:
        return records, SynthTruth(genomic_map, image_map, w, latents, c_max, {"informative": informative})
    return records
