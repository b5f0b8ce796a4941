"""Synthetic paired genomics/histology cohorts and their on-disk format.

A dataset directory holds four files:

``manifest.json``
    sizes, class counts, survival quartile boundaries, seed, format version.
``genes.csv``
    header ``sample_id,g0,...,g{G-1}``, then ``#partition,t|e,...`` tagging
    each gene column as tumour (``t``) or microenvironment (``e``), then one
    row per sample.
``patches.bin``
    ``b"SFPG"`` followed by little-endian u32 ``n_samples, H, W, C``; per
    sample a 32-byte NUL-padded id and ``H*W*C`` little-endian float32
    values in row-major order.
``labels.csv``
    header ``sample_id,diagnosis,grade,time,event,bin``.

Samples are stored in split order: the first ``round(0.7 n)`` are training,
the next ``round(0.15 n)`` validation, the rest test.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .metrics import SurvivalBatch

FORMAT_VERSION = 1
PATCH_MAGIC = b"SFPG"
ID_BYTES = 32
N_BINS = 4
SPLITS = ("train", "val", "test")
LABEL_HEADER = ["sample_id", "diagnosis", "grade", "time", "event", "bin"]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic cohort.

    ``snr`` scales the gene-expression class prototypes against unit noise
    (``inf`` drops the noise). ``conflict_strength`` is the fraction of
    samples whose secondary cue in each subspace points at a wrong class.
    With ``symmetric`` both subspaces carry the diagnosis and grade cues at
    equal strength.
    """

    n_samples: int = 600
    n_genes: int = 420
    n_tumour: int = 59
    n_tme: int = 361
    height: int = 7
    width: int = 7
    channels: int = 64
    n_diagnosis: int = 4
    n_grade: int = 4
    snr: float = 0.5
    hist_snr: float = 1.0
    cross_signal: float = 0.5
    location_jitter: int = 1
    conflict_strength: float = 0.0
    symmetric: bool = False
    censor_fraction: float = 0.25
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        if self.n_tumour + self.n_tme != self.n_genes:
            raise ConfigError(f"split sizes {self.n_tumour}+{self.n_tme} do not sum to G={self.n_genes}")
        if min(self.n_tumour, self.n_tme) < 1:
            raise ConfigError("both gene subspaces need at least one gene")
        if self.location_jitter < 0:
            raise ConfigError("location_jitter must be non-negative")
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("grid dimensions must be positive")
        if min(self.n_diagnosis, self.n_grade) < 2:
            raise ConfigError("need at least two classes per task")
        if not 0.0 <= self.conflict_strength <= 1.0:
            raise ConfigError("conflict_strength must lie in [0, 1]")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ConfigError("censor_fraction must lie in [0, 1)")
        if self.n_samples < 20:
            raise ConfigError("need at least 20 samples")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) <= 0:
            raise ConfigError("split fractions must be positive and sum to 1")


@dataclass(frozen=True)
class Partition:
    tumour: np.ndarray
    tme: np.ndarray

    def validate(self, n_genes: int) -> None:
        both = np.concatenate([self.tumour, self.tme])
        if np.unique(both).size != both.size:
            raise ConfigError("tumour and TME gene sets overlap")
        if both.size != n_genes or set(both.tolist()) != set(range(n_genes)):
            raise ConfigError(f"partition does not cover genes 0..{n_genes - 1}")

    def tags(self, n_genes: int) -> list[str]:
        out = ["e"] * n_genes
        for i in self.tumour:
            out[int(i)] = "t"
        return out

    @classmethod
    def from_tags(cls, tags) -> Partition:
        tags = list(tags)
        return cls(
            np.array([i for i, t in enumerate(tags) if t == "t"], dtype=np.int64),
            np.array([i for i, t in enumerate(tags) if t == "e"], dtype=np.int64),
        )


@dataclass(frozen=True)
class GenomicProfile:
    sample_id: str
    values: np.ndarray
    partition: Partition


@dataclass(frozen=True)
class PatchFeatureGrid:
    sample_id: str
    grid: np.ndarray


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool
    bin: int


@dataclass(frozen=True)
class SampleLabel:
    sample_id: str
    diagnosis_class: int
    grade: int
    survival: SurvivalRecord


def assign_bins(time, quartiles) -> np.ndarray:
    return np.searchsorted(np.asarray(quartiles, dtype=np.float64), np.asarray(time, dtype=np.float64), side="right")


def split_sizes(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


@dataclass(eq=False)
class Dataset:
    sample_ids: list[str]
    genes: np.ndarray
    partition: Partition
    patches: np.ndarray
    diagnosis: np.ndarray
    grade: np.ndarray
    time: np.ndarray
    event: np.ndarray
    bins: np.ndarray
    quartiles: np.ndarray
    n_diagnosis: int
    n_grade: int
    seed: int | None = None
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    synth: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return self.genes.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[1:])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        n_train, n_val, _ = split_sizes(len(self), self.split_fractions)
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, len(self))}
        lo, hi = bounds[split]
        return np.arange(lo, hi)

    def survival(self, idx=None) -> SurvivalBatch:
        idx = slice(None) if idx is None else idx
        return SurvivalBatch(self.time[idx], self.event[idx], self.bins[idx])

    def profile(self, i: int) -> GenomicProfile:
        return GenomicProfile(self.sample_ids[i], self.genes[i].copy(), self.partition)

    def grid(self, i: int) -> PatchFeatureGrid:
        return PatchFeatureGrid(self.sample_ids[i], self.patches[i].copy())

    def label(self, i: int) -> SampleLabel:
        rec = SurvivalRecord(float(self.time[i]), bool(self.event[i]), int(self.bins[i]))
        return SampleLabel(self.sample_ids[i], int(self.diagnosis[i]), int(self.grade[i]), rec)

    def manifest(self) -> dict:
        h, w, c = self.grid_shape
        return {
            "format_version": FORMAT_VERSION,
            "n_samples": len(self),
            "G": self.n_genes,
            "n_tumour": int(self.partition.tumour.size),
            "n_tme": int(self.partition.tme.size),
            "H": h,
            "W": w,
            "C": c,
            "n_diagnosis": self.n_diagnosis,
            "n_grade": self.n_grade,
            "n_bins": N_BINS,
            "quartiles": [float(q) for q in self.quartiles],
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "synth": self.synth,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("genes", "patches", "diagnosis", "grade", "time", "event", "bins", "quartiles")
        return (
            self.sample_ids == other.sample_ids
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and np.array_equal(self.partition.tumour, other.partition.tumour)
            and np.array_equal(self.partition.tme, other.partition.tme)
            and self.manifest() == other.manifest()
        )


# ---------------------------------------------------------------------------
# generation


def _prototypes(rng, n_classes: int, n_genes: int, strength: float, reference: int) -> np.ndarray:
    # per-gene amplitude is scaled so the total class separation matches a
    # subspace of ``reference`` genes regardless of the subspace's size
    return rng.normal(size=(n_classes, n_genes)) * strength * math.sqrt(reference / n_genes)


def _wrong_class(rng, labels: np.ndarray, k: int, mask: np.ndarray) -> np.ndarray:
    out = labels.copy()
    out[mask] = (labels[mask] + rng.integers(1, k, size=int(mask.sum()))) % k
    return out


def generate(config: SynthConfig | None = None, seed: int = 0) -> Dataset:
    """Draw a cohort whose labels follow planted tumour and TME latents.

    The tumour genes carry the diagnosis cue and a weaker grade cue; the TME
    genes carry the grade cue and a weaker diagnosis cue (equal cues in
    symmetric mode). On a ``conflict_strength`` fraction of samples the
    secondary cues name a wrong class. The histology grid holds two 2x2
    regions over unit Gaussian background, one with a diagnosis channel
    pattern and one with a grade pattern. Each region sits near an anchor
    cell owned by its class, so location co-varies with the gene-expression
    latents. Survival times are exponential with a rate driven by grade and
    diagnosis; a fixed fraction of samples is censored at a uniform time
    before the event.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, kd, kg = cfg.n_samples, cfg.n_diagnosis, cfg.n_grade

    perm = rng.permutation(cfg.n_genes)
    partition = Partition(np.sort(perm[: cfg.n_tumour]), np.sort(perm[cfg.n_tumour :]))

    diagnosis = rng.integers(0, kd, size=n)
    grade = rng.integers(0, kg, size=n)
    conflict = rng.random(n) < cfg.conflict_strength
    diag_in_tme = _wrong_class(rng, diagnosis, kd, conflict)
    grade_in_tumour = _wrong_class(rng, grade, kg, conflict)

    ref = cfg.n_tumour
    secondary = 1.0 if cfg.symmetric else cfg.cross_signal
    tumour_diag = _prototypes(rng, kd, cfg.n_tumour, 1.0, ref)
    tumour_grade = _prototypes(rng, kg, cfg.n_tumour, secondary, ref)
    tme_grade = _prototypes(rng, kg, cfg.n_tme, 1.0, ref)
    tme_diag = _prototypes(rng, kd, cfg.n_tme, secondary, ref)

    signal_t = tumour_diag[diagnosis] + tumour_grade[grade_in_tumour]
    signal_e = tme_grade[grade] + tme_diag[diag_in_tme]
    noise = rng.normal(size=(n, cfg.n_genes))
    genes = np.zeros((n, cfg.n_genes))
    if math.isinf(cfg.snr):
        genes[:, partition.tumour] = signal_t
        genes[:, partition.tme] = signal_e
    else:
        genes[:, partition.tumour] = cfg.snr * signal_t
        genes[:, partition.tme] = cfg.snr * signal_e
        genes += noise

    h, w, c = cfg.height, cfg.width, cfg.channels
    diag_pattern = rng.normal(size=(kd, c))
    grade_pattern = rng.normal(size=(kg, c))
    patches = rng.normal(size=(n, h, w, c))
    rh, rw = min(2, h), min(2, w)
    # each class has an anchor cell; a sample's region sits within the jitter of it
    diag_anchor = np.stack([rng.integers(0, h - rh + 1, size=kd), rng.integers(0, w - rw + 1, size=kd)], axis=-1)
    grade_anchor = np.stack([rng.integers(0, h - rh + 1, size=kg), rng.integers(0, w - rw + 1, size=kg)], axis=-1)
    j = cfg.location_jitter
    upper = np.array([h - rh, w - rw])
    t_corner = np.clip(diag_anchor[diagnosis] + rng.integers(-j, j + 1, size=(n, 2)), 0, upper)
    e_corner = np.clip(grade_anchor[grade] + rng.integers(-j, j + 1, size=(n, 2)), 0, upper)
    for i in range(n):
        (ty, tx), (ey, ex) = t_corner[i], e_corner[i]
        patches[i, ty : ty + rh, tx : tx + rw] += cfg.hist_snr * diag_pattern[diagnosis[i]]
        patches[i, ey : ey + rh, ex : ex + rw] += cfg.hist_snr * grade_pattern[grade[i]]
    # storage precision is float32; keep memory and disk identical
    patches = patches.astype(np.float32).astype(np.float64)

    diag_effect = rng.normal(0.0, 0.5, size=kd)
    risk = 0.7 * grade + diag_effect[diagnosis]
    event_time = 10.0 * rng.exponential(size=n) * np.exp(-risk)
    censored = np.zeros(n, dtype=bool)
    censored[rng.choice(n, size=int(round(cfg.censor_fraction * n)), replace=False)] = True
    time = np.where(censored, rng.uniform(0.0, 1.0, size=n) * event_time, event_time)
    event = ~censored

    n_train, _, _ = split_sizes(n, cfg.split_fractions)
    train_events = time[:n_train][event[:n_train]]
    quartiles = np.quantile(train_events, [0.25, 0.5, 0.75])

    synth = asdict(cfg)
    synth["split_fractions"] = list(cfg.split_fractions)
    synth["snr"] = "inf" if math.isinf(cfg.snr) else cfg.snr
    return Dataset(
        sample_ids=[f"S{i:05d}" for i in range(n)],
        genes=genes,
        partition=partition,
        patches=patches,
        diagnosis=diagnosis.astype(np.int64),
        grade=grade.astype(np.int64),
        time=time,
        event=event,
        bins=assign_bins(time, quartiles).astype(np.int64),
        quartiles=quartiles,
        n_diagnosis=kd,
        n_grade=kg,
        seed=seed,
        split_fractions=tuple(cfg.split_fractions),
        synth=synth,
    )


# ---------------------------------------------------------------------------
# serialization


def save(dataset: Dataset, dir_path) -> Path:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    g = dataset.n_genes

    (out / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id"] + [f"g{j}" for j in range(g)])
    writer.writerow(["#partition"] + dataset.partition.tags(g))
    for sid, row in zip(dataset.sample_ids, dataset.genes):
        writer.writerow([sid] + [repr(float(v)) for v in row])
    (out / "genes.csv").write_text(buf.getvalue(), encoding="utf-8")

    n, (h, w, c) = len(dataset), dataset.grid_shape
    with open(out / "patches.bin", "wb") as fh:
        fh.write(PATCH_MAGIC + struct.pack("<4I", n, h, w, c))
        for sid, grid in zip(dataset.sample_ids, dataset.patches):
            fh.write(_encode_id(sid))
            fh.write(grid.astype("<f4").tobytes(order="C"))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LABEL_HEADER)
    for i, sid in enumerate(dataset.sample_ids):
        writer.writerow(
            [sid, int(dataset.diagnosis[i]), int(dataset.grade[i]), repr(float(dataset.time[i])), int(dataset.event[i]), int(dataset.bins[i])]
        )
    (out / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    return out


def _encode_id(sid: str) -> bytes:
    raw = sid.encode("utf-8")
    if len(raw) > ID_BYTES:
        raise DataFormatError(f"sample id {sid!r} longer than {ID_BYTES} bytes")
    return raw.ljust(ID_BYTES, b"\0")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataFormatError(f"{path}: missing file")
    return path


def _finite_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{where}: non-finite value {text!r}")
    return v


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    required = ("format_version", "n_samples", "G", "n_tumour", "n_tme", "H", "W", "C", "n_diagnosis", "n_grade", "quartiles")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DataFormatError(f"{path}: missing keys {missing}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataFormatError(f"{path}: format_version {manifest['format_version']} != {FORMAT_VERSION}")
    if len(manifest["quartiles"]) != N_BINS - 1:
        raise DataFormatError(f"{path}: expected {N_BINS - 1} quartile boundaries")
    return manifest


def _read_genes(path: Path, manifest: dict):
    g, n = manifest["G"], manifest["n_samples"]
    rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    expected = ["sample_id"] + [f"g{j}" for j in range(g)]
    if not rows or rows[0] != expected:
        got = len(rows[0]) - 1 if rows else 0
        raise DataFormatError(f"{path}: line 1: header does not match manifest G={g} (found {got} gene columns)")
    if len(rows) < 2 or rows[1][:1] != ["#partition"] or len(rows[1]) != g + 1:
        raise DataFormatError(f"{path}: line 2: expected a #partition line with {g} tags")
    tags = rows[1][1:]
    bad = [j for j, t in enumerate(tags) if t not in ("t", "e")]
    if bad:
        raise DataFormatError(f"{path}: line 2: column g{bad[0]} has tag {tags[bad[0]]!r}, expected t or e")
    partition = Partition.from_tags(tags)
    if partition.tumour.size != manifest["n_tumour"] or partition.tme.size != manifest["n_tme"]:
        raise DataFormatError(
            f"{path}: line 2: partition sizes {partition.tumour.size}/{partition.tme.size} "
            f"differ from manifest {manifest['n_tumour']}/{manifest['n_tme']}"
        )
    body = rows[2:]
    if len(body) != n:
        raise DataFormatError(f"{path}: expected {n} sample rows, found {len(body)}")
    ids, values = [], np.empty((n, g))
    for i, row in enumerate(body):
        line = i + 3
        if len(row) != g + 1:
            raise DataFormatError(f"{path}: line {line}: expected {g + 1} fields, found {len(row)}")
        ids.append(row[0])
        for j, text in enumerate(row[1:]):
            values[i, j] = _finite_float(text, f"{path}: line {line}, column g{j}")
    return ids, values, partition


def _read_patches(path: Path, manifest: dict, ids: list[str]) -> np.ndarray:
    raw = path.read_bytes()
    n, h, w, c = manifest["n_samples"], manifest["H"], manifest["W"], manifest["C"]
    header = len(PATCH_MAGIC) + 16
    per_sample = ID_BYTES + 4 * h * w * c
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header: expected {header} bytes, got {len(raw)}")
    if raw[:4] != PATCH_MAGIC:
        raise DataFormatError(f"{path}: offset 0: bad magic {raw[:4]!r}")
    dims = struct.unpack("<4I", raw[4:header])
    if dims != (n, h, w, c):
        raise DataFormatError(f"{path}: offset 4: header dims {dims} differ from manifest {(n, h, w, c)}")
    expected = header + n * per_sample
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    patches = np.empty((n, h, w, c))
    for i in range(n):
        off = header + i * per_sample
        sid = raw[off : off + ID_BYTES].rstrip(b"\0").decode("utf-8", errors="replace")
        if sid != ids[i]:
            raise DataFormatError(f"{path}: offset {off}: sample id {sid!r} != genes.csv id {ids[i]!r}")
        vals = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=off + ID_BYTES)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise DataFormatError(f"{path}: offset {off + ID_BYTES + 4 * int(bad[0])}: non-finite value")
        patches[i] = vals.astype(np.float64).reshape(h, w, c)
    return patches


def _read_labels(path: Path, manifest: dict, ids: list[str]):
    rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    if not rows or rows[0] != LABEL_HEADER:
        raise DataFormatError(f"{path}: line 1: header must be {','.join(LABEL_HEADER)}")
    body = rows[1:]
    n = manifest["n_samples"]
    if len(body) != n:
        raise DataFormatError(f"{path}: expected {n} sample rows, found {len(body)}")
    cols = {k: [] for k in LABEL_HEADER[1:]}
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(LABEL_HEADER):
            raise DataFormatError(f"{path}: line {line}: expected {len(LABEL_HEADER)} fields, found {len(row)}")
        if row[0] != ids[i]:
            raise DataFormatError(f"{path}: line {line}: sample id {row[0]!r} != genes.csv id {ids[i]!r}")
        try:
            d, g, e, b = int(row[1]), int(row[2]), int(row[4]), int(row[5])
        except ValueError:
            raise DataFormatError(f"{path}: line {line}: malformed integer field") from None
        t = _finite_float(row[3], f"{path}: line {line}, column time")
        if not (0 <= d < manifest["n_diagnosis"] and 0 <= g < manifest["n_grade"] and e in (0, 1) and 0 <= b < N_BINS and t >= 0):
            raise DataFormatError(f"{path}: line {line}: label out of range")
        for k, v in zip(LABEL_HEADER[1:], (d, g, t, e, b)):
            cols[k].append(v)
    return cols


def load(dir_path) -> Dataset:
    root = Path(dir_path)
    manifest = _read_manifest(_require(root / "manifest.json"))
    ids, genes, partition = _read_genes(_require(root / "genes.csv"), manifest)
    try:
        partition.validate(manifest["G"])
    except ConfigError as exc:
        raise DataFormatError(f"{root / 'genes.csv'}: {exc}") from None
    patches = _read_patches(_require(root / "patches.bin"), manifest, ids)
    cols = _read_labels(_require(root / "labels.csv"), manifest, ids)

    quartiles = np.array(manifest["quartiles"], dtype=np.float64)
    time = np.array(cols["time"], dtype=np.float64)
    bins = np.array(cols["bin"], dtype=np.int64)
    mismatch = np.flatnonzero(assign_bins(time, quartiles) != bins)
    if mismatch.size:
        raise DataFormatError(f"{root / 'labels.csv'}: line {int(mismatch[0]) + 2}: bin inconsistent with manifest quartiles")
    return Dataset(
        sample_ids=ids,
        genes=genes,
        partition=partition,
        patches=patches,
        diagnosis=np.array(cols["diagnosis"], dtype=np.int64),
        grade=np.array(cols["grade"], dtype=np.int64),
        time=time,
        event=np.array(cols["event"], dtype=bool),
        bins=bins,
        quartiles=quartiles,
        n_diagnosis=manifest["n_diagnosis"],
        n_grade=manifest["n_grade"],
        seed=manifest.get("seed"),
        split_fractions=tuple(manifest.get("split_fractions", (0.7, 0.15, 0.15))),
        synth=manifest.get("synth", {}),
    )
