"""Kinetic dataset ingestion, cleaning, oversampling, splitting and synthetic generation."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from prokcat import stats
from prokcat.encoders import AMINO_ACIDS, ProteinSequence, SequenceError, sequence_key
from prokcat.smiles import SmilesError, parse_smiles

COLUMNS = ("id", "sequence", "smiles", "temperature_c", "kcat_s", "ec_number", "organism", "ph")
KELVIN_OFFSET = 273.15
TEMPERATURE_BOUNDS_C = (-20.0, 150.0)
DUP_MARK = "#dup"
_EC = re.compile(r"^(\d+)\.(\d+|-)\.(\d+|-)\.(n?\d+|-)$")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class KineticRecord:
    id: str
    sequence: str
    smiles: str
    temperature_celsius: float
    kcat_per_second: float
    ec_number: str | None = None
    organism: str | None = None
    ph: float | None = None

    @property
    def temperature_kelvin(self) -> float:
        return self.temperature_celsius + KELVIN_OFFSET

    @property
    def log10_kcat(self) -> float:
        return math.log10(self.kcat_per_second)

    @property
    def base_id(self) -> str:
        return self.id.split(DUP_MARK, 1)[0]

    @property
    def ec_class(self) -> int | None:
        return int(self.ec_number.split(".", 1)[0]) if self.ec_number else None


@dataclass
class RowError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


def validate_record(rec: KineticRecord) -> None:
    """Raise ``DatasetError`` when a record breaks a field invariant."""
    if not rec.id or any(c in rec.id for c in "\t\n"):
        raise DatasetError("empty or malformed id")
    try:
        ProteinSequence(rec.sequence)
    except SequenceError as exc:
        raise DatasetError(str(exc)) from None
    try:
        parse_smiles(rec.smiles)
    except SmilesError as exc:
        raise DatasetError(f"bad SMILES {rec.smiles!r}: {exc}") from None
    lo, hi = TEMPERATURE_BOUNDS_C
    if not (math.isfinite(rec.temperature_celsius) and lo <= rec.temperature_celsius <= hi):
        raise DatasetError(f"temperature {rec.temperature_celsius} C outside [{lo}, {hi}]")
    if not (math.isfinite(rec.kcat_per_second) and rec.kcat_per_second > 0):
        raise DatasetError(f"kcat must be positive, got {rec.kcat_per_second}")
    if rec.ec_number:
        m = _EC.match(rec.ec_number)
        if not m or not 1 <= int(m.group(1)) <= 7:
            raise DatasetError(f"bad EC number {rec.ec_number!r}")


def _float(text: str, name: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"{name} is not a number: {text!r}") from None


def parse_row(fields: Sequence[str]) -> KineticRecord:
    if len(fields) > len(COLUMNS):
        raise DatasetError(f"expected at most {len(COLUMNS)} columns, got {len(fields)}")
    fields = list(fields) + [""] * (len(COLUMNS) - len(fields))
    if any(not fields[i] for i in range(5)):
        missing = [COLUMNS[i] for i in range(5) if not fields[i]]
        raise DatasetError(f"missing required field(s): {', '.join(missing)}")
    rec = KineticRecord(
        id=fields[0],
        sequence=fields[1],
        smiles=fields[2],
        temperature_celsius=_float(fields[3], "temperature_c"),
        kcat_per_second=_float(fields[4], "kcat_s"),
        ec_number=fields[5] or None,
        organism=fields[6] or None,
        ph=_float(fields[7], "ph") if fields[7] else None,
    )
    validate_record(rec)
    return rec


def load_dataset(path) -> tuple[list[KineticRecord], list[RowError]]:
    """Read a dataset TSV; invalid rows are skipped and reported with line numbers."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror or exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != COLUMNS:
        raise DatasetError(f"{path}: header must be: {chr(9).join(COLUMNS)}")
    records, errors, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        try:
            rec = parse_row(line.split("\t"))
            if rec.id in seen:
                raise DatasetError(f"duplicate id {rec.id!r}")
        except DatasetError as exc:
            errors.append(RowError(lineno, str(exc)))
            continue
        seen.add(rec.id)
        records.append(rec)
    return records, errors


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_dataset(path, records: Iterable[KineticRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for r in records:
            row = [r.id, r.sequence, r.smiles, r.temperature_celsius, r.kcat_per_second,
                   r.ec_number, r.organism, r.ph]
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------- cleaning

def deduplicate(records: Iterable[KineticRecord]) -> list[KineticRecord]:
    """Keep the highest-kcat record per (sequence, smiles, temperature), in first-seen order."""
    best: dict[tuple, KineticRecord] = {}
    for r in records:
        key = (r.sequence, r.smiles, r.temperature_celsius)
        cur = best.get(key)
        if cur is None or r.kcat_per_second > cur.kcat_per_second:
            best[key] = r
    # dict preserves first-insertion order of keys
    return list(best.values())


def oversample_temperature(records: Sequence[KineticRecord], low_cutoff: float = 20.0,
                           high_cutoff: float = 50.0, target_fraction: float = 0.15,
                           cap: int = 5, seed: int = 0) -> list[KineticRecord]:
    """Duplicate records in the cold and hot tails.

    Copies are added one at a time, cycling through each tail in a seeded
    order, until the tail holds ``target_fraction`` of all records or every
    tail record appears ``cap`` times in total.
    """
    if not records:
        raise DatasetError("cannot oversample an empty dataset")
    rng = np.random.default_rng(seed)
    out = list(records)
    tails = {
        "low": [r for r in records if r.temperature_celsius < low_cutoff],
        "high": [r for r in records if r.temperature_celsius > high_cutoff],
    }
    state = {}
    for name, members in tails.items():
        order = [members[i] for i in rng.permutation(len(members))]
        state[name] = {"order": order, "count": len(members), "pos": 0, "round": 1}
    while True:
        progressed = False
        for name in ("low", "high"):
            st = state[name]
            if not st["order"] or st["count"] / len(out) >= target_fraction or st["round"] >= cap:
                continue
            rec = st["order"][st["pos"]]
            out.append(replace(rec, id=f"{rec.id}{DUP_MARK}{st['round']}"))
            st["count"] += 1
            st["pos"] += 1
            if st["pos"] == len(st["order"]):
                st["pos"] = 0
                st["round"] += 1
            progressed = True
        if not progressed:
            return out


@dataclass
class DatasetSplits:
    train: list[KineticRecord]
    validation: list[KineticRecord]
    test: list[KineticRecord]
    seed: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def split(records: Sequence[KineticRecord], seed: int = 0, test_fraction: float = 0.1,
          val_fraction: float = 0.1) -> DatasetSplits:
    """Seeded 90/10 split, then 10% of the remainder to validation; oversampled copies stay together."""
    groups: dict[str, list[KineticRecord]] = {}
    for r in records:
        groups.setdefault(r.base_id, []).append(r)
    if len(groups) < 10:
        raise DatasetError(f"need at least 10 distinct records to split, got {len(groups)}")
    keys = list(groups)
    perm = np.random.default_rng(seed).permutation(len(keys))
    keys = [keys[i] for i in perm]
    n_test = int(round(test_fraction * len(keys)))
    n_val = int(round(val_fraction * (len(keys) - n_test)))
    take = lambda ks: [r for k in ks for r in groups[k]]  # noqa: E731
    test = take(keys[:n_test])
    val = take(keys[n_test:n_test + n_val])
    train = take(keys[n_test + n_val:])
    counts = {"records": len(records), "distinct": len(keys), "train": len(train),
              "validation": len(val), "test": len(test)}
    return DatasetSplits(train, val, test, seed, counts)


# ---------------------------------------------------------------- analysis

@dataclass
class EcCorrelation:
    ec_class: int
    n: int
    pearson_r: float | None
    p_value: float | None
    significant: bool | None

    @property
    def insufficient(self) -> bool:
        return self.pearson_r is None


def ec_class_correlation(records: Iterable[KineticRecord], alpha: float = 0.05) -> list[EcCorrelation]:
    """Temperature vs log10 kcat Pearson correlation per top-level EC class 1-6."""
    by_class: dict[int, list[KineticRecord]] = {}
    for r in records:
        c = r.ec_class
        if c is not None and 1 <= c <= 6:
            by_class.setdefault(c, []).append(r)
    out = []
    for c in sorted(by_class):
        rs = by_class[c]
        if len(rs) < 3:
            out.append(EcCorrelation(c, len(rs), None, None, None))
            continue
        r, p = stats.pearson_test([x.temperature_celsius for x in rs], [x.log10_kcat for x in rs])
        if math.isnan(r):
            out.append(EcCorrelation(c, len(rs), None, None, None))
            continue
        out.append(EcCorrelation(c, len(rs), r, p, p < alpha))
    return out


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class ArrheniusParams:
    A: float
    E_over_kB: float

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("pre-exponential factor must be positive")

    def rate(self, temperature_kelvin):
        return self.A * np.exp(-self.E_over_kB / np.asarray(temperature_kelvin, dtype=np.float64))


SUBSTRATE_POOL = (
    "CC(=O)C(=O)O",
    "OCC1OC(O)C(O)C(O)C1O",
    "NCC(=O)O",
    "CC(N)C(=O)O",
    "OC(=O)CCC(=O)O",
    "OC(=O)C=CC(=O)O",
    "OC(=O)CC(O)(CC(=O)O)C(=O)O",
    "CC(O)C(=O)O",
    "CCO",
    "CC=O",
    "OC(=O)CC(=O)C(=O)O",
    "NC(CCC(=O)O)C(=O)O",
    "NC(=O)CCC(N)C(=O)O",
    "NC(Cc1ccccc1)C(=O)O",
    "NC(Cc1ccc(O)cc1)C(=O)O",
) + tuple("C" * k + "C(=O)O" for k in range(6, 11)) + tuple("C" * k + "O" for k in range(6, 11))
# The two homologous series at the end share radius-2 fingerprints within each
# series, so only the molecular graph tells their members apart.

_CANONICAL_AA = AMINO_ACIDS[:20]


@dataclass
class SyntheticFamily:
    params: ArrheniusParams
    sequences: list[str]
    factor: float
    ec_number: str


def make_families(rng: np.random.Generator, n_families: int, variants: int = 3,
                  params: Sequence[ArrheniusParams] | None = None) -> list[SyntheticFamily]:
    fams = []
    for f in range(n_families):
        length = int(rng.integers(20, 61))
        base = "".join(rng.choice(list(_CANONICAL_AA), size=length))
        seqs = [base]
        for _ in range(variants - 1):
            s = list(base)
            for pos in rng.choice(length, size=int(rng.integers(1, 3)), replace=False):
                s[pos] = str(rng.choice(list(_CANONICAL_AA)))
            seqs.append("".join(s))
        if params is not None:
            p = params[f % len(params)]
        else:
            e = float(rng.uniform(4000.0, 7000.0))
            log10_ref = float(rng.uniform(-1.0, 3.0))  # log10 kcat at 310 K
            p = ArrheniusParams(10.0 ** log10_ref * math.exp(e / 310.0), e)
        ec = f"{int(rng.integers(1, 7))}.{int(rng.integers(1, 20))}.{int(rng.integers(1, 10))}.{f + 1}"
        fams.append(SyntheticFamily(p, seqs, float(rng.uniform(0.5, 5.0)), ec))
    return fams


def generate_synthetic(n: int, seed: int = 0, params: Sequence[ArrheniusParams] | None = None,
                       n_families: int = 20, substrates: Sequence[str] = SUBSTRATE_POOL,
                       sigma: float = 0.1, variants: int = 3,
                       temperature_range_k: tuple[float, float] = (280.0, 340.0)) -> list[KineticRecord]:
    """Arrhenius-law records: kcat = A exp(-E/T) (1 + a_family * b_substrate) exp(noise).

    ``noise`` is gaussian with std ``sigma`` in natural-log units; temperatures
    are uniform in kelvin and stored in Celsius.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    fams = make_families(rng, n_families if params is None else len(params), variants, params)
    sub_factor = rng.uniform(0.0, 3.0, size=len(substrates))
    lo_c, hi_c = temperature_range_k[0] - KELVIN_OFFSET, temperature_range_k[1] - KELVIN_OFFSET
    out = []
    for i in range(n):
        f = int(rng.integers(len(fams)))
        fam = fams[f]
        seq = fam.sequences[int(rng.integers(len(fam.sequences)))]
        s = int(rng.integers(len(substrates)))
        t_c = float(rng.uniform(lo_c, hi_c))
        t_k = t_c + KELVIN_OFFSET
        noise = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
        kcat = float(fam.params.rate(t_k)) * float(1.0 + fam.factor * sub_factor[s]) * math.exp(noise)
        out.append(KineticRecord(f"syn{i:05d}", seq, substrates[s], t_c, kcat, fam.ec_number,
                                 f"family{f:02d}", None))
    return out


def synthetic_embeddings(sequences: Iterable[str], width: int = 64, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic contextual stand-ins for language-model residue embeddings.

    Each residue gets a fixed random token vector blended with its neighbours
    (window 5) and squashed by tanh.  Keys are :func:`sequence_key` values.
    """
    table = np.random.default_rng(seed).normal(0.0, 1.0, size=(len(AMINO_ACIDS), width))
    weights = np.array([0.25, 0.5, 1.0, 0.5, 0.25])
    out = {}
    for seq in dict.fromkeys(sequences):
        tok = ProteinSequence(seq).tokens()
        raw = np.pad(table[tok], ((2, 2), (0, 0)))
        ctx = sum(w * raw[k:k + len(tok)] for k, w in enumerate(weights))
        out[sequence_key(seq)] = np.tanh(ctx / 2.0)
    return out
