"""File formats: matrices, model artifacts, sample streams, and tables.

Binary layouts are little-endian throughout. Text formats use repr
floats, so every value round-trips bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    MagicMismatch,
    NegativeCount,
    NonFinite,
    ParseError,
    ShapeError,
)
from .inference import IntervalGrid
from .linalg import DataMatrix, center_columns
from .model import FableModel
from .sampler import CovarianceSample
from .simharness import BenchmarkRow, ConfigSummary, MetricRecord

__all__ = [
    "MATRIX_MAGIC",
    "MODEL_MAGIC",
    "SAMPLE_MAGIC",
    "LoadedMatrix",
    "RunManifest",
    "load_matrix",
    "save_matrix",
    "preprocess",
    "save_model",
    "load_model",
    "save_samples",
    "load_samples",
    "write_intervals",
    "write_metric_records",
    "write_config_summaries",
    "write_benchmark_table",
    "save_manifest",
    "load_manifest",
    "file_sha256",
]

MATRIX_MAGIC = b"FABLEMAT1"
MODEL_MAGIC = b"FABLE-MODEL-v1\n"
SAMPLE_MAGIC = b"FABLESAMP1"

# model artifact arrays, in on-disk order
_MODEL_ARRAYS = ("mu", "delta_sq", "v_sq", "l_sq", "u", "spectrum")


@dataclass(frozen=True)
class LoadedMatrix:
    """Raw numeric matrix plus whatever labels the file carried."""

    values: np.ndarray
    row_labels: tuple[str, ...] | None = None
    col_labels: tuple[str, ...] | None = None


def _float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def _parse_delimited(text: str, path: str) -> LoadedMatrix:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: no data rows")
    delim = "\t" if "\t" in lines[0] else ","
    rows = [ln.split(delim) for ln in lines]

    # A first row whose tail is numeric but first cell is not is data
    # with a row label, not a header; a non-numeric tail marks a header.
    first = rows[0]
    tail_numeric = all(_float(cell) is not None for cell in first[1:])
    col_labels = None
    has_row_labels = False
    if _float(first[0]) is None and tail_numeric:
        has_row_labels = True
    elif not tail_numeric:
        col_labels = tuple(cell.strip() for cell in first)
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: header but no data rows")
        has_row_labels = _float(rows[0][0]) is None

    row_labels = None
    if has_row_labels:
        row_labels = tuple(r[0].strip() for r in rows)
        rows = [r[1:] for r in rows]
        if not rows[0]:
            raise ParseError(f"{path}: no numeric columns after the labels")
        if col_labels is not None and len(col_labels) == len(rows[0]) + 1:
            col_labels = col_labels[1:]  # corner cell above the label column

    width = len(rows[0])
    body_offset = 2 if col_labels is not None else 1
    values = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ShapeError(
                f"{path}: row {i + body_offset} has {len(row)} cells, expected {width}"
            )
        for j, cell in enumerate(row):
            val = _float(cell)
            if val is None:
                col = j + (2 if row_labels is not None else 1)
                raise ParseError(
                    f"{path}: line {i + body_offset}, column {col}: "
                    f"could not parse {cell.strip()!r}"
                )
            values[i, j] = val
    return LoadedMatrix(values, row_labels, col_labels)


def _load_binary(raw: bytes, path: str) -> LoadedMatrix:
    if raw[: len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise MagicMismatch(f"{path}: not a FABLEMAT1 file")
    header_end = len(MATRIX_MAGIC) + 16
    if len(raw) < header_end:
        raise ShapeError(f"{path}: truncated header")
    n, p = struct.unpack_from("<QQ", raw, len(MATRIX_MAGIC))
    body = raw[header_end:]
    expected = n * p * 8
    if len(body) != expected:
        raise ShapeError(
            f"{path}: body holds {len(body)} bytes, expected {expected} for {n}x{p}"
        )
    values = np.frombuffer(body, dtype="<f8").reshape(n, p).astype(np.float64)
    return LoadedMatrix(values)


def load_matrix(path: str | Path, format: str = "auto") -> LoadedMatrix:
    """Read a matrix file, binary or delimited text.

    Text files may carry a header row of column labels and a leading
    label column; both are detected by whether cells parse as numbers.
    ``format="auto"`` sniffs the binary magic.
    """
    path = Path(path)
    raw = path.read_bytes()
    if format == "auto":
        format = (
            "raw_binary" if raw[: len(MATRIX_MAGIC)] == MATRIX_MAGIC else "delimited_text"
        )
    if format == "raw_binary":
        return _load_binary(raw, str(path))
    if format == "delimited_text":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path}: not valid UTF-8 text ({exc})") from exc
        return _parse_delimited(text, str(path))
    raise ValueError(f"unknown format {format!r}")


def save_matrix(path: str | Path, values: np.ndarray) -> None:
    """Write the FABLEMAT1 binary layout: magic, u64 n, u64 p, row-major f64."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-d, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def preprocess(
    values: np.ndarray,
    *,
    transform: str = "none",
    filter_top_variance_fraction: float = 1.0,
    center: bool = True,
) -> tuple[DataMatrix, np.ndarray]:
    """Transform counts, keep the most variable columns, and center.

    Returns the processed matrix plus the original indices of the kept
    columns (ascending, so relative column order is preserved). The top
    ceil(fraction * p) columns by post-transform sample variance are
    kept; ties go to the lower original index.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("input matrix contains non-finite values")
    f = float(filter_top_variance_fraction)
    if not 0.0 < f <= 1.0:
        raise ValueError(f"filter fraction must lie in (0, 1], got {f}")
    if transform == "log2_plus_one":
        if arr.min() < 0:
            raise NegativeCount("log2(1 + x) transform needs nonnegative counts")
        arr = np.log2(1.0 + arr)
    elif transform != "none":
        raise ValueError(f"unknown transform {transform!r}")

    p = arr.shape[1]
    # round before ceil so 0.1 * 5300 keeps 530 columns, not 531
    m = max(1, math.ceil(round(f * p, 9)))
    if m < p:
        variances = arr.var(axis=0, ddof=1)
        order = np.argsort(-variances, kind="stable")
        kept = np.sort(order[:m])
    else:
        kept = np.arange(p)
    arr = arr[:, kept]
    dm = center_columns(arr) if center else DataMatrix(arr)
    return dm, kept


def _model_header(model: FableModel) -> dict:
    return {
        "version": 1,
        "n": model.n,
        "p": model.p,
        "k": model.k,
        "tau_sq": model.tau_sq,
        "gamma0": model.gamma0,
        "delta0_sq": model.delta0_sq,
        "gamma_n": model.gamma_n,
        "rho": model.rho,
        "rho_strategy": model.rho_strategy,
        "shapes": {name: list(getattr(model, name).shape) for name in _MODEL_ARRAYS},
    }


def save_model(path: str | Path, model: FableModel) -> None:
    """Write the FABLE-MODEL-v1 artifact.

    Layout: magic line, u64 header length, canonical JSON header
    (sorted keys, no whitespace), then the arrays in a fixed order as
    raw little-endian float64. Same model, same bytes.
    """
    header = json.dumps(_model_header(model), sort_keys=True, separators=(",", ":"))
    blob = header.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in _MODEL_ARRAYS:
            arr = np.ascontiguousarray(getattr(model, name), dtype="<f8")
            fh.write(arr.tobytes(order="C"))


def load_model(path: str | Path) -> FableModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise MagicMismatch(f"{path}: not a FABLE-MODEL-v1 file")
    offset = len(MODEL_MAGIC)
    if len(raw) < offset + 8:
        raise ShapeError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset : offset + hlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad model header ({exc})") from exc
    if header.get("version") != 1:
        raise ParseError(f"{path}: unsupported model version {header.get('version')!r}")
    offset += hlen
    arrays = {}
    for name in _MODEL_ARRAYS:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise ShapeError(f"{path}: truncated array {name!r}")
        arrays[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(raw):
        raise ShapeError(f"{path}: {len(raw) - offset} trailing bytes")
    return FableModel(
        n=header["n"],
        p=header["p"],
        k=header["k"],
        tau_sq=header["tau_sq"],
        gamma0=header["gamma0"],
        delta0_sq=header["delta0_sq"],
        gamma_n=header["gamma_n"],
        rho=header["rho"],
        rho_strategy=header["rho_strategy"],
        **arrays,
    )


def _floats_csv(row: Iterable[float]) -> str:
    return ",".join(repr(float(x)) for x in row)


def save_samples(
    path: str | Path,
    samples: Iterable[CovarianceSample],
    *,
    format: str = "binary",
) -> int:
    """Stream factored draws to a file; returns the record count.

    Each record is the draw index t, the dimensions k and p, the p x k
    loading matrix row-major, then the p noise variances. The binary
    variant packs those as u64 triples plus little-endian float64; the
    text variant is one CSV block per record (header line "t,k,p", p
    loading rows, one noise row).
    """
    count = 0
    if format == "binary":
        with open(path, "wb") as fh:
            fh.write(SAMPLE_MAGIC)
            for sample in samples:
                lam = np.ascontiguousarray(sample.loadings, dtype="<f8")
                noise = np.ascontiguousarray(sample.noise_sq, dtype="<f8")
                p, k = lam.shape
                fh.write(struct.pack("<QQQ", sample.index, k, p))
                fh.write(lam.tobytes(order="C"))
                fh.write(noise.tobytes(order="C"))
                count += 1
    elif format == "text":
        with open(path, "w") as fh:
            for sample in samples:
                p, k = sample.loadings.shape
                fh.write(f"{sample.index},{k},{p}\n")
                for row in sample.loadings:
                    fh.write(_floats_csv(row) + "\n")
                fh.write(_floats_csv(sample.noise_sq) + "\n")
                count += 1
    else:
        raise ValueError(f"unknown sample format {format!r}")
    return count


def _load_samples_binary(path: Path) -> Iterator[CovarianceSample]:
    with open(path, "rb") as fh:
        if fh.read(len(SAMPLE_MAGIC)) != SAMPLE_MAGIC:
            raise MagicMismatch(f"{path}: not a FABLESAMP1 file")
        while True:
            head = fh.read(24)
            if not head:
                return
            if len(head) < 24:
                raise ShapeError(f"{path}: truncated record header")
            t, k, p = struct.unpack("<QQQ", head)
            body = fh.read((p * k + p) * 8)
            if len(body) < (p * k + p) * 8:
                raise ShapeError(f"{path}: truncated record {t}")
            lam = np.frombuffer(body, dtype="<f8", count=p * k).reshape(p, k)
            noise = np.frombuffer(body, dtype="<f8", count=p, offset=p * k * 8)
            yield CovarianceSample(
                index=int(t),
                loadings=lam.astype(np.float64),
                noise_sq=noise.astype(np.float64),
            )


def _load_samples_text(path: Path) -> Iterator[CovarianceSample]:
    with open(path) as fh:
        lineno = 0
        while True:
            head = fh.readline()
            lineno += 1
            if not head:
                return
            if not head.strip():
                continue
            parts = head.strip().split(",")
            if len(parts) != 3:
                raise ParseError(f"{path}: line {lineno}: expected t,k,p header")
            t, k, p = (int(x) for x in parts)
            lam = np.empty((p, k), dtype=np.float64)
            for i in range(p):
                line = fh.readline()
                lineno += 1
                if not line:
                    raise ShapeError(f"{path}: truncated record {t}")
                lam[i] = [float(x) for x in line.strip().split(",")]
            line = fh.readline()
            lineno += 1
            if not line:
                raise ShapeError(f"{path}: truncated record {t}")
            noise = np.array([float(x) for x in line.strip().split(",")])
            yield CovarianceSample(index=t, loadings=lam, noise_sq=noise)


def load_samples(path: str | Path, *, format: str = "auto") -> Iterator[CovarianceSample]:
    """Iterate records written by save_samples."""
    path = Path(path)
    if format == "auto":
        with open(path, "rb") as fh:
            sniff = fh.read(len(SAMPLE_MAGIC))
        format = "binary" if sniff == SAMPLE_MAGIC else "text"
    if format == "binary":
        return _load_samples_binary(path)
    if format == "text":
        return _load_samples_text(path)
    raise ValueError(f"unknown sample format {format!r}")


def write_intervals(path: str | Path, grid: IntervalGrid) -> None:
    """Delimited interval table: u, v, center, lower, upper, asym_sd, method."""
    with open(path, "w") as fh:
        fh.write("u,v,center,lower,upper,asym_sd,method\n")
        for i, (u, v) in enumerate(grid.pairs):
            fh.write(
                f"{u},{v},{_floats_csv((grid.center[i], grid.lower[i], grid.upper[i], grid.asym_sd[i]))},"
                f"{grid.method}\n"
            )


def write_metric_records(path: str | Path, records: Sequence[MetricRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(
            "config_id,replicate,rel_error,coverage,mean_width,"
            "fit_seconds,sample_seconds,error\n"
        )
        for r in records:
            err = "" if r.error is None else r.error.replace(",", ";")
            vals = _floats_csv(
                (r.rel_error, r.coverage, r.mean_width, r.fit_seconds, r.sample_seconds)
            )
            fh.write(f"{r.config_id},{r.replicate},{vals},{err}\n")


def write_config_summaries(path: str | Path, summaries: Sequence[ConfigSummary]) -> None:
    with open(path, "w") as fh:
        fh.write(
            "config_id,n,p,k_true,replicates_done,failures,mean_rel_error,"
            "median_rel_error,mean_coverage,median_coverage,mean_width\n"
        )
        for s in summaries:
            vals = _floats_csv(
                (s.mean_rel_error, s.median_rel_error, s.mean_coverage,
                 s.median_coverage, s.mean_width)
            )
            fh.write(
                f"{s.config_id},{s.n},{s.p},{s.k_true},{s.replicates_done},"
                f"{s.failures},{vals}\n"
            )


def write_benchmark_table(path: str | Path, rows: Sequence[BenchmarkRow]) -> None:
    """Plot-ready timing table: seconds and their log10 per problem size."""
    with open(path, "w") as fh:
        fh.write(
            "n,p,n_samples,fit_seconds,sample_seconds,mean_seconds,"
            "log10_fit_seconds,log10_sample_seconds,log10_mean_seconds\n"
        )
        for r in rows:
            logs = [math.log10(x) for x in (r.fit_seconds, r.sample_seconds, r.mean_seconds)]
            vals = _floats_csv(
                (r.fit_seconds, r.sample_seconds, r.mean_seconds, *logs)
            )
            fh.write(f"{r.n},{r.p},{r.n_samples},{vals}\n")


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to rerun a command and check its outputs.

    ``config`` echoes the resolved options, ``resolved`` the fitted
    quantities (rank, tau_sq, rho, gamma_n), ``outputs`` maps each
    deterministic written file to its sha256. Files whose content
    embeds wall-clock measurements (timing tables, per-replicate
    records) go in ``measured`` instead: a replay rewrites them but
    only the ``outputs`` hashes are compared. Timestamps never feed
    into outputs, so a replay writes byte-identical files.
    """

    command: str
    config: dict
    software_version: str
    seed: int | None = None
    input_sha256: str | None = None
    resolved: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)
    created_unix: float = 0.0


def save_manifest(path: str | Path, manifest: RunManifest) -> None:
    payload = {
        "command": manifest.command,
        "config": manifest.config,
        "software_version": manifest.software_version,
        "seed": manifest.seed,
        "input_sha256": manifest.input_sha256,
        "resolved": manifest.resolved,
        "outputs": manifest.outputs,
        "measured": manifest.measured,
        "created_unix": manifest.created_unix,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_manifest(path: str | Path) -> RunManifest:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        return RunManifest(
            command=payload["command"],
            config=payload["config"],
            software_version=payload["software_version"],
            seed=payload.get("seed"),
            input_sha256=payload.get("input_sha256"),
            resolved=payload.get("resolved", {}),
            outputs=payload.get("outputs", {}),
            measured=payload.get("measured", {}),
            created_unix=payload.get("created_unix", 0.0),
        )
    except KeyError as exc:
        raise ParseError(f"{path}: manifest missing field {exc}") from exc


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
