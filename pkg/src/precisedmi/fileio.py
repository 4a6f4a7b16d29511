"""File formats: binary containers, dataset directories, weights, maps.

Every binary file is one UTF-8 JSON header line terminated by a newline,
followed by a raw little-endian IEEE-754 binary32 payload. The header
carries the payload shape, so files parse from any language with a JSON
reader and a flat float reader; nothing is platform dependent.

FID payloads are ordered x fastest, then y (then z), then time, with each
complex sample stored as an interleaved (re, im) pair: the stored array has
shape (time, [z,] y, x, 2) in C order.
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .neuralnet import ArchitectureSpec, NetworkParams
from .signal_model import MetabolitePrior, SpectralGrid
from .synth import DmiDataset

FORMAT_PREFIX = "precisedmi"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# generic container
# ---------------------------------------------------------------------------

def write_container(path, kind, array, extra=None):
    """JSON header line + float32 little-endian payload."""
    array = np.asarray(array, dtype="<f4")
    header = {
        "format": f"{FORMAT_PREFIX}-{kind}",
        "version": FORMAT_VERSION,
        "dtype": "<f4",
        "endianness": "little",
        "shape": list(array.shape),
    }
    if extra:
        header.update(extra)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True,
                            separators=(",", ":")).encode() + b"\n")
        fh.write(np.ascontiguousarray(array).tobytes())
    return path


def read_container(path, kind=None):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            line = fh.readline()
            header = json.loads(line.decode())
            payload = fh.read()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read container {path}: {exc}") from exc
    if kind is not None and header.get("format") != f"{FORMAT_PREFIX}-{kind}":
        raise DataError(
            f"{path}: expected format {FORMAT_PREFIX}-{kind}, "
            f"got {header.get('format')!r}")
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, "
                        f"expected {expected}")
    array = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return header, array


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _fids_to_payload(fids):
    # (dims..., T) complex -> (T, dims..., 2) float32, x fastest then y[,z]
    moved = np.moveaxis(np.asarray(fids), -1, 0)
    return np.stack([moved.real, moved.imag], axis=-1).astype("<f4")


def _payload_to_fids(payload):
    arr = payload[..., 0] + 1j * payload[..., 1]
    return np.moveaxis(arr, 0, -1).astype(np.complex64)


def save_dataset(dataset: DmiDataset, outdir) -> Path:
    """Write a dataset directory; returns the index file path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = dataset.grid
    meta = {
        "dims": list(dataset.dims),
        "n_points": grid.n_points,
        "spectral_width_hz": grid.spectral_width_hz,
        "reference_frequency_mhz": grid.reference_frequency_mhz,
        "fov_mm": dataset.fov_mm,
        "calibration": dataset.calibration,
        "axis_order": "x fastest, then y[, z], then time",
        "interleave": "re,im",
    }
    components = {}

    def put(name, kind, array, extra=None):
        fname = f"{name}.bin"
        write_container(outdir / fname, kind, array, extra)
        components[name] = fname

    put("fids", "fids", _fids_to_payload(dataset.fids), meta)
    put("mri", "grid", dataset.mri)
    put("mask", "grid", dataset.mask.astype("<f4"))
    if dataset.b0 is not None:
        put("b0", "grid", dataset.b0)
    if dataset.b1 is not None:
        put("b1", "grid", dataset.b1)
    if dataset.clean_fids is not None:
        put("clean_fids", "fids", _fids_to_payload(dataset.clean_fids), meta)
    if dataset.labels is not None:
        put("labels", "grid", dataset.labels.astype("<f4"))
    if dataset.scenario is not None:
        put("scenario", "grid", dataset.scenario.astype("<f4"))
    truth_names = []
    if dataset.truth:
        for met, grid_map in dataset.truth.items():
            put(f"truth_{met}", "grid", grid_map)
            truth_names.append(met)

    index = {
        "format": f"{FORMAT_PREFIX}-dataset",
        "version": FORMAT_VERSION,
        **meta,
        "noise_sd": dataset.noise_sd,
        "priors": [dataclasses.asdict(p) for p in dataset.priors],
        "components": components,
        "truth_metabolites": truth_names,
    }
    index_path = outdir / "dataset.json"
    index_path.write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    return index_path


def load_dataset(path) -> DmiDataset:
    """Load a dataset directory (or its dataset.json)."""
    path = Path(path)
    index_path = path / "dataset.json" if path.is_dir() else path
    try:
        index = json.loads(index_path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset index {index_path}: {exc}") from exc
    if index.get("format") != f"{FORMAT_PREFIX}-dataset":
        raise DataError(f"{index_path} is not a dataset index")
    base = index_path.parent
    comp = index["components"]

    def grab(name, kind):
        return read_container(base / comp[name], kind)[1]

    grid = SpectralGrid(
        n_points=index["n_points"],
        spectral_width_hz=index["spectral_width_hz"],
        reference_frequency_mhz=index["reference_frequency_mhz"],
    )
    fids = _payload_to_fids(grab("fids", "fids"))
    if list(fids.shape[:-1]) != list(index["dims"]):
        raise DataError("fids payload dims disagree with the index")
    dataset = DmiDataset(
        grid=grid,
        fids=fids,
        mri=np.asarray(grab("mri", "grid"), dtype=float),
        mask=grab("mask", "grid") > 0.5,
        fov_mm=index["fov_mm"],
        priors=tuple(MetabolitePrior(**p) for p in index["priors"]),
        calibration=index.get("calibration", 1.0),
        noise_sd=index.get("noise_sd"),
    )
    if "b0" in comp:
        dataset.b0 = np.asarray(grab("b0", "grid"), dtype=float)
    if "b1" in comp:
        dataset.b1 = np.asarray(grab("b1", "grid"), dtype=float)
    if "clean_fids" in comp:
        dataset.clean_fids = _payload_to_fids(grab("clean_fids", "fids"))
    if "labels" in comp:
        dataset.labels = np.asarray(grab("labels", "grid")).astype(np.int32)
    if "scenario" in comp:
        dataset.scenario = np.asarray(grab("scenario", "grid")).astype(np.int8)
    if index.get("truth_metabolites"):
        dataset.truth = {met: np.asarray(grab(f"truth_{met}", "grid"), dtype=float)
                         for met in index["truth_metabolites"]}
    return dataset


# ---------------------------------------------------------------------------
# network weights
# ---------------------------------------------------------------------------

def save_weights(params: NetworkParams, path, created=None) -> Path:
    """Versioned weights container: JSON header + float32 payload.

    Parameters are stored contiguously in canonical layer order (the order
    of the header's "params" list).
    """
    header = {
        "format": f"{FORMAT_PREFIX}-weights",
        "version": FORMAT_VERSION,
        "dtype": "<f4",
        "endianness": "little",
        "architecture": params.arch.to_dict(),
        "params": [{"name": n, "shape": list(t.shape)}
                   for n, t in params.tensors.items()],
        "metadata": {"library": __version__, "created": created},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True,
                            separators=(",", ":")).encode() + b"\n")
        for tensor in params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return path


def load_weights(path) -> NetworkParams:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            header = json.loads(fh.readline().decode())
            payload = fh.read()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read weights {path}: {exc}") from exc
    if header.get("format") != f"{FORMAT_PREFIX}-weights":
        raise DataError(f"{path} is not a weights file")
    arch = ArchitectureSpec.from_dict(header["architecture"])
    flat = np.frombuffer(payload, dtype="<f4")
    total = sum(int(np.prod(entry["shape"])) for entry in header["params"])
    if flat.size != total:
        raise DataError(f"{path}: payload holds {flat.size} values, "
                        f"header declares {total}")
    tensors = {}
    offset = 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"]))
        tensors[entry["name"]] = (flat[offset:offset + size]
                                  .reshape(entry["shape"]).copy())
        offset += size
    try:
        return NetworkParams(arch, tensors)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# maps, CSV, PGM
# ---------------------------------------------------------------------------

def write_pgm(path, grid):
    """8-bit portable graymap of a 2D grid (min-max scaled, NaN black)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 3:
        grid = grid[grid.shape[0] // 2]  # middle slice of a volume
    finite = np.isfinite(grid)
    lo = float(grid[finite].min()) if finite.any() else 0.0
    hi = float(grid[finite].max()) if finite.any() else 0.0
    span = hi - lo if hi > lo else 1.0
    img = np.zeros(grid.shape, dtype=np.uint8)
    img[finite] = np.round(255 * (grid[finite] - lo) / span).astype(np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n# min={lo:.9g} max={hi:.9g}\n"
                 f"{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return path


def write_map(outdir, name, grid):
    """One map as binary container + PGM render + CSV grid."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_container(outdir / f"{name}.bin", "map", np.asarray(grid, dtype="<f4"))
    write_pgm(outdir / f"{name}.pgm", grid)
    flat2d = np.asarray(grid, dtype=float)
    if flat2d.ndim == 3:
        flat2d = flat2d.reshape(-1, flat2d.shape[-1])
    np.savetxt(outdir / f"{name}.csv", flat2d, fmt="%.9g", delimiter=",")


def write_csv(path, rows, columns):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def sha256_of(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(outdir, command, config, seed, deterministic, inputs=None):
    """Record everything needed to reproduce the run byte for byte.

    Wall-clock time is omitted under --deterministic so repeated runs
    produce identical bytes.
    """
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "deterministic": bool(deterministic),
        "versions": {
            "precisedmi": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "platform": platform.platform() if not deterministic else None,
        },
        "input_hashes": {name: sha256_of(p) for name, p in (inputs or {}).items()},
        "created": (None if deterministic
                    else datetime.datetime.now(datetime.timezone.utc).isoformat()),
    }
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path
