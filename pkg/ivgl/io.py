# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Files read and written by the command line tool.

* vectors and matrices: CSV with a header row, comma-delimited, UTF-8
* edge lists: TSV with a ``src dst weight`` header and 1-based node indices
* coordinates: CSV with an ``x,y,z`` header
* fits, truths and manifests: JSON with sorted keys

Floats are written with 17 significant digits and read back with the
round-trip parser, so a written dataset is read back bit for bit.
"""

import dataclasses
import hashlib
import json
import logging
import time

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ivgl import __version__
from ivgl.exceptions import InvalidInputError
from ivgl.graph import Graph
from ivgl.two_stage import Dataset


logger = logging.getLogger("ivgl.io")

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"
EDGE_COLUMNS = ["src", "dst", "weight"]
COORD_COLUMNS = ["x", "y", "z"]


def _read_csv(path, sep=",", allow_empty=False):
    try:
        frame = pd.read_csv(path, sep=sep, encoding="utf-8", float_precision="round_trip")
    except FileNotFoundError:
        raise InvalidInputError("File not found: %s" % path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as error:
        raise InvalidInputError("Cannot parse %s: %s" % (path, error))
    if frame.empty and not allow_empty:
        raise InvalidInputError("%s has no data rows" % path)
    return frame


def _numeric(frame, path):
    non_numeric = [
        column for column in frame.columns if not pd.api.types.is_numeric_dtype(frame[column])
    ]
    if non_numeric:
        raise InvalidInputError(
            "%s has non-numeric column(s): %s" % (path, ", ".join(map(str, non_numeric)))
        )
    values = frame.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("%s contains missing or non-finite values" % path)
    return values


def read_matrix_csv(path):
    """Return ``(values, column names)``."""
    frame = _read_csv(path)
    return _numeric(frame, path), tuple(str(column) for column in frame.columns)


def read_vector_csv(path):
    """Return ``(values, column name)`` of a single-column CSV."""
    frame = _read_csv(path)
    if frame.shape[1] != 1:
        raise InvalidInputError("%s must have exactly one column, got %d" % (path, frame.shape[1]))
    return _numeric(frame, path)[:, 0], str(frame.columns[0])


def read_edges_tsv(path, p=None):
    """
    Graph over ``p`` nodes from a 1-based edge list (by default, ``p`` is the
    largest index in the file). A header-only file is a graph without edges.
    """
    frame = _read_csv(path, sep="\t", allow_empty=p is not None)
    missing = [column for column in EDGE_COLUMNS if column not in frame.columns]
    if missing:
        raise InvalidInputError("%s misses column(s): %s" % (path, ", ".join(missing)))
    if frame.empty:
        return Graph.from_edges(p, [])
    values = _numeric(frame[EDGE_COLUMNS], path)
    nodes = values[:, :2]
    if p is None:
        p = int(nodes.max())
    if np.any(nodes != np.round(nodes)) or nodes.min() < 1 or nodes.max() > p:
        raise InvalidInputError("%s has node indices outside 1..%d" % (path, p))
    edges = [(int(src) - 1, int(dst) - 1, weight) for src, dst, weight in values]
    return Graph.from_edges(p, edges)


def read_coords_csv(path):
    frame = _read_csv(path)
    missing = [column for column in COORD_COLUMNS if column not in frame.columns]
    if missing:
        raise InvalidInputError("%s misses column(s): %s" % (path, ", ".join(missing)))
    return _numeric(frame[COORD_COLUMNS], path)


def load_dataset(y_path, x_path, z_path=None):
    """Read a dataset, checking that all files have the same number of rows."""
    Y, _ = read_vector_csv(y_path)
    X, node_names = read_matrix_csv(x_path)
    counts = {str(y_path): Y.size, str(x_path): X.shape[0]}
    Z, instrument_names = None, None
    if z_path is not None:
        Z, instrument_names = read_matrix_csv(z_path)
        counts[str(z_path)] = Z.shape[0]
    if len(set(counts.values())) > 1:
        raise InvalidInputError(
            "Row counts differ: %s"
            % ", ".join("%s has %d" % (path, count) for path, count in counts.items())
        )
    return Dataset(Y=Y, X=X, Z=Z, node_names=node_names, instrument_names=instrument_names)


def write_json(data, path):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_frame(frame, path, sep=","):
    frame.to_csv(path, sep=sep, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")


def write_edges_tsv(graph, path):
    rows = [(j + 1, k + 1, weight) for j, k, weight in graph.edges]
    _write_frame(pd.DataFrame(rows, columns=EDGE_COLUMNS), path, sep="\t")


def write_dataset(sim, directory):
    """
    Write a simulated replicate as ``y.csv``, ``x.csv``, ``z.csv``,
    ``edges.tsv`` (``coords.csv`` for distance graphs) and ``truth.json``.
    Return the written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds, truth = sim.dataset, sim.truth
    paths = {name: directory / name for name in ("y.csv", "x.csv", "z.csv", "edges.tsv")}

    _write_frame(pd.DataFrame({"y": ds.Y}), paths["y.csv"])
    _write_frame(pd.DataFrame(ds.X, columns=ds.get_node_names()), paths["x.csv"])
    _write_frame(pd.DataFrame(ds.Z, columns=ds.get_instrument_names()), paths["z.csv"])
    write_edges_tsv(truth.graph, paths["edges.tsv"])
    if truth.coords is not None:
        paths["coords.csv"] = directory / "coords.csv"
        _write_frame(pd.DataFrame(truth.coords, columns=COORD_COLUMNS), paths["coords.csv"])

    paths["truth.json"] = directory / "truth.json"
    write_json(
        {
            "seed": sim.seed,
            "laplacian": sim.laplacian_kind,
            "beta": dict(zip(ds.get_node_names(), truth.beta0.tolist())),
            "support": [j + 1 for j in truth.S0],
            "invalid_instruments": [int(l) + 1 for l in np.flatnonzero(truth.alpha0)],
            "alpha": dict(zip(ds.get_instrument_names(), truth.alpha0.tolist())),
            "gamma_y": truth.gamma_y,
        },
        paths["truth.json"],
    )
    return paths


def file_digest(path):
    """Hex sha256 of the content of ``path``."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    What a command was run with: its configuration, the digests of its input
    files and of the files it wrote, the seed, the tool version and the
    wall-clock runtime. One per output directory.
    """

    command: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = None
    version: str = __version__
    runtime_seconds: float = None
    started_at: float = field(default_factory=time.monotonic, repr=False)

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = file_digest(path)

    def write(self, directory, outputs=()):
        """
        Record the digests of ``outputs`` (paths in ``directory``) and write
        ``manifest.json`` there.
        """
        directory = Path(directory)
        self.outputs = {Path(path).name: file_digest(path) for path in outputs}
        self.runtime_seconds = round(time.monotonic() - self.started_at, 3)
        data = dataclasses.asdict(self)
        data.pop("started_at")
        path = directory / MANIFEST_NAME
        write_json(data, path)
        logger.info("Manifest written to %s", path)
        return path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
        return cls(**data)

    def mismatches(self, directory):
        """Recorded files whose current digest differs (or that are gone)."""
        directory = Path(directory)
        expected = dict(self.inputs)
        expected.update({str(directory / name): digest for name, digest in self.outputs.items()})
        result = []
        for path, digest in sorted(expected.items()):
            if not Path(path).exists() or file_digest(path) != digest:
                result.append(path)
        return result

    def verify(self, directory):
        return not self.mismatches(directory)
