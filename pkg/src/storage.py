"""Result files: JSON models and datasets, CSV tables, SVG figures."""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dae import DaeParams  # noqa: E402
from .errors import MolrgError, StorageError  # noqa: E402
from .logger import logger  # noqa: E402
from .molrg import Dataset, MoLRGModel  # noqa: E402

FORMAT_VERSION = 1

plt.rcParams["svg.hashsalt"] = "molrg-lab"
plt.rcParams["svg.fonttype"] = "none"


def format_value(value: Any) -> str:
    """17 significant digits for floats so every double reads back exactly."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _matrix(rows: Any, name: str, path: Path) -> np.ndarray:
    array = np.asarray(rows, dtype=float)
    if array.ndim != 2:
        raise StorageError(f"field '{name}' is not a matrix", str(path))
    return array


def _dataset_shape(dataset: Dataset):
    """K from the labels; per-component dims from the stored coefficients, 0 for an unseen component."""
    K = int(dataset.labels.max()) + 1 if dataset.N else 0
    if not dataset.coeffs:
        return K, None
    dims = [0] * K
    for label, a in zip(dataset.labels, dataset.coeffs):
        dims[label] = int(a.size)
    return K, dims


def _check_shape(payload: Dict[str, Any], path: str, **actual: Any):
    # headers written by older versions lack these fields
    for key, value in actual.items():
        if key in payload and payload[key] is not None and payload[key] != value:
            raise StorageError(f"field '{key}' is {payload[key]} but the stored arrays give {value}", path)


class ResultStore:
    """Reads and writes the artifacts of one output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create output directory ({e.strerror})", str(self.out_dir)) from e

    def path(self, name: str) -> Path:
        return self.out_dir / name

    # JSON -----------------------------------------------------------------

    def _write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        target = self.path(name)
        try:
            with open(target, "w", encoding="utf-8") as f:
                json.dump(payload, f, separators=(",", ":"))
                f.write("\n")
        except OSError as e:
            raise StorageError(f"cannot write file ({e.strerror})", str(target)) from e
        logger.info(f"Wrote {target}")
        return target

    @staticmethod
    def _read_json(path: str) -> Dict[str, Any]:
        source = Path(path)
        if not source.exists():
            raise StorageError("missing input file", str(source))
        try:
            with open(source, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise StorageError(f"malformed JSON at line {e.lineno}", str(source)) from e
        except OSError as e:
            raise StorageError(f"cannot read file ({e.strerror})", str(source)) from e

    def save_model(self, model: MoLRGModel, name: str = "model.json") -> Path:
        return self._write_json(name, {
            "version": FORMAT_VERSION,
            "kind": "molrg-model",
            "n": model.n,
            "K": model.K,
            "dims": list(model.dims),
            "weights": model.weights.tolist(),
            "mutually_orthogonal": model.mutually_orthogonal,
            "bases": [U.tolist() for U in model.bases],
        })

    def save_dataset(self, dataset: Dataset, name: str = "dataset.json") -> Path:
        K, dims = _dataset_shape(dataset)
        return self._write_json(name, {
            "version": FORMAT_VERSION,
            "kind": "molrg-dataset",
            "n": dataset.n,
            "N": dataset.N,
            "K": K,
            "dims": dims,
            "samples": dataset.samples.tolist(),
            "labels": dataset.labels.tolist(),
            "noises": dataset.noises.tolist(),
            "coeffs": [a.tolist() for a in dataset.coeffs],
        })

    def save_params(self, params: DaeParams, name: str = "params.json") -> Path:
        return self._write_json(name, {
            "version": FORMAT_VERSION,
            "kind": "dae-params",
            "n": params.n,
            "K": params.K,
            "dims": list(params.dims),
            "joint_orthonormal": params.joint_orthonormal,
            "bases": [U.tolist() for U in params.bases],
        })

    @classmethod
    def load_model(cls, path: str) -> MoLRGModel:
        payload = cls._read_json(path)
        try:
            bases = tuple(_matrix(U, "bases", Path(path)) for U in payload["bases"])
            model = MoLRGModel(bases=bases, weights=np.asarray(payload["weights"], dtype=float),
                               mutually_orthogonal=bool(payload.get("mutually_orthogonal", False)))
        except KeyError as e:
            raise StorageError(f"model file lacks field {e}", path) from e
        except MolrgError as e:
            raise StorageError(f"invalid model ({e})", path) from e
        _check_shape(payload, path, n=model.n, K=model.K, dims=list(model.dims))
        return model

    @classmethod
    def load_dataset(cls, path: str) -> Dataset:
        payload = cls._read_json(path)
        try:
            samples = _matrix(payload["samples"], "samples", Path(path))
            noises = payload.get("noises")
            dataset = Dataset(samples=samples, labels=np.asarray(payload["labels"], dtype=int),
                              noises=np.zeros_like(samples) if noises is None else _matrix(noises, "noises", Path(path)),
                              coeffs=payload.get("coeffs", []))
        except KeyError as e:
            raise StorageError(f"dataset file lacks field {e}", path) from e
        except MolrgError as e:
            raise StorageError(f"invalid dataset ({e})", path) from e
        K, dims = _dataset_shape(dataset)
        _check_shape(payload, path, n=dataset.n, N=dataset.N, K=K, dims=dims)
        return dataset

    @classmethod
    def load_params(cls, path: str) -> DaeParams:
        payload = cls._read_json(path)
        try:
            bases = tuple(_matrix(U, "bases", Path(path)) for U in payload["bases"])
            params = DaeParams(bases=bases, joint_orthonormal=bool(payload.get("joint_orthonormal", False)))
        except KeyError as e:
            raise StorageError(f"params file lacks field {e}", path) from e
        except MolrgError as e:
            raise StorageError(f"invalid params ({e})", path) from e
        _check_shape(payload, path, n=params.n, K=params.K, dims=list(params.dims))
        return params

    # CSV ------------------------------------------------------------------

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        try:
            with open(target, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow([format_value(v) for v in row])
        except OSError as e:
            raise StorageError(f"cannot write file ({e.strerror})", str(target)) from e
        logger.info(f"Wrote {target}")
        return target

    def write_matrix_csv(self, name: str, matrix: np.ndarray) -> Path:
        """Columns of ``matrix`` become rows x0, x1, ... of the table."""
        matrix = np.asarray(matrix, dtype=float)
        header = [f"x{i}" for i in range(matrix.shape[0])]
        return self.write_csv(name, header, matrix.T.tolist())

    def open_trace(self, name: str, header: Sequence[str]) -> "CsvTrace":
        return CsvTrace(self.path(name), header)

    @staticmethod
    def read_matrix_csv(path: str) -> np.ndarray:
        """Inverse of ``write_matrix_csv``: returns an (n, m) matrix of columns."""
        source = Path(path)
        if not source.exists():
            raise StorageError("missing input file", str(source))
        try:
            with open(source, "r", encoding="utf-8", newline="") as f:
                rows = list(csv.reader(f))
            values = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
        except (OSError, ValueError) as e:
            raise StorageError(f"cannot parse sample table ({e})", str(source)) from e
        return values.T

    # SVG ------------------------------------------------------------------

    def _save_figure(self, fig, name: str) -> Path:
        target = self.path(name)
        try:
            fig.savefig(target, format="svg", metadata={"Date": None})
        except OSError as e:
            raise StorageError(f"cannot write figure ({e.strerror})", str(target)) from e
        finally:
            plt.close(fig)
        logger.info(f"Wrote {target}")
        return target

    def write_phase_heatmap(self, name: str, rates: np.ndarray, d_values: Sequence[int],
                            N_values: Sequence[int], title: Optional[str] = None) -> Path:
        """White cells succeed, black cells fail."""
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.imshow(np.asarray(rates), cmap="gray", vmin=0.0, vmax=1.0, origin="lower",
                  aspect="auto", interpolation="nearest")
        ax.set_xticks(range(len(N_values)))
        ax.set_xticklabels([str(N) for N in N_values])
        ax.set_yticks(range(len(d_values)))
        ax.set_yticklabels([str(d) for d in d_values])
        ax.set_xlabel("number of training samples")
        ax.set_ylabel("dimension of subspaces")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return self._save_figure(fig, name)

    def write_curve(self, name: str, x: Sequence[float], y: Sequence[float], xlabel: str, ylabel: str,
                    logx: bool = False, band: Optional[List[float]] = None) -> Path:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(x, y, "o-", color="black", markersize=3)
        if band:
            for level in band:
                ax.axhline(level, color="gray", linestyle="--", linewidth=0.8)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        return self._save_figure(fig, name)


class CsvTrace:
    """Append-only CSV that is flushed row by row, so a crashed run keeps its rows."""

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = Path(path)
        try:
            self._file = open(self.path, "w", encoding="utf-8", newline="")
        except OSError as e:
            raise StorageError(f"cannot write file ({e.strerror})", str(self.path)) from e
        self._writer = csv.writer(self._file, lineterminator="\n")
        self.append(header)

    def append(self, row: Sequence[Any]):
        self._writer.writerow([format_value(v) for v in row])
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
