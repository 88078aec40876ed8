"""Synthetic generators, MNIST (IDX) ingestion and the dataset container format.

Container layout (all integers little-endian)::

    b"IRDFDATA"            8-byte magic
    uint32 version
    uint32 array count     (2: s then x)
    per array:
        uint8  dtype code  (0 = float64, 1 = int64)
        uint8  ndim
        uint64 * ndim      shape
        raw C-order bytes
    32 bytes               sha256 of everything above

Metadata (generator, seed, sizes) lives in a JSON sidecar ``<path>.json``.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigurationError, DatasetFormatError, DimensionError

MAGIC = b"IRDFDATA"
FORMAT_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

PAPER_K_X = np.array([[11.0, 0.0, 0.5], [0.0, 3.0, -2.0], [0.5, -2.0, 2.35]])
PAPER_H = np.array([[0.0701, 0.305, 0.457], [-0.0305, -0.220, 0.671]])
PAPER_K_W = np.array([[0.701, -0.305], [-0.305, 0.220]])


@dataclass(frozen=True, eq=False)
class GaussianModelSpec:
    """``X ~ N(0, K_X)``, ``S = H X + W`` with ``W ~ N(0, K_W)`` independent of ``X``."""

    K_X: np.ndarray
    H: np.ndarray
    K_W: np.ndarray

    def __post_init__(self):
        K_X = np.atleast_2d(np.asarray(self.K_X, dtype=np.float64))
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        K_W = np.atleast_2d(np.asarray(self.K_W, dtype=np.float64))
        object.__setattr__(self, "K_X", K_X)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "K_W", K_W)
        if K_X.shape != (H.shape[1], H.shape[1]) or K_W.shape != (H.shape[0], H.shape[0]):
            raise DimensionError(f"K_X {K_X.shape}, H {H.shape}, K_W {K_W.shape} are incompatible")
        for name, K, strict in (("K_X", K_X, True), ("K_W", K_W, False)):
            if not np.allclose(K, K.T, atol=1e-12):
                raise ConfigurationError(f"{name} is not symmetric")
            lo = np.linalg.eigvalsh(K).min()
            if lo <= 0 if strict else lo < -1e-12 * max(1.0, np.abs(K).max()):
                raise ConfigurationError(
                    f"{name} is not positive {'definite' if strict else 'semidefinite'}"
                )

    @property
    def x_dim(self) -> int:
        return self.H.shape[1]

    @property
    def s_dim(self) -> int:
        return self.H.shape[0]

    def to_dict(self) -> dict:
        return {"K_X": self.K_X.tolist(), "H": self.H.tolist(), "K_W": self.K_W.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModelSpec":
        return cls(np.array(d["K_X"]), np.array(d["H"]), np.array(d["K_W"]))


def paper_gaussian_spec() -> GaussianModelSpec:
    return GaussianModelSpec(PAPER_K_X.copy(), PAPER_H.copy(), PAPER_K_W.copy())


@dataclass(eq=False)
class Dataset:
    s: np.ndarray
    x: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if len(self.s) != len(self.x):
            raise DimensionError(f"{len(self.s)} sources but {len(self.x)} observations")
        if len(self.x) == 0:
            raise ConfigurationError("dataset is empty")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def x_dim(self) -> int:
        return self.x.shape[1]

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Resample ``count`` pairs with replacement."""
        idx = rng.integers(len(self), size=count)
        return self.s[idx], self.x[idx]


def sqrtm_psd(K: np.ndarray) -> np.ndarray:
    """Symmetric square root via the eigendecomposition; tiny negative eigenvalues clipped."""
    w, V = np.linalg.eigh(K)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def draw_gaussian(spec: GaussianModelSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((n, spec.x_dim)) @ sqrtm_psd(spec.K_X)
    w = rng.standard_normal((n, spec.s_dim)) @ sqrtm_psd(spec.K_W)
    return x @ spec.H.T + w, x


def gen_gaussian(spec: GaussianModelSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    s, x = draw_gaussian(spec, n, np.random.default_rng(seed))
    meta = {"generator": "gaussian", "params": spec.to_dict(), "n": n, "seed": seed}
    return Dataset(s, x, meta)


def sparse_ternary_matrix(rows: int, cols: int, seed: int, p_nonzero: float = 0.10) -> np.ndarray:
    """Entries i.i.d. in {-1, 0, 1} with probabilities p/2, 1 - p, p/2."""
    rng = np.random.default_rng(seed)
    return rng.choice(np.array([-1.0, 0.0, 1.0]), size=(rows, cols),
                      p=[p_nonzero / 2, 1 - p_nonzero, p_nonzero / 2])


def highdim_sparse_spec(seed_H: int = 0, x_dim: int = 120, s_dim: int = 6) -> GaussianModelSpec:
    H = sparse_ternary_matrix(s_dim, x_dim, seed_H)
    return GaussianModelSpec(2.0 * np.eye(x_dim), H, np.eye(s_dim))


def gen_highdim_sparse(seed_H: int = 0, seed_data: int = 1, n: int = 10000) -> tuple[Dataset, np.ndarray]:
    spec = highdim_sparse_spec(seed_H)
    ds = gen_gaussian(spec, n, seed_data)
    ds.metadata.update({"generator": "highdim_sparse", "seed_H": seed_H})
    return ds, spec.H


def gen_binary(A: float, sigma: float, n: int, seed: int) -> Dataset:
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s = rng.integers(2, size=n)
    x = np.where(s == 0, A, -A) + sigma * rng.standard_normal(n)
    meta = {"generator": "binary", "params": {"A": A, "sigma": sigma}, "n": n, "seed": seed}
    return Dataset(s.astype(np.int64), x[:, None], meta)


def load_digits_dataset() -> Dataset:
    """scikit-learn's bundled 8x8 digits, pixels scaled to [0, 1]; an offline MNIST stand-in."""
    from sklearn.datasets import load_digits

    d = load_digits()
    meta = {"generator": "sklearn_digits", "n": int(len(d.target))}
    return Dataset(d.target.astype(np.int64), d.data / 16.0, meta)


def draw_fresh(metadata: dict, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fresh ``(s, x)`` draws from the generator a synthetic dataset came from."""
    gen = metadata.get("generator")
    if gen in ("gaussian", "highdim_sparse"):
        return draw_gaussian(GaussianModelSpec.from_dict(metadata["params"]), n, rng)
    if gen == "binary":
        p = metadata["params"]
        s = rng.integers(2, size=n)
        x = np.where(s == 0, p["A"], -p["A"]) + p["sigma"] * rng.standard_normal(n)
        return s.astype(np.int64), x[:, None]
    raise ConfigurationError(f"dataset from {gen!r} cannot be redrawn")


def regenerate(metadata: dict) -> Dataset:
    """Rebuild a synthetic dataset from its metadata."""
    gen = metadata.get("generator")
    if gen == "highdim_sparse":
        return gen_highdim_sparse(metadata["seed_H"], metadata["seed"], metadata["n"])[0]
    if gen == "gaussian":
        return gen_gaussian(GaussianModelSpec.from_dict(metadata["params"]), metadata["n"], metadata["seed"])
    if gen == "binary":
        p = metadata["params"]
        return gen_binary(p["A"], p["sigma"], metadata["n"], metadata["seed"])
    if gen == "sklearn_digits":
        return load_digits_dataset()
    raise ConfigurationError(f"cannot regenerate dataset from {gen!r}")


# --------------------------------------------------------------------------
# IDX (MNIST)
# --------------------------------------------------------------------------


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:head])
    size = int(np.prod(shape))
    if len(raw) - head != size:
        raise DatasetFormatError(f"{path}: expected {size} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used to build test fixtures)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_mnist_idx(image_path, label_path) -> Dataset:
    images = _read_idx(image_path, IDX_IMAGES)
    labels = _read_idx(label_path, IDX_LABELS)
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    meta = {"generator": "mnist_idx", "images": str(image_path), "labels": str(label_path), "n": len(labels)}
    return Dataset(labels.astype(np.int64), x, meta)


def empirical_entropy(labels, base: float = 2.0) -> float:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)) / np.log(base))


# --------------------------------------------------------------------------
# container format
# --------------------------------------------------------------------------

_DTYPES = {0: np.float64, 1: np.int64}


def _encode_array(a: np.ndarray) -> bytes:
    if np.issubdtype(a.dtype, np.integer):
        code, a = 1, a.astype("<i8")
    else:
        code, a = 0, a.astype("<f8")
    head = struct.pack("<BB", code, a.ndim) + struct.pack("<" + "Q" * a.ndim, *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def dataset_bytes(ds: Dataset) -> bytes:
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, 2) + _encode_array(ds.s) + _encode_array(ds.x)
    return body + hashlib.sha256(body).digest()


def save_dataset(path, ds: Dataset) -> None:
    """Atomically write the binary container plus its JSON sidecar."""
    path = Path(path)
    blob = dataset_bytes(ds)
    meta = dict(ds.metadata)
    meta.setdefault("created", time.strftime("%Y-%m-%dT%H:%M:%S"))
    sidecar = {"format": "irdf-dataset", "version": FORMAT_VERSION,
               "sha256": hashlib.sha256(blob).hexdigest(), "n": len(ds),
               "x_dim": ds.x_dim, "metadata": meta}
    for target, payload in ((path, blob), (Path(str(path) + ".json"), json.dumps(sidecar, indent=2).encode())):
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(payload)
        tmp.replace(target)


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        if raw[:len(MAGIC)] == MAGIC:
            raise ChecksumError(f"{path}: truncated file")
        raise DatasetFormatError(f"{path}: not an irdf dataset")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, count = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    off = len(MAGIC) + 8
    arrays = []
    for _ in range(count):
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from("<" + "Q" * ndim, body, off)
        off += 8 * ndim
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arrays.append(np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).astype(_DTYPES[code]))
        off += nbytes
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text())["metadata"] if sidecar.exists() else {}
    return Dataset(arrays[0], arrays[1], meta)
