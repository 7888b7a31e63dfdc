"""Datasets: the SPGN container, a synthetic Darcy generator, subsampling, bundles."""

from __future__ import annotations

import hashlib
import io
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from .embedding import LipschitzEmbedding, lipschitz_embed, select_anchors
from .graph import Graph, build_knn_graph, normalized_laplacian
from .model import Bundle
from .spectral import DENSE_THRESHOLD, SpectralBasis, lobpcg_smallest

logger = logging.getLogger(__name__)

MAGIC = b"SPGN"
VERSION = 1
SHARED, PER_SAMPLE = "shared", "per-sample"
_MODES = (SHARED, PER_SAMPLE)


class DataError(ValueError):
    """Base for every dataset problem reported to the user."""


class MalformedFileError(DataError):
    pass


class InconsistentSizeError(DataError):
    pass


class NonFiniteValueError(DataError):
    pass


@dataclass(frozen=True)
class PointCloudSample:
    coordinates: np.ndarray   # (N, dim)
    a: np.ndarray             # (N, d_a)
    u: np.ndarray             # (N, d_u)
    sample_id: str = ""

    @property
    def n_nodes(self) -> int:
        return self.coordinates.shape[0]

    def inputs(self) -> np.ndarray:
        """Node input rows ``[a | x]``."""
        return np.concatenate([self.a, self.coordinates], axis=1)


def _check_sample(s: PointCloudSample, index: int, dim: int, d_a: int, d_u: int):
    n = s.coordinates.shape[0]
    for name, arr, width in (("coordinates", s.coordinates, dim), ("a", s.a, d_a), ("u", s.u, d_u)):
        if arr.ndim != 2 or arr.shape[1] != width:
            raise InconsistentSizeError(f"sample {index}: {name} has shape {arr.shape}, "
                                        f"expected (N, {width})")
        if arr.shape[0] != n:
            raise InconsistentSizeError(f"sample {index}: {name} has {arr.shape[0]} rows, "
                                        f"coordinates have {n}")
        bad = ~np.isfinite(arr)
        if bad.any():
            row, chan = np.argwhere(bad)[0]
            raise NonFiniteValueError(f"sample {index} ({s.sample_id or 'unnamed'}): non-finite "
                                      f"value in {name} channel {chan} at node {row}")


@dataclass
class Dataset:
    samples: list[PointCloudSample]
    dim: int
    d_a: int
    d_u: int
    mode: str = PER_SAMPLE
    splits: list[tuple[str, int, int]] = field(default_factory=list)
    a_names: list[str] = field(default_factory=list)
    u_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in _MODES:
            raise DataError(f"unknown geometry mode {self.mode!r}")
        for i, s in enumerate(self.samples):
            _check_sample(s, i, self.dim, self.d_a, self.d_u)
        if not self.splits:
            self.splits = [("all", 0, len(self.samples))]
        pos = 0
        for name, lo, hi in self.splits:
            if lo != pos or hi < lo:
                raise DataError(f"split {name!r} [{lo}, {hi}) does not continue at {pos}")
            pos = hi
        if pos != len(self.samples):
            raise DataError(f"splits cover {pos} samples, dataset has {len(self.samples)}")
        if not self.a_names:
            self.a_names = [f"a{i}" for i in range(self.d_a)]
        if not self.u_names:
            self.u_names = [f"u{i}" for i in range(self.d_u)]
        if self.mode == SHARED and not shares_geometry(self.samples):
            raise DataError("shared mode requires identical coordinates in every sample")

    def __len__(self):
        return len(self.samples)

    @property
    def n_nodes(self) -> int | None:
        sizes = {s.n_nodes for s in self.samples}
        return sizes.pop() if len(sizes) == 1 else None

    def split(self, name: str) -> "Dataset":
        for split_name, lo, hi in self.splits:
            if split_name == name:
                return self.subset(range(lo, hi), name)
        raise KeyError(f"no split named {name!r} (have {[s[0] for s in self.splits]})")

    def has_split(self, name: str) -> bool:
        return any(s[0] == name for s in self.splits)

    def subset(self, indices, name: str = "all") -> "Dataset":
        picked = [self.samples[i] for i in indices]
        return Dataset(picked, self.dim, self.d_a, self.d_u, self.mode,
                       [(name, 0, len(picked))], list(self.a_names), list(self.u_names))


def shares_geometry(samples) -> bool:
    if not samples:
        return True
    ref = samples[0].coordinates
    return all(s.coordinates.shape == ref.shape and np.array_equal(s.coordinates, ref)
               for s in samples[1:])


# ------------------------------------------------------------------ SPGN container
#
# "SPGN" | u32 version | u32 dim, d_a, d_u | u8 n_policy | u8 mode | u32 n_samples
# | u32 n_splits, then per split: str name, u64 start, u64 stop
# | per sample: str id, u64 N, then coordinates, a, u as (u64 count, f64[count])
# Strings are u32 byte length + UTF-8. Everything little-endian.

def _pack_str(buf, text: str):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _pack_array(buf, arr: np.ndarray):
    flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
    buf.write(struct.pack("<Q", flat.size))
    buf.write(flat.tobytes())


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    fixed = ds.n_nodes is not None
    buf.write(struct.pack("<IIIIBBI", VERSION, ds.dim, ds.d_a, ds.d_u, int(not fixed),
                          _MODES.index(ds.mode), len(ds.samples)))
    buf.write(struct.pack("<I", len(ds.splits)))
    for name, lo, hi in ds.splits:
        _pack_str(buf, name)
        buf.write(struct.pack("<QQ", lo, hi))
    for s in ds.samples:
        _pack_str(buf, s.sample_id)
        buf.write(struct.pack("<Q", s.n_nodes))
        for arr in (s.coordinates, s.a, s.u):
            _pack_array(buf, arr)
    return buf.getvalue()


def meta_text(ds: Dataset) -> str:
    lines = [f"format=SPGN v{VERSION}", f"samples={len(ds)}", f"dim={ds.dim}",
             f"mode={ds.mode}", f"nodes={ds.n_nodes if ds.n_nodes is not None else 'variable'}",
             f"a_channels={','.join(ds.a_names)}", f"u_channels={','.join(ds.u_names)}",
             "splits=" + ",".join(f"{n}:{lo}-{hi}" for n, lo, hi in ds.splits)]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    path.with_suffix(".meta").write_text(meta_text(ds))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise MalformedFileError(f"file truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFileError(f"{what} is not valid UTF-8") from exc

    def array(self, rows: int, width: int, what: str) -> np.ndarray:
        (count,) = self.unpack("<Q", what)
        if count != rows * width:
            raise InconsistentSizeError(f"{what}: {count} values, expected {rows} x {width}")
        data = np.frombuffer(self.take(8 * count, what), dtype="<f8")
        return data.astype(np.float64).reshape(rows, width)


def _read_meta_names(path: Path):
    meta = path.with_suffix(".meta")
    names = {}
    if meta.exists():
        for line in meta.read_text().splitlines():
            key, _, value = line.partition("=")
            if key in ("a_channels", "u_channels") and value:
                names[key] = value.split(",")
    return names.get("a_channels", []), names.get("u_channels", [])


def parse_dataset(raw: bytes, mode: str | None = None) -> Dataset:
    """Decode an SPGN byte string.

    The stored geometry mode is checked against the coordinates: a shared
    file whose samples differ is downgraded to per-sample with a warning.
    ``mode`` forces a mode (forcing shared on differing geometry is an error).
    """
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise MalformedFileError("not an SPGN file (bad magic)")
    version, dim, d_a, d_u, n_policy, mode_code, count = r.unpack("<IIIIBBI", "header")
    if version != VERSION:
        raise MalformedFileError(f"unsupported SPGN version {version}")
    if dim not in (1, 2, 3) or d_a < 1 or d_u < 1 or mode_code > 1 or n_policy > 1:
        raise MalformedFileError(f"invalid header fields dim={dim} d_a={d_a} d_u={d_u} "
                                 f"mode={mode_code} n_policy={n_policy}")
    (n_splits,) = r.unpack("<I", "split count")
    splits = []
    for _ in range(n_splits):
        name = r.string("split name")
        lo, hi = r.unpack("<QQ", "split bounds")
        splits.append((name, lo, hi))
    samples = []
    sizes = set()
    for i in range(count):
        sid = r.string(f"sample {i} id")
        (n,) = r.unpack("<Q", f"sample {i} size")
        coords = r.array(n, dim, f"sample {i} coordinates")
        a = r.array(n, d_a, f"sample {i} a")
        u = r.array(n, d_u, f"sample {i} u")
        sizes.add(n)
        samples.append(PointCloudSample(coords, a, u, sid))
    if r.pos != len(raw):
        raise MalformedFileError(f"{len(raw) - r.pos} trailing bytes after the last sample")
    if n_policy == 0 and len(sizes) > 1:
        raise InconsistentSizeError(f"header declares a fixed node count but samples have "
                                    f"{sorted(sizes)}")
    stored = _MODES[mode_code]
    same = shares_geometry(samples)
    if mode is None:
        mode = stored
        if stored == SHARED and not same:
            logger.warning("file declares a shared geometry but coordinates differ between "
                           "samples; treating it as per-sample")
            mode = PER_SAMPLE
    elif mode == SHARED and not same:
        raise DataError("cannot force shared mode: sample coordinates differ")
    return Dataset(samples, dim, d_a, d_u, mode, splits)


def load_dataset(path, mode: str | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    ds = parse_dataset(path.read_bytes(), mode)
    a_names, u_names = _read_meta_names(path)
    if len(a_names) == ds.d_a:
        ds.a_names = a_names
    if len(u_names) == ds.d_u:
        ds.u_names = u_names
    return ds


def convert_npz(src, dst, mode: str | None = None, splits=None) -> Dataset:
    """Pack external data into SPGN.

    ``src`` holds ``coords`` ([S, N, dim] or a shared [N, dim]), ``a`` [S, N, d_a]
    and ``u`` [S, N, d_u]. Time-dependent fields go in as channels (e.g. ten
    past vorticity steps in ``a``, the next ten in ``u``).
    """
    with np.load(src) as z:
        missing = {"coords", "a", "u"} - set(z.files)
        if missing:
            raise DataError(f"{src}: missing arrays {sorted(missing)}")
        coords, a, u = (np.asarray(z[k], dtype=np.float64) for k in ("coords", "a", "u"))
    if a.ndim == 2:
        a = a[..., None]
    if u.ndim == 2:
        u = u[..., None]
    if coords.ndim == 2:
        coords = np.broadcast_to(coords, (a.shape[0], *coords.shape))
    if not (coords.shape[0] == a.shape[0] == u.shape[0]):
        raise InconsistentSizeError("coords, a and u disagree on the sample count")
    samples = [PointCloudSample(coords[i].copy(), a[i], u[i], f"sample{i}")
               for i in range(a.shape[0])]
    same = shares_geometry(samples)
    ds = Dataset(samples, coords.shape[2], a.shape[2], u.shape[2],
                 mode or (SHARED if same else PER_SAMPLE), splits or [])
    save_dataset(ds, dst)
    return ds


# ------------------------------------------------------------------ Darcy generator

BINOMIAL_9 = np.array([1, 8, 28, 56, 70, 56, 28, 8, 1], dtype=np.float64) / 256.0
COEFF_LOW, COEFF_HIGH = 3.0, 12.0


def darcy_coefficient(s: int, rng: np.random.Generator) -> np.ndarray:
    """Two-phase field in {3, 12}: smoothed white noise cut at its median."""
    noise = rng.standard_normal((s, s))
    smooth = ndimage.convolve1d(noise, BINOMIAL_9, axis=0, mode="reflect")
    smooth = ndimage.convolve1d(smooth, BINOMIAL_9, axis=1, mode="reflect")
    return np.where(smooth > np.median(smooth), COEFF_HIGH, COEFF_LOW)


def darcy_system(coeff: np.ndarray, forcing: float = 1.0):
    """5-point discretization of ``-div(a grad u) = f`` with ``u = 0`` on the boundary.

    Nodes sit on the uniform ``s x s`` grid over [0,1]^2 including the
    boundary; face coefficients are arithmetic means of the two nodes.
    Returns the interior matrix (CSR) and right-hand side.
    """
    s = coeff.shape[0]
    h = 1.0 / (s - 1)
    n_in = s - 2
    idx = -np.ones((s, s), dtype=np.int64)
    idx[1:-1, 1:-1] = np.arange(n_in * n_in).reshape(n_in, n_in)
    rows, cols, vals = [], [], []
    diag = np.zeros(n_in * n_in)
    ii, jj = np.meshgrid(np.arange(1, s - 1), np.arange(1, s - 1), indexing="ij")
    centre = idx[ii, jj].ravel()
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        face = 0.5 * (coeff[ii, jj] + coeff[ii + di, jj + dj]).ravel() / h ** 2
        diag += face
        nb = idx[ii + di, jj + dj].ravel()
        inner = nb >= 0
        rows.append(centre[inner])
        cols.append(nb[inner])
        vals.append(-face[inner])
    rows.append(np.arange(n_in * n_in))
    cols.append(np.arange(n_in * n_in))
    vals.append(diag)
    mat = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n_in * n_in, n_in * n_in))
    return mat, np.full(n_in * n_in, float(forcing))


def solve_darcy(coeff: np.ndarray, forcing: float = 1.0) -> tuple[np.ndarray, float]:
    """Nodal solution on the full grid and the discrete residual (max norm)."""
    s = coeff.shape[0]
    mat, rhs = darcy_system(coeff, forcing)
    sol = splinalg.spsolve(mat.tocsc(), rhs)
    if not np.all(np.isfinite(sol)):
        raise DataError("Darcy system is singular")
    residual = float(np.abs(mat @ sol - rhs).max())
    u = np.zeros((s, s))
    u[1:-1, 1:-1] = sol.reshape(s - 2, s - 2)
    return u, residual


def grid_coordinates(s: int) -> np.ndarray:
    """Row-major grid nodes: node ``i*s + j`` sits at ``(x_j, y_i)``."""
    t = np.linspace(0.0, 1.0, s)
    y, x = np.meshgrid(t, t, indexing="ij")
    return np.stack([x.ravel(), y.ravel()], axis=1)


def generate_darcy(s: int, count: int, seed: int = 0, splits=None,
                   tol: float = 1e-10) -> tuple[Dataset, float]:
    """Synthetic Darcy pairs ``(a, u)`` on an ``s x s`` grid.

    ``splits`` is a list of ``(name, size)`` summing to ``count``. Returns the
    dataset and the largest discrete residual over all solves.
    """
    if s < 8:
        raise DataError(f"grid size must be at least 8, got {s}")
    if count < 1:
        raise DataError("sample count must be positive")
    rng = np.random.default_rng(seed)
    coords = grid_coordinates(s)
    samples, worst = [], 0.0
    for i in range(count):
        coeff = darcy_coefficient(s, rng)
        u, res = solve_darcy(coeff)
        if res > tol:
            raise DataError(f"sample {i}: discrete residual {res:.3g} above {tol:g}")
        worst = max(worst, res)
        samples.append(PointCloudSample(coords, coeff.reshape(-1, 1), u.reshape(-1, 1),
                                        f"darcy-{s}-{seed}-{i}"))
    bounds, pos = [], 0
    for name, size in (splits or [("all", count)]):
        bounds.append((name, pos, pos + size))
        pos += size
    return Dataset(samples, 2, 1, 1, SHARED, bounds, ["a"], ["u"]), worst


def subsample_cloud(sample: PointCloudSample, target_n: int, seed: int) -> PointCloudSample:
    """Seeded uniform subset of ``target_n`` nodes, kept in original order."""
    n = sample.n_nodes
    if not 1 <= target_n <= n:
        raise DataError(f"cannot draw {target_n} nodes from {n}")
    keep = np.sort(np.random.default_rng(seed).choice(n, size=target_n, replace=False))
    return PointCloudSample(sample.coordinates[keep], sample.a[keep], sample.u[keep],
                            sample.sample_id)


def subsample_dataset(ds: Dataset, target_n: int, seed: int) -> Dataset:
    """Same node subset for every sample of a shared-geometry dataset."""
    if ds.mode == SHARED:
        samples = [subsample_cloud(s, target_n, seed) for s in ds.samples]
    else:
        samples = [subsample_cloud(s, target_n, seed + i) for i, s in enumerate(ds.samples)]
    return Dataset(samples, ds.dim, ds.d_a, ds.d_u, ds.mode, list(ds.splits),
                   list(ds.a_names), list(ds.u_names))


# ------------------------------------------------------------------ bundles

@dataclass(frozen=True)
class BundleSettings:
    k: int = 20
    m: int = 32
    n_anchors: int = 22
    anchor_seed: int = 0
    eig_seed: int = 0
    tol: float = 1e-8
    max_iter: int = 500
    dense_threshold: int = DENSE_THRESHOLD

    def key(self) -> str:
        return (f"k{self.k}-m{self.m}-n{self.n_anchors}-a{self.anchor_seed}-e{self.eig_seed}"
                f"-t{self.tol!r}-i{self.max_iter}-d{self.dense_threshold}")


def geometry_fingerprint(coords) -> str:
    x = np.ascontiguousarray(coords, dtype="<f8")
    h = hashlib.sha256()
    h.update(np.asarray(x.shape, dtype="<i8").tobytes())
    h.update(x.tobytes())
    return h.hexdigest()


def compute_bundle(coords, settings: BundleSettings) -> Bundle:
    """kNN graph -> normalized Laplacian -> first ``m`` eigenpairs, plus the embedding."""
    graph = build_knn_graph(coords, settings.k)
    if settings.m >= graph.n_nodes:
        raise DataError(f"m={settings.m} needs more than {graph.n_nodes} nodes")
    if settings.n_anchors > graph.n_nodes:
        raise DataError(f"{settings.n_anchors} anchors requested on {graph.n_nodes} nodes")
    basis = lobpcg_smallest(normalized_laplacian(graph), settings.m, settings.tol,
                            settings.max_iter, settings.eig_seed, settings.dense_threshold)
    anchors = select_anchors(graph, settings.n_anchors, settings.anchor_seed)
    return Bundle(graph, basis, lipschitz_embed(graph, anchors))


def _bundle_arrays(b: Bundle) -> dict[str, np.ndarray]:
    adj = b.graph.adjacency
    return {"coordinates": b.graph.coordinates, "indptr": adj.indptr, "indices": adj.indices,
            "values": adj.values, "edge_distances": b.graph.edge_distances,
            "eigenvalues": b.basis.eigenvalues, "eigenvectors": b.basis.eigenvectors,
            "residuals": b.basis.residuals,
            "solver": np.array([b.basis.used_fallback, b.basis.iterations], dtype=np.int64),
            "anchors": b.embedding.anchors, "distances": b.embedding.distances}


def _bundle_from_arrays(z) -> Bundle:
    from .sparse import SparseMatrix
    n = len(z["indptr"]) - 1
    adj = SparseMatrix((n, n), z["indptr"], z["indices"], z["values"], symmetric=True)
    graph = Graph(z["coordinates"], adj, z["edge_distances"])
    basis = SpectralBasis(z["eigenvalues"], z["eigenvectors"], z["residuals"],
                          adj.fingerprint(), bool(z["solver"][0]), int(z["solver"][1]))
    return Bundle(graph, basis, LipschitzEmbedding(z["anchors"], z["distances"]))


def default_cache_dir() -> Path:
    env = os.environ.get("SPGNO_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "sp2gno"


class BundleCache:
    """Bundles keyed by geometry fingerprint and settings; optional on-disk copy."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._lock = threading.Lock()
        self._store: dict[tuple[str, str], Bundle] = {}
        self.builds = 0

    def _path(self, key) -> Path:
        return self.directory / f"{key[0][:32]}-{key[1]}.npz"

    def get(self, coords, settings: BundleSettings) -> Bundle:
        key = (geometry_fingerprint(coords), settings.key())
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        bundle = None
        if self.directory is not None and self._path(key).exists():
            try:
                with np.load(self._path(key)) as z:
                    bundle = _bundle_from_arrays(z)
                if not np.array_equal(bundle.graph.coordinates, coords):
                    bundle = None
            except (OSError, ValueError, KeyError):
                logger.warning("ignoring unreadable bundle cache file %s", self._path(key))
                bundle = None
        if bundle is None:
            bundle = compute_bundle(coords, settings)
            self.builds += 1
            if self.directory is not None:
                self.directory.mkdir(parents=True, exist_ok=True)
                tmp = self._path(key).with_suffix(".tmp.npz")
                np.savez(tmp, **_bundle_arrays(bundle))
                os.replace(tmp, self._path(key))
        with self._lock:
            self._store[key] = bundle
        return bundle

    def __len__(self):
        return len(self._store)


def dataset_bundles(ds: Dataset, settings: BundleSettings,
                    cache: BundleCache | None = None) -> list[Bundle]:
    """One bundle per sample; shared-geometry datasets resolve to a single object."""
    cache = cache if cache is not None else BundleCache()
    if ds.mode == SHARED and ds.samples:
        b = cache.get(ds.samples[0].coordinates, settings)
        return [b] * len(ds)
    return [cache.get(s.coordinates, settings) for s in ds.samples]
