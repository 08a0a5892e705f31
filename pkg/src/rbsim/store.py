"""Seekable binary container for reduced bases (.rbb files).

Layout (all integers and floats little-endian):

    fixed header   magic "RBBF", version u32, discretization u32, n u32,
                   S_A u32, S_f u32, mode u8 + 3 pad, max_res f64
    digest         32 bytes, sha256 identity of the basis
    theta ids      u32 count + (u32 length, ascii) per id, operator then rhs
    parameters     n * 3 f64 (diff, advx, advy per snapshot, in order)
    section table  6 * (u64 offset, u64 byte count), absolute offsets,
                   in order: red_A, red_f, r1, r2, r4, snapshots
    payload        raw f64 sections

The r2 section holds the family twice (the computed vectors followed by an
identical transposed-family mirror), so the payload float count is exactly

    n*d + S_A*n^2 + S_f*n + (S_A^2*n^2 + 2*S_A*S_f*n + S_f^2)

Snapshot columns are stored column-contiguous, so a reader can pull any m
columns with m seeks and exactly m*d*8 payload bytes, or the leading m
columns with a single contiguous read.  All reads are counted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rbsim.full_problem import Parameter, QualitySpec
from rbsim.rbm import MODES, ReducedBasis, basis_identifier

MAGIC = b"RBBF"
VERSION = 1
_FIXED = struct.Struct("<4sIIIIIB3xd")
_SECTION_NAMES = ("red_A", "red_f", "r1", "r2", "r4", "snapshots")


class StoreFormatError(Exception):
    """The bytes on disk are not a well-formed basis file."""


class BasisNotFoundError(KeyError):
    """No stored basis under the requested identifier."""


def payload_float_count(n: int, d: int, s_a: int, s_f: int) -> int:
    """Serialized payload floats for a basis of n snapshots in dimension d."""
    return n * d + s_a * n * n + s_f * n + (s_a * s_a * n * n + 2 * s_a * s_f * n + s_f * s_f)


def identifier_digest(basis: ReducedBasis) -> bytes:
    """32-byte digest form of a basis identifier (sentinels are hashed)."""
    ident = basis_identifier(basis)
    if basis.n == 0:
        return hashlib.sha256(ident.encode("ascii")).digest()
    return bytes.fromhex(ident)


@dataclass
class ReadCounters:
    """Byte and call accounting for store reads."""

    bytes_read: int = 0
    calls: int = 0
    bulk_loads: int = 0
    column_loads: int = 0

    def snapshot(self) -> dict:
        return {"bytes_read": self.bytes_read, "calls": self.calls,
                "bulk_loads": self.bulk_loads, "column_loads": self.column_loads}


def _section_sizes(n, d, s_a, s_f):
    return {
        "red_A": s_a * n * n * 8,
        "red_f": s_f * n * 8,
        "r1": s_a * s_a * n * n * 8,
        "r2": 2 * s_a * s_f * n * 8,  # family plus transposed-family mirror
        "r4": s_f * s_f * 8,
        "snapshots": n * d * 8,
    }


def _encode_ids(ids) -> bytes:
    out = [struct.pack("<I", len(ids))]
    for i in ids:
        raw = i.encode("ascii")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    return b"".join(out)


def write_basis(basis: ReducedBasis, destination) -> int:
    """Serialize a basis to ``destination`` (path); returns bytes written.

    Requires the snapshot columns unless the basis is empty.
    """
    n, d = basis.n, basis.dimension
    s_a, s_f = basis.s_a, basis.s_f
    if n > 0 and not basis.has_snapshots:
        raise ValueError("cannot serialize a metadata-only basis")

    mode_code = MODES.index(basis.mode)
    head = [
        _FIXED.pack(MAGIC, VERSION, basis.quality.discretization, n, s_a, s_f,
                    mode_code, basis.quality.max_res),
        identifier_digest(basis),
        _encode_ids(basis.theta_a_ids),
        _encode_ids(basis.theta_f_ids),
    ]
    for p in basis.snapshot_params:
        head.append(struct.pack("<3d", p.diff, p.advx, p.advy))
    head_bytes = b"".join(head)

    sizes = _section_sizes(n, d, s_a, s_f)
    table_len = len(_SECTION_NAMES) * 16
    offset = len(head_bytes) + table_len
    table = []
    offsets = {}
    for name in _SECTION_NAMES:
        offsets[name] = offset
        table.append(struct.pack("<QQ", offset, sizes[name]))
        offset += sizes[name]

    r2_flat = basis.r2.astype("<f8").tobytes()
    payload = [
        basis.red_A.astype("<f8").tobytes(),
        basis.red_f.astype("<f8").tobytes(),
        basis.r1.astype("<f8").tobytes(),
        r2_flat + r2_flat,  # mirror: same floats, transposed-family section
        basis.r4.astype("<f8").tobytes(),
        np.asfortranarray(basis.snapshots if n else np.zeros((d, 0))).astype("<f8").tobytes(order="F"),
    ]

    blob = head_bytes + b"".join(table) + b"".join(payload)
    dest = Path(destination)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "wb") as f:
        f.write(blob)
    return len(blob)


class BasisFileReader:
    """Random-access reader over one .rbb file with read accounting."""

    def __init__(self, source, counters: ReadCounters | None = None):
        self.path = Path(source)
        self.counters = counters if counters is not None else ReadCounters()
        self._f = open(self.path, "rb")
        try:
            self._parse_header()
        except Exception:
            self._f.close()
            raise

    # -- low-level -----------------------------------------------------------

    def _read(self, nbytes: int, *, at: int | None = None) -> bytes:
        if at is not None:
            self._f.seek(at)
        raw = self._f.read(nbytes)
        if len(raw) != nbytes:
            raise StoreFormatError(f"{self.path.name}: truncated (wanted {nbytes} bytes)")
        self.counters.bytes_read += nbytes
        self.counters.calls += 1
        return raw

    def _parse_header(self):
        fixed = self._read(_FIXED.size)
        magic, version, disc, n, s_a, s_f, mode_code, max_res = _FIXED.unpack(fixed)
        if magic != MAGIC:
            raise StoreFormatError(f"{self.path.name}: bad magic {magic!r}")
        if version != VERSION:
            raise StoreFormatError(f"{self.path.name}: unsupported version {version}")
        if mode_code >= len(MODES):
            raise StoreFormatError(f"{self.path.name}: unknown mode code {mode_code}")
        self.discretization = disc
        self.n = n
        self.s_a = s_a
        self.s_f = s_f
        self.mode = MODES[mode_code]
        self.quality = QualitySpec(disc, max_res)
        self.digest = self._read(32)
        self.theta_a_ids = self._read_ids()
        self.theta_f_ids = self._read_ids()
        if len(self.theta_a_ids) != s_a or len(self.theta_f_ids) != s_f:
            raise StoreFormatError(f"{self.path.name}: theta id counts disagree with header")

        params = []
        for _ in range(n):
            params.append(Parameter(*struct.unpack("<3d", self._read(24))))
        self.snapshot_params = tuple(params)

        expected = _section_sizes(n, disc * disc, s_a, s_f)
        self.sections = {}
        for name in _SECTION_NAMES:
            offset, nbytes = struct.unpack("<QQ", self._read(16))
            if nbytes != expected[name]:
                raise StoreFormatError(
                    f"{self.path.name}: section {name} holds {nbytes} bytes, "
                    f"expected {expected[name]}")
            self.sections[name] = (offset, nbytes)

    def _read_ids(self):
        (count,) = struct.unpack("<I", self._read(4))
        if count > 64:
            raise StoreFormatError(f"{self.path.name}: implausible theta id count {count}")
        ids = []
        for _ in range(count):
            (ln,) = struct.unpack("<I", self._read(4))
            ids.append(self._read(ln).decode("ascii"))
        return tuple(ids)

    def _section_floats(self, name: str) -> np.ndarray:
        offset, nbytes = self.sections[name]
        return np.frombuffer(self._read(nbytes, at=offset), dtype="<f8")

    # -- public --------------------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.discretization ** 2

    def payload_bytes(self) -> int:
        return sum(nbytes for _, nbytes in self.sections.values())

    def metadata_bytes(self) -> int:
        return self.payload_bytes() - self.sections["snapshots"][1]

    def load_metadata(self) -> ReducedBasis:
        """All reduced blocks, no snapshot columns; identity is verified."""
        n, s_a, s_f = self.n, self.s_a, self.s_f
        red_a = self._section_floats("red_A").reshape(s_a, n, n)
        red_f = self._section_floats("red_f").reshape(s_f, n)
        r1 = self._section_floats("r1").reshape(s_a, s_a, n, n)
        r2_both = self._section_floats("r2").reshape(2, s_a, s_f, n)
        if not np.array_equal(r2_both[0], r2_both[1]):
            raise StoreFormatError(f"{self.path.name}: r2 mirror halves disagree")
        r4 = self._section_floats("r4").reshape(s_f, s_f)

        basis = ReducedBasis(
            snapshot_params=self.snapshot_params,
            mode=self.mode,
            quality=self.quality,
            theta_a_ids=self.theta_a_ids,
            theta_f_ids=self.theta_f_ids,
            red_A=red_a.copy(),
            red_f=red_f.copy(),
            r1=r1.copy(),
            r2=r2_both[0].copy(),
            r4=r4.copy(),
            snapshots=None,
        )
        if identifier_digest(basis) != self.digest:
            raise StoreFormatError(f"{self.path.name}: identifier digest mismatch")
        return basis

    def load_snapshots(self, m: int | None = None, perm=None) -> np.ndarray:
        """Load m snapshot columns as a dense (d, m) block.

        Without ``perm`` the leading m columns arrive in one contiguous read;
        with it, the columns named by ``perm[:m]`` are fetched with one seek
        each.  Either way exactly m*d*8 payload bytes are read.
        """
        d = self.dimension
        m = self.n if m is None else int(m)
        if not 0 <= m <= self.n:
            raise ValueError(f"cannot load {m} of {self.n} snapshot columns")
        offset, _ = self.sections["snapshots"]
        if perm is None:
            raw = self._read(m * d * 8, at=offset) if m else b""
            if m:
                self.counters.bulk_loads += 1
            return np.frombuffer(raw, dtype="<f8").reshape(m, d).T.astype(np.float64, order="C") \
                if m else np.zeros((d, 0))
        cols = [int(c) for c in list(perm)[:m]]
        if len(cols) != m:
            raise ValueError("perm provides fewer indices than m")
        out = np.empty((d, m))
        for k, col in enumerate(cols):
            if not 0 <= col < self.n:
                raise ValueError(f"snapshot index {col} out of range")
            raw = self._read(d * 8, at=offset + col * d * 8)
            out[:, k] = np.frombuffer(raw, dtype="<f8")
            self.counters.column_loads += 1
        return out

    def load_full(self) -> ReducedBasis:
        basis = self.load_metadata()
        cols = self.load_snapshots()
        return ReducedBasis(
            snapshot_params=basis.snapshot_params,
            mode=basis.mode,
            quality=basis.quality,
            theta_a_ids=basis.theta_a_ids,
            theta_f_ids=basis.theta_f_ids,
            red_A=basis.red_A,
            red_f=basis.red_f,
            r1=basis.r1,
            r2=basis.r2,
            r4=basis.r4,
            snapshots=cols,
        )

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_metadata(source, counters: ReadCounters | None = None) -> ReducedBasis:
    with BasisFileReader(source, counters) as reader:
        return reader.load_metadata()


def load_snapshots(source, m: int | None = None, perm=None,
                   counters: ReadCounters | None = None) -> np.ndarray:
    with BasisFileReader(source, counters) as reader:
        return reader.load_snapshots(m, perm)


@dataclass
class BasisStore:
    """Directory of basis files addressed by identifier."""

    directory: Path
    counters: ReadCounters = field(default_factory=ReadCounters)

    def __post_init__(self):
        self.directory = Path(self.directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, identifier: str) -> Path:
        return self.directory / f"{identifier}.rbb"

    def has(self, identifier: str) -> bool:
        return self.path_for(identifier).exists()

    def save(self, basis: ReducedBasis) -> tuple:
        ident = basis_identifier(basis)
        nbytes = write_basis(basis, self.path_for(ident))
        return ident, nbytes

    def open(self, identifier: str) -> BasisFileReader:
        path = self.path_for(identifier)
        if not path.exists():
            raise BasisNotFoundError(identifier)
        return BasisFileReader(path, self.counters)

    def identifiers(self) -> list:
        return sorted(p.stem for p in self.directory.glob("*.rbb"))
