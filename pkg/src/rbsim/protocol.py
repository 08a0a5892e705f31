"""Client-server sync protocol: basis generation requests and basis updates.

A *basis update* carries everything needed to grow a basis by one snapshot
without re-projecting: the new (already normalized) column, the border
rows/columns/corners of every block family, and the identifiers before and
after.  Applying an update is pure splicing, bit-identical to the extension
the server performed, so client and server stay in lockstep; identifiers
gate against applying an update to the wrong (or an already-updated) basis.

Update payload float count:

    d + S_A*(2n+1) + S_f + S_A^2*(2n+1) + 2*S_A*S_f

(n is the size before the update; the r2 border travels twice, family plus
transposed-family mirror, matching the file format.)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem, snapshot
from rbsim.rbm import (
    MODES,
    ExtensionBorder,
    ReducedBasis,
    apply_border,
    basis_identifier,
    extension_border,
    prepare_column,
)
from rbsim.store import BasisStore

UPDATE_MAGIC = b"RBBU"
UPDATE_VERSION = 1
_UPDATE_FIXED = struct.Struct("<4sIIIIIB3xd3d")


class ProtocolError(Exception):
    """Malformed or inconsistent protocol payload."""


class IdentifierMismatchError(ProtocolError):
    """The update does not chain onto the basis it was applied to."""


class UnknownBasisError(ProtocolError):
    """The server has no basis under the requested identifier."""


def update_float_count(n: int, d: int, s_a: int, s_f: int) -> int:
    """Payload floats of an update onto a basis of n snapshots."""
    return d + s_a * (2 * n + 1) + s_f + s_a * s_a * (2 * n + 1) + 2 * s_a * s_f


def parse_empty_identifier(identifier: str):
    """(discretization, mode) from an empty-basis sentinel, or None."""
    parts = identifier.split("-")
    if len(parts) != 3 or parts[0] != "empty":
        return None
    if not parts[1].isdigit() or parts[2] not in MODES:
        return None
    return int(parts[1]), parts[2]


@dataclass(frozen=True)
class BasisRequest:
    """Generation order for the server: what to train on, to what quality."""

    method: str  # "greedy" | "reorder"
    preset: str
    step: float
    quality: QualitySpec
    mode: str | None = None  # default: orthonormal for greedy, normalized for reorder
    margin: int = 3          # reorder margin a
    seed: int | None = None
    stop_n: int | None = None

    def __post_init__(self):
        if self.method not in ("greedy", "reorder"):
            raise ValueError(f"unknown generation method {self.method!r}")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "preset": self.preset,
            "step": self.step,
            "discretization": self.quality.discretization,
            "max_res": self.quality.max_res,
            "mode": self.mode,
            "margin": self.margin,
            "seed": self.seed,
            "stop_n": self.stop_n,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BasisRequest":
        try:
            return cls(
                method=data["method"],
                preset=data["preset"],
                step=float(data.get("step", 1.0)),
                quality=QualitySpec(data["discretization"], data["max_res"]),
                mode=data.get("mode"),
                margin=int(data.get("margin", 3)),
                seed=data.get("seed"),
                stop_n=data.get("stop_n"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad basis request: {exc}") from exc


@dataclass(frozen=True)
class UpdateRequest:
    """Ask the server to extend a known basis by one snapshot."""

    identifier: str
    parameter: Parameter

    def to_json(self) -> dict:
        return {"identifier": self.identifier,
                "parameter": list(self.parameter.as_array())}

    @classmethod
    def from_json(cls, data: dict) -> "UpdateRequest":
        try:
            return cls(str(data["identifier"]), Parameter.from_array(data["parameter"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad update request: {exc}") from exc


@dataclass(frozen=True)
class BasisUpdate:
    """One-snapshot extension in wire form."""

    old_identifier: str
    new_identifier: str
    parameter: Parameter
    discretization: int
    mode: str
    max_res: float
    column: np.ndarray      # (d,) the new basis column
    border: ExtensionBorder

    @property
    def old_n(self) -> int:
        return self.border.a_col.shape[1]


def _pack_str(s: str) -> bytes:
    raw = s.encode("ascii")
    return struct.pack("<H", len(raw)) + raw


def pack_update(update: BasisUpdate) -> bytes:
    b = update.border
    s_a, s_f = b.a_corner.shape[0], b.f_new.shape[0]
    n = update.old_n
    head = _UPDATE_FIXED.pack(
        UPDATE_MAGIC, UPDATE_VERSION, update.discretization, n, s_a, s_f,
        MODES.index(update.mode), update.max_res,
        update.parameter.diff, update.parameter.advx, update.parameter.advy,
    )
    r2_border = b.r2_new.astype("<f8").tobytes()
    payload = b"".join([
        update.column.astype("<f8").tobytes(),
        b.a_col.astype("<f8").tobytes(),
        b.a_row.astype("<f8").tobytes(),
        b.a_corner.astype("<f8").tobytes(),
        b.r1_col.astype("<f8").tobytes(),
        b.r1_row.astype("<f8").tobytes(),
        b.r1_corner.astype("<f8").tobytes(),
        b.f_new.astype("<f8").tobytes(),
        r2_border + r2_border,  # family plus mirror, as in the file format
    ])
    return head + _pack_str(update.old_identifier) + _pack_str(update.new_identifier) + payload


def unpack_update(raw: bytes) -> BasisUpdate:
    try:
        magic, version, disc, n, s_a, s_f, mode_code, max_res, p0, p1, p2 = \
            _UPDATE_FIXED.unpack_from(raw, 0)
    except struct.error as exc:
        raise ProtocolError(f"update too short: {exc}") from exc
    if magic != UPDATE_MAGIC:
        raise ProtocolError(f"bad update magic {magic!r}")
    if version != UPDATE_VERSION:
        raise ProtocolError(f"unsupported update version {version}")
    if mode_code >= len(MODES):
        raise ProtocolError(f"unknown mode code {mode_code}")
    pos = _UPDATE_FIXED.size

    def read_str():
        nonlocal pos
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        s = raw[pos:pos + ln].decode("ascii")
        if len(s) != ln:
            raise ProtocolError("update truncated in identifier")
        pos += ln
        return s

    old_id = read_str()
    new_id = read_str()

    d = disc * disc
    expected_floats = update_float_count(n, d, s_a, s_f)
    floats = np.frombuffer(raw, dtype="<f8", offset=pos)
    if floats.shape[0] != expected_floats:
        raise ProtocolError(
            f"update payload holds {floats.shape[0]} floats, expected {expected_floats}")

    def take(count, shape):
        nonlocal floats
        chunk, floats = floats[:count], floats[count:]
        return chunk.reshape(shape).copy()

    column = take(d, (d,))
    a_col = take(s_a * n, (s_a, n))
    a_row = take(s_a * n, (s_a, n))
    a_corner = take(s_a, (s_a,))
    r1_col = take(s_a * s_a * n, (s_a, s_a, n))
    r1_row = take(s_a * s_a * n, (s_a, s_a, n))
    r1_corner = take(s_a * s_a, (s_a, s_a))
    f_new = take(s_f, (s_f,))
    r2_new = take(s_a * s_f, (s_a, s_f))
    r2_mirror = take(s_a * s_f, (s_a, s_f))
    if not np.array_equal(r2_new, r2_mirror):
        raise ProtocolError("update r2 mirror halves disagree")

    border = ExtensionBorder(a_col, a_row, a_corner, r1_col, r1_row, r1_corner, f_new, r2_new)
    return BasisUpdate(
        old_identifier=old_id,
        new_identifier=new_id,
        parameter=Parameter(p0, p1, p2),
        discretization=disc,
        mode=MODES[mode_code],
        max_res=max_res,
        column=column,
        border=border,
    )


def apply_update(basis: ReducedBasis, update: BasisUpdate) -> ReducedBasis:
    """Splice an update onto the exact basis it was computed for.

    Rejects updates whose old identifier does not match (including an update
    applied twice: the first application advances the identifier).  The
    result is verified against the update's new identifier.
    """
    current = basis_identifier(basis)
    if current != update.old_identifier:
        raise IdentifierMismatchError(
            f"update chains onto {update.old_identifier}, basis is {current}")
    if update.discretization != basis.quality.discretization or update.mode != basis.mode:
        raise ProtocolError("update grid or mode disagrees with the basis")

    column = update.column if basis.has_snapshots else None
    extended = apply_border(basis, update.border, update.parameter, column)
    got = basis_identifier(extended)
    if got != update.new_identifier:
        raise ProtocolError(
            f"applied update yields identifier {got}, expected {update.new_identifier}")
    return extended


def build_update(basis: ReducedBasis, mu: Parameter, op, rhs) -> tuple:
    """Extend ``basis`` (which must carry snapshots) by a fresh snapshot at
    ``mu`` and express the difference as a BasisUpdate.

    Returns (update, extended_basis); the update's blocks are the extension's
    blocks, bit for bit.
    """
    snap = snapshot(mu, basis.quality, op=op, rhs=rhs)
    v = prepare_column(basis, snap.values)
    border = extension_border(basis, v, op, rhs)
    extended = apply_border(basis, border, mu, v)
    update = BasisUpdate(
        old_identifier=basis_identifier(basis),
        new_identifier=basis_identifier(extended),
        parameter=mu,
        discretization=basis.quality.discretization,
        mode=basis.mode,
        max_res=basis.quality.max_res,
        column=v,
        border=border,
    )
    return update, extended


def serve_update_request(store: BasisStore, request: UpdateRequest, *,
                         op=None, rhs=None) -> BasisUpdate:
    """Server side of the update flow: load (or bootstrap) the basis, extend
    it, persist the extension, return the wire update."""
    from rbsim.rbm import empty_basis  # local to avoid import noise at module top

    if store.has(request.identifier):
        with store.open(request.identifier) as reader:
            basis = reader.load_full()
        quality = basis.quality
        if op is None or rhs is None:
            op, rhs = assemble_problem(quality)
    else:
        sentinel = parse_empty_identifier(request.identifier)
        if sentinel is None:
            raise UnknownBasisError(request.identifier)
        disc, mode = sentinel
        quality = QualitySpec(disc, 1.0)
        if op is None or rhs is None:
            op, rhs = assemble_problem(quality)
        basis = empty_basis(op, rhs, quality, mode)

    update, extended = build_update(basis, request.parameter, op, rhs)
    store.save(extended)
    return update
