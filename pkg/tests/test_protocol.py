"""Update protocol: wire framing, identifier chaining, server-side flow."""

import struct
from dataclasses import replace

import numpy as np
import pytest

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem, snapshot
from rbsim.protocol import (
    IdentifierMismatchError,
    ProtocolError,
    UnknownBasisError,
    BasisRequest,
    UpdateRequest,
    apply_update,
    build_update,
    pack_update,
    parse_empty_identifier,
    serve_update_request,
    unpack_update,
    update_float_count,
    _UPDATE_FIXED,
)
from rbsim.rbm import basis_identifier, empty_basis, extend_basis
from rbsim.store import BasisStore

from util import make_basis, random_params


@pytest.fixture
def setup():
    rng = np.random.default_rng(7)
    params = random_params(rng, 3)
    basis, op, rhs = make_basis(8, params)
    mu = Parameter(12.0, -7.0, 3.0)
    return basis, op, rhs, mu


def test_pack_unpack_roundtrip_bitwise(setup):
    basis, op, rhs, mu = setup
    update, _ = build_update(basis, mu, op, rhs)
    back = unpack_update(pack_update(update))

    assert back.old_identifier == update.old_identifier
    assert back.new_identifier == update.new_identifier
    assert back.parameter == update.parameter
    assert back.discretization == update.discretization
    assert back.mode == update.mode
    assert back.max_res == update.max_res
    assert np.array_equal(back.column, update.column)
    for name in ("a_col", "a_row", "a_corner", "r1_col", "r1_row",
                 "r1_corner", "f_new", "r2_new"):
        assert np.array_equal(getattr(back.border, name),
                              getattr(update.border, name)), name


def test_wire_size_is_exact(setup):
    basis, op, rhs, mu = setup
    update, _ = build_update(basis, mu, op, rhs)
    raw = pack_update(update)
    d = basis.dimension
    floats = update_float_count(basis.n, d, basis.s_a, basis.s_f)
    expected = (_UPDATE_FIXED.size
                + 2 + len(update.old_identifier)
                + 2 + len(update.new_identifier)
                + 8 * floats)
    assert len(raw) == expected


def test_build_update_matches_plain_extension(setup):
    basis, op, rhs, mu = setup
    update, extended = build_update(basis, mu, op, rhs)
    snap = snapshot(mu, basis.quality, op=op, rhs=rhs)
    direct = extend_basis(basis, snap, op, rhs)

    assert basis_identifier(direct) == update.new_identifier
    for name in ("red_A", "red_f", "r1", "r2", "r4", "snapshots"):
        assert np.array_equal(getattr(direct, name), getattr(extended, name)), name


def test_apply_update_after_wire_roundtrip(setup):
    basis, op, rhs, mu = setup
    update, extended = build_update(basis, mu, op, rhs)
    applied = apply_update(basis, unpack_update(pack_update(update)))

    assert basis_identifier(applied) == update.new_identifier
    for name in ("red_A", "red_f", "r1", "r2", "r4", "snapshots"):
        assert np.array_equal(getattr(applied, name), getattr(extended, name)), name


def test_apply_update_twice_rejected(setup):
    basis, op, rhs, mu = setup
    update, _ = build_update(basis, mu, op, rhs)
    once = apply_update(basis, update)
    with pytest.raises(IdentifierMismatchError):
        apply_update(once, update)


def test_apply_update_to_wrong_basis_rejected(setup):
    basis, op, rhs, mu = setup
    update, _ = build_update(basis, mu, op, rhs)
    rng = np.random.default_rng(11)
    other, _, _ = make_basis(8, random_params(rng, 2))
    with pytest.raises(IdentifierMismatchError):
        apply_update(other, update)


def test_apply_update_on_metadata_only_basis(setup):
    basis, op, rhs, mu = setup
    update, extended = build_update(basis, mu, op, rhs)
    meta = replace(basis, snapshots=None)
    applied = apply_update(meta, update)
    assert not applied.has_snapshots
    assert applied.n == basis.n + 1
    assert basis_identifier(applied) == update.new_identifier
    for name in ("red_A", "red_f", "r1", "r2", "r4"):
        assert np.array_equal(getattr(applied, name), getattr(extended, name)), name


def test_corrupt_updates_rejected(setup):
    basis, op, rhs, mu = setup
    update, _ = build_update(basis, mu, op, rhs)
    raw = bytearray(pack_update(update))

    bad_magic = raw.copy()
    bad_magic[:4] = b"XXXX"
    with pytest.raises(ProtocolError, match="magic"):
        unpack_update(bytes(bad_magic))

    bad_version = raw.copy()
    struct.pack_into("<I", bad_version, 4, 99)
    with pytest.raises(ProtocolError, match="version"):
        unpack_update(bytes(bad_version))

    bad_mode = raw.copy()
    bad_mode[24] = 7
    with pytest.raises(ProtocolError, match="mode"):
        unpack_update(bytes(bad_mode))

    with pytest.raises(ProtocolError, match="floats"):
        unpack_update(bytes(raw[:-8]))

    with pytest.raises(ProtocolError, match="short"):
        unpack_update(bytes(raw[:10]))

    # flip one float in the trailing mirror half of the r2 border
    bad_mirror = raw.copy()
    struct.pack_into("<d", bad_mirror, len(raw) - 8,
                     struct.unpack_from("<d", raw, len(raw) - 8)[0] + 1.0)
    with pytest.raises(ProtocolError, match="mirror"):
        unpack_update(bytes(bad_mirror))


def test_parse_empty_identifier():
    assert parse_empty_identifier("empty-16-orthonormal") == (16, "orthonormal")
    assert parse_empty_identifier("empty-8-normalized") == (8, "normalized")
    assert parse_empty_identifier("abc123") is None
    assert parse_empty_identifier("empty-x-orthonormal") is None
    assert parse_empty_identifier("empty-8-diagonal") is None
    assert parse_empty_identifier("empty-8") is None


def test_serve_update_request_known_basis(tmp_path, setup):
    basis, op, rhs, mu = setup
    store = BasisStore(tmp_path)
    ident, _ = store.save(basis)

    update = serve_update_request(store, UpdateRequest(ident, mu), op=op, rhs=rhs)
    assert update.old_identifier == ident
    assert store.has(update.new_identifier)

    applied = apply_update(basis, update)
    with store.open(update.new_identifier) as reader:
        persisted = reader.load_full()
    for name in ("red_A", "red_f", "r1", "r2", "r4", "snapshots"):
        assert np.array_equal(getattr(persisted, name), getattr(applied, name)), name


def test_serve_update_request_bootstraps_empty(tmp_path):
    store = BasisStore(tmp_path)
    mu = Parameter(5.0, 1.0, -2.0)
    update = serve_update_request(store, UpdateRequest("empty-8-orthonormal", mu))
    assert update.old_identifier == "empty-8-orthonormal"
    assert update.old_n == 0
    assert store.has(update.new_identifier)

    # the same update applies client-side from a locally built empty basis
    quality = QualitySpec(8, 1.0)
    op, rhs = assemble_problem(quality)
    basis = empty_basis(op, rhs, quality, "orthonormal")
    applied = apply_update(basis, update)
    assert applied.n == 1
    assert basis_identifier(applied) == update.new_identifier


def test_serve_update_request_unknown_identifier(tmp_path):
    store = BasisStore(tmp_path)
    with pytest.raises(UnknownBasisError):
        serve_update_request(store, UpdateRequest("deadbeef", Parameter(1.0, 0.0, 0.0)))


def test_basis_request_json_roundtrip():
    req = BasisRequest("greedy", "A", 4.0, QualitySpec(16, 1e-4),
                       mode="orthonormal", seed=3, stop_n=5)
    back = BasisRequest.from_json(req.to_json())
    assert back == req

    with pytest.raises(ProtocolError):
        BasisRequest.from_json({"method": "greedy"})
    with pytest.raises(ValueError):
        BasisRequest("simulated-annealing", "A", 1.0, QualitySpec(8, 1.0))


def test_update_request_json_roundtrip():
    req = UpdateRequest("abc", Parameter(2.0, 1.0, 0.5))
    assert UpdateRequest.from_json(req.to_json()) == req
    with pytest.raises(ProtocolError):
        UpdateRequest.from_json({"identifier": "abc", "parameter": [1.0]})
