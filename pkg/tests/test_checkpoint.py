import struct

import numpy as np
import pytest

from aikd.checkpoint import (
    Checkpoint,
    CheckpointError,
    IntegrityError,
    UnsupportedVersionError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from aikd.network import ArchitectureSpec, SwaState, init_params, swa_update

SPEC = ArchitectureSpec(input_shape=(4, 4, 1), backbone=(8, 4), head=(3, 1))


def test_roundtrip_bit_exact(tmp_path):
    m = init_params(SPEC, 11)
    m.biases[0][:] = np.pi
    save_checkpoint(m, tmp_path / "c.aikd", seed=11, metadata={"note": "x"})
    ck = load_checkpoint(tmp_path / "c.aikd")
    assert ck.seed == 11 and ck.metadata == {"note": "x"}
    for a, b in zip(m.arrays(), ck.params.arrays()):
        assert a.tobytes() == b.tobytes()
    assert ck.spec == SPEC


def test_hundred_random_models_resave_identically():
    gen = np.random.default_rng(0)
    for i in range(100):
        m = init_params(SPEC, i)
        for a in m.arrays():
            a[...] = gen.normal(scale=10.0 ** gen.integers(-5, 5), size=a.shape)
        swa = swa_update(SwaState(), m) if i % 2 else None
        seed = int(gen.integers(-2**63, 2**63 - 1))
        raw = checkpoint_bytes(Checkpoint(m, seed=seed, swa=swa, optimizer={"lr": 0.1}))
        assert checkpoint_bytes(parse_checkpoint(raw)) == raw


def test_frozen_flag_survives():
    raw = checkpoint_bytes(Checkpoint(init_params(SPEC, 0).freeze()))
    assert parse_checkpoint(raw).params.frozen


def test_unsupported_version():
    raw = bytearray(checkpoint_bytes(Checkpoint(init_params(SPEC, 0))))
    raw[4:8] = struct.pack("<I", 999)
    with pytest.raises(UnsupportedVersionError, match="999"):
        parse_checkpoint(bytes(raw))


def test_truncation_detected():
    raw = checkpoint_bytes(Checkpoint(init_params(SPEC, 0)))
    with pytest.raises(IntegrityError):
        parse_checkpoint(raw[:-1])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw[:10])


def test_bitflip_detected():
    raw = bytearray(checkpoint_bytes(Checkpoint(init_params(SPEC, 0))))
    raw[len(raw) // 2] ^= 0x10
    with pytest.raises(IntegrityError):
        parse_checkpoint(bytes(raw))


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"NOPE" + bytes(40))


def test_non_finite_refused():
    m = init_params(SPEC, 0)
    m.weights[0][0, 0] = np.inf
    with pytest.raises(CheckpointError):
        checkpoint_bytes(Checkpoint(m))
