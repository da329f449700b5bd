from __future__ import annotations

import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sa_gateway import corpus
from sa_gateway.compression import (
    DEFLATE,
    MAX_OUTPUT,
    STORED,
    BombGuardExceeded,
    CompressionPolicy,
    CorruptStream,
    compress,
    decompress,
)
from sa_gateway.cot import canonical_xml
from sa_gateway.frame_codec import SaMessageType


def test_repetitive_input_deflates_small():
    out = compress(b"a" * 1024)
    assert out[0] == DEFLATE
    assert len(out) < 64


def test_random_bytes_fall_back_to_stored():
    data = random.Random(3).randbytes(16)
    out = compress(data)
    assert out == bytes([STORED]) + data
    assert len(out) == 17


@pytest.mark.parametrize("e", corpus.corpus(), ids=lambda e: e.event_type)
def test_corpus_roundtrip(e):
    raw = canonical_xml(e)
    assert decompress(compress(raw)) == raw


def test_truncated_stream_is_corrupt():
    out = compress(canonical_xml(corpus.casevac_full()))
    with pytest.raises(CorruptStream):
        decompress(out[: len(out) // 2])
    with pytest.raises(CorruptStream):
        decompress(b"")
    with pytest.raises(CorruptStream):
        decompress(b"\x07abc")


def test_trailing_garbage_is_corrupt():
    with pytest.raises(CorruptStream):
        decompress(compress(b"a" * 500) + b"\x00")


def test_bomb_guard():
    bomb = compress(bytes(MAX_OUTPUT + 1))
    assert len(bomb) < 100
    with pytest.raises(BombGuardExceeded):
        decompress(bomb)
    assert decompress(compress(bytes(MAX_OUTPUT))) == bytes(MAX_OUTPUT)


def test_stored_body_respects_guard():
    with pytest.raises(BombGuardExceeded):
        decompress(bytes([STORED]) + os.urandom(MAX_OUTPUT + 1))


def test_min_gain_forces_stored():
    data = b"abcabcabcabc" * 3
    assert compress(data)[0] == DEFLATE
    assert compress(data, min_gain=len(data))[0] == STORED


def test_policy_never_covers_small_types():
    assert not CompressionPolicy().applies(SaMessageType.LOCATION)
    with pytest.raises(ValueError):
        CompressionPolicy(frozenset({SaMessageType.TEXT}))


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=1, max_size=MAX_OUTPUT))
def test_roundtrip_and_expansion_bound(data):
    out = compress(data)
    assert len(out) <= len(data) + 1
    assert decompress(out) == data
    assert compress(data) == out
