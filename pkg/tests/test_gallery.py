import os
import struct
import zlib

import numpy as np
import pytest

from pdfembed.errors import CorruptFile, DimensionMismatch, DuplicateId, InputError, ZeroNorm
from pdfembed.gallery import (
    HEADER_SIZE,
    EmbeddingStore,
    build_store,
    match_one,
    read_store,
    scan,
    store_file_size,
    time_match,
    unit_f32,
)


def brute_force(query, store, min_level):
    """Naive per-entry recomputation: float64 loops over each token pair."""
    q = unit_f32(query).astype(np.float64)
    rows = []
    for gid, entry in zip(store.ids.tolist(), store.vectors.astype(np.float64)):
        h = []
        for k in range(store.N + 1):
            a, b = q[k], entry[k]
            h.append(min(1.0, max(-1.0, float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))))))
        h = np.array(h)
        j = store.N if np.all(h >= 1 - 1e-6) else int(np.argmax(h))
        if j >= min_level:
            rows.append((-j, -h[j], gid, h))
    rows.sort(key=lambda r: r[:3])
    return [(gid, -nj, -npk, h) for nj, npk, gid, h in rows]


def assert_same(results, oracle):
    assert [r.gallery_id for r in results] == [o[0] for o in oracle]
    assert [r.level for r in results] == [o[1] for o in oracle]
    for r, o in zip(results, oracle):
        np.testing.assert_allclose(r.h, o[3], rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def sets():
    return np.random.default_rng(0).normal(size=(200, 6, 16))


def test_roundtrip_and_file_size(tmp_path, sets):
    path = tmp_path / "g.drep"
    store = build_store(list(range(100, 300)), sets, path)
    assert os.path.getsize(path) == store_file_size(200, 5, 16) == HEADER_SIZE + 200 * (8 + 6 * 16 * 4) + 4
    again = read_store(path)
    np.testing.assert_array_equal(again.vectors, store.vectors)
    np.testing.assert_array_equal(again.ids, np.arange(100, 300))
    assert (again.N, again.dim) == (5, 16)
    np.testing.assert_allclose(np.linalg.norm(again.vectors.astype(np.float64), axis=-1), 1.0, atol=1e-6)
    raw = path.read_bytes()
    assert raw[:4] == b"DREP" and raw[4:6] == b"\x01\x00" and raw[6] == 5


def test_empty_store(tmp_path):
    path = tmp_path / "e.drep"
    store = build_store([], [], path, N=5, dim=8)
    assert len(store) == 0 and os.path.getsize(path) == store_file_size(0, 5, 8)
    assert len(read_store(path)) == 0
    assert match_one(np.ones((6, 8)), store) == []
    with pytest.raises(InputError):
        scan(np.ones((1, 6, 8)), store)
    with pytest.raises(InputError):
        build_store([], [])


def test_prenormalisation_matches_raw_cosines(sets):
    store = build_store(range(200), sets)
    q = np.random.default_rng(1).normal(size=(6, 16))
    raw = np.einsum("ekd,kd->ek", sets, q) / (np.linalg.norm(sets, axis=-1) * np.linalg.norm(q, axis=-1))
    np.testing.assert_allclose(store.cosines(q), raw, atol=1e-6)


def test_store_errors(tmp_path, sets):
    with pytest.raises(DuplicateId):
        build_store([1, 2, 1], sets[:3])
    bad = sets[:2].copy()
    bad[1, 3] = 0
    with pytest.raises(ZeroNorm):
        build_store([1, 2], bad)
    with pytest.raises(InputError):
        build_store([1, -2], sets[:2])
    with pytest.raises(InputError):
        build_store([1], sets[:2])
    store = build_store(range(3), sets[:3])
    with pytest.raises(DimensionMismatch):
        match_one(np.ones((6, 8)), store)
    with pytest.raises(DimensionMismatch):
        match_one(np.ones((5, 16)), store)


@pytest.mark.parametrize("damage", ["crc", "magic", "truncate", "version"])
def test_corrupt_store_rejected(tmp_path, sets, damage):
    path = tmp_path / "g.drep"
    build_store(range(5), sets[:5], path)
    raw = bytearray(path.read_bytes())
    if damage == "crc":
        raw[40] ^= 1
    elif damage == "truncate":
        raw = raw[:-10]
    else:
        if damage == "magic":
            raw[:4] = b"XREP"
        else:
            raw[4:6] = (2).to_bytes(2, "little")
        raw[-4:] = struct.pack("<I", zlib.crc32(bytes(raw[:-4])))
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        read_store(path)


def test_self_match(sets):
    store = build_store(range(200), sets)
    res = match_one(sets[17], store, min_level=5)
    assert res[0].gallery_id == 17 and res[0].level == 5
    assert res[0].peak == pytest.approx(1.0, abs=1e-12)
    assert match_one(sets[17], store, min_level=6) == []


def test_matches_brute_force_small(sets):
    store = build_store(np.random.default_rng(2).permutation(10_000)[:200], sets)
    r = np.random.default_rng(3)
    for _ in range(10):
        q = r.normal(size=(6, 16))
        for lv in (0, 3, 5):
            assert_same(match_one(q, store, lv), brute_force(q, store, lv))


def test_ranking_breaks_ties_by_id():
    v = np.random.default_rng(4).normal(size=(1, 6, 8))
    store = build_store([9, 3, 7], np.repeat(v, 3, axis=0))
    res = match_one(v[0], store)
    assert [r.gallery_id for r in res] == [3, 7, 9]
    assert match_one(v[0], store, top_k=2)[1].gallery_id == 7


def test_thread_count_does_not_change_results(sets):
    store = build_store(range(200), sets)
    q = np.random.default_rng(5).normal(size=(6, 16))
    base = match_one(q, store)
    for t in (2, 3, 8):
        assert match_one(q, store, threads=t) == base


def test_scan_self_queries(sets):
    store = build_store(range(50), sets[:50])
    for thr in range(6):
        rep = scan(sets[:50], store, threshold=thr, time_pairs=1000)
        assert rep["replication_ratio"] == 1.0
    assert [b["gallery_id"] for b in rep["best"]] == list(range(50))


def _structured_sets(r, n, common, shared=3.0):
    # Token 0 carries a component common to every image and the other tokens
    # are image specific, so unrelated images agree most on the lowest level.
    v = r.normal(size=(n, 6, len(common)))
    v[:, 0] += shared * common
    return v


def test_scan_unrelated_queries_rarely_replicate():
    common = np.random.default_rng(6).normal(size=32)
    store = build_store(range(1000), _structured_sets(np.random.default_rng(7), 1000, common))
    queries = _structured_sets(np.random.default_rng(8), 200, common)
    rep = scan(queries, store, threshold=4, time_pairs=1000)
    assert rep["replication_ratio"] <= 0.05


def test_scan_timing_report(sets):
    store = build_store(range(200), sets)
    rep = scan(sets[:3], store, encode_s_per_img=1e-3, time_pairs=10_000)
    t = rep["timing"]
    assert t["match_s_per_pair"] > 0 and t["encode_s_per_img"] == 1e-3
    assert t["match_s_per_pair"] < t["encode_s_per_img"]
    assert time_match(store, sets[0], 1000) > 0
