import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaglecam.filesync import (
    WIRE_CHUNK_SIZE,
    DeployerStore,
    ManifestEntry,
    StagingStore,
    SyncManifest,
    SyncWireError,
    compute_delta,
    content_hash,
    pack_ack,
    pack_chunk,
    pack_manifest,
    unpack_ack,
    unpack_chunk,
    unpack_manifest,
)

from harness import Pair, blob

KIB = 1024


def entry(path, data, complete=True):
    return ManifestEntry(path, len(data), content_hash(data), complete)


def test_delta_identical_is_empty():
    m = SyncManifest([entry("nisa/a", b"x" * 10)])
    assert compute_delta(m, m) == []


def test_delta_new_file_two_chunks():
    src = SyncManifest([entry("nisa/a", bytes(100 * KIB))])
    (item,) = compute_delta(src, SyncManifest())
    assert item.resume_offset == 0
    assert item.chunks == ((0, 65536), (65536, 100 * KIB - 65536))


def test_delta_resume_partial():
    data = bytes(100 * KIB)
    src = SyncManifest([entry("nisa/a", data)])
    dst = SyncManifest([ManifestEntry("nisa/a", 64 * KIB, bytes(16), False)])
    (item,) = compute_delta(src, dst)
    assert item.resume_offset == 65536
    assert item.chunks == ((65536, 100 * KIB - 65536),)


def test_delta_hash_mismatch_restarts_and_order_is_source_order():
    a, b = b"a" * 10, b"b" * 10
    src = SyncManifest([entry("nisa/1", a), entry("nisa/2", b), entry("nisa/3", a)])
    dst = SyncManifest([entry("nisa/2", a)])
    delta = compute_delta(src, dst)
    assert [d.path for d in delta] == ["nisa/1", "nisa/2", "nisa/3"]
    assert delta[1].resume_offset == 0


def test_manifest_rejects_duplicate_paths():
    with pytest.raises(ValueError):
        SyncManifest([entry("a", b"1"), entry("a", b"2")])


paths = st.text(st.characters(min_codepoint=48, max_codepoint=122), min_size=1, max_size=40)


@given(st.lists(st.tuples(paths, st.binary(max_size=50)), unique_by=lambda t: t[0], max_size=20),
       st.integers(0, 2**64 - 1))
def test_manifest_and_ack_wire_roundtrip(files, t):
    entries = [entry(p, d) for p, d in files]
    assert unpack_manifest(pack_manifest(entries, t)) == (t, entries)
    acks = [ManifestEntry(e.path, e.size, e.content_hash, i % 2 == 0) for i, e in enumerate(entries)]
    assert unpack_ack(pack_ack(acks, t)) == (t, acks)


@given(paths, st.binary(max_size=200), st.integers(0, 2**32 - 1))
def test_chunk_wire_roundtrip(path, payload, offset):
    digest = content_hash(payload)
    assert unpack_chunk(pack_chunk(path, 999, digest, offset, payload)) == (path, 999, digest, offset, payload)


def test_wire_errors():
    raw = pack_manifest([entry("nisa/a", b"xyz")], 5)
    with pytest.raises(SyncWireError):
        unpack_manifest(raw[:-1])
    with pytest.raises(SyncWireError):
        unpack_ack(raw)
    with pytest.raises(SyncWireError):
        unpack_chunk(b"\x01\x09ab")


def test_wire_chunk_fits_a_packet():
    path = "n" * 64
    assert len(pack_chunk(path, 1, bytes(16), 0, bytes(WIRE_CHUNK_SIZE))) <= 65536


def test_deployer_store_assembly_rules():
    data = bytes(range(256)) * 10
    d = content_hash(data)
    s = DeployerStore()
    assert s.receive_chunk("nisa/a", len(data), d, 1000, data[1000:2000], 1) == "gap"
    assert s.receive_chunk("nisa/a", len(data), d, 0, data[:1000], 2) == "appended"
    assert s.receive_chunk("nisa/a", len(data), d, 0, data[:1000], 3) == "duplicate"
    assert s.total_bytes == 0
    assert s.state_of("nisa/a") == ManifestEntry("nisa/a", 1000, bytes(16), False)
    assert s.receive_chunk("nisa/a", len(data), d, 1000, data[1000:], 4) == "complete"
    assert s.total_bytes == len(data)
    assert s.files["nisa/a"].completed_at == 4
    assert s.receive_chunk("nisa/a", len(data), d, 0, data[:10], 5) == "duplicate"


def test_deployer_store_hash_mismatch_discards():
    data = b"abcdef"
    s = DeployerStore()
    assert s.receive_chunk("nisa/a", 6, content_hash(b"zzzzzz"), 0, data, 1) == "corrupt"
    assert s.state_of("nisa/a").size == 0
    assert s.total_bytes == 0


def test_staging_store_rules():
    st_ = StagingStore()
    st_.add("nisa/a", b"1", 0)
    with pytest.raises(FileExistsError):
        st_.add("nisa/a", b"2", 1)
    with pytest.raises(ValueError):
        st_.add("secret/a", b"2", 1)
    assert st_.total_bytes == 1


def test_lossy_five_files_complete_with_retries():
    p = Pair(loss=0.10, seed=5)
    for i in range(5):
        p.stage(f"nisa/f{i}", blob(i, 300 * KIB))
    p.run(30)
    assert len(p.store.complete_files()) == 5
    chunk_count = 5 * -(-300 * KIB // WIRE_CHUNK_SIZE)
    assert p.sender.stats.chunks_sent > chunk_count
    for f in p.store.complete_files():
        assert content_hash(f.data) == p.staging.files[f.path].digest


def test_idempotent_cycles_once_synced():
    p = Pair()
    p.stage("nisa/a", blob(1, 200 * KIB))
    p.run(5)
    assert p.sender.pending == []
    before = len(p.sender.reports)
    p.run(2.5)
    later = p.sender.reports[before:]
    assert len(later) >= 2
    assert all(r.chunks_sent == 0 and r.manifest_entries == 0 for r in later)


def test_link_cut_mid_file_loses_at_most_one_chunk():
    p = Pair(bw=2_000_000)
    data = blob(3, 2_000 * KIB)
    p.stage("nisa/big", data)
    p.run(3.0)
    held_at_cut = p.store.state_of("nisa/big").size
    assert 0 < held_at_cut < len(data)
    p.link.up = False
    p.run(4.0)
    held_during = p.store.state_of("nisa/big").size
    p.link.up = True
    sent_before = p.sender.stats.bytes_sent
    p.run(30.0)
    assert p.store.files["nisa/big"].complete
    resent = p.sender.stats.bytes_sent - sent_before - (len(data) - held_during)
    assert held_during >= held_at_cut
    assert resent <= WIRE_CHUNK_SIZE


def test_file_complete_before_crash_stays_complete():
    p = Pair()
    p.stage("nisa/a", blob(1, 100 * KIB))
    p.run(2)
    assert p.store.files["nisa/a"].complete
    p.src.crash()
    p.stage("nisa/b", blob(2, 100 * KIB))
    p.run(5)
    assert [f.path for f in p.store.complete_files()] == ["nisa/a"]


def test_completion_order_follows_creation_order():
    p = Pair()
    for i in range(6):
        p.stage(f"nisa/f{i}", blob(i, 150 * KIB), at=100_000 + i * 10_000)
    p.run(10)
    done = sorted(p.store.complete_files(), key=lambda f: f.completed_at)
    assert [f.path for f in done] == [f"nisa/f{i}" for i in range(6)]


def test_no_new_data_sends_only_manifests():
    p = Pair()
    p.run(3.5)
    assert p.sender.stats.chunks_sent == 0
    assert p.sender.stats.manifests_sent == 4


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 0.5), st.lists(st.integers(1, 200 * KIB), min_size=1, max_size=4), st.integers(0, 1000))
def test_progress_and_integrity_property(loss, sizes, seed):
    p = Pair(loss=loss, seed=seed)
    for i, n in enumerate(sizes):
        p.stage(f"imu/f{i}", blob(i + seed, n))
    p.run(60)
    assert len(p.store.complete_files()) == len(sizes)
    for f in p.store.complete_files():
        assert f.data == p.staging.files[f.path].data
