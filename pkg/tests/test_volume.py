import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volrac.volume import (
    PatchGrid,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    generate_phantom,
    patchify,
    read_volume,
    unpatchify,
    write_volume,
)


def random_volume(side, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(side, rng.random((side, side, side), dtype=np.float32))


def test_patchify_shape_arithmetic():
    g = patchify(random_volume(4), 2)
    assert g.grid_side == 2
    assert g.patch_len == 2
    assert g.data.shape == (2, 2, 2, 8)


def test_patchify_whole_volume_is_one_patch():
    v = random_volume(4, seed=1)
    g = patchify(v, 4)
    assert g.data.shape == (1, 1, 1, 64)
    assert np.array_equal(g.data[0, 0, 0], v.flat())


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError, match="P=3.*S=8"):
        patchify(random_volume(8), 3)


@settings(deadline=None, max_examples=20)
@given(
    side=st.sampled_from([4, 8, 16]),
    seed=st.integers(0, 2**31 - 1),
    data=st.data(),
)
def test_patchify_unpatchify_roundtrip(side, seed, data):
    patch = data.draw(st.sampled_from([p for p in (1, 2, 4, 8, 16) if side % p == 0]))
    v = random_volume(side, seed=seed)
    back = unpatchify(patchify(v, patch))
    assert np.array_equal(back.data, v.data)


def test_partition_every_voxel_exactly_once():
    # Index-counting check: patchify a volume holding its own flat indices.
    side, patch = 8, 2
    v = Volume.from_flat(side, np.arange(side**3, dtype=np.float32))
    g = patchify(v, patch)
    seen = np.sort(g.data.reshape(-1))
    assert np.array_equal(seen, np.arange(side**3, dtype=np.float32))


def test_index_bijection_exhaustive():
    # For S in {4, 8, 16} and every dividing P, the patch maps are mutually
    # inverse bijections on voxel indices (checked on the index volume).
    for side in (4, 8, 16):
        for patch in range(1, side + 1):
            if side % patch != 0:
                continue
            v = Volume.from_flat(side, np.arange(side**3, dtype=np.float32))
            g = patchify(v, patch)
            assert np.array_equal(np.sort(g.data.reshape(-1)), v.flat())
            assert np.array_equal(unpatchify(g).data, v.data), (side, patch)


def test_unpatchify_constant_volume():
    v = Volume(8, np.full((8, 8, 8), 0.625, dtype=np.float32))
    assert np.array_equal(unpatchify(patchify(v, 2)).data, v.data)


def test_unpatchify_blockwise_constants_match_index_oracle():
    # Grid of distinct constant patches; each voxel must equal the constant of
    # the patch its coordinates map to (direct index-map oracle).
    m, p = 3, 2
    consts = np.arange(m**3, dtype=np.float32).reshape(m, m, m)
    data = np.repeat(consts[..., None], p**3, axis=-1)
    v = unpatchify(PatchGrid(m, p, data))
    for z in range(m * p):
        for y in range(m * p):
            for x in range(m * p):
                assert v.data[z, y, x] == consts[z // p, y // p, x // p]


def test_phantom_deterministic():
    spec = PhantomSpec(seed=7, side=16, n_ellipsoids=3, background_order=2)
    a = generate_phantom(spec)
    b = generate_phantom(spec)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def test_phantom_degenerate_is_constant():
    v = generate_phantom(PhantomSpec(seed=1, side=8, n_ellipsoids=0, background_order=0))
    assert np.all(v.data == v.data.reshape(-1)[0])


def test_phantom_seed_changes_volume():
    a = generate_phantom(PhantomSpec(seed=10, side=16))
    b = generate_phantom(PhantomSpec(seed=11, side=16))
    assert not np.array_equal(a.data, b.data)


def test_phantom_side_too_small():
    with pytest.raises(ValueError, match=">= 8"):
        generate_phantom(PhantomSpec(seed=0, side=7))


def test_vol1_roundtrip(tmp_path):
    v = random_volume(16, seed=3)
    path = tmp_path / "v.vol"
    write_volume(v, path)
    back = read_volume(path)
    assert back.side == 16
    assert np.array_equal(back.data, v.data)


def test_vol1_bad_magic(tmp_path):
    path = tmp_path / "bad.vol"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(VolumeFormatError, match="bad magic"):
        read_volume(path)


def test_vol1_truncated_payload(tmp_path):
    v = random_volume(8)
    path = tmp_path / "v.vol"
    write_volume(v, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(VolumeFormatError, match="payload length mismatch"):
        read_volume(path)


def test_vol1_unsupported_dtype(tmp_path):
    v = random_volume(8)
    path = tmp_path / "v.vol"
    write_volume(v, path)
    raw = bytearray(path.read_bytes())
    raw[16] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError, match="unsupported dtype"):
        read_volume(path)


def test_volume_rejects_non_finite():
    data = np.zeros((8, 8, 8), dtype=np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        Volume(8, data)
