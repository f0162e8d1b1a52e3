import struct

import numpy as np
import pytest

from featloss_sr.data import (
    PhantomSpec, apportion, bicubic_resample, crop_to_multiple, cubic_kernel, generate_phantom,
    make_pairs, make_split, normalize, restore,
)
from featloss_sr.data import nifti
from featloss_sr.data.phantom import FiberSpec, fiber_tensor
from featloss_sr.errors import ConfigError, ShapeError
from featloss_sr.metrics import MaskedImagePair, psnr
from featloss_sr.qc import DwiVolumeSet, GradientTable


class TestNifti:
    @pytest.mark.parametrize("dtype", ["uint16", "float32"])
    def test_roundtrip_payload(self, rng, dtype):
        if dtype == "uint16":
            data = rng.integers(0, 65536, (7, 5, 3, 4)).astype(np.uint16)
        else:
            data = rng.standard_normal((6, 4, 3)).astype(np.float32)
        blob = nifti.write_nifti(nifti.Nifti1Volume(data, (1.25, 1.25, 2.0, 1.0)[: data.ndim]))
        back = nifti.read_nifti(blob)
        assert back.data.dtype == data.dtype
        assert back.data.tobytes() == data.tobytes()
        assert back.pixdim == pytest.approx((1.25, 1.25, 2.0, 1.0)[: data.ndim])
        assert nifti.write_nifti(back) == blob

    def test_passthrough_fields(self, rng):
        data = rng.integers(0, 100, (3, 3, 2)).astype(np.uint16)
        blob = bytearray(nifti.write_nifti(nifti.Nifti1Volume(data)))
        blob[148:168] = b"opaque description\0\0"
        struct.pack_into("<hh", blob, 252, 1, 2)        # qform/sform codes
        struct.pack_into("<4f", blob, 280, 1.5, 0.0, 0.0, -3.0)  # srow_x
        struct.pack_into("<2f", blob, 112, 2.0, 5.0)    # scl_slope, scl_inter (not applied)
        again = nifti.write_nifti(nifti.read_nifti(bytes(blob)))
        assert again == bytes(blob)
        assert nifti.read_nifti(bytes(blob)).data.tobytes() == data.tobytes()

    def test_extension_kept(self, rng):
        data = rng.integers(0, 9, (2, 2, 2)).astype(np.uint16)
        ext = struct.pack("<ii", 16, 0) + b"abcdefgh"
        blob = nifti.write_nifti(nifti.Nifti1Volume(data, extension=ext))
        back = nifti.read_nifti(blob)
        assert back.extension == ext and nifti.write_nifti(back) == blob

    def test_fortran_layout(self):
        data = np.arange(6, dtype=np.uint16).reshape(2, 3)
        blob = nifti.write_nifti(nifti.Nifti1Volume(data))
        assert np.frombuffer(blob[352:], "<u2").tolist() == [0, 3, 1, 4, 2, 5]

    def _blob(self):
        return bytearray(nifti.write_nifti(nifti.Nifti1Volume(np.zeros((2, 2), np.float32))))

    def test_two_file_rejected(self):
        b = self._blob()
        b[344:348] = b"ni1\0"
        with pytest.raises(nifti.UnsupportedNiftiError, match="unsupported: two-file NIfTI"):
            nifti.read_nifti(bytes(b))

    def test_datatype_code_named(self):
        b = self._blob()
        struct.pack_into("<h", b, 70, 4)
        with pytest.raises(nifti.UnsupportedNiftiError, match="unsupported datatype code 4"):
            nifti.read_nifti(bytes(b))

    def test_bad_magic(self):
        b = self._blob()
        b[344:348] = b"xyz\0"
        with pytest.raises(nifti.NiftiMagicError):
            nifti.read_nifti(bytes(b))

    def test_truncated(self):
        b = bytes(self._blob())
        with pytest.raises(nifti.TruncatedNiftiError):
            nifti.read_nifti(b[:-1])
        with pytest.raises(nifti.TruncatedNiftiError):
            nifti.read_nifti(b[:100])

    def test_big_endian(self):
        b = self._blob()
        struct.pack_into(">i", b, 0, 348)
        with pytest.raises(nifti.UnsupportedNiftiError, match="big-endian"):
            nifti.read_nifti(bytes(b))

    def test_errors_are_distinct(self):
        kinds = {nifti.NiftiMagicError, nifti.UnsupportedNiftiError, nifti.TruncatedNiftiError}
        assert len(kinds) == 3 and all(issubclass(k, nifti.NiftiError) for k in kinds)

    def test_file_io(self, tmp_path, rng):
        v = nifti.Nifti1Volume(rng.random((3, 4, 2)).astype(np.float32))
        nifti.save(v, tmp_path / "a.nii")
        assert nifti.load(tmp_path / "a.nii").data.tobytes() == v.data.tobytes()


def _dwi(vols):
    n = vols.shape[-1]
    t = GradientTable(np.r_[0.0, np.full(n - 1, 1000.0)], np.vstack([np.zeros(3), np.eye(3)[np.arange(n - 1) % 3]]))
    return DwiVolumeSet(vols, t, np.ones(vols.shape[:3], bool))


class TestNormalize:
    def test_value(self):
        d = normalize(_dwi(np.full((2, 2, 1, 2), 65536.0)))
        assert np.all(d.volumes == 1.0)
        assert d.saved_max == 65536.0

    def test_roundtrip_exact(self, rng):
        vols = rng.random((5, 5, 3, 4)) * 40000
        d = _dwi(vols)
        assert np.array_equal(restore(normalize(d)).volumes, vols)

    def test_ratios(self, rng):
        vols = rng.random((4, 4, 2, 3)) * 3000 + 1
        n = normalize(_dwi(vols)).volumes
        i, j = (0, 1, 1, 2), (3, 2, 0, 0)
        assert n[i] / n[j] == pytest.approx(vols[i] / vols[j], rel=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            normalize(_dwi(-np.ones((2, 2, 1, 2))))


class TestResample:
    def test_kernel_interpolating(self):
        for a in (-0.5, -0.75):
            assert cubic_kernel(0.0, a) == 1.0
            assert np.all(cubic_kernel(np.array([-2.0, -1.0, 1.0, 2.0]), a) == 0.0)
            assert cubic_kernel(2.5, a) == 0.0

    def test_partition_of_unity(self):
        x = np.linspace(0, 1, 17)
        s = sum(cubic_kernel(x + k) for k in range(-2, 3))
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    @pytest.mark.parametrize("factor,direction", [(2, "down"), (3, "down"), (2, "up"), (3, "up")])
    def test_constant(self, factor, direction):
        img = np.full((12, 18), 0.37)
        out = bicubic_resample(img, factor, direction)
        np.testing.assert_allclose(out, 0.37, atol=1e-14)

    @pytest.mark.parametrize("factor", [2, 3])
    def test_ramp_down(self, factor):
        n = 24
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        out = bicubic_resample(0.3 * yy - 0.7 * xx + 2, factor, "down")
        c = (np.arange(n // factor) + 0.5) * factor - 0.5
        expect = 0.3 * c[:, None] - 0.7 * c[None, :] + 2
        # reflection at the border breaks linearity there; the interior must be exact
        k = 2
        assert np.max(np.abs(out - expect)[k:-k, k:-k]) < 1e-10

    def test_shape_and_errors(self):
        assert bicubic_resample(np.zeros((8, 6)), 2, "up").shape == (16, 12)
        with pytest.raises(ShapeError):
            bicubic_resample(np.zeros((7, 6)), 2, "down")
        with pytest.raises(ValueError):
            bicubic_resample(np.zeros((8, 8)), 0)
        with pytest.raises(ValueError):
            bicubic_resample(np.zeros((8, 8)), -2)
        assert crop_to_multiple(np.zeros((65, 66)), 3).shape == (63, 66)

    def test_information_loss(self):
        p = generate_phantom(PhantomSpec(shape=(72, 72, 1), n_b0=1, per_shell=(6,), shells=(1000.0,)), seed=4)
        hr = p.dwi.volumes[:, :, 0, 0]
        hr = hr / hr.max()
        scores = {}
        for f in (2, 3):
            rec = bicubic_resample(bicubic_resample(hr, f, "down"), f, "up")
            scores[f] = psnr(MaskedImagePair(rec, hr))
        assert np.isfinite(scores[2]) and scores[3] < scores[2]
        assert psnr(MaskedImagePair(hr, hr)) == np.inf


class TestPairs:
    def test_counts_and_shapes(self):
        p = generate_phantom(PhantomSpec(), seed=0)
        pairs = list(make_pairs(normalize(p.dwi), 2, case="c0"))
        assert 0 < len(pairs) <= 80
        assert all(q.lr.shape == (32, 32) and q.hr.shape == (64, 64) for q in pairs)
        assert len({q.key for q in pairs}) == len(pairs)
        assert {q.bval for q in pairs} == {0.0, 1000.0, 2000.0}

    def test_background_slice_excluded(self):
        p = generate_phantom(PhantomSpec(shape=(30, 30, 3)), seed=0)
        mask = p.dwi.mask.copy()
        mask[:, :, 1] = False
        pairs = list(make_pairs(p.dwi.replace(mask=mask), 3))
        assert {q.slice for q in pairs} == {0, 2}
        assert all(q.hr.shape == (30, 30) and q.lr.shape == (10, 10) for q in pairs)

    def test_precrop(self):
        p = generate_phantom(PhantomSpec(shape=(31, 34, 1)), seed=0)
        q = next(make_pairs(p.dwi, 3))
        assert q.hr.shape == (30, 33) and q.lr.shape == (10, 11)


class TestSplit:
    def test_fifteen(self):
        s = make_split([f"c{i}" for i in range(15)], seed=0)
        assert tuple(map(len, (s.train, s.val, s.test))) == (8, 2, 5)

    def test_deterministic_and_disjoint(self):
        cases = [f"c{i}" for i in range(12)]
        a, b = make_split(cases, 7), make_split(cases, 7)
        assert a == b
        assert make_split(cases, 8) != a
        parts = [set(a.train), set(a.val), set(a.test)]
        assert set().union(*parts) == set(cases) and sum(map(len, parts)) == 12

    def test_apportion(self):
        assert apportion(15, (8, 2, 5)) == (8, 2, 5)
        assert apportion(12, (8, 2, 5)) == (6, 2, 4)
        assert apportion(3, (8, 2, 5)) == (1, 1, 1)
        for n in range(3, 40):
            assert sum(apportion(n, (8, 2, 5))) == n

    def test_explicit_sizes(self):
        s = make_split(range(12), seed=1, sizes=(7, 2, 3))
        assert tuple(map(len, (s.train, s.val, s.test))) == (7, 2, 3)
        with pytest.raises(ConfigError):
            make_split(range(12), sizes=(7, 2, 2))

    def test_too_few(self):
        with pytest.raises(ConfigError):
            make_split(["a", "b"], 0)


class TestPhantom:
    def test_b0_is_s0(self):
        p = generate_phantom(PhantomSpec(shape=(24, 24, 2)), seed=2)
        for i in p.dwi.table.b0_indices:
            assert np.array_equal(p.dwi.volumes[..., i], p.s0)

    def test_isotropic_signal(self):
        spec = PhantomSpec(shape=(32, 32, 2))
        p = generate_phantom(spec, seed=5)
        pure = p.fractions[..., 0] == 1.0
        assert pure.sum() > 20
        t = p.dwi.table
        for i in t.dw_indices:
            np.testing.assert_allclose(p.dwi.volumes[..., i][pure],
                                       p.s0[pure] * np.exp(-t.bvals[i] * spec.tissue_diffusivity), rtol=1e-12)

    def test_tensors_psd(self):
        p = generate_phantom(PhantomSpec(), seed=9)
        D = p.tensors
        assert np.array_equal(D, np.swapaxes(D, -1, -2))
        assert np.linalg.eigvalsh(D).min() > -1e-18
        assert np.allclose(p.fractions.sum(-1), 1.0)

    def test_mask_and_regions(self):
        p = generate_phantom(PhantomSpec(), seed=0)
        counts = np.bincount(p.regions[p.dwi.mask], minlength=5)
        assert (counts[1:] > 0).all()
        assert not p.dwi.mask[0, 0, 0]

    def test_rician_limit(self):
        spec = PhantomSpec(shape=(20, 20, 2))
        clean = generate_phantom(spec, seed=3).dwi.volumes
        spec.noise = 1e-6
        noisy = generate_phantom(spec, seed=3).dwi.volumes
        assert np.max(np.abs(noisy - clean)) < 1e-6 * spec.s0 * 10
        assert not np.array_equal(noisy, clean)

    def test_json_roundtrip(self):
        spec = PhantomSpec(shape=(16, 16, 2), noise=0.01)
        back = PhantomSpec.from_json(spec.to_json())
        assert back == spec
        assert np.array_equal(generate_phantom(back, 1).dwi.volumes, generate_phantom(spec, 1).dwi.volumes)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            PhantomSpec(fibers=[FiberSpec((1e-3, -1e-4, 0), (1, 0, 0)), FiberSpec()])
        with pytest.raises(ConfigError):
            PhantomSpec(fibers=[FiberSpec()])

    def test_fiber_tensor(self):
        D = fiber_tensor(FiberSpec((2e-3, 1e-3, 0.5e-3), (0, 3, 4)))
        w, v = np.linalg.eigh(D)
        np.testing.assert_allclose(w, [0.5e-3, 1e-3, 2e-3], atol=1e-18)
        assert abs(abs(v[:, 2] @ np.array([0, 0.6, 0.8])) - 1) < 1e-12

    def test_seeds_differ(self):
        a = generate_phantom(PhantomSpec(shape=(24, 24, 2)), 0).dwi.volumes
        b = generate_phantom(PhantomSpec(shape=(24, 24, 2)), 1).dwi.volumes
        assert not np.array_equal(a, b)
