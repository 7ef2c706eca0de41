import numpy as np
import pytest
from dataclasses import replace

from voxreg.loss import lncc_map, sobolev_norm
from voxreg.metrics import dice, jacobian_fnj
from voxreg.synth import RECOVERY_SPEC, SynthSpec, make_dataset, make_pair, make_phantom, make_smooth_field
from voxreg.tensor import Tensor, no_grad


class TestPhantom:
    def test_no_blobs(self):
        vol, lab = make_phantom(SynthSpec(dims=(8, 8, 8), blobs=0))
        assert not vol.any() and not lab.any()

    def test_deterministic(self):
        a = make_phantom(SynthSpec(seed=4, dims=(16, 16, 16)))
        b = make_phantom(SynthSpec(seed=4, dims=(16, 16, 16)))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @pytest.mark.parametrize("spec", [SynthSpec(), RECOVERY_SPEC], ids=["default", "recovery"])
    def test_contract(self, spec):
        vol, lab = make_phantom(spec)
        assert vol.dtype == np.float32 and lab.dtype == np.uint16
        assert vol.min() == 0.0 and vol.max() == 1.0
        assert len(np.unique(lab)) >= 2

    @pytest.mark.parametrize(
        "kw",
        [
            {"dims": (0, 8, 8)},
            {"amplitude": -1.0},
            {"sigma": 0.0},
            {"blobs": -1},
            {"dims": (10, 8, 8), "divisor": 4},
            {"label_level": 1.0},
            {"blob_width": (3.0, 2.0)},
        ],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)


class TestField:
    def test_zero_amplitude(self):
        assert not make_smooth_field(SynthSpec(amplitude=0.0, dims=(8, 8, 8))).any()

    def test_default_amplitude_and_no_folds(self):
        u = make_smooth_field(SynthSpec())
        assert abs(np.linalg.norm(u, axis=0).max() - 3.0) < 1e-6
        assert jacobian_fnj(u)[0] == 0.0

    def test_large_sigma_is_nearly_constant(self):
        dims = (16, 16, 16)

        def energy(sigma):
            u = make_smooth_field(SynthSpec(dims=dims, sigma=sigma, seed=2))
            with no_grad():
                return sobolev_norm(Tensor(u.astype(np.float64))).item()

        assert energy(32.0) < 0.1 * energy(2.0)

    def test_folding_amplitude_is_reduced(self):
        spec = SynthSpec(dims=(16, 16, 16), amplitude=10.0, sigma=1.5)
        u = make_smooth_field(spec, max_tries=20)
        assert jacobian_fnj(u)[0] == 0.0
        assert np.linalg.norm(u, axis=0).max() < 10.0

    def test_gives_up(self):
        with pytest.raises(RuntimeError):
            make_smooth_field(SynthSpec(dims=(16, 16, 16), amplitude=50.0, sigma=1.0), max_tries=2)


class TestPair:
    def test_zero_amplitude_pair(self):
        p = make_pair(SynthSpec(amplitude=0.0, dims=(16, 16, 16)))
        np.testing.assert_array_equal(p.fixed, p.moving)

    def test_deformation_lowers_similarity_and_moves_labels(self):
        p = make_pair(SynthSpec())
        assert lncc_map(p.fixed, p.moving).mean() < lncc_map(p.fixed, p.fixed).mean()
        assert dice(p.labels_fixed, p.labels_moving)[1] < 1.0

    def test_dataset_seeds(self):
        spec = SynthSpec(dims=(16, 16, 16), seed=10)
        ds = make_dataset(spec, 2)
        np.testing.assert_array_equal(ds[1].fixed, make_pair(replace(spec, seed=11)).fixed)
        assert not np.array_equal(ds[0].u_true, ds[1].u_true)
