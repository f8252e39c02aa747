import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest

from fundseg import contours as ct
from fundseg import grading, synth
from fundseg.errors import ConfigurationError, ContractError
from fundseg.synth import SynthSpec


def test_mix64_reference_values():
    # splitmix64 with state 0: the first outputs of the reference generator
    assert synth.mix64(0, 0) == 0xE220A8397B1DCDAF
    assert synth.mix64(0, 1) == 0x6E789E6AA1B965F4
    assert synth.mix64(0, 0) != synth.mix64(1, 0)


def test_gen_case_deterministic():
    a, b = synth.gen_case(SynthSpec(), 42), synth.gen_case(SynthSpec(), 42)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.disc_mask, b.disc_mask) and np.array_equal(a.cup_mask, b.cup_mask)
    assert a.true_cdr == b.true_cdr


def test_case_invariants():
    spec = SynthSpec()
    for case in synth.gen_cohort(spec, 30, seed=3):
        assert case.image.shape == (64, 64) and 0 <= case.image.min() and case.image.max() <= 1
        assert np.array_equal(np.round(case.image * 65535) / 65535, case.image)
        assert np.array_equal(case.disc_mask, ct.rasterize(case.disc_contour, 64, 64))
        assert not np.any((case.cup_mask > 0) & (case.disc_mask == 0))
        assert case.label == int(case.true_cdr >= 0.5)
        assert spec.cdr_range[0] <= case.true_cdr <= spec.cdr_range[1]


def test_noise_free_center_value():
    spec = SynthSpec(background=0.0, disc_level=0.5, cup_level=1.0, noise_sigma=0.0)
    case = synth.gen_case(spec, 5)
    cx, cy = ct.centroid(case.disc_contour)
    assert case.image[int(round(cy)), int(round(cx))] == 1.0


def test_fixed_boundary_cdr_all_suspect():
    spec = SynthSpec(cdr_range=(0.5, 0.5))
    cases = synth.gen_cohort(spec, 20, seed=1)
    assert all(c.label == 1 and c.true_cdr == 0.5 for c in cases)


def test_prevalence_matches_uniform_cdr():
    cases = synth.gen_cohort(SynthSpec(), 100, seed=11)
    p = 4 / 7
    assert abs(synth.prevalence(cases) - p) <= 3 * math.sqrt(p * (1 - p) / 100)


def test_disjoint_seeds_disjoint_images():
    a = synth.gen_cohort(SynthSpec(), 50, seed=0)
    b = synth.gen_cohort(SynthSpec(), 50, seed=1)
    hashes = [hashlib.sha256(c.image.tobytes()).hexdigest() for c in a + b]
    assert len(set(hashes)) == 100


def test_cohort_single_case_uses_mixed_seed():
    (c,) = synth.gen_cohort(SynthSpec(), 1, seed=9)
    ref = synth.gen_case(SynthSpec(), synth.mix64(9, 0))
    assert np.array_equal(c.image, ref.image) and c.case_id == "case0000"
    with pytest.raises(ContractError):
        synth.gen_cohort(SynthSpec(), 0)


def test_ground_truth_closure():
    for case in synth.gen_cohort(SynthSpec(), 200, seed=0):
        rec = grading.vertical_cdr(case.disc_mask, case.cup_mask)
        assert abs(rec.cdr - case.true_cdr) <= 2 / rec.disc_diameter


@pytest.mark.parametrize("change", [
    dict(cdr_range=(0.2, 0.97)),
    dict(cdr_range=(0.6, 0.3)),
    dict(disc_level=0.1),
    dict(size=32),
    dict(noise_sigma=-1.0),
])
def test_invalid_specs(change):
    with pytest.raises(ConfigurationError):
        synth.gen_case(replace(SynthSpec(), **change), 0)
