import json

import numpy as np
import pytest

from cdisrad.cdis import fit_adc
from cdisrad.cohort import DwiStudy, load_manifest, record_study, validate_cohort
from cdisrad.phantom import (
    GROUND_TRUTH_NAME,
    MANIFEST_NAME,
    PhantomSpec,
    balanced_labels,
    generate_phantom_cohort,
    simulate_cohort,
)
from cdisrad.volume import Volume3D, read_volume

SMALL = dict(grid=(24, 24, 6))


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_zero_patients_writes_header_only(tmp_path):
    manifest, truth = generate_phantom_cohort(PhantomSpec(n_patients=0), tmp_path)
    assert len(manifest) == 0 and truth["patients"] == []
    assert (tmp_path / MANIFEST_NAME).read_text().startswith("patient_id,modality")


def test_identical_seeds_give_identical_files(tmp_path):
    spec = PhantomSpec(n_patients=4, seed=5, **SMALL)
    generate_phantom_cohort(spec, tmp_path / "a")
    generate_phantom_cohort(spec, tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    generate_phantom_cohort(PhantomSpec(n_patients=4, seed=6, **SMALL), tmp_path / "c")
    assert _tree_bytes(tmp_path / "c") != a


@pytest.mark.parametrize("n", [1, 2, 7, 20])
def test_labels_balanced(n):
    labels = balanced_labels(n, np.random.default_rng(n))
    assert abs(2 * labels.sum() - n) <= 1


def test_noiseless_fit_recovers_planted_adc():
    spec = PhantomSpec(n_patients=4, noise_sigma=0.0, seed=2, **SMALL)
    for p in simulate_cohort(spec):
        study = DwiStudy(spec.native_bvalues, tuple(Volume3D(p.dwi[b]) for b in spec.native_bvalues))
        fit = fit_adc(study)
        body = p.s0 > 0
        np.testing.assert_allclose(fit.adc.data[p.lesion_mask], p.lesion_adc, atol=1e-9)
        np.testing.assert_allclose(fit.adc.data[body], p.adc[body], atol=1e-9)
        assert p.lesion_mask.sum() > 0


def test_fitted_class_difference_matches_planted_separation():
    spec = PhantomSpec(n_patients=50, seed=3, **SMALL)
    diffs = {0: [], 1: []}
    for p in simulate_cohort(spec):
        study = DwiStudy(spec.native_bvalues, tuple(Volume3D(p.dwi[b]) for b in spec.native_bvalues))
        adc = fit_adc(study).adc.data
        diffs[p.label].append(adc[p.lesion_mask].mean())
    neg, pos = np.array(diffs[0]), np.array(diffs[1])
    observed = neg.mean() - pos.mean()
    se = np.sqrt(neg.var(ddof=1) / len(neg) + pos.var(ddof=1) / len(pos))
    assert abs(observed - spec.class_separation) <= 3 * se, (observed, se)


def test_files_round_trip_through_cohort_reader(tmp_path):
    spec = PhantomSpec(n_patients=6, seed=4, **SMALL)
    manifest, truth = generate_phantom_cohort(spec, tmp_path, task="pcr")
    loaded = load_manifest(tmp_path / MANIFEST_NAME, "pcr")
    assert loaded.ids == manifest.ids
    kept, excluded = validate_cohort(loaded, ("DWI", "ADC", "T2w"))
    assert excluded == [] and len(kept) == 6
    on_disk = json.loads((tmp_path / GROUND_TRUTH_NAME).read_text())
    assert on_disk == truth
    for rec, gt in zip(loaded.records, truth["patients"]):
        assert rec.label("pcr") == gt["label"]
        assert rec.label("grading") == gt["label"]
        study = record_study(loaded, rec)
        assert study.bvalues == spec.native_bvalues
        assert study.volumes[0].spacing == spec.spacing
        adc = read_volume(tmp_path / gt["adc_path"]).data
        mask = read_volume(tmp_path / gt["lesion_mask_path"]).data > 0
        np.testing.assert_allclose(adc[mask], gt["lesion_adc"])


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(n_patients=-1)
    with pytest.raises(ValueError):
        PhantomSpec(class_separation=0.01)
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-0.1)
