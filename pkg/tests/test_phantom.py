import math

import numpy as np
import pytest
from scipy.ndimage import label as cc_label

from conftest import digital_sphere
from ctbench.errors import ParameterError, PhantomSpecError, UnknownLabelError
from ctbench.phantom import (BranchingTree, Ellipsoid, PhantomSpec, PhantomStructure, Tube,
                             ablate_structure, default_spec, dilate_mask, load_spec,
                             make_phantom, save_spec, shift_mask, spec_from_json,
                             spec_to_json)
from ctbench.volume import CATEGORIES, Mask3, binary_mask


def _bare_spec(structures=(), dims=(24, 24, 24)):
    return PhantomSpec(
        seed=1,
        dims=dims,
        spacing_mm=(1.0, 1.0, 1.0),
        body_shape=Ellipsoid((0.0, 0.0, 0.0), (10.0, 10.0, 10.0)),
        body_attenuation=0.2,
        structures=tuple(structures),
    )


def test_empty_structure_list_gives_background_only():
    vol, lv = make_phantom(_bare_spec())
    assert np.all(lv.labels == 0)
    assert set(np.unique(vol.data).tolist()) <= {0.0, np.float32(0.2)}
    assert (vol.data == np.float32(0.2)).sum() > 0


def test_default_spec_covers_all_categories(default_phantom):
    _, lv = default_phantom
    assert {cat for _n, cat in lv.table.values()} == set(CATEGORIES)


def test_default_structures_are_26_connected(default_phantom):
    _, lv = default_phantom
    for lab in lv.table:
        m = binary_mask(lv, lab)
        _, ncomp = cc_label(m.bits, structure=np.ones((3, 3, 3), int))
        assert ncomp == 1, lv.name_of(lab)


def test_sphere_voxel_count_matches_analytic_volume():
    r = 5.0
    spacing = 0.5
    spec = PhantomSpec(
        seed=0, dims=(40, 40, 40), spacing_mm=(spacing,) * 3,
        body_shape=Ellipsoid((0.0, 0.0, 0.0), (9.5, 9.5, 9.5)), body_attenuation=0.2,
        structures=(PhantomStructure("ball", "SmallOrgan", Ellipsoid((0.0, 0.0, 0.0), (r,) * 3), 1.0),),
    )
    _, lv = make_phantom(spec)
    count = binary_mask(lv, 1).count()
    expected = 4.0 / 3.0 * math.pi * r**3 / spacing**3
    assert abs(count - expected) / expected < 0.05


def test_overlap_is_a_spec_error():
    spec = _bare_spec([
        PhantomStructure("a", "LargeOrgan", Ellipsoid((0.0, 0.0, 0.0), (4.0, 4.0, 4.0)), 0.5),
        PhantomStructure("b", "SmallOrgan", Ellipsoid((2.0, 0.0, 0.0), (4.0, 4.0, 4.0)), 0.9),
    ])
    with pytest.raises(PhantomSpecError) as err:
        make_phantom(spec)
    assert "a" in str(err.value) and "b" in str(err.value)


def test_duplicate_attenuations_rejected():
    with pytest.raises(PhantomSpecError):
        _bare_spec([
            PhantomStructure("a", "LargeOrgan", Ellipsoid((0, 0, 0), (2, 2, 2)), 0.5),
            PhantomStructure("b", "SmallOrgan", Ellipsoid((5, 5, 5), (1, 1, 1)), 0.5),
        ])


def test_make_phantom_is_deterministic(default_phantom):
    vol1, lv1 = default_phantom
    vol2, lv2 = make_phantom(default_spec())
    assert np.array_equal(vol1.data, vol2.data)
    assert np.array_equal(lv1.labels, lv2.labels)


def test_tree_seed_changes_geometry():
    tree = BranchingTree((0.0, 0.0, 8.0), (0.0, 0.0, -1.0), 2, 4.0, 1.5)
    spec_a = _bare_spec([PhantomStructure("t", "Vessel", tree, 1.0)])
    spec_b = PhantomSpec(**{**spec_a.__dict__, "seed": 2})
    _, lv_a = make_phantom(spec_a)
    _, lv_b = make_phantom(spec_b)
    assert not np.array_equal(lv_a.labels, lv_b.labels)


def test_spec_json_roundtrip(tmp_path):
    spec = default_spec()
    save_spec(spec, tmp_path / "spec.json")
    assert load_spec(tmp_path / "spec.json") == spec
    assert spec_from_json(spec_to_json(spec)) == spec


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def test_ablate_changes_only_target_voxels(default_phantom, label_of_name):
    vol, lv = default_phantom
    lab = label_of_name("nodule_m")
    out = ablate_structure(vol, lv, lab)
    mask = lv.labels == lab
    changed = out.data != vol.data
    assert np.all(changed <= mask)  # changed voxels are within the structure
    assert changed.sum() <= mask.sum()
    # replaced by the surrounding background attenuation
    assert np.unique(out.data[mask]).size == 1
    assert out.data[mask].flat[0] == np.float32(0.2)


def test_ablate_background_rejected(default_phantom):
    vol, lv = default_phantom
    with pytest.raises(ParameterError):
        ablate_structure(vol, lv, 0)
    with pytest.raises(UnknownLabelError):
        ablate_structure(vol, lv, 99)


def test_shift_mask_identity_and_truncation():
    m = digital_sphere(4.0, spacing=1.0, margin_mm=3.0)
    assert np.array_equal(shift_mask(m, (0.0, 0.0, 0.0)).bits, m.bits)
    shifted = shift_mask(m, (3.0, 0.0, 0.0))
    assert shifted.count() <= m.count()
    back = shift_mask(shifted, (-3.0, 0.0, 0.0))
    inner = m.bits.copy()
    assert (back.bits & ~inner).sum() == 0  # round trip only loses border voxels

    n = m.bits.shape[0]
    gone = shift_mask(m, (float(n + 1), 0.0, 0.0))
    assert gone.count() == 0


def test_shift_mask_rounds_to_voxels():
    m = digital_sphere(3.0, spacing=2.0, margin_mm=4.0)
    a = shift_mask(m, (1.9, 0.0, 0.0))  # rounds to one 2 mm voxel
    b = shift_mask(m, (2.0, 0.0, 0.0))
    assert np.array_equal(a.bits, b.bits)


def test_dilate_mask_identity_and_growth():
    m = digital_sphere(5.0)
    assert dilate_mask(m, 0.0) is m
    grown = dilate_mask(m, 2.0)
    assert np.all(grown.bits >= m.bits)
    with pytest.raises(ParameterError):
        dilate_mask(m, -1.0)


def test_dilation_shell_volume_matches_surface_estimate():
    radius, delta = 50.0, 3.0
    m = digital_sphere(radius)
    grown = dilate_mask(m, delta)
    shell = grown.count() - m.count()
    surface_estimate = 4.0 * math.pi * radius**2 * delta  # shell volume ~ S * delta
    assert abs(shell - surface_estimate) / surface_estimate < 0.10


def test_shapes_validate():
    with pytest.raises(ParameterError):
        Ellipsoid((0, 0, 0), (1.0, -1.0, 1.0))
    with pytest.raises(ParameterError):
        Tube(((0, 0, 0),), 1.0)
    with pytest.raises(ParameterError):
        BranchingTree((0, 0, 0), (0, 0, -1), -1, 4.0, 1.0)
    with pytest.raises(PhantomSpecError):
        PhantomStructure("x", "NotACategory", Ellipsoid((0, 0, 0), (1, 1, 1)), 1.0)
