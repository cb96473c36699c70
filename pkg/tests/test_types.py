import numpy as np
import pytest

from petctseg.errors import ValidationError
from petctseg.types import (
    DatasetPartition,
    Grid3D,
    LabelMask,
    SampleWeightTable,
    Volume,
    check_disjoint_cover,
    validate_study,
)

from conftest import make_study


class TestGrid3D:
    def test_voxel_volume(self):
        assert Grid3D(shape=(2, 2, 2), spacing=(1, 1, 1)).voxel_volume_ml == pytest.approx(0.001)
        assert Grid3D(shape=(10, 10, 10), spacing=(3, 2, 2)).voxel_volume_ml == pytest.approx(0.012)

    @pytest.mark.parametrize(
        "shape,spacing",
        [((0, 2, 2), (1, 1, 1)), ((2, 2, 2), (0.0, 1, 1)), ((2, 2, 2), (-1, 1, 1))],
    )
    def test_rejects_bad_geometry(self, shape, spacing):
        with pytest.raises(ValidationError):
            Grid3D(shape=shape, spacing=spacing)


class TestVolumeAndMask:
    def test_shape_mismatch_rejected(self):
        grid = Grid3D(shape=(2, 2, 2), spacing=(1, 1, 1))
        with pytest.raises(ValidationError):
            Volume(grid=grid, values=np.zeros((2, 2, 3), dtype=np.float32))

    def test_nonfinite_rejected(self):
        grid = Grid3D(shape=(2, 2, 2), spacing=(1, 1, 1))
        vals = np.zeros((2, 2, 2), dtype=np.float32)
        vals[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            Volume(grid=grid, values=vals)

    def test_mask_must_be_binary(self):
        grid = Grid3D(shape=(2, 2, 2), spacing=(1, 1, 1))
        with pytest.raises(ValidationError):
            LabelMask(grid=grid, values=np.full((2, 2, 2), 2, dtype=np.uint8))

    def test_values_frozen_after_construction(self):
        grid = Grid3D(shape=(2, 2, 2), spacing=(1, 1, 1))
        vol = Volume(grid=grid, values=np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            vol.values[0, 0, 0] = 1.0


class TestValidateStudy:
    def test_valid_study_has_no_violations(self):
        label = np.zeros((4, 4, 4), dtype=np.uint8)
        label[1, 1, 1] = 1
        study = make_study(label=label)
        assert validate_study(study) == []

    def test_positive_without_label_names_the_rule(self):
        study = make_study()
        study = type(study)(
            id=study.id, tracer=study.tracer, ct=study.ct, pet=study.pet, label=None, positive=True
        )
        violations = validate_study(study)
        assert len(violations) == 1
        assert violations[0].rule == "positivity"

    def test_grid_mismatch_reported(self):
        label = np.zeros((4, 4, 4), dtype=np.uint8)
        label[1, 1, 1] = 1
        good = make_study(label=label)
        bad_pet_grid = Grid3D(shape=(5, 4, 4), spacing=(1, 1, 1))
        bad_pet = Volume(grid=bad_pet_grid, values=np.zeros((5, 4, 4), dtype=np.float32))
        study = type(good)(
            id=good.id, tracer=good.tracer, ct=good.ct, pet=bad_pet, label=good.label, positive=True
        )
        rules = [v.rule for v in validate_study(study)]
        assert rules == ["grid-match"]


class TestPartitions:
    def test_duplicates_rejected(self):
        with pytest.raises(ValidationError):
            DatasetPartition(name="A", study_ids=("x", "x"))

    def test_paper_partition_algebra(self):
        # published counts: |A|+|B| = 934+104 = 1038, |A*|+|A**| = 50+884,
        # |B*|+|B**| = 54+50
        p_ids = tuple(f"s{i:04d}" for i in range(1038))
        P = DatasetPartition("P", p_ids)
        A = DatasetPartition("A", p_ids[:934])
        B = DatasetPartition("B", p_ids[934:])
        assert len(A) + len(B) == len(P) == 1038
        check_disjoint_cover(P, [A, B])

        A_star = DatasetPartition("A*", A.study_ids[:50])
        A_rest = DatasetPartition("A**", A.study_ids[50:])
        assert len(A_star) + len(A_rest) == len(A) == 934
        assert (len(A_star), len(A_rest)) == (50, 884)
        check_disjoint_cover(A, [A_star, A_rest])

        B_star = DatasetPartition("B*", B.study_ids[:54])
        B_rest = DatasetPartition("B**", B.study_ids[54:])
        assert (len(B_star), len(B_rest)) == (54, 50)
        check_disjoint_cover(B, [B_star, B_rest])

    def test_overlap_detected(self):
        whole = DatasetPartition("P", ("a", "b", "c"))
        with pytest.raises(ValidationError):
            check_disjoint_cover(whole, [DatasetPartition("x", ("a", "b")), DatasetPartition("y", ("b", "c"))])


class TestSampleWeightTable:
    def test_multiplicity_must_be_positive(self):
        with pytest.raises(ValidationError):
            SampleWeightTable({"a": 0})

    def test_model5_total_matches_published_row(self):
        # base pool 934 + 104 ids, extras 61 + 51 + 9 -> 1159 total samples
        a_ids = [f"a{i:04d}" for i in range(934)]
        b_ids = [f"b{i:04d}" for i in range(104)]
        table = {sid: 1 for sid in a_ids + b_ids}
        a_star, a_rest, b_star = a_ids[:50], a_ids[50:], b_ids[:54]
        for sid in a_star[:43]:  # first boost event on the low-Dice subset
            table[sid] += 1
        for sid in a_star[:18]:  # second event: 18 of them reach multiplicity 3
            table[sid] += 1
        for sid in a_rest[:51]:
            table[sid] += 1
        for sid in b_star[:9]:
            table[sid] += 1
        weights = SampleWeightTable(table)
        assert weights.total == 1159
        assert weights.extras_within(a_star) == 61
        assert weights.extras_within(a_rest) == 51
        assert weights.extras_within(b_star) == 9

    def test_with_ids_added_keeps_existing(self):
        t = SampleWeightTable({"a": 3})
        t2 = t.with_ids_added(["a", "b"])
        assert t2["a"] == 3 and t2["b"] == 1
        assert t.ids() == ("a",)  # original untouched
