import math

import pytest

from mmreg.offsets import OffsetClass, generate_offsets


ELLIPSE_ARGS = dict(n_classes=9, major_axis=32, minor_axis=16, rotation_deg=45.0)


class TestGenerateOffsets:
    def test_class_zero_is_origin(self):
        offsets = generate_offsets(**ELLIPSE_ARGS)
        assert offsets[0] == OffsetClass(id=0, dx=0, dy=0)

    def test_rotated_first_perimeter_class(self):
        # theta=0: (16, 0) rotated 45 deg clockwise -> round(16*cos45, -16*sin45)
        offsets = generate_offsets(**ELLIPSE_ARGS)
        assert (offsets[1].dx, offsets[1].dy) == (11, -11)

    def test_unrotated_axes_points(self):
        offsets = generate_offsets(9, 32, 16, rotation_deg=0.0)
        assert (offsets[1].dx, offsets[1].dy) == (16, 0)   # theta = 0
        assert (offsets[3].dx, offsets[3].dy) == (0, 8)    # theta = 90

    def test_all_distinct(self):
        offsets = generate_offsets(**ELLIPSE_ARGS)
        assert len({(o.dx, o.dy) for o in offsets}) == 9

    def test_antipodal_pairs_cancel_within_rounding(self):
        offsets = generate_offsets(**ELLIPSE_ARGS)
        for i in range(1, 5):
            partner = offsets[i + 4]
            assert abs(offsets[i].dx + partner.dx) <= 1
            assert abs(offsets[i].dy + partner.dy) <= 1

    def test_magnitude_bound(self):
        offsets = generate_offsets(**ELLIPSE_ARGS)
        bound = math.ceil(32 / 2)
        assert all(abs(o.dx) <= bound and abs(o.dy) <= bound for o in offsets)

    def test_regeneration_bit_identical(self):
        assert generate_offsets(**ELLIPSE_ARGS) == generate_offsets(**ELLIPSE_ARGS)

    def test_collision_names_pair(self):
        with pytest.raises(ValueError) as err:
            generate_offsets(9, 1, 1, rotation_deg=0.0)
        assert "classes" in str(err.value)

    def test_too_few_classes_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            generate_offsets(1, 32, 16)

    def test_bad_axes_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            generate_offsets(9, 0, 16)

    def test_ids_are_sequential(self):
        offsets = generate_offsets(5, 20, 10, rotation_deg=30.0)
        assert [o.id for o in offsets] == [0, 1, 2, 3, 4]
