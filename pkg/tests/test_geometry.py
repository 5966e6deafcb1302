import math
from fractions import Fraction

import numpy as np
import pytest

from refcycle.geometry import (
    BBox,
    CoordFormat,
    QuantizedBBox,
    dequantize,
    iou,
    parse_bbox,
    quantize,
    serialize_bbox,
)


def grid_iou(a: BBox, b: BBox, cells: int = 1024) -> float:
    """Counting oracle: fraction of cell centers inside the intersection
    versus inside the union, on a cells x cells grid.

    Centers sit at (k + 0.5) / cells.  Counts along each axis factorize for
    axis-aligned boxes; the union count follows by inclusion-exclusion.
    """

    def axis_count(lo: float, hi: float) -> int:
        k_lo = math.ceil(lo * cells - 0.5)
        k_hi = math.floor(hi * cells - 0.5)
        k_lo = max(k_lo, 0)
        k_hi = min(k_hi, cells - 1)
        return max(0, k_hi - k_lo + 1)

    ca = axis_count(a.x_min, a.x_max) * axis_count(a.y_min, a.y_max)
    cb = axis_count(b.x_min, b.x_max) * axis_count(b.y_min, b.y_max)
    ci_x = axis_count(max(a.x_min, b.x_min), min(a.x_max, b.x_max)) if min(
        a.x_max, b.x_max
    ) >= max(a.x_min, b.x_min) else 0
    ci_y = axis_count(max(a.y_min, b.y_min), min(a.y_max, b.y_max)) if min(
        a.y_max, b.y_max
    ) >= max(a.y_min, b.y_min) else 0
    ci = ci_x * ci_y
    cu = ca + cb - ci
    return 0.0 if cu == 0 else ci / cu


def grid_iou_dense(a: BBox, b: BBox, cells: int = 256) -> float:
    """Same counting oracle, but materializing the full 2-d boolean masks."""
    centers = (np.arange(cells) + 0.5) / cells
    cx, cy = np.meshgrid(centers, centers, indexing="ij")

    def mask(box: BBox) -> np.ndarray:
        return (
            (cx >= box.x_min)
            & (cx <= box.x_max)
            & (cy >= box.y_min)
            & (cy <= box.y_max)
        )

    ma, mb = mask(a), mask(b)
    inter = int(np.count_nonzero(ma & mb))
    union = int(np.count_nonzero(ma | mb))
    return 0.0 if union == 0 else inter / union


def fraction_iou(a: BBox, b: BBox) -> Fraction:
    """Exact rational-arithmetic recomputation of intersection over union."""
    fa = [Fraction(v) for v in a.as_tuple()]
    fb = [Fraction(v) for v in b.as_tuple()]
    ix = min(fa[2], fb[2]) - max(fa[0], fb[0])
    iy = min(fa[3], fb[3]) - max(fa[1], fb[1])
    inter = max(Fraction(0), ix) * max(Fraction(0), iy)
    area_a = (fa[2] - fa[0]) * (fa[3] - fa[1])
    area_b = (fb[2] - fb[0]) * (fb[3] - fb[1])
    union = area_a + area_b - inter
    if union <= 0:
        return Fraction(0)
    return inter / union


def random_box(rng: np.random.Generator, min_side: float = 0.0) -> BBox:
    while True:
        x = np.sort(rng.random(2))
        y = np.sort(rng.random(2))
        if x[1] - x[0] >= min_side and y[1] - y[0] >= min_side:
            return BBox(x[0], y[0], x[1], y[1])


class TestIoU:
    def test_identity(self):
        b = BBox(0.2, 0.3, 0.7, 0.9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 0.4, 0.4), BBox(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_quarter_overlap(self):
        # intersection 0.25^2 = 0.0625, union 0.4375, ratio 1/7
        got = iou(BBox(0, 0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75))
        assert got == pytest.approx(1.0 / 7.0, abs=1e-15)
        assert abs(got - grid_iou(BBox(0, 0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75))) <= 2e-3

    def test_degenerate_boxes(self):
        point = BBox(0.5, 0.5, 0.5, 0.5)
        assert iou(point, point) == 0.0
        assert iou(point, BBox(0, 0, 1, 1)) == 0.0
        line = BBox(0.1, 0.0, 0.1, 1.0)
        assert iou(line, line) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)

    def test_fraction_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(float(fraction_iou(a, b)), abs=1e-12)

    def test_grid_oracle_lattice_boxes(self):
        # Lattice-aligned corners make center counting exact, so the grid
        # oracle and the closed form must agree to within 2e-3 (in fact 0).
        rng = np.random.default_rng(3)
        for _ in range(1000):
            ka = np.sort(rng.integers(0, 1025, size=2))
            kb = np.sort(rng.integers(0, 1025, size=2))
            a = BBox(ka[0] / 1024, kb[0] / 1024, ka[1] / 1024, kb[1] / 1024)
            kc = np.sort(rng.integers(0, 1025, size=2))
            kd = np.sort(rng.integers(0, 1025, size=2))
            b = BBox(kc[0] / 1024, kd[0] / 1024, kc[1] / 1024, kd[1] / 1024)
            assert abs(iou(a, b) - grid_iou(a, b)) <= 2e-3

    def test_grid_oracle_matches_dense_grid(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            a, b = random_box(rng), random_box(rng)
            assert grid_iou(a, b, cells=256) == pytest.approx(
                grid_iou_dense(a, b, cells=256), abs=1e-12
            )


class TestQuantize:
    def test_endpoints(self):
        assert quantize(BBox(0, 0, 1, 1), 1000).as_tuple() == (0, 0, 1000, 1000)

    def test_half_rounds_up(self):
        q = quantize(BBox(0.5, 0.5, 0.5, 0.5), 1000)
        assert q.as_tuple() == (500, 500, 500, 500)
        # half away from zero at a true .5 boundary
        assert quantize(BBox(0.0, 0.0, 0.0625, 0.0625), 8).as_tuple() == (0, 0, 1, 1)

    def test_direct_rounding(self):
        q = quantize(BBox(0.1234, 0.2, 0.3456, 0.4), 100)
        assert q.as_tuple() == (12, 20, 35, 40)

    def test_dequantize_examples(self):
        assert dequantize(QuantizedBBox(0, 0, 1000, 1000), 1000).as_tuple() == (0, 0, 1, 1)
        assert dequantize(QuantizedBBox(500, 500, 500, 500), 1000).as_tuple() == (
            0.5,
            0.5,
            0.5,
            0.5,
        )
        assert dequantize(QuantizedBBox(12, 20, 35, 40), 100).as_tuple() == (
            0.12,
            0.20,
            0.35,
            0.40,
        )

    def test_quantize_dequantize_roundtrip_on_grid(self):
        rng = np.random.default_rng(13)
        for r in (1, 3, 100, 1000):
            for _ in range(200):
                vals_x = np.sort(rng.integers(0, r + 1, size=2))
                vals_y = np.sort(rng.integers(0, r + 1, size=2))
                q = QuantizedBBox(int(vals_x[0]), int(vals_y[0]), int(vals_x[1]), int(vals_y[1]))
                assert quantize(dequantize(q, r), r) == q

    def test_dequantize_quantize_distance(self):
        rng = np.random.default_rng(17)
        for r in (100, 1000):
            for _ in range(500):
                b = random_box(rng)
                back = dequantize(quantize(b, r), r)
                for u, v in zip(b.as_tuple(), back.as_tuple()):
                    assert abs(u - v) <= 0.5 / r + 1e-12

    def test_monotonicity_preserved(self):
        rng = np.random.default_rng(19)
        for _ in range(500):
            b = random_box(rng)
            q = quantize(b, 37)
            assert q.x_min <= q.x_max and q.y_min <= q.y_max


class TestTextFormat:
    def test_serialize_default(self):
        assert (
            serialize_bbox(QuantizedBBox(120, 45, 600, 800))
            == "<box>(120,45),(600,800)</box>"
        )
        assert serialize_bbox(QuantizedBBox(0, 0, 0, 0)) == "<box>(0,0),(0,0)</box>"

    def test_parse_embedded(self):
        q = parse_bbox("the box is <box>(120,45),(600,800)</box> ok")
        assert q is not None and q.as_tuple() == (120, 45, 600, 800)

    def test_parse_no_match(self):
        assert parse_bbox("no coordinates here") is None

    def test_parse_monotonicity_violation(self):
        assert parse_bbox("<box>(600,45),(120,800)</box>") is None

    def test_parse_out_of_range(self):
        assert parse_bbox("<box>(0,0),(1001,5)</box>") is None
        fmt = CoordFormat(range_max=100)
        assert parse_bbox("<box>(0,0),(101,5)</box>", fmt) is None
        assert parse_bbox("<box>(0,0),(100,5)</box>", fmt) is not None

    def test_parse_first_match_wins(self):
        text = "<box>(1,2),(3,4)</box> then <box>(5,6),(7,8)</box>"
        q = parse_bbox(text)
        assert q is not None and q.as_tuple() == (1, 2, 3, 4)

    def test_roundtrip_property(self):
        rng = np.random.default_rng(23)
        for r in (100, 1000):
            fmt = CoordFormat(range_max=r)
            for _ in range(2000):
                xs = np.sort(rng.integers(0, r + 1, size=2))
                ys = np.sort(rng.integers(0, r + 1, size=2))
                q = QuantizedBBox(int(xs[0]), int(ys[0]), int(xs[1]), int(ys[1]))
                assert parse_bbox(serialize_bbox(q, fmt), fmt) == q

    def test_custom_format_roundtrip(self):
        fmt = CoordFormat(
            template="[{x1}, {y1}, {x2}, {y2}]",
            pattern=r"\[(\d+), (\d+), (\d+), (\d+)\]",
            range_max=32,
        )
        q = QuantizedBBox(3, 0, 17, 32)
        assert serialize_bbox(q, fmt) == "[3, 0, 17, 32]"
        assert parse_bbox("ans: [3, 0, 17, 32].", fmt) == q

    def test_malformed_format_rejected(self):
        with pytest.raises(ValueError):
            CoordFormat(template="({x1},{y1})", pattern=r"(\d+)", range_max=10)
        with pytest.raises(ValueError):
            CoordFormat(pattern=r"<box>\((\d+),(\d+)\)</box>")

    def test_format_config_roundtrip(self):
        fmt = CoordFormat(range_max=32)
        assert CoordFormat.from_dict(fmt.to_dict()) == fmt


class TestInvariantGuards:
    def test_bbox_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            BBox(0.5, 0.0, 0.4, 1.0)
        with pytest.raises(ValueError):
            BBox(-0.1, 0.0, 0.4, 1.0)
        with pytest.raises(ValueError):
            BBox(0.0, 0.0, 0.4, 1.1)

    def test_quantized_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            QuantizedBBox(5, 0, 4, 1)
        with pytest.raises(ValueError):
            QuantizedBBox(-1, 0, 4, 1)
