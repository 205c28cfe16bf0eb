from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvlm.boxes import (
    DegenerateBoxError,
    ImageSize,
    InvalidBoxError,
    NormalizedBox,
    OutOfBoundsError,
    PixelBox,
    denormalize_box,
    normalize_box,
    parse_spans,
    serialize_box,
)


def oracle_normalize(coords, extents):
    """Independent oracle: exact rational coord/extent*100, round half up."""
    out = []
    for c, e in zip(coords, extents):
        q = Fraction(c) * 100 / e
        out.append(int((q + Fraction(1, 2)).__floor__()))
    return tuple(out)


class TestNormalize:
    def test_exact_ratios(self):
        box = PixelBox(250, 100, 750, 500)
        assert normalize_box(box, ImageSize(1000, 1000)) == NormalizedBox(25, 10, 75, 50)

    def test_full_image_identity(self):
        for w, h in [(448, 448), (1, 1), (640, 480), (1000, 3)]:
            assert normalize_box(PixelBox(0, 0, w, h), ImageSize(w, h)) == NormalizedBox(0, 0, 100, 100)

    def test_half_up_rounding_448(self):
        # Oracle: 137/448*100=30.580->31, 59/448*100=13.169->13,
        # 412/448*100=91.964->92, 288/448*100=64.285->64.
        assert oracle_normalize((137, 59, 412, 288), (448, 448, 448, 448)) == (31, 13, 92, 64)
        box = PixelBox(137, 59, 412, 288)
        assert normalize_box(box, ImageSize(448, 448)) == NormalizedBox(31, 13, 92, 64)

    def test_degenerate_box_rejected(self):
        with pytest.raises(InvalidBoxError):
            normalize_box(PixelBox(10, 10, 10, 50), ImageSize(100, 100))
        with pytest.raises(InvalidBoxError):
            normalize_box(PixelBox(10, 50, 40, 50), ImageSize(100, 100))

    def test_out_of_bounds_rejected(self):
        with pytest.raises(OutOfBoundsError):
            normalize_box(PixelBox(0, 0, 101, 50), ImageSize(100, 100))

    def test_negative_coordinate_rejected(self):
        with pytest.raises(InvalidBoxError):
            normalize_box(PixelBox(-1, 0, 10, 10), ImageSize(100, 100))

    @given(
        w=st.integers(1, 4000),
        h=st.integers(1, 4000),
        data=st.data(),
        k=st.integers(1, 7),
    )
    @settings(max_examples=200, deadline=None)
    def test_scale_invariance(self, w, h, data, k):
        x0 = data.draw(st.integers(0, w - 1))
        x1 = data.draw(st.integers(x0 + 1, w))
        y0 = data.draw(st.integers(0, h - 1))
        y1 = data.draw(st.integers(y0 + 1, h))
        box = PixelBox(x0, y0, x1, y1)
        scaled = PixelBox(k * x0, k * y0, k * x1, k * y1)
        assert normalize_box(box, ImageSize(w, h)) == normalize_box(scaled, ImageSize(k * w, k * h))

    @given(w=st.integers(1, 2000), h=st.integers(1, 2000), data=st.data())
    @settings(max_examples=200, deadline=None)
    def test_matches_rational_oracle(self, w, h, data):
        x0 = data.draw(st.integers(0, w - 1))
        x1 = data.draw(st.integers(x0 + 1, w))
        y0 = data.draw(st.integers(0, h - 1))
        y1 = data.draw(st.integers(y0 + 1, h))
        got = normalize_box(PixelBox(x0, y0, x1, y1), ImageSize(w, h))
        want = oracle_normalize((x0, y0, x1, y1), (w, h, w, h))
        assert (got.x_left, got.y_top, got.x_right, got.y_bottom) == want


class TestDenormalize:
    def test_exact_inverse(self):
        assert denormalize_box(NormalizedBox(25, 10, 75, 50), ImageSize(1000, 1000)) == PixelBox(
            250, 100, 750, 500
        )

    def test_full_image(self):
        assert denormalize_box(NormalizedBox(0, 0, 100, 100), ImageSize(448, 448)) == PixelBox(
            0, 0, 448, 448
        )

    def test_rational_values_448(self):
        got = denormalize_box(NormalizedBox(31, 13, 92, 64), ImageSize(448, 448))
        assert got.x_left == pytest.approx(138.88, abs=1e-9)
        assert got.y_top == pytest.approx(58.24, abs=1e-9)
        assert got.x_right == pytest.approx(412.16, abs=1e-9)
        assert got.y_bottom == pytest.approx(286.72, abs=1e-9)

    def test_degenerate_after_mapping(self):
        with pytest.raises(DegenerateBoxError):
            denormalize_box(NormalizedBox(50, 10, 50, 60), ImageSize(100, 100))

    @given(w=st.integers(100, 3000), h=st.integers(100, 3000), data=st.data())
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_half_cell_bound(self, w, h, data):
        # extent/200 rounding slack + half a grid cell of quantization.
        x0 = data.draw(st.integers(0, w - 1))
        x1 = data.draw(st.integers(x0 + 1, w))
        y0 = data.draw(st.integers(0, h - 1))
        y1 = data.draw(st.integers(y0 + 1, h))
        box = PixelBox(x0, y0, x1, y1)
        norm = normalize_box(box, ImageSize(w, h))
        if norm.x_left == norm.x_right or norm.y_top == norm.y_bottom:
            return  # quantized away; nothing to invert
        back = denormalize_box(norm, ImageSize(w, h))
        for got, want, extent in (
            (back.x_left, box.x_left, w),
            (back.x_right, box.x_right, w),
            (back.y_top, box.y_top, h),
            (back.y_bottom, box.y_bottom, h),
        ):
            assert abs(got - want) <= extent / 200 + 0.5 * extent / 100 + 1e-9


class TestSerialize:
    def test_table_row_box(self):
        assert serialize_box(NormalizedBox(56, 16, 84, 58)) == "{<56><16><84><58>}"

    def test_boundary_values(self):
        assert serialize_box(NormalizedBox(0, 0, 100, 100)) == "{<0><0><100><100>}"

    def test_from_normalize_example(self):
        assert serialize_box(NormalizedBox(31, 13, 92, 64)) == "{<31><13><92><64>}"


class TestParseSpans:
    def test_single_span_with_phrase(self):
        spans, malformed = parse_spans("pneumonia {<56><16><84><58>}")
        assert malformed == 0
        assert len(spans) == 1
        assert spans[0].phrase == "pneumonia"
        assert spans[0].box == NormalizedBox(56, 16, 84, 58)

    def test_no_spans(self):
        assert parse_spans("no finding") == ([], 0)

    def test_malformed_counted_not_repaired(self):
        spans, malformed = parse_spans("a {<10><10><5><5>} b {<1><2><3><4>}")
        assert malformed == 1
        assert len(spans) == 1
        assert spans[0].box == NormalizedBox(1, 2, 3, 4)
        assert spans[0].phrase == "b"

    def test_out_of_range_is_malformed(self):
        spans, malformed = parse_spans("{<0><0><150><50>}")
        assert spans == [] and malformed == 1

    def test_char_range_offsets(self):
        text = "xy {<1><2><3><4>} tail"
        spans, _ = parse_spans(text)
        start, end = spans[0].char_range
        assert text[start:end] == "{<1><2><3><4>}"

    def test_phrase_stays_on_same_line(self):
        spans, _ = parse_spans("first line\n  {<1><2><3><4>}")
        assert spans[0].phrase is None

    def test_multiple_spans_in_order(self):
        spans, malformed = parse_spans("a {<1><1><2><2>} and b {<3><3><4><4>}")
        assert malformed == 0
        assert [s.phrase for s in spans] == ["a", "and b"]

    @given(
        st.tuples(st.integers(0, 100), st.integers(0, 100), st.integers(0, 100), st.integers(0, 100))
    )
    @settings(max_examples=300, deadline=None)
    def test_serialize_parse_roundtrip(self, raw):
        a, b, c, d = raw
        box = NormalizedBox(min(a, c), min(b, d), max(a, c), max(b, d))
        spans, malformed = parse_spans(serialize_box(box))
        assert malformed == 0
        assert len(spans) == 1
        assert spans[0].box == box

    @given(st.text(max_size=300))
    @settings(max_examples=500, deadline=None)
    def test_total_on_arbitrary_text(self, text):
        spans, malformed = parse_spans(text)
        assert malformed >= 0
        for span in spans:
            assert 0 <= span.box.x_left <= span.box.x_right <= 100
            assert 0 <= span.box.y_top <= span.box.y_bottom <= 100

    def test_total_on_random_bytes(self):
        rng = random.Random(0)
        for _ in range(2000):
            blob = bytes(rng.randrange(256) for _ in range(rng.randrange(120)))
            parse_spans(blob.decode("latin-1"))
            parse_spans(blob.decode("utf-8", errors="replace"))
