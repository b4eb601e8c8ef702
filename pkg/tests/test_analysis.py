from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssbsn.analysis import (
    CSV_HEADER, AttentionOverlay, NotAnSSBlock, attention_row, dynamic_flop_count,
    export_attention_overlay, flop_ratio_report, flop_report, motif_repeats, msa_flops,
    reports_csv, select_top, ss_flops,
)
from ssbsn.data import read_ppm
from ssbsn.layers import MaskedConv2d, SSAttention
from ssbsn.network import NetworkConfig, SSBSN


def test_msa_examples():
    assert msa_flops(2, 2, 1) == 48
    assert msa_flops(5, 7, 6) == 2 * msa_flops(5, 7, 3)
    assert msa_flops(0, 0, 8) == 0


def test_ss_examples():
    assert ss_flops(24, 24, 1, 4) == 576 + 2 * 576 ** 2 // 16 == 42048
    # dhat = 1: same quadratic term, a quarter of the linear term
    for h, w, c in [(3, 5, 2), (8, 8, 4)]:
        hw = h * w
        assert msa_flops(h, w, c) - ss_flops(h, w, c, 1) == 3 * hw * c
    assert isinstance(ss_flops(128, 128, 8, 6), Fraction)
    with pytest.raises(ValueError):
        ss_flops(4, 4, 1, 0)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), c=st.integers(1, 64), d=st.integers(1, 8))
def test_ss_quadratic_term_scales_with_inverse_square(h, w, c, d):
    hw = h * w
    q1 = Fraction(ss_flops(h, w, c, 1)) - hw * c
    qd = Fraction(ss_flops(h, w, c, d)) - hw * c
    assert qd * d * d == q1
    assert flop_report(h, w, c, d).ratio <= flop_report(h, w, c, max(1, d - 1)).ratio
    assert 0 < flop_report(h, w, c, d).ratio <= 1


@pytest.mark.parametrize("d,limit", [(4, 1 / 16), (6, 1 / 36)])
def test_asymptotic_ratio(d, limit):
    r = flop_report(256, 256, 32, d).ratio
    assert abs(r - limit) / limit < 1e-3


def test_two_path_mean_at_large_resolution():
    summary = flop_ratio_report([(256, 256, 32)])
    assert [r.dhat for r in summary.reports] == [4, 6]
    assert summary.means[(256, 256, 32)] == pytest.approx((1 / 16 + 1 / 36) / 2, rel=1e-3)


def test_reports_csv():
    text = reports_csv(flop_ratio_report([(24, 24, 8)]).reports)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("24,24,8,4,")
    assert len(lines) == 3


@pytest.mark.parametrize("h,w,c,d", [(24, 24, 8, 4), (24, 24, 8, 6), (48, 48, 32, 4),
                                     (48, 36, 8, 6), (12, 24, 2, 2)])
def test_instrumented_attention_equals_closed_form(f64, h, w, c, d):
    counter = dynamic_flop_count(SSAttention(c, d), (1, c, h, w))
    assert counter.total("attention") == ss_flops(h, w, c, d)


def test_separate_qk_costs_one_more_transform(f64):
    shared = dynamic_flop_count(SSAttention(4, 4), (1, 4, 8, 8)).total("attention")
    split = dynamic_flop_count(SSAttention(4, 4, qk_integration=False),
                               (1, 4, 8, 8)).total("attention")
    assert split - shared == 64 * 4


def test_masked_conv_counts_eight_taps(f64):
    c, h, w = 3, 5, 6
    counter = dynamic_flop_count(MaskedConv2d(c, c, 3), (1, c, h, w))
    assert counter.total("conv") == 2 * 8 * c * c * h * w


def test_zero_size_input_counts_nothing():
    assert dynamic_flop_count(SSAttention(4, 4), (1, 4, 0, 0)).total() == 0


def test_network_attention_count_is_sum_of_blocks(f64):
    model = SSBSN(NetworkConfig(channels=4, m=2))
    counter = dynamic_flop_count(model, (1, 3, 24, 24))
    expected = sum(ss_flops(24, 24, 4, b.dhat) for b in model.ss_blocks())
    assert counter.total("attention") == expected
    assert counter.total("conv") > 0


@pytest.fixture
def model():
    return SSBSN(NetworkConfig(channels=4, m=2, seed=4))


def test_attention_row_is_a_softmax_row_on_the_lattice(f64, model, rng):
    img = rng.uniform(size=(1, 3, 24, 24))
    layer = 8  # deepest block of the first path
    ov = attention_row(model, img, layer, (5, 7))
    assert ov.dhat == 4 and len(ov.group) == 36
    assert sum(w for _, w in ov.group) == pytest.approx(1.0, abs=1e-6)
    assert all((x - 5) % 4 == 0 and (y - 7) % 4 == 0 for (x, y), _ in ov.group)
    assert ((5, 7) in [p for p, _ in ov.group])


def test_attention_row_errors(model, rng):
    img = rng.uniform(size=(1, 3, 24, 24))
    with pytest.raises(NotAnSSBlock):
        attention_row(model, img, 0, (1, 1))
    with pytest.raises(NotAnSSBlock):
        attention_row(model, img, 99, (1, 1))
    with pytest.raises(ValueError):
        attention_row(model, img, 8, (30, 1))


def test_attention_row_pads_odd_sizes(f64, model, rng):
    ov = select_top(attention_row(model, rng.uniform(size=(1, 3, 20, 17)), 17, (3, 4)), 50,
                    shape=(20, 17))
    assert all(x < 17 and y < 20 for (x, y), _ in ov.selected)


def test_select_top_ties_and_threshold():
    group = [((0, 0), 0.25), ((4, 0), 0.25), ((0, 4), 0.4), ((4, 4), 0.1)]
    ov = select_top(AttentionOverlay((0, 0), 4, group, []), 3)
    assert [p for p, _ in ov.selected] == [(0, 4), (0, 0), (4, 0)]
    ov = select_top(AttentionOverlay((0, 0), 4, group, []), 4, threshold=0.2)
    assert len(ov.selected) == 3


def test_single_pixel_group():
    ov = select_top(AttentionOverlay((2, 3), 4, [((2, 3), 1.0)], []), 4)
    assert ov.selected == [((2, 3), 1.0)]


def test_motif_repeats():
    sel = [((2, 2), 0.4), ((14, 2), 0.3), ((6, 2), 0.2), ((2, 26), 0.1)]
    ov = AttentionOverlay((2, 2), 4, sel, sel)
    assert motif_repeats(ov, 12) == 2
    assert motif_repeats(ov, 12, include_query=True) == 3


def test_export_writes_image_and_sorted_sidecar(f64, model, rng, tmp_path):
    img = rng.uniform(size=(1, 3, 24, 24))
    before = img.copy()
    out = tmp_path / "map.ppm"
    ov, rendered = export_attention_overlay(model, img, 8, (5, 7), k=4, out_path=out)
    assert read_ppm(out).shape == (1, 3, 24, 24)
    lines = (tmp_path / "map.txt").read_text().splitlines()
    assert len(lines) == 4
    weights = [float(ln.split()[2]) for ln in lines]
    assert weights == sorted(weights, reverse=True)
    np.testing.assert_array_equal(rendered[0, :, 7, 5], [1.0, 0.0, 0.0])
    assert np.array_equal(img, before)
    yellow = (rendered[0, 0] == 1) & (rendered[0, 1] == 1) & (rendered[0, 2] == 0)
    assert yellow.any()
