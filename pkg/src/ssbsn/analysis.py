"""Attention cost accounting and attention-map export.

Costs follow the usual convention of one multiply-accumulate = 2 FLOPs.  For
plain multi-head self-attention over ``h*w`` tokens of width ``C``:

    MSA = 4 hwC + 2 (hw)^2 C

and for grid self-similarity attention with grid ``dhat`` and one shared
query/key transform:

    SS = hwC + 2 (hw)^2 C / dhat^2
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import write_ppm
from .layers import Module, SSBlock
from .pd import pad_to_multiple
from .tensor import Tensor

Count = Union[int, Fraction]


def _exact(value: Fraction) -> Count:
    return value.numerator if value.denominator == 1 else value


def msa_flops(h: int, w: int, channels: int) -> int:
    hw = h * w
    return 4 * hw * channels + 2 * hw * hw * channels


def ss_flops(h: int, w: int, channels: int, dhat: int) -> Count:
    """Exact SS-Attention cost; a Fraction when ``dhat`` does not divide the grid."""
    if dhat < 1:
        raise ValueError("dhat must be >= 1")
    hw = h * w
    return _exact(hw * channels + Fraction(2 * hw * hw * channels, dhat * dhat))


@dataclass(frozen=True)
class FlopReport:
    h: int
    w: int
    channels: int
    dhat: int
    msa: int
    ss: Count

    @property
    def ratio(self) -> float:
        return float(Fraction(self.ss) / self.msa) if self.msa else float("nan")

    def row(self) -> list:
        ss = self.ss if isinstance(self.ss, int) else f"{float(self.ss):.4f}"
        return [self.h, self.w, self.channels, self.dhat, self.msa, ss, f"{self.ratio:.6f}"]


def flop_report(h: int, w: int, channels: int, dhat: int) -> FlopReport:
    return FlopReport(h, w, channels, dhat, msa_flops(h, w, channels), ss_flops(h, w, channels, dhat))


@dataclass
class RatioSummary:
    reports: list[FlopReport]
    means: dict = field(default_factory=dict)  # (h, w, C) -> mean ratio over grids


def flop_ratio_report(configs: Iterable[tuple[int, int, int]],
                      dhats: Sequence[int] = (4, 6)) -> RatioSummary:
    """One report per (h, w, C, dhat) plus the across-path mean per resolution."""
    summary = RatioSummary([])
    for h, w, c in configs:
        rows = [flop_report(h, w, c, d) for d in dhats]
        summary.reports.extend(rows)
        summary.means[(h, w, c)] = float(np.mean([r.ratio for r in rows]))
    return summary


CSV_HEADER = ["h", "w", "C", "dhat", "msa", "ss", "ratio"]


def reports_csv(reports: Iterable[FlopReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_table(summary: RatioSummary) -> str:
    lines = [f"{'h':>6} {'w':>6} {'C':>5} {'dhat':>5} {'MSA':>22} {'SS':>22} {'ratio':>9}"]
    for r in summary.reports:
        ss = r.ss if isinstance(r.ss, int) else f"{float(r.ss):.1f}"
        lines.append(f"{r.h:>6} {r.w:>6} {r.channels:>5} {r.dhat:>5} {r.msa:>22} {ss:>22} "
                     f"{100 * r.ratio:>8.3f}%")
    for (h, w, c), mean in summary.means.items():
        lines.append(f"mean over grids at {h}x{w}, C={c}: {100 * mean:.3f}%")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# instrumented counts


def dynamic_flop_count(model: Module, input_shape: tuple, seed: int = 0) -> T.FlopCounter:
    """Run one forward pass on random data and return the per-scope counts."""
    if int(np.prod(input_shape)) == 0:
        return T.FlopCounter()
    x = Tensor(np.random.default_rng(seed).normal(size=input_shape))
    with T.count_flops() as counter, T.no_grad():
        model(x)
    return counter


# ---------------------------------------------------------------------------
# attention maps


class NotAnSSBlock(ValueError):
    pass


@dataclass
class AttentionOverlay:
    """Attention of one query pixel over its grid group; pixels are (x, y) = (col, row)."""

    query: tuple[int, int]
    dhat: int
    group: list[tuple[tuple[int, int], float]]
    selected: list[tuple[tuple[int, int], float]]

    def sidecar(self) -> str:
        return "".join(f"{x} {y} {w:.8g}\n" for (x, y), w in self.selected)


def _ranked(entries, width):
    return sorted(entries, key=lambda e: (-e[1], e[0][1] * width + e[0][0]))


def attention_row(model, image: np.ndarray, layer: int, pixel: tuple[int, int]) -> AttentionOverlay:
    """Softmax row of ``pixel`` = (x, y) at SS-Block ``layer`` for a plain forward pass."""
    layers = model.layers
    if not 0 <= layer < len(layers):
        raise NotAnSSBlock(f"layer {layer} out of range (network has {len(layers)} modules)")
    block = layers[layer]
    if not isinstance(block, SSBlock):
        raise NotAnSSBlock(f"layer {layer} is a {type(block).__name__}, not an SS-Block")
    x, y = pixel
    h, w = image.shape[2:]
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"pixel {pixel} outside the {w}x{h} image")
    padded = pad_to_multiple(image[:1], model.grid_lcm)
    pw = padded.shape[3]
    attn = block.attn
    attn.capture = True
    try:
        with T.no_grad():
            model(Tensor(padded))
        weights = attn.last_attention[0]
    finally:
        attn.capture = False
        attn.last_attention = None
    d = attn.dhat
    group, index = T.locate_in_grid(y, x, d, pw)
    row = weights[group, index].astype(np.float64)
    row0, col0 = divmod(group, d)
    entries = []
    for j, wgt in enumerate(row):
        i, jj = divmod(j, pw // d)
        entries.append(((col0 + jj * d, row0 + i * d), float(wgt)))
    return AttentionOverlay((x, y), d, entries, [])


def select_top(overlay: AttentionOverlay, k: int, threshold: float = 0.0,
               shape: Optional[tuple[int, int]] = None) -> AttentionOverlay:
    """Keep the ``k`` largest weights (ties: lowest linear index) that reach ``threshold``."""
    entries = overlay.group
    if shape is not None:
        h, w = shape
        entries = [e for e in entries if e[0][0] < w and e[0][1] < h]
    width = max(e[0][0] for e in overlay.group) + 1
    ranked = [e for e in _ranked(entries, width) if e[1] >= threshold]
    overlay.selected = ranked[:k]
    return overlay


def render_overlay(image: np.ndarray, overlay: AttentionOverlay,
                   max_radius: Optional[float] = None) -> np.ndarray:
    """Yellow rings (radius proportional to weight) over a copy of ``image``; red query dot."""
    out = np.array(image[:1], dtype=np.float64, copy=True)
    h, w = out.shape[2:]
    if not overlay.selected:
        return out
    max_radius = max_radius or max(2.0, overlay.dhat / 2)
    top = overlay.selected[0][1]
    yy, xx = np.mgrid[0:h, 0:w]
    for (x, y), wgt in overlay.selected:
        radius = max(1.0, max_radius * wgt / top) if top > 0 else 1.0
        ring = np.abs(np.hypot(xx - x, yy - y) - radius) < 0.5
        out[0, 0][ring], out[0, 1][ring], out[0, 2][ring] = 1.0, 1.0, 0.0
    qx, qy = overlay.query
    out[0, :, qy, qx] = (1.0, 0.0, 0.0)
    return out


def export_attention_overlay(model, image: np.ndarray, layer: int, pixel: tuple[int, int],
                             k: int, out_path=None, threshold: float = 0.0):
    """Top-k attention overlay for ``pixel``; optionally writes ``out_path`` (P6) and a sidecar.

    The sidecar sits next to the image with suffix ``.txt`` and lists
    ``x y weight`` in descending weight.
    """
    overlay = select_top(attention_row(model, image, layer, pixel), k, threshold,
                         image.shape[2:])
    rendered = render_overlay(image, overlay)
    if out_path is not None:
        out_path = Path(out_path)
        write_ppm(rendered, out_path)
        out_path.with_suffix(".txt").write_text(overlay.sidecar())
    return overlay, rendered


def motif_repeats(overlay: AttentionOverlay, period: int, include_query: bool = False) -> int:
    """How many selected pixels sit a whole number of ``period`` steps from the query."""
    qx, qy = overlay.query
    hits = 0
    for (x, y), _ in overlay.selected:
        if (x, y) == (qx, qy) and not include_query:
            continue
        if (x - qx) % period == 0 and (y - qy) % period == 0:
            hits += 1
    return hits
