"""Invariant checks shared by ``ssbsn verify`` and the test suite.

Each check returns a :class:`Check`; a suite is a list of them.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .analysis import dynamic_flop_count, ss_flops
from .data import read_ppm, write_ppm
from .gradcheck import check_gradients
from .layers import (Conv1x1, Conv2d, DConvBlock, FeatureHead, FeatureTail, MaskedConv2d,
                     SSAttention, SSBlock)
from .network import ABLATION_AXES, NetworkConfig, SSBSN, ablation_variant, blind_spot_probe
from .network import lattice_mask, receptive_field_probe
from .pd import pd_down, pd_up
from .tensor import Tensor


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def run_check(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as err:  # a crashing check is a failing check
        ok, detail = False, f"{type(err).__name__}: {err}"
    return Check(name, bool(ok), detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# blind spot


ABLATION_GRID = [dict(zip(ABLATION_AXES, bits))
                 for bits in itertools.product((True, False), repeat=len(ABLATION_AXES))]


def _is_live(model: SSBSN, size: int = 24) -> bool:
    # a network whose output ignores its input passes any blind-spot check
    # vacuously; require nearly every output pixel to react to an input change
    x = np.random.default_rng(0).uniform(size=(2, 3, size, size))
    with T.precision(np.float64), T.no_grad():
        out = model(Tensor(x)).data
    moved = np.any(out[0] != out[1], axis=0)
    return bool(moved.mean() >= 0.98)


def probe_network(seed: int, channels: int = 8) -> SSBSN:
    """Small random network; ``seed`` also picks the ablation variant and m.

    1-D parameters (biases, norm affines) get random offsets; draws whose
    output does not depend on the input are discarded and redrawn.
    """
    rng = np.random.default_rng(seed)
    base = NetworkConfig(channels=channels, m=int(rng.integers(1, 4)), seed=seed)
    config = ablation_variant(base, ABLATION_GRID[seed % len(ABLATION_GRID)])
    for _ in range(20):
        model = SSBSN(config, rng_seed=int(rng.integers(2**31)))
        for p in model.parameters():
            if p.ndim == 1:
                p.data = p.data + rng.normal(0, 0.1, size=p.shape).astype(p.data.dtype)
        if _is_live(model):
            return model
    raise RuntimeError(f"no live probe network for seed {seed}")


def tamper_mask(model: SSBSN) -> None:
    """Re-open the centre tap of every masked convolution (negative control)."""
    for path in model.paths:
        path.masked.mask = np.ones_like(path.masked.mask)
        c = path.masked.k // 2
        path.masked.weight.data[:, :, c, c] += 0.5


@dataclass
class BlindSpotResult:
    max_self_gradient: float
    max_fd_change: float
    probes: int
    live_probes: int = 0  # probes where out(p) depends on at least one input pixel


def blind_spot_sweep(seeds, pixels_per_model: int = 10, size: int = 24, fd_step: float = 1e-3,
                     tamper: bool = False, fd_pixels: Optional[int] = None) -> BlindSpotResult:
    """Largest |d out(p) / d in(p)| and |out(p; x +- step e_p) - out(p; x)| seen."""
    grad_max, fd_max, probes, live = 0.0, 0.0, 0, 0
    with T.precision(np.float64):
        for seed in seeds:
            model = probe_network(seed)
            if tamper:
                tamper_mask(model)
            rng = np.random.default_rng(10_000 + seed)
            image = rng.uniform(size=(1, 3, size, size))
            pixels = [tuple(int(v) for v in rng.integers(0, size, 2)) for _ in range(pixels_per_model)]
            with T.no_grad():
                base = model(Tensor(image)).data
            for i, (r, c) in enumerate(pixels):
                grad = blind_spot_probe(model, image, (r, c))
                grad_max = max(grad_max, float(np.abs(grad[0, :, r, c]).max()))
                probes += 1
                live += bool(np.any(grad))
                if fd_pixels is not None and i >= fd_pixels:
                    continue
                for sign in (1, -1):
                    bumped = image.copy()
                    bumped[0, :, r, c] += sign * fd_step
                    with T.no_grad():
                        out = model(Tensor(bumped)).data
                    fd_max = max(fd_max, float(np.abs(out[0, :, r, c] - base[0, :, r, c]).max()))
    return BlindSpotResult(grad_max, fd_max, probes, live)


# ---------------------------------------------------------------------------
# receptive fields


def dilated_support_matches(depth: int, dilation: int, size: int = 41, channels: int = 2) -> bool:
    """Stack of ``depth`` dilated 3x3 convs reaches exactly the dilation lattice of radius depth."""
    rng = np.random.default_rng(depth * 10 + dilation)
    layers = [Conv2d(channels, channels, 3, dilation, rng) for _ in range(depth)]
    centre = (size // 2, size // 2)
    with T.precision(np.float64):
        support = receptive_field_probe(layers, (1, channels, size, size), centre, rng)
    return bool(np.array_equal(support, lattice_mask((size, size), centre, dilation, depth)))


def attention_support_on_lattice(dhat: int, size: int = 24, channels: int = 4) -> bool:
    rng = np.random.default_rng(dhat)
    attn = SSAttention(channels, dhat, rng=rng)
    ok = True
    with T.precision(np.float64):
        for _ in range(3):
            pixel = tuple(int(v) for v in rng.integers(0, size, 2))
            support = receptive_field_probe([attn], (1, channels, size, size), pixel, rng)
            ok &= bool(np.all(support <= lattice_mask((size, size), pixel, dhat)))
            ok &= bool(support[pixel])
    return ok


# ---------------------------------------------------------------------------
# suites


def _gradient_checks(trials: int = 1) -> tuple[bool, str]:
    errors = gradient_fidelity(trials)
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    return worst < 1e-4, f"{len(errors)} ops/layers x {trials} trials, worst {worst:.2e} ({name})"


def _randomize_vectors(module, rng) -> None:
    # zero biases put ReLU inputs exactly on the kink; move them off it
    for p in module.parameters():
        if p.ndim == 1:
            p.data = p.data + rng.normal(0, 0.1, size=p.shape)


def _op_cases(rng) -> dict:
    """name -> (fn, inputs) for one random draw of every primitive."""
    def arr(*shape):
        return Tensor(rng.normal(size=shape))

    def weighted(fn, shape):
        sel = rng.normal(size=shape)
        return lambda: T.tsum(T.mul(fn(), sel))

    a, b = arr(2, 3, 4, 4), arr(2, 3, 4, 4)
    x, wconv, bias = arr(1, 3, 7, 7), arr(3, 3, 3, 3), arr(3)
    m, n = arr(3, 5), arr(5, 4)
    q, k = arr(2, 6, 4), arr(2, 6, 4)
    z, nw, ns = arr(1, 4, 4, 4), arr(4), arr(4)
    g = arr(1, 2, 8, 8)
    mask = np.ones((3, 3)); mask[1, 1] = 0
    c1, c2 = arr(1, 2, 3, 3), arr(1, 3, 3, 3)
    w1, b1 = arr(4, 3), arr(4)
    return {
        "add": (weighted(lambda: T.add(a, b), a.shape), [a, b]),
        "mul": (weighted(lambda: T.mul(a, b), a.shape), [a, b]),
        "relu": (weighted(lambda: T.relu(a), a.shape), [a]),
        "abs": (weighted(lambda: T.tabs(a), a.shape), [a]),
        "sum/mean": (lambda: T.mean(T.mul(T.tsum(a, axis=1), T.tsum(b, axis=1))), [a, b]),
        "matmul": (weighted(lambda: T.matmul(m, n), (3, 4)), [m, n]),
        "conv2d d=1": (weighted(lambda: T.conv2d(x, wconv, bias, 1), (1, 3, 7, 7)), [x, wconv, bias]),
        "conv2d d=2": (weighted(lambda: T.conv2d(x, wconv, bias, 2), (1, 3, 7, 7)), [x, wconv, bias]),
        "conv2d d=3": (weighted(lambda: T.conv2d(x, wconv, bias, 3), (1, 3, 7, 7)), [x, wconv, bias]),
        "masked conv2d": (weighted(lambda: T.conv2d(x, wconv, bias, 1, mask=mask), (1, 3, 7, 7)),
                          [x, wconv, bias]),
        "conv1x1": (weighted(lambda: T.conv1x1(x, w1, b1), (1, 4, 7, 7)), [x, w1, b1]),
        "softmax": (weighted(lambda: T.softmax_rows(q), q.shape), [q]),
        "cosine": (weighted(lambda: T.cosine_matrix(q, k), (2, 6, 6)), [q, k]),
        "layer norm": (weighted(lambda: T.layer_norm_channels(z, nw, ns), z.shape), [z, nw, ns]),
        "grid partition": (weighted(lambda: T.grid_merge(T.grid_partition(T.scale(g, 1.5), 4)),
                                    g.shape), [g]),
        "pd_down": (weighted(lambda: pd_down(g, 2), (4, 2, 4, 4)), [g]),
        "concat": (weighted(lambda: T.concat([c1, c2], axis=1), (1, 5, 3, 3)), [c1, c2]),
        "transpose": (weighted(lambda: T.transpose(a, (0, 2, 3, 1)), (2, 4, 4, 3)), [a]),
    }


def _layer_cases(rng) -> dict:
    """name -> (module, input shape) for one random draw of every layer type."""
    cases = {
        "Conv2d": (Conv2d(3, 3, 3, 2, rng), (1, 3, 6, 6)),
        "MaskedConv2d k=3": (MaskedConv2d(3, 3, 3, rng), (1, 3, 6, 6)),
        "MaskedConv2d k=5": (MaskedConv2d(3, 3, 5, rng), (1, 3, 6, 6)),
        "Conv1x1": (Conv1x1(3, 4, rng), (1, 3, 5, 5)),
        "DConvBlock": (DConvBlock(3, 2, True, rng), (1, 3, 6, 6)),
        "SSAttention": (SSAttention(4, 4, rng=rng), (1, 4, 8, 8)),
        "SSAttention split qk": (SSAttention(4, 4, qk_integration=False, rng=rng), (1, 4, 8, 8)),
        "SSAttention dot product": (SSAttention(4, 2, cosine_similarity=False, rng=rng),
                                    (1, 4, 4, 4)),
        "SSBlock": (SSBlock(SSAttention(4, 4, rng=rng), DConvBlock(4, 2, True, rng)), (1, 4, 8, 8)),
        "FeatureHead": (FeatureHead(4, 3, rng), (1, 3, 5, 5)),
        "FeatureTail": (FeatureTail(4, 2, 3, rng), (1, 8, 5, 5)),
    }
    for module, _ in cases.values():
        _randomize_vectors(module, rng)
    return cases


def gradient_fidelity(trials: int = 20, step: float = 1e-6, network_trials: Optional[int] = None,
                      entries: int = 6) -> dict:
    """Worst autodiff-vs-central-difference relative error per op, layer and tiny network.

    Each trial redraws inputs and parameters; ``entries`` random entries of
    every tensor are perturbed per trial.
    """
    worst: dict = {}
    with T.precision(np.float64):
        for trial in range(trials):
            rng = np.random.default_rng([7, trial])
            for name, (fn, inputs) in _op_cases(rng).items():
                err = check_gradients(fn, inputs, step, entries, rng)
                worst[f"op {name}"] = max(worst.get(f"op {name}", 0.0), err)
            for name, (module, shape) in _layer_cases(rng).items():
                x = Tensor(rng.normal(size=shape))
                out_shape = module(x).shape
                sel = rng.normal(size=out_shape)
                err = check_gradients(lambda: T.tsum(T.mul(module(x), sel)),
                                      [x] + module.parameters(), step, entries, rng)
                worst[f"layer {name}"] = max(worst.get(f"layer {name}", 0.0), err)
        for trial in range(trials if network_trials is None else network_trials):
            rng = np.random.default_rng([8, trial])
            model = SSBSN(NetworkConfig(channels=4, m=1, seed=trial))
            _randomize_vectors(model, rng)
            x = Tensor(rng.uniform(size=(1, 3, 12, 12)))
            sel = rng.normal(size=(1, 3, 12, 12))
            params = model.parameters()
            chosen = [params[i] for i in rng.choice(len(params), size=8, replace=False)]
            err = check_gradients(lambda: T.tsum(T.mul(model(x), sel)), [x] + chosen, step,
                                  entries // 2, rng)
            worst["network C=4 m=1"] = max(worst.get("network C=4 m=1", 0.0), err)
    return worst


def _bijections() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 60, 60))
    ok = all(np.array_equal(pd_up(pd_down(x, s), s), x) for s in (1, 2, 3, 5))
    for d in (1, 2, 4, 6):
        t = Tensor(x[:, :, :48, :48])
        ok &= np.array_equal(T.grid_merge(T.grid_partition(t, d)).data, t.data)
    return ok, "pd and grid round trips"


def _ppm_roundtrip() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(2)
    raw = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    blob = b"P6\n7 5\n255\n" + raw.tobytes()
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "a.ppm", Path(tmp) / "b.ppm"
        src.write_bytes(blob)
        write_ppm(read_ppm(src), dst)
        return dst.read_bytes() == blob, "P6 save(load) byte identity"


def _flop_formulas(sizes=((24, 24), (48, 48)), channels=(8,), dhats=(4, 6)) -> tuple[bool, str]:
    bad = []
    with T.precision(np.float64):
        for (h, w), c, d in itertools.product(sizes, channels, dhats):
            counted = dynamic_flop_count(SSAttention(c, d), (1, c, h, w)).total("attention")
            if counted != ss_flops(h, w, c, d):
                bad.append((h, w, c, d))
    return not bad, f"mismatches: {bad}" if bad else "instrumented == closed form"


def _receptive_fields() -> tuple[bool, str]:
    ok = all(dilated_support_matches(l, d) for l in (1, 2, 3) for d in (2, 3))
    ok &= all(attention_support_on_lattice(d) for d in (4, 6))
    return ok, "dilated lattice equality, attention on grid lattice"


def quick_suite() -> list[Check]:
    checks = [
        run_check("gradients", _gradient_checks),
        run_check("blind spot (8 models x 3 pixels)",
                  lambda: _blind(range(8), 3)),
        run_check("blind spot negative control", lambda: _negative_control(range(2))),
        run_check("receptive fields", _receptive_fields),
        run_check("pd/grid bijections", _bijections),
        run_check("ppm round trip", _ppm_roundtrip),
        run_check("flop formulas", _flop_formulas),
    ]
    return checks


def full_suite() -> list[Check]:
    checks = quick_suite()
    checks.append(run_check("gradients (20 trials)", lambda: _gradient_checks(20)))
    checks.append(run_check("blind spot sweep (50 seeds x 10 pixels)",
                            lambda: _blind(range(50), 10, fd_pixels=2)))
    checks.append(run_check("flop formulas (C=32)",
                            lambda: _flop_formulas(channels=(8, 32))))
    return checks


def _blind(seeds, pixels, fd_pixels=None) -> tuple[bool, str]:
    res = blind_spot_sweep(seeds, pixels, fd_pixels=fd_pixels)
    ok = (res.max_self_gradient == 0.0 and res.max_fd_change < 1e-9
          and res.live_probes >= 0.9 * res.probes)
    return ok, (f"{res.probes} probes ({res.live_probes} live), "
                f"max |grad| {res.max_self_gradient:.3g}, "
                f"max fd change {res.max_fd_change:.3g}")


def _negative_control(seeds) -> tuple[bool, str]:
    res = blind_spot_sweep(seeds, 2, tamper=True, fd_pixels=0)
    return res.max_self_gradient > 0, f"tampered max |grad| {res.max_self_gradient:.3g} (must be > 0)"


def format_matrix(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.seconds:6.1f}s  {c.detail}"
             for c in checks]
    return "\n".join(lines)
