"""Finite-difference audit of every differentiable operation in the package.

Each case draws a fresh seeded input (and, for layers, fresh weights), reduces
the output to a scalar with random weights so no coordinate cancels, and
compares the taped gradient against central differences.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .anchors import FAMILIES, ExtractorParams, extract_all
from .anchors.families import FAMILY_FUNCS
from .correction import (
    BlockContext,
    CorrectionBundle,
    CorrectionHead,
    apply_correction,
    assemble_views,
    correction_regularizers,
    predict_correction,
)
from .tensor import Tensor, dft_magnitude, grad_check, ops, param_grad_check, rdft

MODULES = ("tensor", "anchors", "correction", "model", "loss")


@dataclass(frozen=True)
class GradCase:
    module: str
    name: str
    run: Callable[[np.random.Generator], float]


@dataclass
class GradResult:
    module: str
    name: str
    n_inputs: int
    max_error: float
    seconds: float

    def passed(self, tol: float) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < tol)


@dataclass
class GradReport:
    results: list[GradResult]
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tol) for r in self.results)

    def to_json(self) -> dict:
        return {"tolerance": self.tol, "passed": self.passed,
                "operations": [{**dataclasses.asdict(r), "passed": r.passed(self.tol)} for r in self.results]}

    def to_text(self) -> str:
        width = max(len(f"{r.module}.{r.name}") for r in self.results)
        lines = [f"{'operation':<{width}}  inputs  max_rel_error  status"]
        for r in self.results:
            status = "ok" if r.passed(self.tol) else "FAIL"
            lines.append(f"{r.module + '.' + r.name:<{width}}  {r.n_inputs:>6}  {r.max_error:13.3e}  {status}")
        lines.append(f"{sum(r.passed(self.tol) for r in self.results)}/{len(self.results)} operations below {self.tol:g}")
        return "\n".join(lines)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _weighted(fn, rng):
    """sum(fn(x) * w) with w drawn once from ``rng`` for the output shape."""
    cache = {}

    def loss(t):
        out = fn(t)
        outs = out if isinstance(out, tuple) else (out,)
        if "w" not in cache:
            cache["w"] = [rng.normal(size=o.shape) for o in outs]
        total = ops.sum(outs[0] * cache["w"][0])
        for o, w in zip(outs[1:], cache["w"][1:]):
            total = total + ops.sum(o * w)
        return total

    return loss


def _input_case(module, name, make_x, fn, max_elements=None):
    def run(rng):
        x = make_x(rng)
        return grad_check(_weighted(fn, rng), x, max_elements=max_elements, seed=int(rng.integers(1 << 31)))

    return GradCase(module, name, run)


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _pack(*shapes):
    """Split a flat vector into tensors of the given shapes."""
    sizes = [int(np.prod(s)) for s in shapes]

    def split(t):
        parts, pos = [], 0
        for s, n in zip(shapes, sizes):
            parts.append(ops.reshape(t[pos:pos + n], s))
            pos += n
        return parts

    return sum(sizes), split


# -- tensor ops --------------------------------------------------------------

def _tensor_cases() -> list[GradCase]:
    n = lambda shape: (lambda rng: rng.normal(size=shape))
    pos = lambda shape: (lambda rng: rng.uniform(0.3, 2.0, size=shape))
    size2, split2 = _pack((3, 4), (3, 4))
    size_b, split_b = _pack((3, 4), (4,))
    size_mm, split_mm = _pack((2, 3, 4), (4, 5))
    size_cv, split_cv = _pack((2, 3, 16), (4, 3, 5))
    size_dw, split_dw = _pack((2, 3, 16), (3, 5))
    mask = np.array([[True, False, True, False]] * 3)

    def away2(rng):
        return _away_from_zero(rng, (24,))

    cases = [
        ("add", lambda rng: rng.normal(size=size_b), lambda t: ops.add(*split_b(t))),
        ("sub", lambda rng: rng.normal(size=size2), lambda t: ops.sub(*split2(t))),
        ("mul", lambda rng: rng.normal(size=size_b), lambda t: ops.mul(*split_b(t))),
        ("div", away2, lambda t: ops.div(*split2(t))),
        ("atan2", away2, lambda t: ops.atan2(*split2(t))),
        ("hypot", away2, lambda t: ops.hypot(*split2(t))),
        ("neg", n((3, 4)), ops.neg),
        ("exp", n((3, 4)), ops.exp),
        ("log", pos((3, 4)), ops.log),
        ("log1p", pos((3, 4)), ops.log1p),
        ("sqrt", pos((3, 4)), ops.sqrt),
        ("tanh", n((3, 4)), ops.tanh),
        ("sigmoid", lambda rng: 4 * rng.normal(size=(3, 4)), ops.sigmoid),
        ("softplus", lambda rng: 4 * rng.normal(size=(3, 4)), ops.softplus),
        ("sin", n((3, 4)), ops.sin),
        ("cos", n((3, 4)), ops.cos),
        ("abs", lambda rng: _away_from_zero(rng, (3, 4)), ops.abs),
        ("power", pos((3, 4)), lambda t: ops.power(t, 2.5)),
        ("where", n((3, 4)), lambda t: ops.where(mask, ops.exp(t), ops.sin(t))),
        ("matmul", lambda rng: rng.normal(size=size_mm), lambda t: ops.matmul(*split_mm(t))),
        ("pad", n((2, 5)), lambda t: ops.pad(t, 2, 1)),
        ("conv1d", lambda rng: rng.normal(size=size_cv), lambda t: ops.conv1d(*split_cv(t), padding=2)),
        ("conv1d_strided", lambda rng: rng.normal(size=size_cv), lambda t: ops.conv1d(*split_cv(t), stride=3)),
        ("conv1d_depthwise", lambda rng: rng.normal(size=size_dw),
         lambda t: ops.conv1d(*split_dw(t), padding=1, depthwise=True)),
        ("getitem", n((4, 5)), lambda t: t[1:3, ::2]),
        ("getitem_fancy", n((4, 5)), lambda t: t[np.array([0, 2, 2]), 1:]),
        ("concat", n((3, 4)), lambda t: ops.concat([t, ops.exp(t)], axis=1)),
        ("stack", n((3, 4)), lambda t: ops.stack([t, t * t], axis=0)),
        ("reshape", n((3, 4)), lambda t: ops.reshape(t, (2, 6))),
        ("transpose", n((2, 3, 4)), lambda t: ops.transpose(t, (2, 0, 1))),
        ("swapaxes", n((2, 3, 4)), lambda t: ops.swapaxes(t, 0, 2)),
        ("broadcast_to", n((3, 1)), lambda t: ops.broadcast_to(t, (2, 3, 4))),
        ("flip", n((3, 4)), lambda t: ops.flip(t, axis=1)),
        ("sum", n((3, 4)), lambda t: ops.sum(t, axis=0)),
        ("mean", n((3, 4)), lambda t: ops.mean(t, axis=1, keepdims=True)),
        ("max", n((3, 4)), lambda t: ops.max(t, axis=1)),
        ("min", n((3, 4)), lambda t: ops.min(t, axis=0)),
        ("logsumexp", n((3, 4)), lambda t: ops.logsumexp(t, axis=1)),
        ("softmax", n((3, 4)), lambda t: ops.softmax(t, axis=0)),
        ("log_softmax", n((3, 4)), lambda t: ops.log_softmax(t, axis=1)),
        ("rdft", n((2, 12)), lambda t: rdft(t)),
        ("rdft_radix2", n((2, 16)), lambda t: rdft(t, method="radix2")),
        ("dft_magnitude", n((2, 16)), lambda t: dft_magnitude(t, window=np.hanning(16))),
    ]
    return [_input_case("tensor", name, make, fn) for name, make, fn in cases]


# -- anchor families ---------------------------------------------------------

def _family_params(rng) -> ExtractorParams:
    params = ExtractorParams.default(sampling_rate=50.0)
    jitter = rng.normal(scale=0.2, size=params.band_logits.shape)
    return dataclasses.replace(params, band_logits=Tensor(params.band_logits.data + jitter),
                               window_logit=Tensor(params.window_logit.data + rng.normal(scale=0.2)))


def _anchor_cases() -> list[GradCase]:
    cases = []
    for fam in FAMILIES:
        def run(rng, fam=fam):
            params = _family_params(rng)
            x = rng.normal(size=(1, 2, 32, 2))
            fn = _weighted(lambda t: FAMILY_FUNCS[fam](t, params, "soft"), rng)
            return grad_check(fn, x, max_elements=24, seed=int(rng.integers(1 << 31)))

        cases.append(GradCase("anchors", fam, run))

    def band_run(rng):
        params = _family_params(rng)
        x = rng.normal(size=(1, 1, 32, 2))
        fn = _weighted(lambda t: FAMILY_FUNCS["filterbank"](x, dataclasses.replace(params, band_logits=t), "soft"), rng)
        return grad_check(fn, params.band_logits.data, max_elements=8, seed=int(rng.integers(1 << 31)))

    def window_run(rng):
        params = _family_params(rng)
        x = rng.normal(size=(1, 1, 32, 2))
        fn = _weighted(lambda t: FAMILY_FUNCS["spectral"](x, dataclasses.replace(params, window_logit=t), "soft"), rng)
        return grad_check(fn, params.window_logit.data)

    def all_run(rng):
        params = _family_params(rng)
        fn = _weighted(lambda t: extract_all(t, params).values, rng)
        return grad_check(fn, rng.normal(size=(1, 2, 32, 2)), max_elements=16, seed=int(rng.integers(1 << 31)))

    cases += [GradCase("anchors", "band_edges", band_run), GradCase("anchors", "window_width", window_run),
              GradCase("anchors", "extract_all", all_run)]
    return cases


# -- correction --------------------------------------------------------------

def _correction_cases() -> list[GradCase]:
    from .anchors import make_layout

    layout = make_layout(ExtractorParams.default(), 32)
    shape = (2, 3, 2, 6)
    size, split = _pack(shape, shape, shape, shape, ())

    def apply_run(rng):
        fn = _weighted(lambda t: apply_correction(*split(t))[0], rng)
        return grad_check(fn, rng.normal(size=size) * 1.5)

    def head_run(rng):
        head = CorrectionHead(12, 2, len(layout), rng, alpha_init=rng.normal())
        err = grad_check(_weighted(lambda t: predict_correction(t, head), rng), rng.normal(size=(2, 3, 12)))
        loss = _weighted(lambda t: predict_correction(t, head), rng)
        h = rng.normal(size=(2, 3, 12))
        return max(err, param_grad_check(lambda: loss(Tensor(h)), head.named_parameters()["trunk.weight"],
                                         max_elements=8, seed=int(rng.integers(1 << 31))))

    def context_run(rng):
        ctx = BlockContext(layout.width, 8, rng, pooling="groups", groups=((0, 1, 2), (3, 4, 5)))
        fn = _weighted(ctx, rng)
        return grad_check(fn, rng.normal(size=(1, 2, 6, layout.width)), max_elements=24,
                          seed=int(rng.integers(1 << 31)))

    def views_run(rng):
        from .anchors import AnchorTensor

        heads = [CorrectionHead(8, 2, len(layout), rng, alpha_init=rng.normal()) for _ in range(2)]
        h_ctx = rng.normal(size=(1, 2, 8))

        def fn(t):
            anchors = AnchorTensor(values=t, layout=layout, block_size=32, sampling_rate=1.0)
            return assemble_views(anchors, heads, Tensor(h_ctx)).z_multi

        return grad_check(_weighted(fn, rng), rng.normal(size=(1, 2, 2, layout.width)), max_elements=24,
                          seed=int(rng.integers(1 << 31)))

    def regularizer_run(rng):
        def fn(t):
            d1, d2 = t[0], t[1]
            bundle = CorrectionBundle(z_multi=t, gates=[], deltas=[d1, d2], n_views=3, n_channels=2)
            l_delta, l_tv = correction_regularizers(bundle)
            return ops.stack([l_delta, l_tv])

        return grad_check(_weighted(fn, rng), _away_from_zero(rng, (2, 1, 4, 2, 6)))

    return [GradCase("correction", "apply_correction", apply_run),
            GradCase("correction", "correction_head", head_run),
            GradCase("correction", "block_context", context_run),
            GradCase("correction", "assemble_views", views_run),
            GradCase("correction", "regularizers", regularizer_run)]


# -- model layers ------------------------------------------------------------

def _tiny_config(rng, **over):
    from .model import ModelConfig

    cfg = dict(n_channels=3, length=64, n_classes=3, block_sizes=(32,), n_views=2, d_proj=14, d_ctx=8, d_block=4,
               time_kernels=(3, 5), time_filters=2, fft_sizes=(16, 32), freq_channels=2, mixer_width=4,
               sampling_rate=50.0, alpha_init=float(rng.normal()), seed=int(rng.integers(1 << 31)))
    cfg.update(over)
    return ModelConfig(**cfg)


def _model_cases() -> list[GradCase]:
    from .anchors import make_layout
    from .model import (
        Classifier,
        FreqBranch,
        GroupProjection,
        TimeBranch,
        ViewGroupAttention,
        forward,
        log_spectrogram,
        pool_blocks,
    )
    from .nn import ScoreAttention

    layout = make_layout(ExtractorParams.default(), 32)

    def seed_of(rng):
        return int(rng.integers(1 << 31))

    def time_run(rng):
        branch = TimeBranch(3, (3, 5), 2, 6, rng)
        return grad_check(_weighted(branch, rng), rng.normal(size=(1, 3, 24)), max_elements=24,
                          seed=seed_of(rng))

    def spectrogram_run(rng):
        return grad_check(_weighted(lambda t: log_spectrogram(t, 16), rng), rng.normal(size=(1, 2, 40)),
                          max_elements=24, seed=seed_of(rng))

    def freq_run(rng):
        branch = FreqBranch(3, 48, (16, 32), 2, 4, 6, rng)
        return grad_check(_weighted(branch, rng), rng.normal(size=(1, 3, 48)), max_elements=24,
                          seed=seed_of(rng))

    def projection_run(rng):
        proj = GroupProjection(layout, 14, rng)
        return grad_check(_weighted(proj, rng), rng.normal(size=(1, 2, 4, layout.width)), max_elements=24,
                          seed=seed_of(rng))

    def attention_run(rng):
        att = ViewGroupAttention(6, rng)
        fn = _weighted(lambda t: att(t, ((0, 1), (2,)), 2)[0], rng)
        return grad_check(fn, rng.normal(size=(1, 2, 6, 6)), max_elements=32, seed=seed_of(rng))

    def pool_run(rng):
        att = ScoreAttention(5, rng)
        return grad_check(_weighted(lambda t: pool_blocks(t, att)[0], rng), rng.normal(size=(2, 4, 5)))

    def classifier_run(rng):
        clf = Classifier(10, 6, 3, rng)
        fn = _weighted(lambda t: clf([t[:, :4], t[:, 4:]]), rng)
        return grad_check(fn, rng.normal(size=(2, 10)))

    def forward_run(rng):
        from .model import TCNet

        model = TCNet(_tiny_config(rng))
        fn = _weighted(lambda t: forward(model, t).logits, rng)
        return grad_check(fn, rng.normal(size=(1, 3, 64)), max_elements=6, seed=seed_of(rng))

    return [GradCase("model", "time_branch", time_run), GradCase("model", "log_spectrogram", spectrogram_run),
            GradCase("model", "freq_branch", freq_run), GradCase("model", "group_projection", projection_run),
            GradCase("model", "view_group_attention", attention_run), GradCase("model", "block_pooling", pool_run),
            GradCase("model", "classifier", classifier_run), GradCase("model", "forward", forward_run)]


# -- losses ------------------------------------------------------------------

def _loss_cases() -> list[GradCase]:
    from .model import TCNet, forward
    from .training import binary_cross_entropy, cross_entropy, total_loss

    def ce_run(rng):
        labels = rng.integers(0, 4, size=5)
        weights = rng.uniform(0.5, 2.0, size=4)
        return grad_check(lambda t: cross_entropy(t, labels, weights), 3 * rng.normal(size=(5, 4)))

    def bce_run(rng):
        y = (rng.uniform(size=(4, 3)) > 0.5).astype(float)
        return grad_check(lambda t: binary_cross_entropy(t, y), 3 * rng.normal(size=(4, 3)))

    def total_run(rng):
        model = TCNet(_tiny_config(rng))
        labels = rng.integers(0, 3, size=2)
        x = rng.normal(size=(2, 3, 64))

        def loss_x(t):
            out = forward(model, t)
            return total_loss(out.logits, labels, out.bundles, alpha=0.01, beta=0.01)[0]

        err = grad_check(loss_x, x, max_elements=4, seed=int(rng.integers(1 << 31)))
        params = model.named_parameters()
        names = sorted(params)
        for name in rng.choice(names, size=3, replace=False):
            err = max(err, param_grad_check(lambda: loss_x(Tensor(x)), params[name], max_elements=3,
                                            seed=int(rng.integers(1 << 31))))
        return err

    return [GradCase("loss", "cross_entropy", ce_run), GradCase("loss", "binary_cross_entropy", bce_run),
            GradCase("loss", "total_loss", total_run)]


_BUILDERS = {"tensor": _tensor_cases, "anchors": _anchor_cases, "correction": _correction_cases,
             "model": _model_cases, "loss": _loss_cases}


def gradient_cases(module: str = "all") -> list[GradCase]:
    if module == "all":
        return [case for name in MODULES for case in _BUILDERS[name]()]
    if module not in _BUILDERS:
        raise ValueError(f"grad-check: unknown module {module!r}; expected one of {('all',) + MODULES}")
    return _BUILDERS[module]()


def run_suite(module: str = "all", n_inputs: int = 20, seed: int = 0, tol: float = 1e-4, log=None) -> GradReport:
    """Run every case on ``n_inputs`` independently seeded inputs."""
    if n_inputs < 1:
        raise ValueError("grad-check: need at least one input per operation")
    results = []
    for index, case in enumerate(gradient_cases(module)):
        start = time.perf_counter()
        worst = 0.0
        for i in range(n_inputs):
            err = case.run(np.random.default_rng([seed, index, i]))
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        result = GradResult(case.module, case.name, n_inputs, float(worst), time.perf_counter() - start)
        results.append(result)
        if log:
            log(result)
    return GradReport(results, tol)
