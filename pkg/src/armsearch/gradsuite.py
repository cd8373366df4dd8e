"""Finite-difference suites for every differentiable op, the ARM block and
the full training loss. Used by ``arm-search gradcheck`` and the tests.

Each case builds a zero-argument scalar function plus its float64 inputs
from a seeded generator. Inputs avoid kinks (ReLU at 0, Smooth-L1 at beta,
max ties) so central differences are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .arm import ArmConfig, ArmParams, ablation_variant, arm_forward, channel_attention, channel_mix
from .arm import spatial_attention, spatio_channel_attention, token_mix
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, PersonSearchModel, SceneBatch, jittered_proposals, total_loss
from .oim import UNLABELED, OimState, oim_loss
from .roi import roi_align
from .tensor import Tensor, precision

TOLERANCES = {"ops": 1e-6, "arm": 1e-4, "pipeline": 1e-3}
SCOPES = tuple(TOLERANCES)
DEFAULT_SEEDS = 10


@dataclass
class Case:
    name: str
    scope: str
    build: Callable[[np.random.Generator], tuple]
    max_entries: int | None = None


@dataclass
class CaseResult:
    name: str
    scope: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _away(rng, shape, gap=0.1) -> np.ndarray:
    """Normal values pushed at least ``gap`` away from zero."""
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape) -> np.ndarray:
    """Values whose pairwise gaps are at least ~0.1 (no ties for max)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.02, n)).reshape(shape) - 0.05 * n


def _project(fn, *inputs, rng):
    """Scalar ``sum(fn(*inputs) * R)`` for a fixed random ``R``."""
    probe = {}

    def f():
        out = fn(*inputs)
        if "r" not in probe:
            probe["r"] = Tensor(rng.normal(size=out.shape), dtype=np.float64)
        return (out * probe["r"]).sum()
    return f, list(inputs)


def _elementwise(op):
    def build(rng):
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(1, 4)))
        return _project(op, a, b, rng=rng)
    return build


def _unary(op, positive=False):
    def build(rng):
        x = _t(rng.uniform(0.5, 2.0, (3, 5)) if positive else _away(rng, (3, 5)))
        return _project(op, x, rng=rng)
    return build


def _b_div(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.uniform(0.5, 2.0, (1, 4)))
    return _project(T.div, a, b, rng=rng)


def _b_matmul(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(2, 4, 5)))
    return _project(T.matmul, a, b, rng=rng)


def _b_matmul_shared(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(4, 5)))
    return _project(T.matmul, a, b, rng=rng)


def _b_reduce(mode, axes):
    def build(rng):
        x = _t(_distinct(rng, (3, 4, 5)))
        return _project(lambda v: T.reduce(v, axes, mode, keepdims=False), x, rng=rng)
    return build


def _b_shapes(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    y = _t(rng.normal(size=(2, 3, 4)))

    def fn(a, b):
        r = T.transpose(T.reshape(a, (6, 4)), (1, 0))
        s = T.stack([r, T.reshape(b, (4, 6))], axis=1)
        return T.concat([s, T.broadcast_to(T.reshape(a[0, 0], (4, 1, 1)), (4, 1, 6))], axis=1)
    return _project(fn, x, y, rng=rng)


def _b_getitem(rng):
    x = _t(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4, 0])
    return _project(lambda v: T.concat([v[idx], v[1:4, ::2].reshape(3, 2)[:, :1].reshape(3, 1)
                                        * np.ones((1, 3))], axis=0), x, rng=rng)


def _b_pad(rng):
    x = _t(rng.normal(size=(2, 3, 4, 4)))
    return _project(lambda v: T.pad2d(v, 2), x, rng=rng)


def _b_maximum(rng):
    x = _t(_away(rng, (4, 4), 0.2) * 0.5)
    return _project(lambda v: T.maximum(v, 0.0), x, rng=rng)


def _b_where(rng):
    cond = rng.random((3, 4)) > 0.5
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(3, 4)))
    return _project(lambda p, q: T.where(cond, p, q), a, b, rng=rng)


def _b_conv(k, stride, padding, n=2, cin=3, cout=4, size=6):
    def build(rng):
        x = _t(rng.normal(size=(n, cin, size, size)))
        w = _t(rng.normal(size=(cout, cin, k, k)) * 0.5)
        b = _t(rng.normal(size=(cout,)))
        return _project(lambda a, ww, bb: F.conv2d(a, ww, bb, padding=padding, stride=stride), x, w, b, rng=rng)
    return build


def _b_linear(rng):
    x, w, b = _t(rng.normal(size=(4, 5))), _t(rng.normal(size=(5, 3))), _t(rng.normal(size=(3,)))
    return _project(F.linear, x, w, b, rng=rng)


def _b_layer_norm(axis):
    def build(rng):
        x = _t(rng.normal(size=(2, 5, 6)))
        m = x.shape[axis]
        g, b = _t(rng.normal(size=(m,))), _t(rng.normal(size=(m,)))
        return _project(lambda a, gg, bb: F.layer_norm(a, gg, bb, axis=axis), x, g, b, rng=rng)
    return build


def _b_batch_norm(training):
    def build(rng):
        x = _t(rng.normal(size=(6, 3)))
        g, b = _t(rng.normal(size=(3,))), _t(rng.normal(size=(3,)))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

        def fn(a, gg, bb):
            # fresh buffers per call: the forward mutates running stats
            return F.batch_norm_1d(a, gg, bb, rm.copy(), rv.copy(), training)
        return _project(fn, x, g, b, rng=rng)
    return build


def _b_dropout(rng):
    x = _t(rng.normal(size=(4, 6)))
    seed = int(rng.integers(2**31))
    return _project(lambda a: F.dropout(a, 0.3, np.random.default_rng(seed), True), x, rng=rng)


def _b_l2(rng):
    x = _t(rng.normal(size=(4, 6)))
    return _project(lambda a: T.concat(list(F.l2_normalize(a)), axis=1), x, rng=rng)


def _b_log_softmax(rng):
    x = _t(rng.normal(size=(4, 6)) * 2)
    return _project(lambda a: F.log_softmax(a, axis=1), x, rng=rng)


def _b_cross_entropy(rng):
    x = _t(rng.normal(size=(5, 4)) * 2)
    y = rng.integers(0, 4, 5)
    return (lambda: F.cross_entropy(x, y)), [x]


def _b_bce(rng):
    x = _t(rng.normal(size=(7,)) * 3)
    y = (rng.random(7) > 0.5).astype(float)
    return (lambda: F.binary_cross_entropy_with_logits(x, y)), [x]


def _b_smooth_l1(rng):
    target = rng.normal(size=(4, 4))
    d = rng.uniform(0.1, 0.9, (4, 4)) * np.where(rng.random((4, 4)) > 0.5, 1, 1.8) * rng.choice([-1, 1], (4, 4))
    x = _t(target + d)
    return _project(lambda a: F.smooth_l1(a, target, beta=1.0), x, rng=rng)


def _b_roi_align(rng):
    fm = _t(rng.normal(size=(2, 3, 8, 8)))
    boxes = np.array([[0.7, 1.2, 5.3, 6.9], [2.1, 0.4, 7.6, 4.4], [-0.6, 3.3, 4.1, 8.5]])
    boxes = boxes + rng.uniform(-0.3, 0.3, boxes.shape)
    bidx = np.array([0, 1, 1])
    return _project(lambda a: roi_align(a, boxes, 4, bidx), fm, rng=rng)


def _b_oim(rng):
    state = OimState(5, dim=6, queue_capacity=4)
    state.lookup_table[:] = rng.normal(size=(5, 6))
    state.lookup_table /= np.linalg.norm(state.lookup_table, axis=1, keepdims=True)
    state.push_unlabeled(rng.normal(size=(3, 6)))
    x = _t(rng.normal(size=(4, 6)))
    labels = np.array([0, 3, UNLABELED, 4])
    emb = lambda: F.l2_normalize(x)[0]  # noqa: E731
    return (lambda: oim_loss(emb(), labels, state, update=False)), [x]


def _b_flawed(rng):
    x = _t(rng.normal(size=(3, 4)))
    return _project(_flawed_square, x, rng=rng)


def _flawed_square(x: Tensor) -> Tensor:
    """Test-only op: ``x**2`` with a deliberate sign error in its gradient."""
    return T._result(x.data ** 2, (x,), lambda g: (-2.0 * x.data * g,))


OP_CASES = [
    Case("add", "ops", _elementwise(T.add)),
    Case("sub", "ops", _elementwise(T.sub)),
    Case("mul", "ops", _elementwise(T.mul)),
    Case("div", "ops", _b_div),
    Case("power", "ops", _unary(lambda x: T.power(x, 1.7), positive=True)),
    Case("exp", "ops", _unary(T.exp)),
    Case("log", "ops", _unary(T.log, positive=True)),
    Case("sqrt", "ops", _unary(T.sqrt, positive=True)),
    Case("maximum", "ops", _b_maximum),
    Case("where", "ops", _b_where),
    Case("matmul", "ops", _b_matmul),
    Case("matmul_shared", "ops", _b_matmul_shared),
    Case("sum", "ops", _b_reduce("sum", (0, 2))),
    Case("mean", "ops", _b_reduce("mean", (1,))),
    Case("max", "ops", _b_reduce("max", (2,))),
    Case("max_all", "ops", _b_reduce("max", None)),
    Case("reshape_transpose_stack_concat", "ops", _b_shapes),
    Case("getitem", "ops", _b_getitem),
    Case("pad2d", "ops", _b_pad),
    Case("conv1x1", "ops", _b_conv(1, 1, 0)),
    Case("conv3x3", "ops", _b_conv(3, 1, 1)),
    Case("conv3x3_stride2", "ops", _b_conv(3, 2, 1, size=7)),
    Case("conv7x7", "ops", _b_conv(7, 1, 3, cin=2, cout=1)),
    Case("linear", "ops", _b_linear),
    Case("sigmoid", "ops", _unary(F.sigmoid)),
    Case("relu", "ops", _unary(F.relu)),
    Case("gelu", "ops", _unary(F.gelu)),
    Case("layer_norm_last", "ops", _b_layer_norm(-1)),
    Case("layer_norm_mid", "ops", _b_layer_norm(1)),
    Case("batch_norm_train", "ops", _b_batch_norm(True)),
    Case("batch_norm_eval", "ops", _b_batch_norm(False)),
    Case("dropout", "ops", _b_dropout),
    Case("l2_normalize", "ops", _b_l2),
    Case("log_softmax", "ops", _b_log_softmax),
    Case("cross_entropy", "ops", _b_cross_entropy),
    Case("bce_with_logits", "ops", _b_bce),
    Case("smooth_l1", "ops", _b_smooth_l1),
    Case("roi_align", "ops", _b_roi_align),
    Case("oim_loss", "ops", _b_oim),
]

NEGATIVE_CONTROL = Case("flawed_square", "ops", _b_flawed)


# ---------------------------------------------------------------------------
# ARM
# ---------------------------------------------------------------------------

TOY_ARM = ArmConfig(channels_in=8, roi_size=4, reduction=4)


def _arm_params(rng, layout, config=TOY_ARM):
    params = ArmParams(config, rng, layout)
    params.assign_names()
    # the zero-initialized expansion would hide every inner gradient
    if layout.enabled:
        params.expand.weight.data[:] = rng.normal(size=params.expand.weight.shape) * 0.3
    return params


def _b_arm_part(part):
    def build(rng):
        params = _arm_params(rng, ablation_variant("full_arm"))
        c = TOY_ARM.reduced
        x = _t(_distinct(rng, (2, c, 4, 4)) * 0.3 if part == "spatial_attention" else rng.normal(size=(2, c, 4, 4)))
        fns = {
            "spatial_attention": lambda v: spatial_attention(v, params),
            "token_mix": lambda v: token_mix(v, params),
            "channel_attention": lambda v: channel_attention(v, params),
            "channel_mix": lambda v: channel_mix(v, params),
            "spatio_channel_attention": lambda v: spatio_channel_attention(v, TOY_ARM.simam_lambda),
        }
        f, _ = _project(fns[part], x, rng=rng)
        return f, [x] + params.parameters()
    return build


def _b_arm_forward(variant, training=False):
    def build(rng):
        layout = ablation_variant(variant)
        params = _arm_params(rng, layout)
        x = _t(rng.normal(size=(2, TOY_ARM.channels_in, 4, 4)))
        seed = int(rng.integers(2**31))
        fn = lambda v: arm_forward(v, params, TOY_ARM, training, layout, np.random.default_rng(seed))  # noqa: E731
        f, _ = _project(fn, x, rng=rng)
        return f, [x] + params.parameters()
    return build


ARM_CASES = [
    Case("spatial_attention", "arm", _b_arm_part("spatial_attention"), 40),
    Case("token_mix", "arm", _b_arm_part("token_mix"), 40),
    Case("channel_attention", "arm", _b_arm_part("channel_attention"), 40),
    Case("channel_mix", "arm", _b_arm_part("channel_mix"), 40),
    Case("spatio_channel_attention", "arm", _b_arm_part("spatio_channel_attention"), 40),
    Case("arm_forward", "arm", _b_arm_forward("full_arm"), 40),
    Case("arm_forward_train", "arm", _b_arm_forward("full_arm", training=True), 40),
    Case("arm_forward_relation_mixer", "arm", _b_arm_forward("relation_mixer"), 40),
    Case("arm_forward_sca_only", "arm", _b_arm_forward("sca_only"), 40),
]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _b_pipeline(rng):
    cfg = ModelConfig(arm=ArmConfig(channels_in=8, roi_size=4), embed_dim=8, backbone_widths=(4, 8),
                      proposals_per_gt=3, background_proposals=2, oim_queue=4)
    model = PersonSearchModel(cfg, np.random.default_rng(int(rng.integers(2**31))), num_identities=4)
    for block in (model.det.arm.params, model.reid.arm.params):
        block.expand.weight.data[:] = rng.normal(size=block.expand.weight.shape) * 0.3
    model.oim.lookup_table[:] = rng.normal(size=model.oim.lookup_table.shape)
    model.oim.lookup_table /= np.linalg.norm(model.oim.lookup_table, axis=1, keepdims=True)
    images = rng.uniform(0, 1, (2, 3, 32, 32))
    gts = [np.array([[4.0, 3.0, 16.0, 29.0], [17.0, 2.0, 28.0, 27.0]]), np.array([[8.0, 5.0, 20.0, 30.0]])]
    ids = [np.array([0, 2]), np.array([3])]
    batch = SceneBatch(images, gts, ids)
    props = [jittered_proposals(g, rng, 32, 32, 3, 2, 0.2) for g in gts]
    reid_boxes = [jittered_proposals(g, rng, 32, 32, 3, 2, 0.1) for g in gts]
    dropout_seed = int(rng.integers(2**31))
    model.train()

    def f():
        model.dropout_rng = np.random.default_rng(dropout_seed)
        return total_loss(model.losses(batch, props, reid_boxes=reid_boxes, update_oim=False))
    return f, model.parameters()


PIPELINE_CASES = [Case("total_loss", "pipeline", _b_pipeline, 3)]

ALL_CASES = OP_CASES + ARM_CASES + PIPELINE_CASES


def run_case(case: Case, seed: int) -> CaseResult:
    rng = np.random.default_rng([seed, 7])
    with precision(np.float64):
        f, inputs = case.build(rng)
        names = [getattr(x, "name", None) or f"input{i}" for i, x in enumerate(inputs)]
        report = grad_check(f, inputs, TOLERANCES[case.scope], names, case.max_entries,
                            np.random.default_rng([seed, 8]))
    return CaseResult(case.name, case.scope, seed, report)


def run_suite(scope: str = "all", seeds: int = DEFAULT_SEEDS) -> list[CaseResult]:
    if scope != "all" and scope not in TOLERANCES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    cases = [c for c in ALL_CASES if scope in ("all", c.scope)]
    return [run_case(c, s) for c in cases for s in range(seeds)]


def negative_control(seed: int = 0) -> CaseResult:
    """The deliberately wrong op; a working checker must flag it."""
    return run_case(NEGATIVE_CONTROL, seed)
