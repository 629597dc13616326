"""The finite-difference verification suite.

Every differentiable operation is checked against central differences on
seeded random inputs chosen away from kinks (relu zero crossings, clamp
boundaries), at tolerance 1e-6. The full set loss on a small model is
checked at 1e-4 with a finer step, with the detached inter-stage boxes
pinned so the comparison measures the same partial derivative the tape
computes. ``run_suite`` powers both the CLI command and the acceptance
tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .config import RunConfig, toy_config
from .data import generate_dataset
from .losses import focal_loss, set_loss
from .matching import MatchResult
from .model import (
    AttentionInteraction,
    Backbone,
    DetectionModel,
    DynamicInteraction,
    MultiHeadSelfAttention,
    roi_align,
)

OP_TOLERANCE = 1e-6
FULL_LOSS_TOLERANCE = 1e-4
FULL_LOSS_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _rand(rng, *shape, away_from_zero=False):
    x = rng.uniform(-1.0, 1.0, shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + 0.9 * np.abs(x))
    return ad.Tensor(x, requires_grad=True)


def op_checks(seed: int = 0) -> list[CheckResult]:
    """Per-operation gradient checks at OP_TOLERANCE."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, callable, list[ad.Tensor]]] = []

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    checks.append(("add", lambda x, y: (x + y).sum(), [a, b]))
    checks.append(("sub", lambda x, y: (x - y).sum(), [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
    checks.append(("mul", lambda x, y: (x * y).sum(), [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
    checks.append(
        ("div", lambda x, y: (x / y).sum(), [_rand(rng, 3, 4), _rand(rng, 3, 4, away_from_zero=True)])
    )
    checks.append(
        ("add_broadcast", lambda x, y: (x + y).sum(), [_rand(rng, 3, 4), _rand(rng, 4)])
    )
    checks.append(("power", lambda x: ad.power(x, 3.0).sum(), [_rand(rng, 3, 3)]))
    checks.append(("exp", lambda x: ad.exp(x).sum(), [_rand(rng, 3, 3)]))
    checks.append(
        ("log", lambda x: ad.log(x * 0.5 + 1.5).sum(), [_rand(rng, 3, 3)])
    )
    checks.append(("abs", lambda x: ad.absolute(x).sum(), [_rand(rng, 3, 3, away_from_zero=True)]))
    checks.append(
        ("clamp", lambda x: ad.clamp(x * 3.0, -1.0, 1.0).sum(),
         [_rand(rng, 4, 4, away_from_zero=True)])
    )
    checks.append(
        ("maximum", lambda x, y: ad.maximum(x, y).sum(),
         [_rand(rng, 3, 3), _rand(rng, 3, 3)])
    )
    checks.append(
        ("minimum", lambda x, y: ad.minimum(x, y).sum(),
         [_rand(rng, 3, 3), _rand(rng, 3, 3)])
    )
    checks.append(("sum_axis", lambda x: (ad.tsum(x, axis=1) ** 2.0).sum(), [_rand(rng, 3, 4)]))
    checks.append(("mean", lambda x: (ad.tmean(x, axis=0) ** 2.0).sum(), [_rand(rng, 3, 4)]))
    checks.append(
        ("reshape_permute",
         lambda x: (ad.permute(ad.reshape(x, (2, 6)), (1, 0)) ** 2.0).sum(),
         [_rand(rng, 3, 4)])
    )
    checks.append(
        ("concat_narrow",
         lambda x, y: (ad.narrow(ad.concat([x, y], axis=1), 1, 2, 3) ** 2.0).sum(),
         [_rand(rng, 3, 4), _rand(rng, 3, 2)])
    )
    checks.append(
        ("gather_rows",
         lambda x: (ad.gather_rows(x, np.array([0, 2, 2, 1])) ** 2.0).sum(),
         [_rand(rng, 4, 3)])
    )
    checks.append(("matmul", lambda x, y: ad.matmul(x, y).sum(), [_rand(rng, 3, 4), _rand(rng, 4, 2)]))
    checks.append(
        ("bmm", lambda x, y: (ad.bmm(x, y) ** 2.0).sum(), [_rand(rng, 3, 2, 4), _rand(rng, 3, 4, 2)])
    )
    checks.append(
        ("linear",
         lambda x, w, bias: (ad.linear(x, w, bias) ** 2.0).sum(),
         [_rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)])
    )
    checks.append(("relu", lambda x: (ad.relu(x) ** 2.0).sum(), [_rand(rng, 4, 4, away_from_zero=True)]))
    checks.append(("sigmoid", lambda x: (ad.sigmoid(x) ** 2.0).sum(), [_rand(rng, 4, 4)]))
    checks.append(("softmax", lambda x: (ad.softmax(x) ** 2.0).sum(), [_rand(rng, 3, 5)]))
    checks.append(
        ("layer_norm",
         lambda x, g, s: (ad.layer_norm(x, g, s) ** 2.0).sum(),
         [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)])
    )
    checks.append(
        ("conv2d_s1",
         lambda x, w, bias: (ad.conv2d(x, w, bias, stride=1, padding=1) ** 2.0).sum(),
         [_rand(rng, 2, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)])
    )
    checks.append(
        ("conv2d_s2",
         lambda x, w, bias: (ad.conv2d(x, w, bias, stride=2, padding=1) ** 2.0).sum(),
         [_rand(rng, 1, 2, 6, 6), _rand(rng, 2, 2, 3, 3), _rand(rng, 2)])
    )

    # Box chosen so no bin center lands on an integer grid line (a
    # bilinear kink where one-sided finite differences diverge).
    feat = ad.Tensor(rng.uniform(-1, 1, (2, 5, 6)), requires_grad=True)
    box = ad.Tensor(np.array([0.73, 0.91, 4.17, 3.58]), requires_grad=True)
    checks.append(
        ("roi_align", lambda f, bx: (roi_align(f, bx, 3) ** 2.0).sum(), [feat, box])
    )
    base = ad.Tensor(np.array([[0.4, 0.5, 0.3, 0.25], [0.6, 0.45, 0.2, 0.4]]), requires_grad=True)
    delta = ad.Tensor(rng.uniform(-0.5, 0.5, (2, 4)), requires_grad=True)
    checks.append(
        ("box_update", lambda bs, d: (geometry.box_update(bs, d) ** 2.0).sum(), [base, delta])
    )
    pred = ad.Tensor(np.array([[0.1, 0.1, 0.5, 0.6], [0.3, 0.2, 0.8, 0.9]]), requires_grad=True)
    gt = np.array([[0.2, 0.15, 0.6, 0.7], [0.25, 0.3, 0.7, 0.8]])
    checks.append(
        ("giou", lambda p: (geometry.giou_tensor(p, gt) ** 2.0).sum(), [pred])
    )

    logits = ad.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    match = MatchResult([(0, 1), (1, 3)], 0.0)
    labels = np.array([0, 2])
    checks.append(
        ("focal_loss", lambda lg: focal_loss(lg, match, labels, 0.25, 2.0, 2), [logits])
    )

    model_rng = np.random.default_rng(seed + 1)
    attn = MultiHeadSelfAttention(8, 2, model_rng)
    x_attn = ad.Tensor(rng.uniform(-1, 1, (2, 3, 8)), requires_grad=True)
    attn_params = list(attn.named_parameters().values())
    checks.append(
        ("self_attention",
         lambda *ts: (attn(ts[-1]) ** 2.0).sum(),
         attn_params + [x_attn])
    )
    dyn = DynamicInteraction(8, 2, model_rng)
    pro = ad.Tensor(rng.uniform(-1, 1, (1, 2, 8)), requires_grad=True)
    roi = ad.Tensor(rng.uniform(-1, 1, (1, 2, 4, 8)), requires_grad=True)
    checks.append(
        ("dynamic_interaction",
         lambda *ts: (dyn(ts[-2], ts[-1]) ** 2.0).sum(),
         list(dyn.named_parameters().values()) + [pro, roi])
    )
    mha = AttentionInteraction(8, 2, model_rng)
    pro2 = ad.Tensor(rng.uniform(-1, 1, (1, 2, 8)), requires_grad=True)
    roi2 = ad.Tensor(rng.uniform(-1, 1, (1, 2, 4, 8)), requires_grad=True)
    checks.append(
        ("attention_interaction",
         lambda *ts: (mha(ts[-2], ts[-1]) ** 2.0).sum(),
         list(mha.named_parameters().values()) + [pro2, roi2])
    )
    backbone = Backbone(8, model_rng)
    img = ad.Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)
    checks.append(
        ("backbone",
         lambda *ts: (backbone(ts[-1]) ** 2.0).sum(),
         list(backbone.named_parameters().values()) + [img])
    )

    results = []
    for name, fn, inputs in checks:
        report = ad.grad_check(fn, inputs, step=1e-5, tolerance=OP_TOLERANCE)
        results.append(CheckResult(name, report.max_error, OP_TOLERANCE))
    return results


def full_loss_check(config: RunConfig | None = None, seed: int = 0) -> CheckResult:
    """FD check of the whole set loss w.r.t. every parameter.

    Inter-stage box inputs are pinned to their unperturbed values: box
    gradients are blocked between stages, so the tape computes the partial
    derivative holding those inputs fixed, and the finite differences must
    hold them fixed too.
    """
    cfg = config or toy_config()
    model = DetectionModel(cfg.model, seed=seed)
    # Evaluate at a generic point: zero-initialized biases otherwise put
    # relu pre-activations exactly on their kink (constant image regions
    # reach conv biases unchanged), where one-sided differences diverge.
    jitter = np.random.default_rng(seed + 100)
    for p in model.named_parameters().values():
        p.data += jitter.normal(0.0, 2e-3, p.data.shape)
    scenes = generate_dataset(cfg.dataset, 0, 1)
    images = scenes[0].image[None]
    targets = [(scenes[0].labels, scenes[0].boxes)]
    pinned = [o.boxes.data.copy() for o in model.forward(images)[:-1]]

    def objective(*_):
        outputs = model.forward(images, pinned_boxes=pinned)
        return set_loss(
            outputs,
            targets,
            cfg.lambda_cls,
            cfg.lambda_l1,
            cfg.lambda_giou,
            cfg.focal_alpha,
            cfg.focal_gamma,
        ).total

    params = list(model.named_parameters().values())
    report = ad.grad_check(
        objective, params, step=FULL_LOSS_STEP, tolerance=FULL_LOSS_TOLERANCE
    )
    return CheckResult("set_loss_all_parameters", report.max_error, FULL_LOSS_TOLERANCE)


def run_suite(config: RunConfig | None = None, seed: int = 0, log=print) -> bool:
    """Run every check, print one line each plus the worst op; True iff all pass."""
    results = op_checks(seed)
    results.append(full_loss_check(config, seed))
    for r in results:
        log(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max_rel_err={r.max_error:.3e}  tol={r.tolerance:.0e}")
    worst = max(results, key=lambda r: r.max_error / r.tolerance)
    log(f"worst: {worst.name} ({worst.max_error:.3e} against {worst.tolerance:.0e})")
    return all(r.passed for r in results)
