"""Finite-difference suite over every differentiable operation and a micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import total_loss
from .model import BlockSpec, EncoderConfig, Metro

REL_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    report: ad.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(REL_TOL)


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return ad.Tensor(x, dtype=np.float64)


def _weighted(y: ad.Tensor, rng) -> ad.Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = ad.Tensor(rng.standard_normal(y.shape), dtype=np.float64)
    return ad.sum_(ad.mul(y, w))


def op_cases(seed: int = 0):
    """(name, input tensor, scalar function of that input) for each op."""
    rng = np.random.default_rng(seed)
    W = _t(rng, 5, 4)
    b = _t(rng, 4)
    other = _t(rng, 3, 5)
    gain, bias = _t(rng, 5), _t(rng, 5)
    kw, kb = _t(rng, 2, 1, 3, 3), _t(rng, 2)
    tok = _t(rng, 5)
    mask = np.zeros((2, 3), bool)
    mask[0, 1] = mask[1, 0] = mask[1, 2] = True
    gt = rng.standard_normal((2, 3, 5)) + 0.3
    flags = np.array([1.0, 0.5])
    k2, v2 = _t(rng, 2, 6, 8), _t(rng, 2, 6, 8)
    mm = _t(rng, 2, 5, 3)
    # away from relu / l1 kinks so central differences are meaningful
    kinkfree = rng.uniform(0.2, 1.0, (3, 5)) * rng.choice([-1, 1], (3, 5))
    cases = [
        ("add", _t(rng, 3, 5), lambda x: _weighted(ad.add(x, other), rng_fixed(1))),
        ("add_broadcast", _t(rng, 5), lambda x: _weighted(ad.add(other, x), rng_fixed(2))),
        ("sub", _t(rng, 3, 5), lambda x: _weighted(ad.sub(other, x), rng_fixed(3))),
        ("mul", _t(rng, 3, 5), lambda x: _weighted(ad.mul(x, other), rng_fixed(4))),
        ("mul_broadcast", _t(rng, 3, 1), lambda x: _weighted(ad.mul(other, x), rng_fixed(5))),
        ("scale", _t(rng, 3, 5), lambda x: _weighted(ad.scale(x, -1.7), rng_fixed(6))),
        ("gelu", _t(rng, 3, 5), lambda x: _weighted(ad.gelu(x), rng_fixed(7))),
        ("relu", ad.Tensor(kinkfree), lambda x: _weighted(ad.relu(x), rng_fixed(8))),
        ("softplus", _t(rng, 3, 5), lambda x: _weighted(ad.softplus(x), rng_fixed(9))),
        ("tanh", _t(rng, 3, 5), lambda x: _weighted(ad.tanh(x), rng_fixed(10))),
        ("matmul", _t(rng, 2, 3, 5), lambda x: _weighted(ad.matmul(x, mm), rng_fixed(11))),
        ("matmul_rhs", _t(rng, 5, 4), lambda x: _weighted(ad.matmul(other, x), rng_fixed(12))),
        ("linear", _t(rng, 2, 3, 5), lambda x: _weighted(ad.linear(x, W, b), rng_fixed(13))),
        ("linear_weight", _t(rng, 5, 4), lambda x: _weighted(ad.linear(other, x, b), rng_fixed(14))),
        ("softmax_rows", _t(rng, 3, 5), lambda x: _weighted(ad.softmax_rows(x), rng_fixed(15))),
        ("layer_norm", _t(rng, 3, 5), lambda x: _weighted(ad.layer_norm(x, gain, bias), rng_fixed(16))),
        ("layer_norm_gain", _t(rng, 5), lambda x: _weighted(ad.layer_norm(other, x, bias), rng_fixed(17))),
        ("concat", _t(rng, 3, 2), lambda x: _weighted(ad.concat([other, x], axis=-1), rng_fixed(18))),
        ("slice", _t(rng, 3, 5), lambda x: _weighted(ad.slice_(x, 1, 4), rng_fixed(19))),
        ("reshape", _t(rng, 3, 5), lambda x: _weighted(ad.reshape(x, (5, 3)), rng_fixed(20))),
        ("swapaxes", _t(rng, 2, 3, 5), lambda x: _weighted(ad.swapaxes(x, 1, 2), rng_fixed(21))),
        ("repeat_rows", _t(rng, 2, 5), lambda x: _weighted(ad.repeat_rows(x, 3), rng_fixed(22))),
        ("mask_rows", _t(rng, 2, 3, 5), lambda x: _weighted(ad.mask_rows(x, mask, tok), rng_fixed(23))),
        ("mask_token", _t(rng, 5), lambda x: _weighted(ad.mask_rows(_fixed_q(), mask, x), rng_fixed(24))),
        ("sum", _t(rng, 3, 5), lambda x: ad.sum_(x)),
        ("mean", _t(rng, 3, 5), lambda x: _weighted(ad.mean(x, axis=0), rng_fixed(25))),
        ("mean_pool", _t(rng, 2, 3, 5), lambda x: _weighted(ad.mean_pool(x), rng_fixed(26))),
        ("l1_mean", ad.Tensor(gt + kinkfree[None] * 0.5), lambda x: ad.l1_mean(x, gt, flags)),
        ("attention_q", _t(rng, 2, 6, 8), lambda x: _weighted(ad.multi_head_attention(x, k2, v2, 2)[0],
                                                              rng_fixed(27))),
        ("attention_k", _t(rng, 2, 6, 8), lambda x: _weighted(ad.multi_head_attention(k2, x, v2, 2)[0],
                                                              rng_fixed(28))),
        ("attention_v", _t(rng, 2, 6, 8), lambda x: _weighted(ad.multi_head_attention(k2, v2, x, 2)[0],
                                                              rng_fixed(29))),
        ("conv2d", _t(rng, 2, 1, 6, 6), lambda x: _weighted(ad.conv2d(x, kw, kb), rng_fixed(30))),
        ("conv2d_weight", _t(rng, 2, 1, 3, 3), lambda x: _weighted(ad.conv2d(_fixed_img(), x, kb), rng_fixed(31))),
        ("max_pool2d", ad.Tensor(np.random.default_rng(seed + 99).permutation(72).reshape(2, 1, 6, 6) / 7.0),
         lambda x: _weighted(ad.max_pool2d(x, 2), rng_fixed(32))),
    ]
    return cases


def rng_fixed(k: int):
    return np.random.default_rng([4242, k])


def _fixed_q():
    return ad.Tensor(rng_fixed(90).standard_normal((2, 3, 5)), dtype=np.float64)


def _fixed_img():
    return ad.Tensor(rng_fixed(91).standard_normal((2, 1, 6, 6)), dtype=np.float64)


def micro_model(seed: int = 0, n_joints: int = 2, n_coarse: int = 4, n_full: int = 8, feature_dim: int = 8,
                template=None, regressor=None):
    """A float64 model with 1 block / 1 layer / 1 head plus a loss closure over random targets."""
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(feature_dim, [BlockSpec(feature_dim + 3, 1, 1)], upsampler_hidden=6)
    if template is not None:
        model = Metro.from_template(cfg, template, regressor, seed=seed, dtype=np.float64)
        n_joints, n_full = model.n_joints, model.n_full
    else:
        G = rng.random((n_joints, n_full))
        G /= G.sum(1, keepdims=True)
        model = Metro(cfg, rng.standard_normal((n_joints, 3)), rng.standard_normal((n_coarse, 3)), G,
                      seed=seed, dtype=np.float64)
    # move zero-initialised weights off zero so every path carries gradient
    for p in model.params.values():
        p.data += 0.05 * rng.standard_normal(p.shape)
    B = 2
    X = rng.standard_normal((B, feature_dim))
    V = rng.standard_normal((B, model.n_full, 3))
    J = rng.standard_normal((B, model.n_joints, 3))
    J2 = rng.standard_normal((B, model.n_joints, 2))
    mask = np.zeros((B, model.n_joints + model.n_coarse), bool)
    mask[0, 1] = True

    def loss():
        out = model.forward(ad.Tensor(X, dtype=np.float64), mask=mask)
        return total_loss(out, V, J, J2, model.regressor, np.array([1.0, 1.0]), np.array([1.0, 1.0])).tensor

    return model, loss


def run_suite(seed: int = 0, step: float = 1e-6, preset: str | None = None,
              max_per_param: int = 12, model_step: float = 1e-7) -> list[SuiteResult]:
    """Check every op, then the end-to-end micro model (on ``preset``'s template if given).

    The model check uses a smaller step: with thousands of L1 residuals a
    larger one can straddle a kink of |x| and report a spurious mismatch.
    """
    results = []
    for name, x, f in op_cases(seed):
        t0 = time.perf_counter()
        rep = ad.grad_check(f, x, step)
        results.append(SuiteResult(name, rep, time.perf_counter() - t0))
    if preset is None:
        model, loss = micro_model(seed)
        label = "model"
    else:
        from .synth import get_preset
        body = get_preset(preset)
        model, loss = micro_model(seed, template=body.mesh, regressor=body.regressor)
        label = f"model[{preset}]"
    t0 = time.perf_counter()
    reps = ad.grad_check_params(loss, model.params, model_step, max_per_param=max_per_param, seed=seed)
    for pname, rep in reps.items():
        results.append(SuiteResult(f"{label}:{pname}", rep, 0.0))
    results[-1].seconds = time.perf_counter() - t0
    return results


def format_table(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'rel_err':>10}  {'abs_err':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.report.max_rel_err:10.2e}  {r.report.max_abs_err:10.2e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} passed")
    return "\n".join(lines)
