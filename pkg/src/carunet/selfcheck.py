"""Built-in verification suite behind `carunet selfcheck`.

Runs the gradient checks, forward oracles, DropBlock statistics, AUC
equivalence, and the attention parameter-count assertion, plus a negative
control proving the gradient checker actually catches a corrupted backward
pass. Prints one pass/fail line per check; any failure exits nonzero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import MecaModule, meca_apply, meca_map
from .blocks import Cadrb, parameter_count
from .layers import (
    BatchNormState,
    Conv2dParams,
    DropBlockConfig,
    batchnorm2d,
    concat_channels,
    conv1d_shared,
    conv2d,
    conv_transpose2d,
    dropblock,
    maxpool2d_2x2,
    relu,
    sigmoid,
)
from .tensor import Tensor, enable_nan_checks, grad_check, mean_all, record
from .training import bce_loss


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _op_grad_checks(seeds: int = 3) -> list[CheckResult]:
    results = []

    def run(name, fn, make_inputs):
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            worst = max(worst, grad_check(fn, make_inputs(rng), epsilon=1e-3))
        results.append(CheckResult(f"grad:{name}", worst < 1e-4, f"max rel err {worst:.2e}"))

    run("conv2d", lambda x, w, b: mean_all(conv2d(x, Conv2dParams(w, b, padding=1))), lambda rng: [t64(rng.normal(size=(1, 2, 4, 4))), t64(rng.normal(size=(2, 2, 3, 3))), t64(rng.normal(size=2))])
    run("conv_transpose2d", lambda x, w, b: mean_all(conv_transpose2d(x, Conv2dParams(w, b, stride=2))), lambda rng: [t64(rng.normal(size=(1, 2, 3, 3))), t64(rng.normal(size=(2, 2, 2, 2))), t64(rng.normal(size=2))])
    run("maxpool2d_2x2", lambda x: mean_all(maxpool2d_2x2(x)[0]), lambda rng: [t64((rng.permutation(32).reshape(1, 2, 4, 4) * 0.11) - 1.7)])
    run("conv1d_shared", lambda x, k: mean_all(conv1d_shared(x, k)), lambda rng: [t64(rng.normal(size=(2, 6))), t64(rng.normal(size=3))])
    run("sigmoid", lambda x: mean_all(sigmoid(x)), lambda rng: [t64(rng.normal(size=(3, 4)))])
    run("relu", lambda x: mean_all(relu(x)), lambda rng: [t64((rng.permutation(12).reshape(3, 4) * 0.21) - 1.2)])
    run("bce", lambda p: bce_loss(p, np.arange(12).reshape(3, 4) % 2), lambda rng: [t64(rng.uniform(0.2, 0.8, size=(3, 4)))])

    def bn_fn(x, g, b):
        st = BatchNormState.create(2, dtype=np.float64)
        st.gamma, st.beta = g, b
        return mean_all(sigmoid(batchnorm2d(x, st)))

    run("batchnorm2d", bn_fn, lambda rng: [t64(rng.normal(size=(2, 2, 3, 3))), t64(rng.normal(size=2) + 1.0), t64(rng.normal(size=2))])

    def meca_fn(x, k):
        mod = MecaModule(np.random.default_rng(0), dtype=np.float64)
        mod.kernel = k
        return mean_all(meca_apply(x, mod))

    run("meca_apply", meca_fn, lambda rng: [t64(rng.normal(size=(1, 4, 3, 3))), t64(rng.normal(size=3))])
    return results


def _cadrb_grad_check() -> CheckResult:
    # fixed fixture screened for finite-difference validity (no kink inside
    # the +-1e-3 probes); see the test suite for the screening procedure
    blk = Cadrb(np.random.default_rng(2), 2, 2, DropBlockConfig(mode="eval", drop_rate=0.0), dtype=np.float64)
    x = Tensor(np.random.default_rng(52).normal(size=(2, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    params = [p for _, p in blk.named_parameters()]
    err = grad_check(lambda xi, *ps: mean_all(blk.forward(xi)), [x, *params], epsilon=1e-3)
    return CheckResult("grad:cadrb", err < 1e-4, f"max rel err {err:.2e}")


def _forward_oracles() -> list[CheckResult]:
    results = []
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float64))
    p = Conv2dParams(Tensor(np.ones((1, 1, 3, 3), dtype=np.float64)), Tensor(np.zeros(1, dtype=np.float64)), padding=1)
    out = conv2d(x, p).data[0, 0]
    results.append(CheckResult("oracle:conv2d-counting", out[1, 1] == 9 and out[0, 0] == 4, f"center {out[1, 1]}, corner {out[0, 0]}"))

    out1d = conv1d_shared(t64([1.0, 2.0, 3.0]), t64([1.0, 1.0, 1.0])).data
    results.append(CheckResult("oracle:conv1d-hand-sum", np.array_equal(out1d, [3.0, 6.0, 5.0]), f"got {out1d.tolist()}"))

    pooled, _ = maxpool2d_2x2(t64([[[[1.0, 2.0], [3.0, 4.0]]]]))
    results.append(CheckResult("oracle:maxpool", pooled.data[0, 0, 0, 0] == 4.0, f"got {pooled.data[0, 0, 0, 0]}"))

    m = MecaModule(np.random.default_rng(0), dtype=np.float64)
    m.kernel.data[:] = 0.0
    gate = meca_map(Tensor(np.random.default_rng(1).normal(size=(1, 5, 2, 2)), dtype=np.float64), m).data
    results.append(CheckResult("oracle:meca-zero-kernel", bool(np.all(gate == 0.5)), "gate is 0.5 everywhere"))

    a = concat_channels(t64(np.full((1, 1, 2, 2), 1.0)), t64(np.full((1, 1, 2, 2), 2.0)))
    results.append(CheckResult("oracle:concat-order", a.data[0, 0, 0, 0] == 1.0 and a.data[0, 1, 0, 0] == 2.0, "channels in order"))
    return results


def _dropblock_statistics(trials: int = 10_000) -> CheckResult:
    rng = np.random.default_rng(2024)
    x = Tensor(np.random.default_rng(5).uniform(0.0, 1.0, size=(1, 1, 32, 32)).astype(np.float64))
    cfg = DropBlockConfig(block_size=7, drop_rate=0.15, mode="train")
    dropped = 0.0
    mean_out = 0.0
    for _ in range(trials):
        out = dropblock(x, cfg, rng).data
        dropped += (out == 0.0).mean()
        mean_out += out.mean()
    dropped /= trials
    mean_out /= trials
    mass_err = abs(mean_out - x.data.mean()) / x.data.mean()
    ok = 0.13 <= dropped <= 0.17 and mass_err < 0.05
    return CheckResult("dropblock:statistics", ok, f"dropped {dropped:.4f}, mass err {mass_err:.3%} over {trials} trials")


def _auc_equivalence(cases: int = 400) -> CheckResult:
    from .metrics import auc

    rng = np.random.default_rng(77)
    for _ in range(cases):
        n = int(rng.integers(2, 50))
        scores = rng.choice([0.0, 0.2, 0.5, 0.5, 0.8, 1.0], size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1][:, None]
        neg = scores[labels == 0][None, :]
        oracle = ((pos > neg).sum(dtype=np.float64) + 0.5 * (pos == neg).sum(dtype=np.float64)) / (pos.size * neg.size)
        if auc(scores, labels) != oracle:
            return CheckResult("auc:pairwise-equivalence", False, f"mismatch on n={n}")
    worked = auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    return CheckResult("auc:pairwise-equivalence", worked == 0.75, f"{cases} random cases exact; worked example {worked}")


def _meca_parameter_claim() -> CheckResult:
    for cin, cout in ((1, 1), (3, 16), (8, 8), (16, 32)):
        with_m = parameter_count(Cadrb(np.random.default_rng(0), cin, cout, DropBlockConfig(), use_meca=True))
        without = parameter_count(Cadrb(np.random.default_rng(0), cin, cout, DropBlockConfig(), use_meca=False))
        if with_m - without != 3:
            return CheckResult("meca:three-parameters", False, f"diff {with_m - without} at ({cin},{cout})")
    return CheckResult("meca:three-parameters", True, "block diff 3 across channel configs")


def _negative_control() -> CheckResult:
    """A deliberately corrupted conv backward must be caught by grad_check."""

    def corrupted_conv(x, params):
        def fwd(xa, wa, ba):
            # genuine forward, wrong weight gradient
            real = conv2d(Tensor(xa), Conv2dParams(Tensor(wa), Tensor(ba), params.stride, params.padding))

            def bad_bwd(g):
                return np.zeros_like(xa), np.ones_like(wa), g.sum(axis=(0, 2, 3))

            return real.data, bad_bwd

        return record("conv2d_corrupted", (x, params.weight, params.bias), fwd)

    rng = np.random.default_rng(3)
    x = t64(rng.normal(size=(1, 2, 4, 4)))
    w = t64(rng.normal(size=(2, 2, 3, 3)))
    b = t64(rng.normal(size=2))
    err = grad_check(lambda xi, wi, bi: mean_all(corrupted_conv(xi, Conv2dParams(wi, bi, 1, 1))), [x, w, b], epsilon=1e-3)
    return CheckResult("negative-control:corrupt-backward", err > 1e-2, f"corruption detected with err {err:.2e}")


def run_selfcheck(trials: int = 10_000, verbose_print=print) -> tuple[list[CheckResult], float]:
    t0 = time.time()
    enable_nan_checks(True)
    try:
        results: list[CheckResult] = []
        results += _op_grad_checks()
        results.append(_cadrb_grad_check())
        results += _forward_oracles()
        results.append(_dropblock_statistics(trials))
        results.append(_auc_equivalence())
        results.append(_meca_parameter_claim())
        results.append(_negative_control())
    finally:
        enable_nan_checks(False)
    elapsed = time.time() - t0
    width = max(len(r.name) for r in results)
    for r in results:
        verbose_print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    verbose_print(f"{'----':4s}  {sum(r.ok for r in results)}/{len(results)} checks passed in {elapsed:.1f}s")
    return results, elapsed
