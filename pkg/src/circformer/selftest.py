"""Quick self-checks run by ``circformer selftest``.

Each check compares a module against an independent reference (central
differences, exact attention, brute-force metric loops) at a size that
finishes in seconds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics as M
from . import tensor as T
from .inference import detect_peaks
from .model import CircFormerMoE, ModelConfig, RandomFeatureMap, exact_attention, favor_plus_attention


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _tiny_model(seed: int) -> CircFormerMoE:
    cfg = ModelConfig(species=("a", "b"), embed_dim=8, conv_blocks=1, kernel_size=3, dilations=(1,),
                      attn_blocks=1, heads=2, random_features=8, activation="gelu", seed=seed)
    return CircFormerMoE(cfg, dtype=np.float64)


def check_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = _tiny_model(seed)
        x = np.eye(5)[rng.integers(0, 5, (2, 12))]
        y = (rng.random((2, 12)) < 0.3).astype(np.float64)
        names = list(model.params)

        def loss(leaves):
            saved = {n: model.params[n] for n in names}
            for n, leaf in zip(names, leaves):
                model.params[n] = leaf
            try:
                return T.weighted_bce_with_logits(model.forward_ssd(x, ["a", "b"]), y, 3.0)
            finally:
                model.params.update(saved)

        worst = T.finite_diff_check(loss, [model.params[n].data for n in names])
    return CheckResult("gradient check (SSD loss, all parameters)", worst < tol, f"max rel err {worst:.2e}")


def check_favor(seed: int = 0, trials: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    medians = []
    for m in (8, 64, 512):
        errs = []
        for t in range(trials):
            q, k, v = (rng.standard_normal((64, 16)) * 0.5 for _ in range(3))
            fmap = RandomFeatureMap.draw(16, m, [seed, t, m])
            approx = favor_plus_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), fmap).data
            exact = exact_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
            errs.append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
        medians.append(float(np.median(errs)))
    ok = medians[0] >= medians[1] >= medians[2]
    return CheckResult("FAVOR+ error shrinks with feature count", ok,
                       "median rel err " + ", ".join(f"m={m}: {e:.3f}" for m, e in zip((8, 64, 512), medians)))


def _brute_peaks(p, threshold):
    out = []
    i = 0
    while i < len(p):
        j = i
        while j + 1 < len(p) and p[j + 1] == p[i]:
            j += 1
        left = p[i - 1] if i > 0 else -np.inf
        right = p[j + 1] if j + 1 < len(p) else -np.inf
        if p[i] > left and p[i] > right and p[i] > threshold:
            out.append((i, float(p[i])))
        i = j + 1
    return out


def check_metrics(seed: int = 0, instances: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        n = int(rng.integers(3, 15))
        p = rng.integers(0, 5, n) / 4.0
        truth = sorted(rng.choice(n, int(rng.integers(1, n)), replace=False).tolist())
        tp = sum(1 for i in range(n) if p[i] > 0.5 and i in truth)
        fp = sum(1 for i in range(n) if p[i] > 0.5 and i not in truth)
        fn = len(truth) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        if abs(M.position_prf(p, truth)[0] - prec) > 0 or abs(M.position_prf(p, truth)[1] - tp / (tp + fn)) > 0:
            bad += 1
        if detect_peaks(p, 0.0) != _brute_peaks(p, 0.0):
            bad += 1
    for tp, fp, tn, fn in itertools.product(range(3), repeat=4):
        if tp + fn and tn + fp:
            ref = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
            if M.balanced_accuracy(M.MetricCounts(tp, fp, tn, fn)) != ref:
                bad += 1
    return CheckResult("metric oracles", bad == 0, f"{bad} mismatches over {instances} random instances")


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "gradients": check_gradients,
    "favor": check_favor,
    "metrics": check_metrics,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed) for fn in CHECKS.values()]
