"""End-to-end acceptance suite at the full experiment calibration.

Each criterion prints one summary line ("[criterion N] PASS/FAIL: ...") and
asserts its stated bound. The transfer experiment used by criteria 3 and 4
is computed once and shared; everything is deterministic given the seeds in
conftest.
"""

import time

import numpy as np
import pytest
from scipy import stats

from conftest import jobs
from featft import zoo
from featft.attacks import (AttackConfig, AttackTask, SupHighParams,
                            clip_to_budget, loss_value_and_grad,
                            run_baseline_attack)
from featft.engine import Model, ScalarSpec, value_and_grad_input
from featft.finetune import (FinetuneConfig, aggregate_gradient,
                             combine_aggregate, finetune,
                             grad_feature_of_logit, targeted_ila_finetune)
from featft.harness import (ExperimentPlan, eval_pool, rerun_row,
                            run_transfer_experiment, run_uap_datafree)

_SUITE_T0 = time.monotonic()


def _line(n: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


# ------------------------------------------------------------------ 1


def test_criterion_1_gradient_correctness():
    t0 = time.monotonic()
    h, tol = 1e-4, 1e-4
    worst = 0.0
    rng = np.random.default_rng(0)
    for spec in zoo.build_zoo():
        weights = {k: v.astype(np.float64)
                   for k, v in zoo.init_weights(spec, 11).items()}
        model = Model(spec, weights)
        x = rng.random((3, 16, 16))
        from featft.engine import forward
        _, feat = forward(model, x, tap=spec.default_tap)
        scalars = [ScalarSpec("cross_entropy", label=4),
                   ScalarSpec("logit", label=2),
                   ScalarSpec("feature_inner",
                              delta=rng.normal(size=feat.shape),
                              tap=spec.default_tap)]
        for scalar in scalars:
            _, g = value_and_grad_input(model, x, scalar)
            checked = 0
            while checked < 50:
                i = tuple(int(rng.integers(0, d)) for d in x.shape)
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                vp, gp = value_and_grad_input(model, xp, scalar)
                vm, gm = value_and_grad_input(model, xm, scalar)
                # the scalar is piecewise smooth (relu/pool); a coordinate
                # whose local gradient changes across the interval straddles
                # a kink, where a central difference is meaningless
                if abs(gp[i] - gm[i]) > 1e-6 * max(1.0, abs(g[i])):
                    continue
                fd = (vp - vm) / (2 * h)
                rel = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6)
                worst = max(worst, rel)
                checked += 1
    dt = time.monotonic() - t0
    ok = worst <= tol and dt <= 120
    _line(1, ok, f"max relative error {worst:.2e} (tol {tol:.0e}), "
                 f"3 architectures x 3 scalar kinds x 50 coords, {dt:.0f}s")
    assert worst <= tol
    assert dt <= 120


# ------------------------------------------------------------------ 2


def test_criterion_2_budget_and_range(trained_models, full_dataset):
    t0 = time.monotonic()
    pool_x, pool_y = eval_pool(list(trained_models.values()), full_dataset)
    names = sorted(trained_models)
    rng = np.random.default_rng(1)
    n_total, eps = 1000, 16 / 255
    violations = 0
    for i in range(n_total):
        model = trained_models[names[i % 3]]
        j = int(rng.integers(0, len(pool_y)))
        image, y_o = pool_x[j], int(pool_y[j])
        y_t = int(rng.integers(0, 10))
        while y_t == y_o:
            y_t = int(rng.integers(0, 10))
        loss = ("ce", "logit", "suphigh")[i % 3]
        cfg = AttackConfig(iters_N=8, loss=loss, seed=i)
        sup = SupHighParams() if loss == "suphigh" else None
        adv = run_baseline_attack(AttackTask(image, y_o, y_t, model), cfg,
                                  suphigh=sup, rng=np.random.default_rng([3, i]))
        if i % 2 == 1:
            adv = finetune(adv, image, y_t, y_o, model,
                           FinetuneConfig(iters_Nft=3, ensemble_n=4, seed=i),
                           cfg)
        # exact post-clip bounds: the budget clip applied to +/- infinity
        # gives the reachable extremes
        orig = np.clip(image.astype(np.float32), 0.0, 1.0)
        hi = clip_to_budget(np.full_like(orig, 2.0), orig, eps)
        lo = clip_to_budget(np.full_like(orig, -1.0), orig, eps)
        if not (np.all(adv <= hi) and np.all(adv >= lo)
                and adv.min() >= 0.0 and adv.max() <= 1.0):
            violations += 1
    dt = time.monotonic() - t0
    ok = violations == 0 and dt <= 600
    _line(2, ok, f"{n_total} AEs (mixed losses, with/without ft), "
                 f"{violations} budget/range violations, {dt:.0f}s")
    assert violations == 0
    assert dt <= 600


# ------------------------------------------------- shared experiment


@pytest.fixture(scope="module")
def core_report(trained_models, full_dataset):
    plan = ExperimentPlan(attacks=["ce", "logit"], ft=[False, True],
                          task_count=200, seed=0, diagnostic_whitebox=True)
    t0 = time.monotonic()
    report = run_transfer_experiment(plan, trained_models, full_dataset,
                                     jobs=jobs())
    return plan, report, time.monotonic() - t0


# ------------------------------------------------------------------ 3


def test_criterion_3_whitebox_strength(core_report):
    _, report, _ = core_report
    rates = {r.source: r.rate for r in report.rows
             if r.attack == "ce" and not r.ft and r.source == r.target}
    ok = len(rates) == 3 and all(v >= 0.90 for v in rates.values())
    detail = ", ".join(f"{k}={v:.3f}" for k, v in sorted(rates.items()))
    _line(3, ok, f"CE N=200 white-box success over 200 tasks: {detail} "
                 f"(threshold 0.90)")
    assert len(rates) == 3
    for name, rate in rates.items():
        assert rate >= 0.90, (name, rate)


# ------------------------------------------------------------------ 4


def test_criterion_4_core_directional_claim(core_report):
    _, report, dt = core_report
    summaries = []
    all_ok = True
    for attack in ("ce", "logit"):
        cells = {}
        for r in report.rows:
            if r.attack == attack and r.source != r.target:
                cells.setdefault((r.source, r.target), {})[r.ft] = r.rate
        assert len(cells) == 6
        base = np.array([v[False] for v in cells.values()])
        ft = np.array([v[True] for v in cells.values()])
        wins = int((ft > base).sum())
        losses = int((ft < base).sum())
        mean_gain = float((ft - base).mean())
        if wins + losses > 0:
            p = stats.binomtest(wins, wins + losses,
                                alternative="greater").pvalue
        else:
            p = 1.0
        ok = mean_gain > 0 and p < 0.05
        all_ok &= ok
        summaries.append(f"{attack}: mean {base.mean():.3f}->{ft.mean():.3f} "
                         f"({wins}W/{losses}L/{6 - wins - losses}T, "
                         f"sign test p={p:.4f})")
    ok_runtime = dt <= 1200
    _line(4, all_ok and ok_runtime,
          "; ".join(summaries) + f"; experiment wall time {dt:.0f}s (cap 1200)")
    assert ok_runtime
    assert all_ok


# ------------------------------------------------------------------ 5


def test_criterion_5_degeneracies(trained_models, full_dataset):
    model = trained_models["mini_residual"]
    pool_x, pool_y = eval_pool(list(trained_models.values()), full_dataset)
    image, y_o = pool_x[0], int(pool_y[0])
    y_t = (y_o + 1) % 10
    cfg = AttackConfig(iters_N=10)
    ae = run_baseline_attack(AttackTask(image, y_o, y_t, model), cfg,
                             rng=np.random.default_rng(0))

    out0 = finetune(ae, image, y_t, y_o, model, FinetuneConfig(iters_Nft=0),
                    cfg)
    a = np.array_equal(out0, ae)

    fcfg = FinetuneConfig()
    dt = aggregate_gradient(model, ae, y_t, None, fcfg,
                            np.random.default_rng(1))
    do = aggregate_gradient(model, image, y_o, None, fcfg,
                            np.random.default_rng(2))
    b = np.array_equal(combine_aggregate(dt, do, 0.0), dt.values)

    g = grad_feature_of_logit(model, image, model.spec.default_tap, y_t)
    agg1 = aggregate_gradient(model, image, y_t, None,
                              FinetuneConfig(ensemble_n=1, keep_prob=1.0),
                              np.random.default_rng(3))
    c = float(np.abs(agg1.values - g / np.linalg.norm(g)).max()) <= 1e-6

    ok = a and b and c
    _line(5, ok, f"N_ft=0 bit-exact: {a}; beta=0 combine bit-exact: {b}; "
                 f"degenerate ensemble within 1e-6: {c}")
    assert a and b and c


# ------------------------------------------------------------------ 6


def test_criterion_6_suphigh_orthogonality(trained_models, full_dataset):
    model = trained_models["mini_plain"]
    pool_x, pool_y = eval_pool(list(trained_models.values()), full_dataset)
    rng = np.random.default_rng(4)
    sup = SupHighParams()
    worst = 0.0
    for step in range(100):
        j = int(rng.integers(0, len(pool_y)))
        image, y_o = pool_x[j], int(pool_y[j])
        y_t = int(rng.integers(0, 10))
        while y_t == y_o:
            y_t = int(rng.integers(0, 10))
        # random iterate inside the budget, like a mid-attack step
        x = clip_to_budget(
            image + rng.uniform(-16 / 255, 16 / 255,
                                image.shape).astype(np.float32),
            image, 16 / 255)
        task = AttackTask(x, y_o, y_t, model)
        _, g = loss_value_and_grad(task, x, "suphigh", sup)
        _, gt = value_and_grad_input(model, x, ScalarSpec("logit", label=y_t))
        _, go = value_and_grad_input(model, x, ScalarSpec("logit", label=y_o))
        g1 = gt - sup.beta1 * go
        component = (g1 - g) / sup.beta2   # the subtracted orthogonal part
        denom = np.linalg.norm(g1) * np.linalg.norm(component)
        if denom == 0:
            continue
        worst = max(worst, float(abs(np.sum(component * g1))) / denom)
    ok = worst <= 1e-6
    _line(6, ok, f"max |<component, g1>| / (|g1||component|) = {worst:.2e} "
                 f"over 100 sampled steps (tol 1e-6)")
    assert ok


# ------------------------------------------------------------------ 7


_C7_CTX: dict = {}


def _c7_one(i):
    from featft.zoo import predict
    pool_x, pool_y = _C7_CTX["pool"]
    model = _C7_CTX["model"]
    targets = _C7_CTX["targets"]
    rng = np.random.default_rng([7, i])
    j = int(rng.integers(0, len(pool_y)))
    image, y_o = pool_x[j], int(pool_y[j])
    y_t = int(rng.integers(0, 10))
    while y_t == y_o:
        y_t = int(rng.integers(0, 10))
    cfg = AttackConfig(iters_N=160, seed=i)
    ae = run_baseline_attack(AttackTask(image, y_o, y_t, model), cfg,
                             rng=np.random.default_rng([8, i]))
    prop = finetune(ae, image, y_t, y_o, model, FinetuneConfig(seed=i), cfg)
    ila = targeted_ila_finetune(ae, image, model, None, 10, cfg)
    return (sum(predict(t, prop) == y_t for t in targets),
            sum(predict(t, ila) == y_t for t in targets))


def test_criterion_7_ila_comparison(trained_models, full_dataset):
    import concurrent.futures as cf

    pool = eval_pool(list(trained_models.values()), full_dataset)
    model = trained_models["mini_residual"]
    targets = [m for n, m in sorted(trained_models.items())
               if n != "mini_residual"]
    n_tasks = 120
    _C7_CTX.clear()
    _C7_CTX.update({"pool": pool, "model": model, "targets": targets})
    with cf.ProcessPoolExecutor(max_workers=jobs()) as ex:
        results = list(ex.map(_c7_one, range(n_tasks)))
    prop_rate = sum(r[0] for r in results) / (2 * n_tasks)
    ila_rate = sum(r[1] for r in results) / (2 * n_tasks)
    ok = prop_rate >= ila_rate
    _line(7, ok, f"mean transfer on shared CE baselines: "
                 f"combined-attribution fine-tuner {prop_rate:.3f} vs "
                 f"fixed-direction (ILA-style) {ila_rate:.3f} over "
                 f"{n_tasks} tasks x 2 targets")
    assert ok


# ------------------------------------------------------------------ 8


_C8_CTX: dict = {}


def _c8_one(y_t):
    model, eval_ds = _C8_CTX["model"], _C8_CTX["ds"]
    base_cfg = AttackConfig(iters_N=200, seed=0)
    _, r_base = run_uap_datafree(model, y_t, base_cfg, None, eval_ds)
    _, r_ft = run_uap_datafree(model, y_t, base_cfg, FinetuneConfig(seed=y_t),
                               eval_ds, iters_with_ft=160)
    return r_base, r_ft


def test_criterion_8_uap_direction(trained_models, full_dataset):
    import concurrent.futures as cf
    model = trained_models["mini_residual"]
    ex_x, ex_y = full_dataset.subset("attack_eval")
    from featft.data import Dataset
    eval_ds = Dataset(ex_x, ex_y, np.asarray(["attack_eval"] * len(ex_y)))
    _C8_CTX.clear()
    _C8_CTX.update({"model": model, "ds": eval_ds})
    with cf.ProcessPoolExecutor(max_workers=jobs()) as ex:
        results = list(ex.map(_c8_one, range(10)))
    base = float(np.mean([r[0] for r in results]))
    ft = float(np.mean([r[1] for r in results]))
    ok = ft >= base
    _line(8, ok, f"data-free UAP mean rate over 10 targets: "
                 f"baseline {base:.3f}, with fine-tuning {ft:.3f}")
    assert ok


# ------------------------------------------------------------------ 9


def test_criterion_9_ablation_shape(trained_models, full_dataset):
    from featft.engine import feature_layers

    # iteration-count sweep: best mean transfer at a positive N_ft
    plan = ExperimentPlan(scenario="ablation_nft", attacks=["ce"], ft=[True],
                          task_count=60, seed=0,
                          sources=["mini_branch"],
                          sweep_values=[0, 2, 5, 10, 15])
    rep = run_transfer_experiment(plan, trained_models, full_dataset,
                                  jobs=jobs())
    by_nft = {}
    for r in rep.rows:
        v = int(r.scenario.split(":")[1])
        by_nft.setdefault(v, []).append(r.rate)
    means = {v: float(np.mean(rs)) for v, rs in by_nft.items()}
    best_nft = max(means, key=lambda v: (means[v], -v))
    nft_ok = best_nft > 0

    # layer sweep: early / middle / late tap per source; the middle tap
    # must win for every model
    layer_ok = True
    details = []
    for name in sorted(trained_models):
        fl = feature_layers(trained_models[name].spec)
        n_layers = len(trained_models[name].spec.layers)
        early = fl[0]
        late = fl[-1]
        mid = trained_models[name].spec.default_tap
        lplan = ExperimentPlan(scenario="ablation_layer", attacks=["ce"],
                               ft=[True], task_count=60, seed=0,
                               sources=[name],
                               sweep_values=[early, mid, late])
        lrep = run_transfer_experiment(lplan, trained_models, full_dataset,
                                       jobs=jobs())
        by_tap = {}
        for r in lrep.rows:
            t = int(r.scenario.split(":")[1])
            by_tap.setdefault(t, []).append(r.rate)
        tmeans = {t: float(np.mean(rs)) for t, rs in by_tap.items()}
        best = max(tmeans, key=lambda t: (tmeans[t], t))
        in_middle = 1 / 3 < best / n_layers < 2 / 3
        layer_ok &= in_middle
        details.append(f"{name}: best tap {best}/{n_layers} "
                       f"({'middle' if in_middle else 'NOT middle'})")
    ok = nft_ok and layer_ok
    _line(9, ok, f"N_ft sweep means {means}, best at N_ft={best_nft}; "
                 + "; ".join(details))
    assert nft_ok, means
    assert layer_ok, details


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism_and_runtime(core_report, trained_models,
                                              full_dataset):
    plan, report, _ = core_report
    # re-run one transfer row end to end from its recorded seed material
    row = next(r for r in report.rows
               if r.attack == "ce" and r.ft and r.source != r.target)
    redone = rerun_row(plan, row, trained_models, full_dataset, jobs=jobs())
    same = redone == row.success
    elapsed = time.monotonic() - _SUITE_T0
    ok = same and elapsed <= 45 * 60
    _line(10, ok, f"row {row.source}->{row.target} ce/ft success "
                  f"{row.success} re-run {redone}; suite elapsed "
                  f"{elapsed / 60:.1f} min (cap 45)")
    assert same
    assert elapsed <= 45 * 60
