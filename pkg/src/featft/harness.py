"""Experiment protocols, transfer-rate reports, and report emission.

Protocols: single-model transfer with random or most-difficult targets,
leave-one-out ensemble transfer, fine-tune iteration / tap-layer ablations,
and data-free universal perturbations started from the 0.5 mean image.
Every report row carries a seed digest and can be re-run in isolation.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import json
import os
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, AttackTask, SupHighParams, run_baseline_attack
from .data import Dataset
from .engine import ConfigurationError, Model, forward
from .finetune import FinetuneConfig, finetune
from .zoo import predict

SCENARIOS = ("random_target", "most_difficult", "ensemble_holdout",
              "uap", "ablation_nft", "ablation_layer")


@dataclass
class ExperimentPlan:
    scenario: str = "random_target"
    sources: list[str] = field(default_factory=list)   # empty -> all models
    targets: list[str] = field(default_factory=list)   # empty -> all models
    attacks: list[str] = field(default_factory=lambda: ["ce"])
    ft: list[bool] = field(default_factory=lambda: [False, True])
    task_count: int = 200
    seed: int = 0
    iters_no_ft: int = 200
    iters_with_ft: int = 160
    attack_cfg: AttackConfig = field(default_factory=AttackConfig)
    ft_cfg: FinetuneConfig = field(default_factory=FinetuneConfig)
    suphigh: SupHighParams = field(default_factory=SupHighParams)
    sweep_values: list = field(default_factory=list)
    diagnostic_whitebox: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")


@dataclass
class ReportRow:
    source: str
    target: str
    attack: str
    scenario: str
    ft: bool
    success: int
    count: int
    rate: float
    seed_digest: str


@dataclass
class TransferReport:
    rows: list[ReportRow]
    config_digest: str
    seed: int
    metadata: dict = field(default_factory=dict)


def plan_digest(plan: ExperimentPlan) -> str:
    return hashlib.sha256(
        json.dumps(asdict(plan), sort_keys=True).encode()).hexdigest()[:16]


def _row_digest(plan: ExperimentPlan, source: str, target: str, attack: str,
                ft: bool, scenario: str) -> str:
    key = json.dumps([plan.seed, source, target, attack, ft, scenario,
                      plan.task_count])
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def pick_target(scenario: str, source_logits: np.ndarray, y_o: int,
                rng: np.random.Generator) -> int:
    nc = len(source_logits)
    if scenario == "most_difficult":
        return int(np.argmin(source_logits))   # ties -> lowest class index
    choices = [c for c in range(nc) if c != y_o]
    return int(rng.choice(choices))


def eval_pool(models: list[Model], dataset: Dataset):
    """Attack-eval images every model classifies correctly (re-verified here)."""
    xs, ys = dataset.subset("attack_eval")
    if len(ys) == 0:
        raise ConfigurationError("dataset has no attack_eval split")
    keep = np.ones(len(ys), dtype=bool)
    for m in models:
        keep &= np.array([predict(m, x) == int(y) for x, y in zip(xs, ys)])
    if not keep.any():
        raise ConfigurationError("no attack-eval image is classified correctly "
                                 "by every model")
    return xs[keep], ys[keep]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _cells(plan: ExperimentPlan, names: list[str]):
    """(source_key, member names, target names) per crafting cell.

    source_key is the crafting identity used in the report's source column;
    for ensembles it is 'ens-minus-<holdout>'.
    """
    sources = plan.sources or names
    targets = plan.targets or names
    cells = []
    if plan.scenario == "ensemble_holdout":
        if len(names) < 3:
            raise ConfigurationError("ensemble_holdout needs >= 3 models")
        for holdout in targets:
            members = [n for n in names if n != holdout]
            cells.append((f"ens-minus-{holdout}", members, [holdout]))
    else:
        for src in sources:
            tg = [t for t in targets if t != src or plan.diagnostic_whitebox]
            cells.append((src, [src], tg))
    return cells


def _craft(models: dict[str, Model], plan: ExperimentPlan, members: list[str],
           attack: str, ft: bool, task_idx: int, image: np.ndarray,
           y_o: int, y_t: int, src_i: int, atk_i: int,
           nft_override: int | None = None,
           tap_override: int | None = None) -> np.ndarray:
    source = [models[n] for n in members]
    src = source[0] if len(source) == 1 else source
    iters = plan.iters_with_ft if ft else plan.iters_no_ft
    cfg = replace(plan.attack_cfg, loss=attack, iters_N=iters)
    task = AttackTask(image, y_o, y_t, src)
    rng = np.random.default_rng([plan.seed, src_i, atk_i, int(ft), task_idx])
    sup = plan.suphigh if attack == "suphigh" else None
    adv = run_baseline_attack(task, cfg, suphigh=sup, rng=rng)
    if ft:
        ft_cfg = replace(
            plan.ft_cfg,
            iters_Nft=plan.ft_cfg.iters_Nft if nft_override is None else nft_override,
            tap=plan.ft_cfg.tap if tap_override is None else tap_override,
            seed=_derived_seed(plan.seed, src_i, atk_i, task_idx, 7),
        )
        # fine-tuning always runs on a single model; for an ensemble source
        # use the first member in canonical order
        ft_model = sorted(source, key=lambda m: m.name)[0]
        if ft_cfg.iters_Nft > 0:
            adv = finetune(adv, image, y_t, y_o, ft_model, ft_cfg, cfg)
    return adv


def _make_tasks(plan: ExperimentPlan, models: dict[str, Model],
                cells, pool_x: np.ndarray, pool_y: np.ndarray):
    """Per-cell task lists [(task_idx, image, y_o, y_t)], shared image/target
    draws across cells so ft/no-ft and attack comparisons are paired."""
    rng = np.random.default_rng([plan.seed, 101])
    idxs = rng.integers(0, len(pool_y), size=plan.task_count)
    tasks_by_cell = {}
    for src_key, members, _ in cells:
        tasks = []
        for t_i, j in enumerate(idxs):
            image, y_o = pool_x[j], int(pool_y[j])
            trng = np.random.default_rng([plan.seed, 202, t_i])
            if plan.scenario == "most_difficult":
                ref = models[members[0]] if len(members) == 1 else None
                if ref is None:
                    # ensemble: least-likely under the mean member logits
                    logits = sum(forward(models[n], image)[0] for n in members)
                else:
                    logits = forward(ref, image)[0]
                y_t = pick_target("most_difficult", logits, y_o, trng)
                if y_t == y_o:   # degenerate model; fall back to random
                    y_t = pick_target("random_target", logits, y_o, trng)
            else:
                nc = next(iter(models.values())).spec.class_count
                y_t = pick_target("random_target", np.zeros(nc), y_o, trng)
            tasks.append((t_i, image, y_o, y_t))
        tasks_by_cell[src_key] = tasks
    return tasks_by_cell


# worker globals populated by fork from the parent process
_WORK_CTX: dict = {}


def _work_item(args):
    ctx = _WORK_CTX
    (src_key, members, targets, attack, ft, src_i, atk_i,
     task_idx, image, y_o, y_t, nft, tap) = args
    adv = _craft(ctx["models"], ctx["plan"], members, attack, ft, task_idx,
                 image, y_o, y_t, src_i, atk_i, nft_override=nft,
                 tap_override=tap)
    return {t: int(predict(ctx["models"][t], adv) == y_t) for t in targets}


def run_transfer_experiment(plan: ExperimentPlan, models: dict[str, Model],
                            dataset: Dataset, jobs: int = 1) -> TransferReport:
    for name in (plan.sources or []) + (plan.targets or []):
        if name not in models:
            raise ConfigurationError(f"no checkpoint loaded for model {name!r}")
    names = sorted(models)
    pool_x, pool_y = eval_pool(list(models.values()), dataset)
    cells = _cells(plan, names)
    tasks_by_cell = _make_tasks(plan, models, cells, pool_x, pool_y)

    sweeps: list[tuple[str, int | None, int | None, bool]]
    if plan.scenario == "ablation_nft":
        values = plan.sweep_values or [0, 2, 5, 10, 15, 20, 30]
        sweeps = [(f"ablation_nft:{v}", int(v), None, True) for v in values]
    elif plan.scenario == "ablation_layer":
        sweeps = None   # per-source layer lists, resolved below
    else:
        sweeps = [(plan.scenario, None, None, None)]

    items = []
    keys = []
    for src_i, (src_key, members, targets) in enumerate(cells):
        if plan.scenario == "ablation_layer":
            from .engine import feature_layers
            layers = plan.sweep_values or feature_layers(models[members[0]].spec)
            local = [(f"ablation_layer:{k}", None, int(k), True) for k in layers]
        else:
            local = sweeps
        for scen, nft, tap, ft_forced in local:
            for atk_i, attack in enumerate(plan.attacks):
                fts = plan.ft if ft_forced is None else [ft_forced]
                for ft in fts:
                    for (t_i, image, y_o, y_t) in tasks_by_cell[src_key]:
                        items.append((src_key, members, targets, attack, ft,
                                      src_i, atk_i, t_i, image, y_o, y_t,
                                      nft, tap))
                        keys.append((src_key, targets, attack, scen, ft))

    _WORK_CTX.clear()
    _WORK_CTX.update({"models": models, "plan": plan})
    if jobs > 1 and items:
        with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_work_item, items, chunksize=4))
    else:
        results = [_work_item(it) for it in items]

    counts: dict[tuple, int] = {}
    for (src_key, targets, attack, scen, ft), res in zip(keys, results):
        for t in targets:
            k = (src_key, t, attack, scen, ft)
            counts[k] = counts.get(k, 0) + res[t]

    rows = []
    seen = set()
    for (src_key, targets, attack, scen, ft) in keys:
        for t in targets:
            k = (src_key, t, attack, scen, ft)
            if k in seen:
                continue
            seen.add(k)
            n = plan.task_count
            s = counts[k]
            rows.append(ReportRow(src_key, t, attack, scen, ft, s, n,
                                  s / n if n else 0.0,
                                  _row_digest(plan, src_key, t, attack, ft, scen)))
    meta = {"pool_size": int(len(pool_y)), "class_count":
            int(next(iter(models.values())).spec.class_count)}
    return TransferReport(rows, plan_digest(plan), plan.seed, meta)


def rerun_row(plan: ExperimentPlan, row: ReportRow, models: dict[str, Model],
              dataset: Dataset, jobs: int = 1) -> int:
    """Recompute one row's success count from its recorded seed material."""
    sub = replace(plan, attacks=[row.attack], ft=[row.ft])
    rep = run_transfer_experiment(sub, models, dataset, jobs=jobs)
    for r in rep.rows:
        if (r.source, r.target, r.attack, r.scenario, r.ft) == \
                (row.source, row.target, row.attack, row.scenario, row.ft):
            return r.success
    raise ConfigurationError("row not reproducible from plan")


def run_uap_datafree(model: Model, y_t: int, attack_cfg: AttackConfig,
                     ft_cfg: FinetuneConfig | None, dataset: Dataset,
                     iters_with_ft: int | None = None,
                     suphigh: SupHighParams | None = None):
    """Data-free universal perturbation from the constant 0.5 image."""
    start = np.full(model.spec.input_shape, 0.5, dtype=np.float32)
    logits, _ = forward(model, start)
    y_o = int(np.argmax(logits))
    if y_o == y_t:
        y_o = int(np.argsort(-logits)[1])
    cfg = attack_cfg
    if ft_cfg is not None and iters_with_ft is not None:
        cfg = replace(attack_cfg, iters_N=iters_with_ft)
    task = AttackTask(start, y_o, y_t, model)
    rng = np.random.default_rng([cfg.seed, y_t])
    adv = run_baseline_attack(task, cfg, suphigh=suphigh, rng=rng)
    if ft_cfg is not None and ft_cfg.iters_Nft > 0:
        adv = finetune(adv, start, y_t, y_o, model, ft_cfg, cfg)
    delta = adv - start
    hits = 0
    for img in dataset.images:
        x = np.clip(img + delta, 0.0, 1.0).astype(np.float32)
        hits += predict(model, x) == y_t
    n = len(dataset.images)
    return delta, hits / n if n else 0.0


def format_rate(rate: float) -> str:
    return f"{rate:.4f}"


def emit_report_csv(report: TransferReport, path: str) -> None:
    try:
        f = open(path, "w", newline="")
    except OSError as e:
        raise IOError(f"cannot write report: {e}") from e
    with f:
        wr = csv.writer(f)
        wr.writerow(["source", "target", "attack", "scenario", "ft",
                     "success", "count", "rate", "seed_digest"])
        for r in report.rows:
            wr.writerow([r.source, r.target, r.attack, r.scenario,
                         int(r.ft), r.success, r.count, format_rate(r.rate),
                         r.seed_digest])


def parse_report_csv(path: str) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(ReportRow(rec["source"], rec["target"], rec["attack"],
                                  rec["scenario"], bool(int(rec["ft"])),
                                  int(rec["success"]), int(rec["count"]),
                                  float(rec["rate"]), rec["seed_digest"]))
    return rows


def emit_report_svg(report: TransferReport, path: str) -> None:
    """Grouped bar chart: one group per (source,target,attack) cell with
    paired no-ft / ft bars."""
    if not report.rows:
        raise ConfigurationError("cannot plot an empty report")
    cells: dict[tuple, dict[bool, float]] = {}
    for r in report.rows:
        cells.setdefault((r.source, r.target, r.attack, r.scenario), {})[r.ft] = r.rate
    bar_w, gap, h = 18, 26, 240
    width = 60 + len(cells) * (2 * bar_w + gap)
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width), height=str(h + 120))
    ET.SubElement(svg, "line", x1="40", y1=str(h + 10), x2=str(width - 10),
                  y2=str(h + 10), stroke="black")
    for frac in (0.0, 0.5, 1.0):
        y = h + 10 - frac * h
        t = ET.SubElement(svg, "text", x="5", y=str(y + 4),
                          attrib={"font-size": "10"})
        t.text = f"{frac:.1f}"
    x = 50
    for (src, tgt, atk, scen), pair in cells.items():
        for ft in (False, True):
            if ft not in pair:
                continue
            bh = pair[ft] * h
            ET.SubElement(svg, "rect", x=str(x), y=str(h + 10 - bh),
                          width=str(bar_w), height=str(max(bh, 0.5)),
                          fill="#4477aa" if not ft else "#cc6644")
            x += bar_w
        label = ET.SubElement(
            svg, "text", x=str(x - bar_w), y=str(h + 24),
            attrib={"font-size": "8", "text-anchor": "middle",
                    "transform": f"rotate(45 {x - bar_w} {h + 24})"})
        label.text = f"{src}->{tgt} {atk}"
        x += gap
    try:
        ET.ElementTree(svg).write(path, xml_declaration=True, encoding="utf-8")
    except OSError as e:
        raise IOError(f"cannot write plot: {e}") from e


def emit_report(report: TransferReport, fmt: str, path: str) -> None:
    if fmt == "csv":
        emit_report_csv(report, path)
    elif fmt == "svg_plot":
        emit_report_svg(report, path)
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
