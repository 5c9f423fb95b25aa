"""Experiment orchestration: model zoo, the three protocols, report emission.

The three protocols mirror the benchmark's core claims at desk scale:

  fixed_loss   all attacks stopped at the same surrogate loss; transferability
               is read against the RMSE each optimizer happens to produce.
  gamma_boost  the same, with an extra outward-l2 loss term (gamma > 0) to
               push RMSE up at matched surrogate loss.
  fixed_rmse   all attacks stopped at the same RMSE; transferability spread
               across optimizers collapses.

Everything is deterministic under the master seed: per-model seeds are
derived from it, attack runs contain no randomness, and aggregation is
ordered by sample then victim, so reports are byte-stable.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attack import (
    AttackConfig,
    AttackResult,
    IterationsOnly,
    LossTarget,
    RmseTarget,
    describe_stop_rule,
    run_attack,
)
from .config import RunConfig
from .data import Dataset, Sample, gen_synthetic, load_idx, select_eval_set
from .errors import ConfigError, DataError
from .metrics import EvaluationRecord, attack_success_rate, spearman_rho
from .nnet import ArchSpec, Network, TrainSettings, accuracy, load_model, predict_batch, save_model, train_model

log = logging.getLogger("transferbench")

WORKERS_ENV = "TRANSFERBENCH_WORKERS"

CSV_FIXED_COLUMNS = (
    "attack",
    "gamma",
    "stop_rule",
    "mean_rmse_255",
    "std_rmse_255",
    "mean_linf_255",
    "mean_l1_255",
    "mean_l0_frac",
    "mean_iters",
)


def fmt6(value: float) -> str:
    """Render a number with 6 significant digits (report byte-determinism)."""
    return f"{float(value):.6g}"


def round6(value: float | None) -> float | None:
    if value is None:
        return None
    value = float(value)
    if not np.isfinite(value):
        return None
    return float(fmt6(value))


# ---------------------------------------------------------------------------
# model zoo


def _model_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, 0x500D, index]).generate_state(1)[0])


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "idx":
        return load_idx(cfg.data.idx_images, cfg.data.idx_labels)
    return gen_synthetic(cfg.data.synthetic, seed=cfg.seed)


def adversarial_train(
    arch: ArchSpec,
    dataset: Dataset,
    attack_cfg: AttackConfig,
    train_cfg: TrainSettings,
    seed: int,
    name: str = "",
) -> Network:
    """Train on attack-perturbed batches: each batch is replaced by run_attack
    outputs against the current model before the gradient step."""
    if not isinstance(attack_cfg.stop_rule, IterationsOnly):
        raise ConfigError("adversarial_train: attack must use IterationsOnly stopping")

    def perturb_batch(net: Network, xb: np.ndarray, yb: np.ndarray) -> np.ndarray:
        return np.stack([
            run_attack(net, Sample(xb[i], int(yb[i])), attack_cfg).adv_pixels
            for i in range(len(xb))
        ])

    return train_model(dataset, arch, train_cfg, seed, name=name, batch_hook=perturb_batch)


def robust_accuracy(net: Network, dataset: Dataset, attack_cfg: AttackConfig) -> float:
    """Accuracy under a white-box attack on this model itself."""
    hits = 0
    for sample in dataset.samples:
        res = run_attack(net, sample, attack_cfg)
        pred = int(predict_batch(net, res.adv_pixels[None, :])[0])
        hits += pred == sample.label
    return hits / len(dataset)


def _zoo_plan(cfg: RunConfig) -> list[dict]:
    """Deterministic (name, arch-spec, seed, adversarial?) list: surrogate first."""
    plan = [{"model": cfg.zoo.surrogate, "seed": _model_seed(cfg.seed, 0), "adv": False}]
    for i, victim in enumerate(cfg.zoo.victims):
        plan.append({"model": victim, "seed": _model_seed(cfg.seed, 1 + i), "adv": False})
    if cfg.zoo.adversarial is not None:
        plan.append({
            "model": cfg.zoo.adversarial.model,
            "seed": _model_seed(cfg.seed, 0x0ADD),
            "adv": True,
        })
    return plan


def build_model_zoo(
    cfg: RunConfig, dataset: Dataset, force: bool = False
) -> tuple[Network, list[Network]]:
    """Train (or reload byte-identical checkpoints of) the surrogate and victims.

    Checkpoints land in <out_dir>/models/<name>.tbnet and are reused when the
    stored arch and seed still match the config.
    """
    models_dir = Path(cfg.out_dir) / "models"
    input_shape = dataset.shape
    ncls = dataset.num_classes
    trained: list[Network] = []
    for entry in _zoo_plan(cfg):
        spec, seed = entry["model"], entry["seed"]
        arch = spec.arch(input_shape, ncls)
        path = models_dir / f"{spec.name}.tbnet"
        net = None
        if not force and path.exists():
            try:
                cached = load_model(path)
                if cached.arch == arch and cached.seed == seed and cached.name == spec.name:
                    net = cached
                    log.info("zoo: reusing checkpoint %s", path)
            except Exception as exc:  # stale/corrupt checkpoint: retrain
                log.warning("zoo: ignoring unreadable checkpoint %s (%s)", path, exc)
        if net is None:
            if entry["adv"]:
                adv = cfg.zoo.adversarial
                attack_cfg = AttackConfig(
                    optimizer_kind="gd",
                    epsilon_255=adv.epsilon_255,
                    step_255=adv.step_255,
                    max_iters=adv.max_iters,
                    stop_rule=IterationsOnly(),
                )
                train_cfg = replace(
                    cfg.zoo.train,
                    epochs=adv.epochs,
                    learning_rate=adv.learning_rate or cfg.zoo.train.learning_rate,
                )
                log.info("zoo: adversarially training %s (seed %d)", spec.name, seed)
                net = adversarial_train(arch, dataset, attack_cfg, train_cfg, seed, name=spec.name)
            else:
                log.info("zoo: training %s (seed %d)", spec.name, seed)
                net = train_model(dataset, arch, cfg.zoo.train, seed, name=spec.name)
            save_model(net, path)
        log.info("zoo: %s clean accuracy %.3f", net.name, net.clean_accuracy)
        trained.append(net)
    return trained[0], trained[1:]


@dataclass
class ExperimentContext:
    """Everything the protocols share: models, eval subset, clean-accuracy context."""

    cfg: RunConfig
    surrogate: Network
    victims: list[Network]
    eval_set: Dataset
    skipped: int
    victim_clean_acc: list[float]


def build_context(cfg: RunConfig, force: bool = False) -> ExperimentContext:
    dataset = build_dataset(cfg)
    surrogate, victims = build_model_zoo(cfg, dataset, force=force)
    eval_set, skipped = select_eval_set(dataset, surrogate, cfg.data.eval_n, seed=cfg.seed)
    if len(eval_set) == 0:
        raise DataError("eval set is empty: surrogate misclassified every drawn sample")
    log.info("eval set: %d samples (%d skipped as surrogate errors)", len(eval_set), skipped)
    x = eval_set.pixel_matrix()
    y = eval_set.labels()
    clean_acc = [accuracy(v, x, y) for v in victims]
    return ExperimentContext(
        cfg=cfg,
        surrogate=surrogate,
        victims=victims,
        eval_set=eval_set,
        skipped=skipped,
        victim_clean_acc=clean_acc,
    )


# ---------------------------------------------------------------------------
# attack execution


def _attack_chunk(payload) -> list[AttackResult]:
    net, samples, cfg = payload
    return [run_attack(net, s, cfg) for s in samples]


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


def run_attacks(net: Network, samples: list[Sample], cfg: AttackConfig) -> list[AttackResult]:
    """Attack every sample; output order follows input order regardless of workers."""
    workers = _worker_count()
    if workers == 1 or len(samples) < 2 * workers:
        return [run_attack(net, s, cfg) for s in samples]
    chunks = [list(part) for part in np.array_split(np.array(samples, dtype=object), workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_attack_chunk, [(net, chunk, cfg) for chunk in chunks]))
    return [res for part in parts for res in part]


@dataclass(frozen=True)
class AttackRow:
    """Per-(attack, setting) aggregates over the eval set."""

    attack: str
    gamma: float
    stop_rule: str
    mean_rmse_255: float
    std_rmse_255: float
    mean_linf_255: float
    mean_l1_255: float
    mean_l0_frac: float
    mean_iters: float
    asr_per_victim: tuple[float, ...]
    mean_asr: float
    mean_final_ce: float
    mean_final_true_prob: float
    surrogate_fooled_rate: float
    frac_budget_exhausted: float


@dataclass
class ExperimentReport:
    name: str
    epsilon_255: float
    victims: tuple[str, ...]
    victim_clean_acc: tuple[float, ...]
    eval_count: int
    skipped_count: int
    rows: list[AttackRow]
    summary: dict


def _evaluate_on_victims(
    ctx: ExperimentContext, results: list[AttackResult]
) -> list[EvaluationRecord]:
    adv = np.stack([r.adv_pixels for r in results])
    labels = ctx.eval_set.labels()
    preds = np.stack([predict_batch(v, adv) for v in ctx.victims], axis=1)  # (M, V)
    return [
        EvaluationRecord(
            sample_id=i,
            predictions=tuple(int(p) for p in preds[i]),
            fooled=tuple(bool(p != labels[i]) for p in preds[i]),
        )
        for i in range(len(results))
    ]


def _attack_row(
    ctx: ExperimentContext, kind: str, attack_cfg: AttackConfig, results: list[AttackResult]
) -> AttackRow:
    # feasibility is re-checked here rather than trusted from the attack loop
    org = ctx.eval_set.pixel_matrix()
    adv = np.stack([r.adv_pixels for r in results])
    linf = 255.0 * np.max(np.abs(adv - org))
    if linf > attack_cfg.epsilon_255 + 1e-9 or adv.min() < 0.0 or adv.max() > 1.0:
        raise DataError(f"attack {kind}: infeasible adversarial examples (linf={linf})")

    records = _evaluate_on_victims(ctx, results)
    per_victim, mean_asr = attack_success_rate(records, len(ctx.victims))
    rmses = np.array([r.stats.rmse_255 for r in results])
    return AttackRow(
        attack=kind,
        gamma=attack_cfg.gamma,
        stop_rule=describe_stop_rule(attack_cfg.stop_rule),
        mean_rmse_255=float(rmses.mean()),
        std_rmse_255=float(rmses.std()),
        mean_linf_255=float(np.mean([r.stats.linf_255 for r in results])),
        mean_l1_255=float(np.mean([r.stats.l1_255 for r in results])),
        mean_l0_frac=float(np.mean([r.stats.l0_frac for r in results])),
        mean_iters=float(np.mean([r.iterations for r in results])),
        asr_per_victim=tuple(per_victim),
        mean_asr=mean_asr,
        mean_final_ce=float(np.mean([r.final_ce_loss for r in results])),
        mean_final_true_prob=float(np.mean([r.final_true_prob for r in results])),
        surrogate_fooled_rate=float(np.mean([r.surrogate_fooled for r in results])),
        frac_budget_exhausted=float(np.mean([r.stop_reason == "max_iters" for r in results])),
    )


def _run_rows(
    ctx: ExperimentContext, settings: list[tuple[str, AttackConfig]]
) -> list[AttackRow]:
    rows = []
    for kind, attack_cfg in settings:
        log.info("attack %s (gamma=%g, %s) over %d samples",
                 kind, attack_cfg.gamma, describe_stop_rule(attack_cfg.stop_rule), len(ctx.eval_set))
        results = run_attacks(ctx.surrogate, ctx.eval_set.samples, attack_cfg)
        rows.append(_attack_row(ctx, kind, attack_cfg, results))
    return rows


def _asr_std(rows: list[AttackRow]) -> float:
    return float(np.std([row.mean_asr for row in rows]))


# ---------------------------------------------------------------------------
# protocols


def experiment_fixed_loss(ctx: ExperimentContext) -> ExperimentReport:
    """All attacks stopped at the same true-class probability, gamma=0."""
    acfg = ctx.cfg.attack
    rule = LossTarget(acfg.loss_tau)
    rows = _run_rows(ctx, [(k, acfg.build(k, rule)) for k in ctx.cfg.experiments.attacks])
    rho = spearman_rho([r.mean_rmse_255 for r in rows], [r.mean_asr for r in rows]) if len(rows) >= 2 else None
    summary = {
        "spearman_rmse_asr": rho,
        "asr_std_across_attacks": _asr_std(rows),
        "mean_asr_overall": float(np.mean([r.mean_asr for r in rows])),
        "loss_tau": acfg.loss_tau,
    }
    return _make_report(ctx, "fixed_loss", rows, summary)


def experiment_gamma(ctx: ExperimentContext) -> ExperimentReport:
    """Fixed-loss protocol swept over the outward-l2 weight gamma (0 included)."""
    acfg = ctx.cfg.attack
    gammas = list(ctx.cfg.experiments.gamma_list)
    if 0.0 not in gammas or not any(g > 0 for g in gammas):
        raise ConfigError("experiments.gamma_list: need gamma=0 and at least one gamma>0")
    rule = LossTarget(acfg.loss_tau)
    settings = [
        (kind, acfg.build(kind, rule, gamma=g))
        for kind in ctx.cfg.experiments.attacks
        for g in gammas
    ]
    rows = _run_rows(ctx, settings)
    base = {row.attack: row for row in rows if row.gamma == 0.0}
    pairs = []
    for row in rows:
        if row.gamma > 0.0:
            pairs.append({
                "attack": row.attack,
                "gamma": row.gamma,
                "delta_asr": row.mean_asr - base[row.attack].mean_asr,
                "delta_rmse_255": row.mean_rmse_255 - base[row.attack].mean_rmse_255,
            })
    summary = {
        "gamma_list": gammas,
        "pairs": pairs,
        "mean_delta_asr": float(np.mean([p["delta_asr"] for p in pairs])),
        "mean_delta_rmse_255": float(np.mean([p["delta_rmse_255"] for p in pairs])),
        "loss_tau": acfg.loss_tau,
    }
    return _make_report(ctx, "gamma_boost", rows, summary)


def experiment_fixed_rmse(
    ctx: ExperimentContext, fixed_loss_report: ExperimentReport | None = None
) -> ExperimentReport:
    """All attacks stopped at the same perturbation RMSE (loss target ignored)."""
    acfg = ctx.cfg.attack
    rule = RmseTarget(acfg.rmse_target_255)
    settings = [
        (k, acfg.build(k, rule, gamma=ctx.cfg.experiments.fixed_rmse_gamma,
                       max_iters=acfg.rmse_max_iters))
        for k in ctx.cfg.experiments.attacks
    ]
    rows = _run_rows(ctx, settings)
    std = _asr_std(rows)
    baseline_std = (
        fixed_loss_report.summary.get("asr_std_across_attacks")
        if fixed_loss_report is not None
        else None
    )
    summary = {
        "rmse_target_255": acfg.rmse_target_255,
        "asr_std_across_attacks": std,
        "fixed_loss_asr_std": baseline_std,
        "asr_std_ratio": (std / baseline_std) if baseline_std else None,
        "frac_rmse_target_reached": float(np.mean([1.0 - r.frac_budget_exhausted for r in rows])),
    }
    return _make_report(ctx, "fixed_rmse", rows, summary)


def _make_report(ctx, name, rows, summary) -> ExperimentReport:
    return ExperimentReport(
        name=name,
        epsilon_255=ctx.cfg.attack.epsilon_255,
        victims=tuple(v.name for v in ctx.victims),
        victim_clean_acc=tuple(ctx.victim_clean_acc),
        eval_count=len(ctx.eval_set),
        skipped_count=ctx.skipped,
        rows=rows,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# emission


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "name": report.name,
        "epsilon_255": round6(report.epsilon_255),
        "victims": list(report.victims),
        "victim_clean_acc": [round6(a) for a in report.victim_clean_acc],
        "eval_count": report.eval_count,
        "skipped_count": report.skipped_count,
        "rows": [
            {
                "attack": row.attack,
                "gamma": round6(row.gamma),
                "stop_rule": row.stop_rule,
                "mean_rmse_255": round6(row.mean_rmse_255),
                "std_rmse_255": round6(row.std_rmse_255),
                "mean_linf_255": round6(row.mean_linf_255),
                "mean_l1_255": round6(row.mean_l1_255),
                "mean_l0_frac": round6(row.mean_l0_frac),
                "mean_iters": round6(row.mean_iters),
                "asr_per_victim": [round6(a) for a in row.asr_per_victim],
                "mean_asr": round6(row.mean_asr),
                "mean_final_ce": round6(row.mean_final_ce),
                "mean_final_true_prob": round6(row.mean_final_true_prob),
                "surrogate_fooled_rate": round6(row.surrogate_fooled_rate),
                "frac_budget_exhausted": round6(row.frac_budget_exhausted),
            }
            for row in report.rows
        ],
        "summary": _round_tree(report.summary),
    }


def _round_tree(node):
    if isinstance(node, dict):
        return {k: _round_tree(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_round_tree(v) for v in node]
    if isinstance(node, bool) or node is None or isinstance(node, (int, str)):
        return node
    return round6(node)


def report_from_dict(doc: dict) -> ExperimentReport:
    rows = [
        AttackRow(
            attack=r["attack"],
            gamma=float(r["gamma"]),
            stop_rule=r["stop_rule"],
            mean_rmse_255=float(r["mean_rmse_255"]),
            std_rmse_255=float(r["std_rmse_255"]),
            mean_linf_255=float(r["mean_linf_255"]),
            mean_l1_255=float(r["mean_l1_255"]),
            mean_l0_frac=float(r["mean_l0_frac"]),
            mean_iters=float(r["mean_iters"]),
            asr_per_victim=tuple(float(a) for a in r["asr_per_victim"]),
            mean_asr=float(r["mean_asr"]),
            mean_final_ce=float(r["mean_final_ce"]),
            mean_final_true_prob=float(r["mean_final_true_prob"]),
            surrogate_fooled_rate=float(r["surrogate_fooled_rate"]),
            frac_budget_exhausted=float(r["frac_budget_exhausted"]),
        )
        for r in doc["rows"]
    ]
    return ExperimentReport(
        name=doc["name"],
        epsilon_255=float(doc["epsilon_255"]),
        victims=tuple(doc["victims"]),
        victim_clean_acc=tuple(float(a) for a in doc["victim_clean_acc"]),
        eval_count=int(doc["eval_count"]),
        skipped_count=int(doc["skipped_count"]),
        rows=rows,
        summary=doc["summary"],
    )


def load_report(path: str | Path) -> ExperimentReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def _csv_lines(report: ExperimentReport) -> list[str]:
    n_victims = len(report.victims)
    header = list(CSV_FIXED_COLUMNS) + [f"asr_victim_{i}" for i in range(n_victims)] + ["mean_asr"]
    lines = [",".join(header)]
    for row in report.rows:
        cells = [
            row.attack,
            fmt6(row.gamma),
            row.stop_rule,
            fmt6(row.mean_rmse_255),
            fmt6(row.std_rmse_255),
            fmt6(row.mean_linf_255),
            fmt6(row.mean_l1_255),
            fmt6(row.mean_l0_frac),
            fmt6(row.mean_iters),
            *[fmt6(a) for a in row.asr_per_victim],
            fmt6(row.mean_asr),
        ]
        lines.append(",".join(cells))
    return lines


def emit_report(
    report: ExperimentReport, out_dir: str | Path, formats: tuple[str, ...] = ("csv", "json", "png")
) -> list[Path]:
    """Write the report as CSV (pinned header), JSON, and an optional figure.

    CSV and JSON bytes are deterministic for a fixed report: all numbers are
    rendered at 6 significant digits.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out_dir / f"{report.name}.csv"
        path.write_bytes(("\n".join(_csv_lines(report)) + "\n").encode("utf-8"))
        written.append(path)
    if "json" in formats:
        path = out_dir / f"{report.name}.json"
        text = json.dumps(report_to_dict(report), indent=2, sort_keys=True, allow_nan=False)
        path.write_bytes((text + "\n").encode("utf-8"))
        written.append(path)
    if "png" in formats:
        from .figures import render_report_figure

        path = out_dir / f"{report.name}.png"
        render_report_figure(report, path)
        written.append(path)
    for path in written:
        log.info("wrote %s", path)
    return written
