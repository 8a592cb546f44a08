"""Assemble data, encoders, models and clients from a RunConfig; persist results."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_config
from .datagen import GeneratorSpec, MaskSpec, PartitionSpec, cluster_partition, generate, mask_annotations
from .encoders import TextEncoder, VisualEncoder, encode_visual
from .fedsim import ClientState, FedConfig, RunReport, Server, run_experiment
from .model import ModelHyper, build_model
from .objectives import AslConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ["round", "mAP", "CF1", "OF1", "mean_train_loss", "participants"]
AXES = {
    "t": ("partition", "t_percent"),
    "mask": ("mask", "mask_percent"),
    "participation": ("fed", "participation"),
}


def class_names(C: int) -> list[str]:
    return [f"class_{c:02d}" for c in range(C)]


def client_seed(seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([seed, client_id]).generate_state(1)[0])


def prepare(cfg: RunConfig):
    """Build the world for one run: encoders, shards (as client states), server, eval features."""
    g, e, h = cfg.generator, cfg.encoder, cfg.hyper
    spec = GeneratorSpec(
        C=g.C, input_dim=g.input_dim, samples=g.samples, spurious_strength=g.spurious_strength,
        seed=cfg.seed, base_rate=g.base_rate, noise_std=g.noise_std, context_scale=g.context_scale,
    )
    train = generate(spec, stream=0)
    evalset = generate(replace(spec, samples=g.eval_samples, spurious_strength=g.eval_spurious_strength), stream=1)
    train = mask_annotations(train, MaskSpec(cfg.mask.mask_percent, cfg.seed))

    venc = VisualEncoder(cfg.seed, g.input_dim, e.M, e.D)
    tenc = TextEncoder(cfg.seed, e.token_dim, e.D)
    shards = cluster_partition(train, venc, PartitionSpec(cfg.partition.t_percent), seed=cfg.seed)

    hyper = ModelHyper(
        tau=h.tau, lam=h.lam, beta_cond=h.beta_cond, beta_cls=h.beta_cls, beta_baseline=h.beta_baseline,
        D_s=h.D_s, sinkhorn_iters=h.sinkhorn_iters, sinkhorn_tol=h.sinkhorn_tol,
        alpha_init=h.alpha_init, logit_scale=h.logit_scale,
    )
    asl = AslConfig(h.gamma_pos, h.gamma_neg, h.clip)

    def make_model():
        return build_model(cfg.model, cfg.conditions, class_names(g.C), tenc, e.M, hyper, asl, seed=cfg.seed)

    fed = FedConfig(K=len(shards), rounds=cfg.fed.rounds, participation=cfg.fed.participation,
                    weighting=cfg.fed.weighting, seed=cfg.seed)
    clients = [
        ClientState(
            client_id=k, patches=encode_visual(venc, s.X).data, labels=s.Y, model=make_model(),
            seed=client_seed(cfg.seed, k), lr=h.lr, batch=h.batch, local_epochs=h.local_epochs,
        )
        for k, s in enumerate(shards)
    ]
    server = Server(make_model(), fed)
    return fed, server, clients, encode_visual(venc, evalset.X).data, evalset.Y


def execute(cfg: RunConfig) -> tuple[RunReport, list[int]]:
    fed, server, clients, eval_x, eval_y = prepare(cfg)
    report = run_experiment(
        fed, server, clients, eval_x, eval_y, eval_interval=cfg.eval_interval, threshold=cfg.threshold,
        on_record=lambda r: log.info("round %d mAP=%.4f CF1=%.4f OF1=%.4f", r["round"], r["mAP"], r["CF1"], r["OF1"]),
    )
    return report, [len(c) for c in clients]


def metrics_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([
            r["round"], repr(r["mAP"]), repr(r["CF1"]), repr(r["OF1"]),
            "" if r["mean_train_loss"] is None else repr(r["mean_train_loss"]),
            " ".join(str(p) for p in r["participants"]),
        ])
    return buf.getvalue()


def write_report(cfg: RunConfig, report: RunReport, sizes: list[int], out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if report.final_bundle is not None:
        (out / "bundle.json").write_bytes(report.final_bundle.to_bytes())
    doc = {
        "config": cfg.snapshot(),
        "partition_sizes": sizes,
        "records": report.records,
        "round_seconds": report.round_seconds,
        "final_bundle": "bundle.json",
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    (out / "metrics.csv").write_text(metrics_csv(report.records), encoding="utf-8")
    return out / "report.json"


def run_config(cfg: RunConfig) -> dict:
    report, sizes = execute(cfg)
    path = write_report(cfg, report, sizes, cfg.resolved_output_dir())
    return json.loads(path.read_text(encoding="utf-8"))


def run(config_path) -> dict:
    return run_config(load_config(config_path))


def _with_axis(cfg: RunConfig, axis: str, value: float, out: Path) -> RunConfig:
    section, key = AXES[axis]
    doc = cfg.snapshot()
    doc[section][key] = value
    doc["output_dir"] = str(out)
    return parse_config(doc)


def sweep(config_path, axis: str, values: list[float]) -> list[dict]:
    """One run per value with everything else fixed; writes summary.json and summary.csv."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}")
    base = load_config(config_path)
    root = base.resolved_output_dir() / f"sweep_{axis}"
    rows = []
    for value in values:
        sub = root / f"{axis}={value:g}"
        row = {"axis": axis, "value": value}
        try:
            cfg = _with_axis(base, axis, value, sub)
            report, sizes = execute(cfg)
            write_report(cfg, report, sizes, sub)
            final = report.records[-1]
            row.update(status="ok", partition_sizes=sizes, **{k: final[k] for k in ("round", "mAP", "CF1", "OF1")})
        except Exception as exc:  # a failed value must not sink the sweep
            log.exception("sweep %s=%s failed", axis, value)
            row.update(status=f"failed: {exc}")
        rows.append(row)
        _write_summary(root, rows)
    return rows


def _write_summary(root: Path, rows: list[dict]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    fields = ["axis", "value", "status", "round", "mAP", "CF1", "OF1"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (root / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return json.loads(path.read_text(encoding="utf-8"))


def compare(report_a: dict, report_b: dict) -> dict:
    """Per-eval-point deltas (b - a) and each report's final-minus-first mAP."""
    ra, rb = report_a["records"], report_b["records"]
    if [r["round"] for r in ra] != [r["round"] for r in rb]:
        raise ValueError("reports were evaluated on different schedules")
    deltas = [
        {"round": a["round"], **{m: b[m] - a[m] for m in ("mAP", "CF1", "OF1")}}
        for a, b in zip(ra, rb)
    ]
    return {
        "deltas": deltas,
        "degradation": {"a": ra[-1]["mAP"] - ra[0]["mAP"], "b": rb[-1]["mAP"] - rb[0]["mAP"]},
    }
