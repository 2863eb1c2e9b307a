"""Subcommand bodies. Each returns a small summary dict and writes its artifacts under ``cfg.out``.

Output layout::

    <out>/manifest.json                     config hash, seeds, version, published defaults
    <out>/seed<k>/backbone.tntc, backbone_log.csv
    <out>/seed<k>/allocator.tntc, allocator_log.csv
    <out>/seed<k>/history_<method>_k<keep>.txt
    <out>/sweep.csv, <out>/flops.csv, <out>/maps/*.pgm|*.svg
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import io
import json
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .. import __version__, checkpoint
from .. import tensor as T
from ..allocator import AllocatorHyper, AllocatorParams, NoiseConfig, init_allocator, train_allocator
from ..cost import PRESETS, dense_profile, flops_estimate, time_callable
from ..data import Dataset, DatasetSpec, generate_synthetic, load_container
from ..errors import ConfigError, DataError, UsageError
from ..pruning import (
    CLS_TOPK, RANDOM_DROP, StageRecord, apply_schedule, baseline_cls_topk, baseline_random_drop, format_history,
    keep_count_for_rate, parse_history, run_pruned,
)
from ..rng import RngStream
from ..vit import ModelParams, TrainHyper, train_backbone
from . import render
from .config import PUBLISHED_DEFAULTS, ExperimentConfig

SWEEP_COLUMNS = ["method", "seed", "keep_config", "final_token_count", "top1_accuracy", "gflops", "throughput"]
UNSUPPORTED = "unsupported"
TNT_METHODS = {
    "tnt": {},
    "tnt_no_sim": {"s": 0},
    "tnt_seq": {"partition": "sequential"},
    "tnt_merge": {"action": "merge"},
}


# ----------------------------------------------------------------- plumbing


def threads() -> int:
    raw = os.environ.get("TNT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TNT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TNT_THREADS must be a positive integer, got {raw!r}")
    return n


def run_shards(fn, items: list) -> list:
    """``[fn(i) for i in items]``, fanned out over up to ``TNT_THREADS`` worker processes."""
    n = min(threads(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=n, mp_context=get_context("fork")) as pool:
        return list(pool.map(fn, items))


def version_string() -> str:
    """``v<version>-g<commit>[-dirty]`` when the source tree is a git checkout, else ``v<version>``."""
    here = Path(__file__).resolve().parent
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--abbrev=12"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    return f"v{__version__}-g{desc}" if desc else f"v{__version__}"


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed{seed}"


def write_manifest(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    manifest["version"] = version_string()
    manifest["published_defaults"] = PUBLISHED_DEFAULTS
    entry = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "eval_seed": cfg.eval_seed,
        "beta": cfg.allocator.beta,
        "allocator_epochs": cfg.allocator.epochs,
    }
    entry.update(extra or {})
    manifest.setdefault("commands", {})[command] = entry
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def params_hash(params: ModelParams) -> str:
    return hashlib.sha256(checkpoint.encode(params.arrays())).hexdigest()


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    if isinstance(cfg.data, DatasetSpec):
        return generate_synthetic(cfg.data, "train"), generate_synthetic(cfg.data, "test")
    train = _load_dataset(cfg.data["container"])
    test_path = cfg.data.get("test_container")
    return train, (_load_dataset(test_path) if test_path else None)


def _load_dataset(path) -> Dataset:
    if not Path(path).exists():
        raise DataError(f"dataset container {path} not found")
    return load_container(path)


def _check_images(ds: Dataset, cfg: ExperimentConfig, what: str) -> None:
    m = cfg.model
    want = (m.channels, m.image_size, m.image_size)
    if ds.images.shape[1:] != want:
        raise DataError(f"{what} images have shape {ds.images.shape[1:]}, model expects {want}")
    if len(ds) and ds.labels.max() >= m.num_classes:
        raise DataError(f"{what} labels reach {ds.labels.max()}, model has {m.num_classes} classes")


def load_backbone(cfg: ExperimentConfig, seed: int, path=None) -> ModelParams:
    path = Path(path) if path else seed_dir(cfg, seed) / "backbone.tntc"
    if not path.exists():
        raise DataError(f"backbone checkpoint {path} not found; run train-backbone first")
    return ModelParams.load(path, cfg.model)


def load_allocator(cfg: ExperimentConfig, seed: int) -> AllocatorParams:
    path = seed_dir(cfg, seed) / "allocator.tntc"
    if not path.exists():
        raise DataError(f"allocator checkpoint {path} not found; run train-allocator first")
    alloc = AllocatorParams.load(path)
    alloc.check_compatible(cfg.model)
    return alloc


def eval_stream(cfg: ExperimentConfig, seed: int) -> RngStream:
    """Randomness of evaluation only (random drop, random partitions); never touches training."""
    return RngStream(cfg.eval_seed, stream_id=0xE7A1).fork(seed)


# ----------------------------------------------------------------- train-backbone


def _train_backbone_shard(cfg: ExperimentConfig, seed: int) -> dict:
    train, _ = load_splits(cfg)
    _check_images(train, cfg, "training")
    b = cfg.backbone
    hyper = TrainHyper(lr=b.lr, momentum=b.momentum, epochs=b.epochs, batch=b.batch, seed=seed)
    params, log = train_backbone(train, cfg.model, hyper)
    d = seed_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    params.save(d / "backbone.tntc")
    write_csv(d / "backbone_log.csv", ["epoch", "loss", "train_accuracy"],
              [[e.epoch, f"{e.loss:.10g}", f"{e.accuracy:.6f}"] for e in log])
    return {"seed": seed, "final_accuracy": log[-1].accuracy if log else None, "hash": params_hash(params)}


def cmd_train_backbone(cfg: ExperimentConfig) -> dict:
    results = run_shards(functools.partial(_train_backbone_shard, cfg), list(cfg.seeds))
    write_manifest(cfg, "train-backbone", {"backbone_hashes": {str(r["seed"]): r["hash"] for r in results}})
    return {"runs": results}


# ----------------------------------------------------------------- train-allocator


def _train_allocator_shard(cfg: ExperimentConfig, backbone_path, seed: int) -> dict:
    backbone = load_backbone(cfg, seed, backbone_path)
    train, _ = load_splits(cfg)
    _check_images(train, cfg, "training")
    a = cfg.allocator
    if a.train_samples is not None:
        train = train.subset(np.arange(min(a.train_samples, len(train))))
    before = params_hash(backbone)
    alloc = init_allocator(cfg.model, cfg.noised_layers, RngStream(seed, stream_id=0xA1), kind=a.kind, hidden=a.hidden)
    noise = NoiseConfig(beta=a.beta, noised_layers=cfg.noised_layers)
    hyper = AllocatorHyper(lr=a.lr, epochs=a.epochs, batch=a.batch, seed=seed)
    alloc, log = train_allocator(backbone, alloc, train, noise, hyper)
    after = params_hash(backbone)
    if before != after:
        raise UsageError("backbone parameters changed during allocator training")
    d = seed_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    alloc.save(d / "allocator.tntc")
    write_csv(d / "allocator_log.csv", ["epoch", "loss", "train_accuracy"],
              [[e.epoch, f"{e.loss:.10g}", f"{e.accuracy:.6f}"] for e in log])
    return {"seed": seed, "backbone_hash_before": before, "backbone_hash_after": after}


def cmd_train_allocator(cfg: ExperimentConfig, backbone_path=None) -> dict:
    results = run_shards(functools.partial(_train_allocator_shard, cfg, backbone_path), list(cfg.seeds))
    write_manifest(cfg, "train-allocator", {
        "backbone_hashes": {str(r["seed"]): r["backbone_hash_after"] for r in results},
        "noised_layers": list(cfg.noised_layers),
    })
    return {"runs": results}


# ----------------------------------------------------------------- sweep


def _eval_images(cfg: ExperimentConfig) -> Dataset:
    _, test = load_splits(cfg)
    if test is None:
        raise ConfigError("sweep needs held-out data: set data.test_container")
    _check_images(test, cfg, "held-out")
    if cfg.eval_samples is not None:
        test = test.subset(np.arange(min(cfg.eval_samples, len(test))))
    if len(test) == 0:
        raise DataError("held-out split is empty")
    return test


def _keep_config(cfg: ExperimentConfig, method: str, keep: int | None) -> str:
    sc = cfg.schedule
    if sc.mode == "multi_layer":
        s = 0 if method == "tnt_no_sim" else sc.multi_layer_s
        locs = ",".join(map(str, sc.multi_layer_locations))
        rates = ",".join(f"{r:g}" for r in sc.rates)
        return f"loc={locs};rates={rates};s={s}"
    loc = sc.locations[0]
    if method in TNT_METHODS:
        s = TNT_METHODS[method].get("s", sc.s)
        return f"loc={loc};keep={keep};s={s}"
    return f"loc={loc};keep={keep}"


def _runner(cfg: ExperimentConfig, backbone: ModelParams, alloc, method: str, keep: int | None, seed: int):
    """``fn(images, sample_ids) -> (logits, history, profile, allocator_tokens)`` for one sweep cell."""
    rng = eval_stream(cfg, seed)
    if method in TNT_METHODS:
        sched = cfg.prune_schedule(keep, **TNT_METHODS[method])
        sched.similarity.rng = rng

        def run(images, sample_ids):
            res = apply_schedule(backbone, alloc, images, sched, sample_ids)
            return res.logits.data, res.history, res.tokens_per_layer, res.allocator_tokens

        return run
    loc = cfg.schedule.locations[0]
    special = cfg.model.special_tokens

    if method == RANDOM_DROP:
        def stage(x, _att):
            ks = baseline_random_drop(x, keep, rng, stage=loc)
            return x.keep(ks.positions), [ks]
    elif method == CLS_TOPK:
        def stage(x, att):
            ks = baseline_cls_topk(att, keep, special, x.live_indices)
            return x.keep(ks.positions), [ks]
    else:
        raise ConfigError(f"unknown method {method!r}")

    def run(images, sample_ids):
        with T.no_grad():
            logits, history, profile = run_pruned(backbone, images, {loc: stage}, None, sample_ids,
                                                  want_attention=method == CLS_TOPK)
        return logits.data, history, profile, []

    return run


def _sweep_shard(cfg: ExperimentConfig, cell: tuple[int, str, int | None]) -> dict:
    seed, method, keep = cell
    key = {"method": method, "seed": seed, "keep_config": _keep_config(cfg, method, keep)}
    if method == CLS_TOPK and cfg.model.special_tokens < 1:
        return {**key, "final_token_count": "", "top1_accuracy": UNSUPPORTED, "gflops": "", "history": [], "keep": keep}
    test = _eval_images(cfg)
    backbone = load_backbone(cfg, seed)
    alloc = load_allocator(cfg, seed) if method in TNT_METHODS else None
    run = _runner(cfg, backbone, alloc, method, keep, seed)
    correct = 0
    history_lines: list[str] = []
    profile = alloc_tokens = None
    final = None
    bs = cfg.sweep.batch
    for lo in range(0, len(test), bs):
        ids = np.arange(lo, min(lo + bs, len(test)))
        logits, history, profile, alloc_tokens = run(test.images[ids], ids)
        correct += int((np.argmax(logits, axis=1) == test.labels[ids]).sum())
        final = history[-1].keepset.count if history else cfg.model.num_patches
        n_hist = cfg.sweep.history_samples - lo
        if n_hist > 0:
            head = ids[:n_hist]
            clipped = [StageRecord(r.layer, dataclasses.replace(
                r.keepset, positions=r.keepset.positions[: len(head)], kept=r.keepset.kept[: len(head)],
                removed=r.keepset.removed[: len(head)])) for r in history]
            history_lines += format_history(clipped, head)
    alloc_macs = next(iter(alloc.heads.values())).macs_per_token() if alloc is not None else None
    report = flops_estimate(cfg.model, profile, alloc_tokens, alloc_macs)
    return {
        **key,
        "final_token_count": final,
        "top1_accuracy": correct / len(test),
        "gflops": report.total_gflops,
        "history": history_lines,
        "keep": keep,
    }


def _sweep_cells(cfg: ExperimentConfig, methods) -> list[tuple[int, str, int | None]]:
    if cfg.schedule.mode == "multi_layer":
        bad = [m for m in methods if m not in TNT_METHODS]
        if bad:
            raise ConfigError(f"multi-layer sweeps support only allocator methods, not {bad}")
        keeps = [None]
    else:
        keeps = cfg.keep_counts()
    return [(seed, m, k) for seed in cfg.seeds for m in methods for k in keeps]


def _row_sort_key(row: dict):
    keep = row.get("keep")
    return (row["method"], row["seed"], -(keep if keep is not None else 0), row["keep_config"])


def cmd_sweep(cfg: ExperimentConfig, methods=None, keep_counts=None) -> dict:
    if methods is not None:
        cfg = cfg.with_overrides([f"sweep.methods={json.dumps(list(methods))}"])
    if keep_counts is not None:
        cfg = cfg.with_overrides([f"sweep.keep_counts={json.dumps([int(k) for k in keep_counts])}"])
    methods = list(cfg.sweep.methods)
    cells = _sweep_cells(cfg, methods)
    rows = run_shards(functools.partial(_sweep_shard, cfg), cells)
    rows.sort(key=_row_sort_key)
    # timing runs are serialised after all shards finish
    throughputs = {}
    if cfg.sweep.throughput:
        test = _eval_images(cfg)
        for row in rows:
            if row["top1_accuracy"] == UNSUPPORTED:
                continue
            backbone = load_backbone(cfg, row["seed"])
            alloc = load_allocator(cfg, row["seed"]) if row["method"] in TNT_METHODS else None
            run = _runner(cfg, backbone, alloc, row["method"], row.get("keep"), row["seed"])
            images = test.images[: cfg.sweep.batch]
            ids = np.arange(len(images))
            rep = time_callable(lambda: run(images, ids), len(images), cfg.sweep.batch, warmup=1, iters=5)
            throughputs[id(row)] = rep.images_per_second
    out = Path(cfg.out)
    table = []
    for row in rows:
        acc = row["top1_accuracy"]
        table.append([
            row["method"], row["seed"], row["keep_config"], row["final_token_count"],
            acc if acc == UNSUPPORTED else f"{acc:.6f}",
            "" if row["gflops"] == "" else f"{row['gflops']:.6f}",
            f"{throughputs[id(row)]:.2f}" if id(row) in throughputs else "",
        ])
        if row["history"]:
            keep = row.get("keep")
            name = f"history_{row['method']}_k{keep if keep is not None else 'multi'}.txt"
            path = seed_dir(cfg, row["seed"]) / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(row["history"]) + "\n", encoding="utf-8")
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, table)
    write_manifest(cfg, "sweep", {"methods": methods, "keep_counts": cfg.keep_counts()})
    return {"rows": [dict(zip(SWEEP_COLUMNS, r)) for r in table], "path": str(out / "sweep.csv")}


def read_sweep(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- flops


def schedule_profile(cfg: ExperimentConfig, keep: int | None = None) -> tuple[list[int], list[int]]:
    """Analytic per-block token counts (and allocator scorings) for the configured schedule."""
    m = cfg.model
    S, N = m.special_tokens, m.num_patches
    sc = cfg.schedule
    if keep is None and sc.mode == "single_layer":
        keep = keep_count_for_rate(N, sc.rates[0])
    live = N
    profile, scored = [], []
    if sc.mode == "multi_layer":
        rates = dict(zip(sc.multi_layer_locations, sc.rates))
        if sc.pre_block_similarity and sc.multi_layer_s:
            live -= sc.multi_layer_s
        for loc in range(1, m.depth + 1):
            profile.append(live + S)
            if loc in rates:
                scored.append(live)
                live = keep_count_for_rate(live, rates[loc])
    else:
        loc0 = sc.locations[0]
        for loc in range(1, m.depth + 1):
            profile.append(live + S)
            if loc == loc0:
                scored.append(live)
                live = keep
    return profile, scored


def cmd_flops(cfg: ExperimentConfig, preset: str | None = None, tokens=None, keep: int | None = None) -> dict:
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; available presets: {', '.join(sorted(PRESETS))}")
        model = PRESETS[preset]
        profile = list(tokens) if tokens else dense_profile(model)
        report = flops_estimate(model, profile)
    else:
        model = cfg.model
        if tokens:
            report = flops_estimate(model, list(tokens))
        else:
            profile, scored = schedule_profile(cfg, keep)
            report = flops_estimate(model, profile, scored)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(cfg, "flops", {"preset": preset})
    return {"gflops": report.total_gflops, "report": report, "path": str(out / "flops.csv")}


# ----------------------------------------------------------------- render-map


def cmd_render_map(cfg: ExperimentConfig, history_path, samples=None, data_path=None, scale: int = 4) -> dict:
    history_path = Path(history_path)
    if not history_path.exists():
        raise DataError(f"history file {history_path} not found")
    lines = parse_history(history_path.read_text(encoding="utf-8").splitlines())
    if data_path is not None:
        ds = _load_dataset(data_path)
    else:
        _, ds = load_splits(cfg)
        if ds is None:
            raise ConfigError("render-map needs --data or a config with held-out data")
    by_key: dict[tuple[int, int], list[int]] = {}
    for h in lines:
        by_key[(h.sample, h.layer)] = h.kept  # last record at a layer is the final survivor set
    present = sorted({s for s, _ in by_key})
    wanted = present if samples is None else [int(s) for s in samples]
    for sid in wanted:
        if sid not in present:
            raise DataError(f"sample {sid} does not appear in history {history_path}")
        if not 0 <= sid < len(ds):
            raise DataError(f"sample {sid} outside the dataset ({len(ds)} images)")
    patch = cfg.model.patch_size
    if ds.images.shape[-1] % patch:
        raise DataError(f"image width {ds.images.shape[-1]} not divisible by patch size {patch}")
    out = Path(cfg.out) / "maps"
    written = []
    for sid in wanted:
        image = ds.images[sid]
        written += render.write_map(out, f"sample{sid}_input", image, patch, None, scale)
        for (s, layer), kept in sorted(by_key.items()):
            if s == sid:
                written += render.write_map(out, f"sample{sid}_layer{layer}", image, patch, kept, scale)
    write_manifest(cfg, "render-map", {"history": str(history_path), "samples": wanted})
    return {"files": [str(p) for p in written]}
