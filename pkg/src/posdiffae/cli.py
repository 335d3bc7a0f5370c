"""Command-line entry point: reproducible batch pipelines over the synthetic data format.

Every command writes ``config.json`` (the effective configuration) and
``manifest.json`` (inputs with content hashes, seed, library versions and
the hashes of every output file) into its output directory. ``replay``
re-runs a command from its manifest and checks the output hashes.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

log = logging.getLogger("posdiffae")

ENV_OUT = "POSDIFFAE_OUT"
MANIFEST = "manifest.json"
CONFIG = "config.json"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "n_sections": 18,
        "size": 512,
        "max_rotation": 10.0,
        "patch_size": 32,
        "stride": 16,
        "artifacts": ["tear", "jpeg"],
        "tear_area_fraction": 0.02,
        "jpeg_qf": [5, 10, 15],
        "gamma": [1.2, 1.3, 1.4],
        "blackdot_count": 2,
        "blackdot_radius": 3.0,
        "artifact_per_section": 40,
    },
    "network": {"f_dim": 64, "base_channels": 16, "time_dim": 64, "encoder_stages": 4},
    "train": {
        "lambda1": 1.0,
        "lambda2": 0.001,
        "lambda3": 0.001,
        "learning_rate": 1e-3,
        "epochs": 30,
        "batch_size": 32,
        "T": 1000,
        "max_patches": None,
    },
    "encode": {"split": "val"},
    "classify": {"balanced": True},
    "restore": {
        "n_steps": 50,
        "whiteness_threshold": 0.9,
        "mask_source": "detect",
        "qf": 5,
        "max_patches": None,
    },
    "evaluate": {"blob_threshold": 0.5},
}

ARTIFACT_KINDS = ("tear", "jpeg", "gamma", "blackdot")


class ConfigError(ValueError):
    """Invalid command line or configuration (exit code 2)."""


# --------------------------------------------------------------------------- config

def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _optional_positive(v):
    return v is None or v > 0


CHECKS: dict[str, tuple[Callable, str]] = {
    "seed": (_non_negative, "must be >= 0"),
    "data.n_sections": (lambda v: v >= 2, "must be >= 2 (alternate split)"),
    "data.size": (lambda v: v >= 32, "must be >= 32"),
    "data.max_rotation": (_non_negative, "must be >= 0"),
    "data.patch_size": (lambda v: v >= 4 and v % 4 == 0, "must be a positive multiple of 4"),
    "data.stride": (_positive, "must be >= 1"),
    "data.artifacts": (lambda v: all(k in ARTIFACT_KINDS for k in v), f"entries must be in {ARTIFACT_KINDS}"),
    "data.tear_area_fraction": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "data.jpeg_qf": (lambda v: all(isinstance(q, int) and 1 <= q <= 100 for q in v), "entries must be integers in [1, 100]"),
    "data.gamma": (lambda v: all(g > 0 for g in v), "entries must be > 0"),
    "data.blackdot_count": (_non_negative, "must be >= 0"),
    "data.blackdot_radius": (_positive, "must be > 0"),
    "data.artifact_per_section": (_non_negative, "must be >= 0"),
    "network.f_dim": (_positive, "must be >= 1"),
    "network.base_channels": (_positive, "must be >= 1"),
    "network.time_dim": (lambda v: v >= 2 and v % 2 == 0, "must be an even integer >= 2"),
    "network.encoder_stages": (_positive, "must be >= 1"),
    "train.lambda1": (_non_negative, "must be >= 0"),
    "train.lambda2": (_non_negative, "must be >= 0"),
    "train.lambda3": (_non_negative, "must be >= 0"),
    "train.learning_rate": (_positive, "must be > 0"),
    "train.epochs": (_positive, "must be >= 1"),
    "train.batch_size": (_positive, "must be >= 1"),
    "train.T": (_positive, "must be >= 1"),
    "train.max_patches": (_optional_positive, "must be null or >= 1"),
    "encode.split": (lambda v: v in ("train", "val", "all"), "must be one of train, val, all"),
    "restore.n_steps": (_positive, "must be >= 1"),
    "restore.whiteness_threshold": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "restore.mask_source": (lambda v: v in ("detect", "stored"), "must be detect or stored"),
    "restore.qf": (lambda v: 1 <= v <= 100, "must lie in [1, 100]"),
    "restore.max_patches": (_optional_positive, "must be null or >= 1"),
    "evaluate.blob_threshold": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
}

NULLABLE_INT = {"train.max_patches", "restore.max_patches"}


def _leaf_keys(defaults: dict) -> dict[str, str]:
    """Map every leaf name to its dotted path; ambiguous names map to ''."""
    out: dict[str, str] = {}
    for k, v in defaults.items():
        names = [(kk, f"{k}.{kk}") for kk in v] if isinstance(v, dict) else [(k, k)]
        for name, dotted in names:
            out[name] = "" if name in out else dotted
    return out


def _resolve_key(key: str) -> str:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in DEFAULTS or not isinstance(DEFAULTS[section], dict) or name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key '{key}'")
        return key
    leaves = _leaf_keys(DEFAULTS)
    if key not in leaves:
        raise ConfigError(f"unknown config key '{key}'")
    if not leaves[key]:
        raise ConfigError(f"config key '{key}' is ambiguous; use section.{key}")
    return leaves[key]


def _check_type(dotted: str, value):
    default = _get(DEFAULTS, dotted)
    if dotted in NULLABLE_INT:
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key '{dotted}' has the wrong type ({type(value).__name__})")
    return value


def _get(cfg: dict, dotted: str):
    cur = cfg
    for part in dotted.split("."):
        cur = cur[part]
    return cur


def _set(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = cfg
    for part in parts[:-1]:
        cur = cur[part]
    cur[parts[-1]] = value


def _flatten(doc: dict) -> list[tuple[str, object]]:
    items = []
    for k, v in doc.items():
        if isinstance(v, dict):
            if k not in DEFAULTS or not isinstance(DEFAULTS[k], dict):
                raise ConfigError(f"unknown config section '{k}'")
            items.extend((f"{k}.{kk}", vv) for kk, vv in v.items())
        else:
            items.append((k, v))
    return items


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse value for '{key}': {err}") from err
    return key.strip(), value


def validate_config(cfg: dict) -> None:
    """Range checks for every key, then construction of the module configs."""
    for dotted, (pred, msg) in CHECKS.items():
        value = _get(cfg, dotted)
        try:
            ok = bool(pred(value))
        except TypeError:
            ok = False
        if not ok:
            raise ConfigError(f"invalid value for '{dotted}': {value!r} {msg}")
    if cfg["data"]["patch_size"] > cfg["data"]["size"]:
        raise ConfigError("invalid value for 'data.patch_size': larger than data.size")
    if cfg["restore"]["n_steps"] > cfg["train"]["T"]:
        raise ConfigError("invalid value for 'restore.n_steps': exceeds train.T")
    # the module constructors carry their own invariants
    try:
        network_config(cfg, cfg["data"]["patch_size"])
        train_config(cfg)
    except ValueError as err:
        raise ConfigError(f"invalid configuration: {err}") from err


def load_config(path: Optional[str | Path], overrides: Sequence[str] = (), seed: Optional[int] = None) -> dict:
    """Defaults, then the YAML/JSON file, then ``key=value`` overrides, validated.

    Keys may be given dotted (``train.epochs``) or bare (``epochs``) when the
    bare name is unambiguous.
    """
    cfg = copy.deepcopy(DEFAULTS)
    items: list[tuple[str, object]] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse config file {p}: {err}") from err
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        items.extend(_flatten(doc))
    items.extend(parse_override(o) for o in overrides)
    if seed is not None:
        items.append(("seed", seed))
    for key, value in items:
        dotted = _resolve_key(key)
        _set(cfg, dotted, _check_type(dotted, value))
    validate_config(cfg)
    return cfg


def network_config(cfg: dict, patch_size: int):
    from .networks import NetworkConfig

    return NetworkConfig(patch_size=patch_size, T=cfg["train"]["T"], **cfg["network"])


def train_config(cfg: dict):
    from .training import TrainConfig

    t = {k: v for k, v in cfg["train"].items() if k != "max_patches"}
    return TrainConfig(seed=cfg["seed"], **t)


# --------------------------------------------------------------------------- hashing / manifest

def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_hashes(root: Path) -> dict[str, str]:
    """Hash of every file below ``root`` except manifests."""
    root = Path(root)
    return {
        p.relative_to(root).as_posix(): file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def tree_sha256(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return file_sha256(path)
    h = hashlib.sha256()
    for rel, digest in output_hashes(path).items():
        h.update(f"{rel}\t{digest}\n".encode())
    return h.hexdigest()


def _versions() -> dict:
    import PIL
    import scipy
    import skimage
    import sklearn
    import torch

    from . import __version__

    return {
        "posdiffae": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "scikit-image": skimage.__version__,
        "Pillow": PIL.__version__,
    }


def _dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------- data helpers

def _section_dirs(data: Path, split: str) -> list[Path]:
    data = Path(data)
    split_file = data / "split.json"
    if not split_file.is_file():
        raise FileNotFoundError(f"{data} is not a dataset directory (no split.json)")
    splits = json.loads(split_file.read_text())
    ids = splits["train"] + splits["val"] if split == "all" else splits[split]
    return [data / "sections" / sid for sid in ids]


def load_split(data: Path, split: str, kinds: Optional[set[str]] = None):
    from .datagen import read_section_dir

    kinds = {"none"} if kinds is None else kinds
    records = []
    for d in _section_dirs(data, split):
        records.extend(read_section_dir(d, kinds)[1])
    return records


def _record_key(rec) -> tuple:
    return (rec.section_id, *rec.corner)


def _load_model(model: Path):
    from .networks import load_checkpoint

    path = Path(model)
    if path.is_dir():
        path = path / "model.pt"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _latents_and_rows(bundle, records):
    from .training import encode_images, images_to_tensor

    z = encode_images(bundle, images_to_tensor([r.image for r in records])) if records else np.zeros((0, bundle.cfg.f_dim))
    rows = [
        {"section_id": r.section_id, "x_p": r.corner[0], "y_p": r.corner[1], "region": r.region,
         "r0": r.position.r0, "theta0": r.position.theta0}
        for r in records
    ]
    return z.astype(np.float32), rows


def _balanced_indices(labels: np.ndarray, seed: int) -> np.ndarray:
    """Equal-size random subset per class (the size of the smallest class)."""
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    n = counts.min()
    idx = [np.sort(rng.choice(np.flatnonzero(labels == c), n, replace=False)) for c in classes]
    return np.sort(np.concatenate(idx))


# --------------------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, inputs: dict, out: Path) -> None:
    from .datagen import (
        ExtractionStats, PatchRecord, adjust_gamma, default_section_specs, extract_patches,
        generate_section, simulate_blackdot, simulate_jpeg, simulate_tear, split_alternate,
        write_section_dir,
    )

    d = cfg["data"]
    specs = default_section_specs(d["n_sections"], seed=cfg["seed"], size=(d["size"], d["size"]),
                                  max_rotation=d["max_rotation"])
    train_ids, val_ids = split_alternate([s.section_id for s in specs])
    summary = {"sections": [], "patches": {"train": 0, "val": 0}}
    for spec in specs:
        section = generate_section(spec)
        stats = ExtractionStats()
        clean = extract_patches(section.image, section.labels, section.geometry,
                                (d["patch_size"], d["patch_size"]), d["stride"], stats)
        records = list(clean)
        extra = {}
        is_val = spec.section_id in val_ids
        rng = np.random.default_rng(spec.seed + 1)
        if is_val and "tear" in d["artifacts"]:
            torn, mask = simulate_tear(section.image, d["tear_area_fraction"], rng)
            extra = {"torn.png": torn, "tear_mask.png": mask}
        if is_val and clean and d["artifact_per_section"] > 0:
            n = min(d["artifact_per_section"], len(clean))
            chosen = [clean[i] for i in np.sort(rng.choice(len(clean), n, replace=False))]
            for rec in chosen:
                seed = int(rng.integers(0, 2**31 - 1))
                base = dict(position=rec.position, region=rec.region, section_id=rec.section_id, seed=seed)
                if "jpeg" in d["artifacts"]:
                    for qf in d["jpeg_qf"]:
                        records.append(PatchRecord(image=simulate_jpeg(rec.image, qf),
                                                   artifact_kind=f"jpeg_q{qf}", **base))
                if "gamma" in d["artifacts"]:
                    for g in d["gamma"]:
                        records.append(PatchRecord(image=adjust_gamma(rec.image, g),
                                                   artifact_kind=f"gamma_{g:g}", **base))
                if "blackdot" in d["artifacts"]:
                    img, m = simulate_blackdot(rec.image, d["blackdot_count"], d["blackdot_radius"],
                                               np.random.default_rng(seed))
                    records.append(PatchRecord(image=img, artifact_kind="blackdot", mask=m, **base))
        write_section_dir(out / "sections", section, records, extra)
        summary["sections"].append({
            "section_id": spec.section_id, "split": "val" if is_val else "train",
            "rotation": spec.rotation, "seed": spec.seed, "dot_counts": section.dot_counts,
            "patches_total": stats.total, "patches_kept": stats.kept,
        })
        summary["patches"]["val" if is_val else "train"] += stats.kept
    _dump_json(out / "split.json", {"train": train_ids, "val": val_ids})
    _dump_json(out / "summary.json", summary)


def cmd_train(cfg: dict, inputs: dict, out: Path) -> None:
    import torch

    from .diffusion import build_schedule
    from .networks import build_bundle, save_checkpoint
    from .training import train

    records = load_split(inputs["data"], "train")
    if not records:
        raise RuntimeError("training split holds no patches")
    limit = cfg["train"]["max_patches"]
    if limit is not None:
        records = records[:limit]
    torch.manual_seed(cfg["seed"])
    bundle = build_bundle(network_config(cfg, records[0].image.shape[0]), seed=cfg["seed"])
    tcfg = train_config(cfg)
    schedule = build_schedule(tcfg.T)
    result = train(bundle, records, tcfg, schedule, history_path=out / "history.jsonl",
                   on_epoch=lambda e, lb: log.info("epoch %d %s", e, lb))
    save_checkpoint(result.bundle, out / "model.pt",
                    {"seed": cfg["seed"], "train": cfg["train"], "n_patches": len(records),
                     "schedule": {"T": schedule.T, "beta_start": float(schedule.betas[0]),
                                  "beta_end": float(schedule.betas[-1])}})
    _plot_history(result.history, out / "loss_curve.png")


def _plot_history(history, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = np.arange(1, len(history) + 1)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, name in zip(axes, ("l_mse", "l_r", "l_theta")):
        ax.plot(epochs, [getattr(h, name) for h in history], marker="o", ms=3)
        ax.set_title(name)
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(str(path), dpi=80, metadata={"Software": None})
    plt.close(fig)


def cmd_encode(cfg: dict, inputs: dict, out: Path) -> None:
    bundle, _ = _load_model(inputs["model"])
    records = load_split(inputs["data"], cfg["encode"]["split"])
    z, rows = _latents_and_rows(bundle, records)
    np.save(out / "latents.npy", z)
    _write_jsonl(out / "index.jsonl", rows)


def cmd_classify(cfg: dict, inputs: dict, out: Path) -> None:
    from .evaluation import MetricReport, classification_metrics, fit_linear_classifier

    bundle, _ = _load_model(inputs["model"])
    z_tr, rows_tr = _latents_and_rows(bundle, load_split(inputs["data"], "train"))
    z_va, rows_va = _latents_and_rows(bundle, load_split(inputs["data"], "val"))
    y_tr = np.array([r["region"] for r in rows_tr])
    y_va = np.array([r["region"] for r in rows_va])
    clf = fit_linear_classifier(z_tr, y_tr, seed=cfg["seed"])
    pred = clf.predict(z_va)
    rep = classification_metrics(pred, y_va)
    extra = {"confusion": rep.confusion.tolist(), "kappa_undefined_precision": rep.undefined_precision,
             "n_train": int(y_tr.size), "n_val": int(y_va.size)}
    if cfg["classify"]["balanced"]:
        idx = _balanced_indices(y_va, cfg["seed"])
        bal = classification_metrics(pred[idx], y_va[idx])
        extra.update(balanced_accuracy=bal.accuracy, balanced_kappa=bal.kappa, n_balanced=int(idx.size))
    report = MetricReport(precision=rep.precision, recall=rep.recall, accuracy=rep.accuracy,
                          kappa=rep.kappa, extra=extra)
    (out / "metrics.json").write_text(report.to_json())
    _write_jsonl(out / "predictions.jsonl",
                 [{**r, "predicted": int(p)} for r, p in zip(rows_va, pred)])


def cmd_regress(cfg: dict, inputs: dict, out: Path) -> None:
    import torch

    from .evaluation import MetricReport, fit_linear_regressor
    from .training import images_to_tensor, predict_positions

    bundle, _ = _load_model(inputs["model"])
    train_recs = load_split(inputs["data"], "train")
    val_recs = load_split(inputs["data"], "val")
    z_tr, rows_tr = _latents_and_rows(bundle, train_recs)
    z_va, rows_va = _latents_and_rows(bundle, val_recs)
    r_va = np.array([r["r0"] for r in rows_va])
    t_va = np.array([r["theta0"] for r in rows_va]) / 360.0
    with torch.no_grad():
        r_p, t_p = predict_positions(bundle, images_to_tensor([r.image for r in val_recs]))
    r_p, t_p = np.asarray(r_p, dtype=np.float64), np.asarray(t_p, dtype=np.float64)
    ols = {}
    for name, key, scale, truth in (("r", "r0", 1.0, r_va), ("theta", "theta0", 360.0, t_va)):
        reg = fit_linear_regressor(z_tr, [row[key] / scale for row in rows_tr])
        ols[f"ols_mse_{name}"] = float(np.mean((reg.predict(z_va) - truth) ** 2))
    report = MetricReport(
        mse_r=float(np.mean((r_p - r_va) ** 2)), mse_theta=float(np.mean((t_p - t_va) ** 2)),
        extra={**ols, "theta_units": "fraction of 360 degrees", "n_val": len(rows_va)},
    )
    (out / "metrics.json").write_text(report.to_json())
    _write_jsonl(out / "predictions.jsonl", [
        {**row, "r_pred": float(a), "theta_pred_deg": float(b) * 360.0}
        for row, a, b in zip(rows_va, r_p, t_p)
    ])


def cmd_restore_tear(cfg: dict, inputs: dict, out: Path) -> None:
    from .datagen import load_mask, load_section_image, save_mask, save_png
    from .diffusion import build_schedule
    from .restoration import detect_tear_mask, extract_roi, restore_tear_roi

    bundle, _ = _load_model(inputs["model"])
    schedule = build_schedule(bundle.cfg.T)
    r = cfg["restore"]
    window = bundle.cfg.patch_size
    summary = []
    for d in _section_dirs(inputs["data"], "val"):
        if not (d / "torn.png").is_file():
            continue
        torn = load_section_image(d, "torn.png")
        if r["mask_source"] == "stored":
            mask = load_mask(d / "tear_mask.png")
        else:
            mask = detect_tear_mask(torn, r["whiteness_threshold"])
        sid = d.name
        (out / sid).mkdir(parents=True, exist_ok=True)
        save_mask(out / sid / "mask.png", mask)
        if not mask.any():
            save_png(out / sid / "restored.png", torn)
            summary.append({"section_id": sid, "roi": None, "windows": []})
            continue
        ys, xs = extract_roi(mask, window, torn.shape)
        restored_roi, rep = restore_tear_roi(torn[ys, xs], mask[ys, xs], bundle, schedule,
                                             n_steps=r["n_steps"], seed=cfg["seed"])
        restored = torn.copy()
        restored[ys, xs] = restored_roi
        save_png(out / sid / "restored.png", restored)
        info = {"section_id": sid, "roi": [ys.start, ys.stop, xs.start, xs.stop], **rep.to_dict()}
        info["windows"] = [{**w, "sources": [list(s) for s in w["sources"]]} for w in info["windows"]]
        summary.append(info)
    if not summary:
        raise RuntimeError("no torn sections in the validation split")
    _dump_json(out / "restoration.json", {"kind": "tear", "window": window, "sections": summary})


def cmd_restore_jpeg(cfg: dict, inputs: dict, out: Path) -> None:
    from .datagen import save_png
    from .diffusion import build_schedule
    from .restoration import jpeg_config, restore_jpeg_images

    bundle, _ = _load_model(inputs["model"])
    schedule = build_schedule(bundle.cfg.T)
    qf = cfg["restore"]["qf"]
    records = load_split(inputs["data"], "val", {f"jpeg_q{qf}"})
    if not records:
        raise RuntimeError(f"no QF {qf} patches in the validation split")
    limit = cfg["restore"]["max_patches"]
    if limit is not None:
        records = records[:limit]
    jc = jpeg_config(qf)
    restored = restore_jpeg_images([rec.image for rec in records], qf, bundle, schedule, seed=cfg["seed"])
    (out / "patches").mkdir()
    rows = []
    for i, (rec, img) in enumerate(zip(records, restored)):
        fname = f"patches/{i:05d}.png"
        save_png(out / fname, img)
        rows.append({"file": fname, "section_id": rec.section_id, "x_p": rec.corner[0],
                     "y_p": rec.corner[1], "region": rec.region, "qf": qf})
    _write_jsonl(out / "index.jsonl", rows)
    _dump_json(out / "restoration.json", {"kind": "jpeg", "qf": qf, "t_prime": jc.t_prime,
                                           "n_steps": jc.n_steps, "seed": cfg["seed"], "n_patches": len(rows)})


def cmd_evaluate(cfg: dict, inputs: dict, out: Path) -> None:
    restored_dir = Path(inputs["restored"])
    meta = json.loads((restored_dir / "restoration.json").read_text())
    if meta["kind"] == "jpeg":
        report = _evaluate_jpeg(cfg, inputs["data"], restored_dir, meta)
    else:
        report = _evaluate_tear(cfg, inputs["data"], restored_dir, meta)
    (out / "metrics.json").write_text(report.to_json())


def _evaluate_jpeg(cfg, data, restored_dir, meta):
    from .datagen import load_png
    from .evaluation import MetricReport, blob_descriptor, frechet_feature_distance, image_fidelity, significance_test

    thr = cfg["evaluate"]["blob_threshold"]
    clean = {_record_key(r): r for r in load_split(data, "val")}
    compressed = {_record_key(r): r for r in load_split(data, "val", {f"jpeg_q{meta['qf']}"})}
    fid_r, fid_c, feats = [], [], {"clean": [], "restored": [], "compressed": []}
    for row in _read_jsonl(restored_dir / "index.jsonl"):
        key = (row["section_id"], row["x_p"], row["y_p"])
        x = clean[key].image
        y_r = load_png(restored_dir / row["file"])
        y_c = compressed[key].image
        fid_r.append(image_fidelity(y_r, x))
        fid_c.append(image_fidelity(y_c, x))
        for name, img in (("clean", x), ("restored", y_r), ("compressed", y_c)):
            feats[name].append(blob_descriptor(img, thr))
    fid_r, fid_c = np.array(fid_r), np.array(fid_c)
    F = {k: np.array(v) for k, v in feats.items()}
    sig = significance_test(fid_r[:, 0], fid_c[:, 0])
    return MetricReport(
        psnr=float(fid_r[:, 0].mean()), ssim=float(fid_r[:, 1].mean()),
        fcd=frechet_feature_distance(F["restored"], F["clean"]),
        extra={
            "compressed_psnr": float(fid_c[:, 0].mean()), "compressed_ssim": float(fid_c[:, 1].mean()),
            "compressed_fcd": frechet_feature_distance(F["compressed"], F["clean"]),
            "psnr_ttest_p": sig.t_pvalue, "psnr_ranksum_p": sig.ranksum_pvalue,
            "qf": meta["qf"], "n_patches": int(fid_r.shape[0]),
            "fcd_features": "blob descriptor",
        },
    )


def _evaluate_tear(cfg, data, restored_dir, meta):
    from .datagen import load_png, load_section_image
    from .evaluation import MetricReport, blob_stats, relative_abs_error, significance_test

    thr = cfg["evaluate"]["blob_threshold"]
    data = Path(data)
    counts = {"clean": [], "restored": [], "torn": []}
    occ = {"clean": [], "restored": [], "torn": []}
    for sec in meta["sections"]:
        if not sec["windows"]:
            continue
        d = data / "sections" / sec["section_id"]
        images = {
            "clean": load_section_image(d),
            "torn": load_section_image(d, "torn.png"),
            "restored": load_png(restored_dir / sec["section_id"] / "restored.png"),
        }
        y0, _, x0, _ = sec["roi"]
        p = meta["window"]
        for w in sec["windows"]:
            ys = slice(y0 + w["row"] * p, y0 + (w["row"] + 1) * p)
            xs = slice(x0 + w["col"] * p, x0 + (w["col"] + 1) * p)
            for name, img in images.items():
                c, o = blob_stats(img[ys, xs], thr)
                counts[name].append(c)
                occ[name].append(o)
    if not counts["clean"]:
        raise RuntimeError("no restored windows to evaluate")
    extra = {
        "torn_count_relerr": relative_abs_error(counts["torn"], counts["clean"]),
        "torn_occupancy_relerr": relative_abs_error(occ["torn"], occ["clean"]),
        "n_windows": len(counts["clean"]),
    }
    if len(counts["clean"]) >= 2:
        err_r = np.abs(np.array(counts["restored"]) - counts["clean"])
        err_t = np.abs(np.array(counts["torn"]) - counts["clean"])
        sig = significance_test(err_r, err_t)
        extra.update(count_error_ttest_p=sig.t_pvalue, count_error_ranksum_p=sig.ranksum_pvalue)
    return MetricReport(
        cell_count_relerr=relative_abs_error(counts["restored"], counts["clean"]),
        cell_occupancy_relerr=relative_abs_error(occ["restored"], occ["clean"]),
        extra=extra,
    )


def cmd_plot_latents(cfg: dict, inputs: dict, out: Path) -> None:
    from .evaluation import plot_latent_projection, project_latents_2d

    src = Path(inputs["latents"])
    z = np.load(src / "latents.npy")
    rows = _read_jsonl(src / "index.jsonl")
    regions = np.array([r["region"] for r in rows])
    proj = project_latents_2d(z, regions)
    plot_latent_projection(proj, regions, out / "latents.png")
    lines = ["section_id,x_p,y_p,region,pc1,pc2"]
    lines += [f"{r['section_id']},{r['x_p']},{r['y_p']},{r['region']},{a!r},{b!r}"
              for r, (a, b) in zip(rows, proj.coords.tolist())]
    (out / "coords.csv").write_text("\n".join(lines) + "\n")
    _dump_json(out / "ellipses.json", {
        str(k): {"center": e.center.tolist(), "half_axes": e.half_axes.tolist(),
                 "angle_deg": e.angle_deg, "n_points": e.n_points, "degenerate": e.degenerate}
        for k, e in proj.ellipses.items()
    })


COMMANDS: dict[str, tuple[Callable, tuple[str, ...], str]] = {
    "gen-data": (cmd_gen_data, (), "generate a synthetic section dataset"),
    "train": (cmd_train, ("data",), "train a model bundle on the training split"),
    "encode": (cmd_encode, ("data", "model"), "write latent codes for a split"),
    "classify": (cmd_classify, ("data", "model"), "linear region classifier on latents"),
    "regress": (cmd_regress, ("data", "model"), "position regression: heads and linear fits"),
    "restore-tear": (cmd_restore_tear, ("data", "model"), "inpaint torn validation sections"),
    "restore-jpeg": (cmd_restore_jpeg, ("data", "model"), "restore JPEG-compressed patches"),
    "evaluate": (cmd_evaluate, ("data", "restored"), "score a restore-tear or restore-jpeg run"),
    "plot-latents": (cmd_plot_latents, ("latents",), "2-D latent projection with region ellipses"),
}


# --------------------------------------------------------------------------- dispatch

def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
        if not (out / MANIFEST).is_file():
            raise ConfigError(f"refusing to overwrite {out}: it holds no {MANIFEST}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def execute(command: str, cfg: dict, inputs: dict[str, Path], out: Path, overwrite: bool = False,
            argv: Optional[Sequence[str]] = None) -> dict:
    """Run one command and write its config and manifest. Returns the manifest."""
    func, needed, _ = COMMANDS[command]
    for name in needed:
        if inputs.get(name) is None:
            raise ConfigError(f"{command} needs --{name}")
        if not Path(inputs[name]).exists():
            raise FileNotFoundError(f"--{name}: {inputs[name]} does not exist")
    inputs = {k: Path(v).resolve() for k, v in inputs.items() if k in needed}
    input_hashes = {k: {"path": str(v), "sha256": tree_sha256(v)} for k, v in inputs.items()}
    out = Path(out)
    _prepare_out(out, overwrite)
    _dump_json(out / CONFIG, cfg)
    start = time.time()
    func(cfg, inputs, out)
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "seed": cfg["seed"],
        "config": cfg,
        "inputs": input_hashes,
        "outputs": output_hashes(out),
        "versions": _versions(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "elapsed_s": round(time.time() - start, 3),
    }
    _dump_json(out / MANIFEST, manifest)
    return manifest


def replay(manifest_path: Path, out: Optional[Path], overwrite: bool = False) -> tuple[bool, list[str]]:
    """Re-run a command from its manifest and compare output hashes.

    Returns:
        ``(identical, differences)``; differences name mismatching,
        missing or extra files, or inputs whose content changed.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    m = json.loads(manifest_path.read_text())
    if m["command"] not in COMMANDS:
        raise ConfigError(f"manifest names unknown command {m['command']!r}")
    cfg = copy.deepcopy(DEFAULTS)
    for dotted, value in _flatten(m["config"]):
        _set(cfg, _resolve_key(dotted), value)
    validate_config(cfg)
    diffs = []
    inputs = {}
    for name, info in m["inputs"].items():
        inputs[name] = Path(info["path"])
        if not inputs[name].exists():
            raise FileNotFoundError(f"input {name} missing: {inputs[name]}")
        if tree_sha256(inputs[name]) != info["sha256"]:
            diffs.append(f"input {name} changed: {inputs[name]}")
    if out is None:
        out = manifest_path.parent.with_name(manifest_path.parent.name + "-replay")
    new = execute(m["command"], cfg, inputs, Path(out), overwrite=overwrite, argv=m.get("argv"))
    old_out, new_out = m["outputs"], new["outputs"]
    for rel in sorted(set(old_out) | set(new_out)):
        if rel not in new_out:
            diffs.append(f"missing: {rel}")
        elif rel not in old_out:
            diffs.append(f"extra: {rel}")
        elif old_out[rel] != new_out[rel]:
            diffs.append(f"differs: {rel}")
    return not diffs, diffs


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="posdiffae",
        description="Position-aware diffusion autoencoder on synthetic tissue sections.",
        epilog=f"Default output root: ${ENV_OUT} (else ./runs); each command writes to <root>/<command>.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, needed, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML or JSON config file (one or two levels of keys)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable (e.g. --set train.epochs=5)")
        p.add_argument("--overwrite", action="store_true", help="replace a previous run in --out")
        for inp in needed:
            p.add_argument(f"--{inp}", required=False, help=f"{inp} directory or file")
    p = sub.add_parser("replay", help="re-run a command from its manifest and verify output hashes",
                       description="re-run a command from its manifest and verify output hashes")
    p.add_argument("manifest", help="manifest.json or the run directory holding it")
    p.add_argument("--out", help="output directory (default: <run>-replay)")
    p.add_argument("--overwrite", action="store_true", help="replace a previous replay in --out")
    return parser


def _default_out(command: str) -> Path:
    return Path(os.environ.get(ENV_OUT, "runs")) / command


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the command. Returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("no command given")
        if args.command == "replay":
            ok, diffs = replay(Path(args.manifest), Path(args.out) if args.out else None, args.overwrite)
            for line in diffs:
                print(line, file=sys.stderr)
            print("replay: identical" if ok else f"replay: {len(diffs)} difference(s)")
            return EXIT_OK if ok else EXIT_RUNTIME
        cfg = load_config(args.config, args.set, args.seed)
        needed = COMMANDS[args.command][1]
        inputs = {name: getattr(args, name) for name in needed}
        out = Path(args.out) if args.out else _default_out(args.command)
        execute(args.command, cfg, inputs, out, overwrite=args.overwrite, argv=argv)
        print(out)
        return EXIT_OK
    except ConfigError as err:
        print(f"posdiffae: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return int(err.code or 0)
    except Exception as err:  # noqa: BLE001 - categorised for the exit code
        print(f"posdiffae: runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
