"""Pipeline stages behind the command line.

Each stage reads its inputs from the output directory by path, writes its
artifacts there, and records a manifest (config digest, seeds, input and
output digests) under ``manifests/``.  Stage seeds are derived from the run
seed, so one ``--seed`` reproduces every stage.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import calibrate as C
from . import chipper, composite, heads, metrics, store, synth
from .config import RunConfig
from .encoder import EncoderConfig, count_parameters
from .errors import MissingArtifactError
from .mim import gen_mask

logger = logging.getLogger(__name__)

# stage keys for seed derivation
_SEED_KEYS = {"synth": 1, "chip": 2, "pretrain": 3, "reconstruct": 4, "curtain": 5, "finetune": 6,
              "scale": 7}

GRANULE_FIELDS = ("dn", "lat", "lon", "view_zenith", "solar_zenith")


def stage_seed(cfg: RunConfig, stage: str, *extra: int) -> int:
    # kept below 2**31 so it also fits torch generators and JSON readers everywhere
    return synth.derive_seed(cfg.seed, _SEED_KEYS[stage], *extra) % (2**31)


def json_dump(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def require(path, command: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{p} is missing; run `toamim {command}` first")
    return p


def write_manifest(out: Path, command: str, cfg: RunConfig, seeds: dict, outputs, inputs=()) -> Path:
    doc = {
        "command": command,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "inputs": {str(Path(p).relative_to(out)): store.file_digest(p) for p in sorted(map(str, inputs))},
        "outputs": {str(Path(p).relative_to(out)): store.file_digest(p) for p in sorted(map(str, outputs))},
    }
    path = out / "manifests" / f"{command}.json"
    json_dump(path, doc)
    return path


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- synth ---------------------------------------------------------------------------

def day_plan(cfg: RunConfig) -> list[dict]:
    s = cfg.synth
    start = dt.date.fromisoformat(s.start_date)
    plan = []
    for day in range(s.n_train_days + s.n_eval_days):
        date = start + dt.timedelta(days=day)
        plan.append({"day": day, "date": date.isoformat(), "doy": date.timetuple().tm_yday,
                     "split": "train" if day < s.n_train_days else "eval"})
    return plan


def calibrations_for(cfg: RunConfig) -> tuple[C.BandCalibration, ...]:
    c = cfg.calibrate
    return C.default_calibrations(c.reflective_offset, 1.0 / 30000.0, c.thermal_offset, c.t_ceiling)


def synth_day(args) -> list[synth.SwathGranule]:
    cfg, entry = args
    s = cfg.synth
    day = entry["day"]
    seed = stage_seed(cfg, "synth", day)
    scene = synth.gen_scene(seed, synth.SceneParams(width=s.scene_width, height=s.scene_height,
                                                    corr_length=s.corr_length, cloud_cover=s.cloud_cover))
    cals = calibrations_for(cfg)
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 360.0 / s.swaths_per_day))
    granules = []
    for i in range(s.swaths_per_day):
        lon_eq = (phase + i * 360.0 / s.swaths_per_day + 180.0) % 360.0 - 180.0
        orbit = synth.OrbitParams(lon_equator=lon_eq, n_cols=s.n_cols, pixel_km=s.pixel_km,
                                  day_of_year=entry["doy"], noise_dn=s.noise_dn,
                                  seed=synth.derive_seed(seed, i), granule_id=f"g{i:03d}",
                                  date=entry["date"])
        granules.append(synth.gen_swath(scene, orbit, cals))
    return granules


def save_granules(directory: Path, granules) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for g in granules:
        for name in GRANULE_FIELDS:
            p = directory / f"{g.granule_id}.{name}.npy"
            np.save(p, np.ascontiguousarray(getattr(g, name)), allow_pickle=False)
            written.append(p)
    return written


def load_granules(directory: Path, ids: list[str], date: str, cals) -> list[synth.SwathGranule]:
    out = []
    for gid in ids:
        arrs = {n: np.load(require(directory / f"{gid}.{n}.npy", "synth"), allow_pickle=False)
                for n in GRANULE_FIELDS}
        out.append(synth.SwathGranule(band_meta=tuple(cals), granule_id=gid, date=date, **arrs))
    return out


def stage_synth(cfg: RunConfig, out: Path) -> dict:
    plan = day_plan(cfg)
    days = _pool_map(synth_day, [(cfg, e) for e in plan], cfg.workers)
    written = []
    index = []
    for entry, granules in zip(plan, days):
        d = out / "granules" / f"day_{entry['day']:03d}"
        written += save_granules(d, granules)
        index.append({**entry, "granules": [g.granule_id for g in granules]})
    idx_path = out / "granules" / "index.json"
    json_dump(idx_path, index)
    written.append(idx_path)
    seeds = {"run": cfg.seed, "days": [stage_seed(cfg, "synth", e["day"]) for e in plan]}
    write_manifest(out, "synth", cfg, seeds, written)
    return {"days": len(plan), "granules": sum(len(g) for g in days)}


def _granule_index(out: Path) -> list[dict]:
    return json.loads(require(out / "granules" / "index.json", "synth").read_text())


# --- calibrate -------------------------------------------------------------------------

def corpus_bt(granules, cals) -> np.ndarray:
    vals = []
    for g in granules:
        for b in C.THERMAL_BANDS:
            bt = C.corrected_bt(g.dn[..., b], cals[b])
            vals.append(bt[np.isfinite(bt)])
    return np.concatenate(vals) if vals else np.zeros(0)


def stage_calibrate(cfg: RunConfig, out: Path) -> dict:
    cals = calibrations_for(cfg)
    index = _granule_index(out)
    inputs = [out / "granules" / "index.json"]
    if cfg.calibrate.fit_scaling:
        lo, hi = math.inf, -math.inf
        for e in index:
            if e["split"] != "train":
                continue
            gs = load_granules(out / "granules" / f"day_{e['day']:03d}", e["granules"], e["date"], cals)
            bt = corpus_bt(gs, cals)
            if bt.size:
                lo, hi = min(lo, float(bt.min())), max(hi, float(bt.max()))
        sc = C.fit_scaling(np.array([lo, hi]))
    else:
        sc = C.ScalingConstants()
    doc = C.calibration_document(cals, sc)
    doc["digest"] = C.calibration_digest(cals, sc)
    path = out / "calibration.json"
    json_dump(path, doc)
    write_manifest(out, "calibrate", cfg, {"run": cfg.seed}, [path], inputs)
    return {"bt_min": sc.bt_min, "bt_max": sc.bt_max, "digest": doc["digest"]}


def load_calibration(out: Path):
    doc = json.loads(require(out / "calibration.json", "calibrate").read_text())
    cals, sc = C.calibrations_from_document(doc)
    return cals, sc, doc["digest"]


# --- composite -------------------------------------------------------------------------

def grid_for(cfg: RunConfig) -> composite.GridSpec:
    return composite.GridSpec(cfg.composite.n_lat, cfg.composite.n_lon)


def kernel_for(cfg: RunConfig) -> composite.EwaKernel:
    c = cfg.composite
    return composite.EwaKernel(c.semi_major, c.semi_minor, c.orientation, c.alpha, c.q_max)


def composite_one(args):
    cfg, out, entry = args
    cals, sc, _ = load_calibration(out)
    gs = load_granules(out / "granules" / f"day_{entry['day']:03d}", entry["granules"], entry["date"], cals)
    return composite.composite_day(gs, cals, sc, grid_for(cfg), cfg.composite.sza_max, kernel_for(cfg),
                                   cfg.composite.w_min, entry["date"])


def save_composite(path: Path, comp: composite.GridComposite, extra: dict) -> None:
    data = np.concatenate([comp.values, comp.chosen_vza[..., None]], axis=-1)
    meta = {**comp.metadata(), **extra, "bands": "14 scaled TOA bands + chosen view zenith (deg)"}
    store.write_store(path, [data], meta, [{"date": comp.date}])


def load_composite(path: Path) -> composite.GridComposite:
    arrays, meta, _ = store.read_store(require(path, "composite"))
    data = arrays[0].astype(np.float64)
    vza = data[..., 14]
    grid = composite.GridSpec(**meta["grid"])
    return composite.GridComposite(data[..., :14], vza, np.isfinite(vza), grid, meta["date"],
                                   meta["sza_max"], composite.EwaKernel(**meta["kernel"]))


def stage_composite(cfg: RunConfig, out: Path) -> dict:
    index = _granule_index(out)
    _, sc, digest = load_calibration(out)
    comps = _pool_map(composite_one, [(cfg, out, e) for e in index], cfg.workers)
    written = []
    for e, comp in zip(index, comps):
        p = out / "composites" / f"day_{e['day']:03d}.svta"
        save_composite(p, comp, {"split": e["split"], "scaling": sc.to_dict(), "calibration_digest": digest})
        written += [p, store.sidecar_path(p)]
    write_manifest(out, "composite", cfg, {"run": cfg.seed}, written, [out / "calibration.json"])
    return {"filled_fraction": [float(c.filled.mean()) for c in comps]}


# --- chip -------------------------------------------------------------------------------

def _chip_pool(cfg: RunConfig, out: Path, split: str):
    pool = []
    for e in _granule_index(out):
        if e["split"] == split:
            comp = load_composite(out / "composites" / f"day_{e['day']:03d}.svta")
            pool += chipper.extract_chips(comp, cfg.chip.chip_size, cfg.chip.stride, cfg.chip.max_fill)
    return pool


def _nearest(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = ((features[:, None, :] - centroids[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def _chip_record(chip: chipper.ImageChip, stratum: str) -> dict:
    return {"chip_id": chip.chip_id, "origin": list(chip.origin), "quadrant": chip.quadrant,
            "source_date": chip.source_date, "fill_fraction": chip.fill_fraction, "stratum": stratum}


def stage_chip(cfg: RunConfig, out: Path) -> dict:
    c = cfg.chip
    _, sc, digest = load_calibration(out)
    seed = stage_seed(cfg, "chip")
    train_pool = _chip_pool(cfg, out, "train")
    eval_pool = _chip_pool(cfg, out, "eval")
    if len(train_pool) < c.n_train or len(eval_pool) < c.n_eval:
        raise MissingArtifactError(
            f"chip pool too small ({len(train_pool)} train / {len(eval_pool)} eval chips for "
            f"{c.n_train}/{c.n_eval} requested); add synth days or lower max_fill")
    feats = np.stack([chipper.chip_features(ch) for ch in train_pool])
    km = chipper.kmeans_cluster(feats, min(c.k, len(train_pool)), seed, c.kmeans_iters)
    eval_assign = _nearest(np.stack([chipper.chip_features(ch) for ch in eval_pool]), km.centroids)

    written = []
    manifest = {"k": int(km.centroids.shape[0]), "inertia": km.inertia_history[-1]}
    for split, pool, assign, n in (("train", train_pool, km.assignments, c.n_train),
                                   ("eval", eval_pool, eval_assign, c.n_eval)):
        res = chipper.stratified_sample(pool, assign, n, synth.derive_seed(seed, len(split)))
        by_id = {ch.chip_id: (ch, chipper.stratum_label(ch.quadrant, a)) for ch, a in zip(pool, assign)}
        chosen = [by_id[i] for i in res.selected]
        path = out / "chips" / f"{split}.svta"
        store.write_store(path, [ch.data for ch, _ in chosen],
                          {"split": split, "scaling": sc.to_dict(), "calibration_digest": digest,
                           "chip_size": c.chip_size},
                          [_chip_record(ch, s) for ch, s in chosen])
        manifest[split] = {"pool": len(pool), "strata": res.strata, "allocation": res.allocation}
        written += [path, store.sidecar_path(path)]
    sp = out / "chips" / "sampling.json"
    json_dump(sp, manifest)
    written.append(sp)
    write_manifest(out, "chip", cfg, {"run": cfg.seed, "chip": seed}, written)
    return {"train_pool": len(train_pool), "eval_pool": len(eval_pool)}


def load_chips(out: Path, split: str) -> np.ndarray:
    """(N, 14, H, W) float32, fill replaced by zero."""
    arrays, _, _ = store.read_store(require(out / "chips" / f"{split}.svta", "chip"))
    return np.stack([np.nan_to_num(a, nan=0.0).transpose(2, 0, 1) for a in arrays]).astype(np.float32)


# --- pretrain ---------------------------------------------------------------------------

def pretrain_config(cfg: RunConfig, epochs: int | None = None, extra: int = 0) -> heads.PretrainConfig:
    p = cfg.pretrain
    return dataclasses.replace(p, seed=stage_seed(cfg, "pretrain", p.seed, extra),
                               epochs=p.epochs if epochs is None else epochs)


def stage_pretrain(cfg: RunConfig, out: Path) -> dict:
    train = load_chips(out, "train")
    held = load_chips(out, "eval")
    pc = pretrain_config(cfg)
    torch.set_num_threads(cfg.workers)
    res = heads.pretrain(train, cfg.encoder, pc, eval_chips=held,
                         abort_checkpoint=out / "pretrain" / "last_good.svtc")
    ck = out / "pretrain" / "encoder.svtc"
    store.save_checkpoint(ck, res.state)
    eval_masks = heads.fixed_eval_masks(len(held), cfg.encoder, pc.mask_ratio, pc.seed + 1)
    curve = {"train_loss": res.train_loss, "eval_loss": res.eval_loss,
             "constant_mean_l1": heads.constant_mean_l1(train, held, eval_masks),
             "parameters": count_parameters(res.state.model.encoder)}
    cp = out / "pretrain" / "loss_curve.json"
    json_dump(cp, curve)
    write_manifest(out, "pretrain", cfg, {"run": cfg.seed, "pretrain": pc.seed}, [ck, cp],
                   [out / "chips" / "train.svta", out / "chips" / "eval.svta"])
    return curve


def load_mim_state(out: Path, cfg: RunConfig) -> heads.EncoderState:
    ck = store.load_checkpoint(require(out / "pretrain" / "encoder.svtc", "pretrain"))
    ecfg = EncoderConfig.from_dict(ck["config"])
    model = heads.MimModel(ecfg)
    store.restore_model(model, ck)
    model = model.to(heads._dtype(cfg.precision))
    return heads.EncoderState(model, ecfg, store.restore_optimizer(ck, model))


# --- reconstruct --------------------------------------------------------------------------

def eval_masks(cfg: RunConfig, n: int, ecfg: EncoderConfig, ratio: float) -> np.ndarray:
    return heads.fixed_eval_masks(n, ecfg, ratio, stage_seed(cfg, "reconstruct"))


def reconstruction_scores(model: heads.MimModel, chips: np.ndarray, masks: np.ndarray,
                          precision: int) -> dict:
    recon = heads.reconstruct_batch(model, chips, masks, precision)
    per = heads.ssim_scores(chips, recon)
    mf = np.broadcast_to(masks[:, None], chips.shape)
    l1 = float(np.abs(recon - chips)[mf].mean())
    return {"recon": recon, "ssim": per, "ssim_mean": float(per.mean()), "l1_masked": l1}


def stage_reconstruct(cfg: RunConfig, out: Path) -> dict:
    state = load_mim_state(out, cfg)
    chips = load_chips(out, "eval")
    masks = eval_masks(cfg, len(chips), state.config, cfg.reconstruct.mask_ratio)
    torch.set_num_threads(cfg.workers)
    trained = reconstruction_scores(state.model, chips, masks, cfg.precision)
    untrained_model = heads.build_mim_model(state.config, pretrain_config(cfg).seed)
    untrained = reconstruction_scores(untrained_model.to(heads._dtype(cfg.precision)), chips, masks,
                                      cfg.precision)
    fill = heads.mean_fill_baseline(chips, masks)
    fill_ssim = heads.ssim_scores(chips, fill)
    mf = np.broadcast_to(masks[:, None], chips.shape)
    doc = {}
    for name, d in (("pretrained", trained), ("untrained", untrained)):
        doc[name] = {"ssim_per_channel": d["ssim"].mean(0).tolist(), "ssim_mean": d["ssim_mean"],
                     "l1_masked": d["l1_masked"]}
    doc["mean_fill"] = {"ssim_per_channel": fill_ssim.mean(0).tolist(), "ssim_mean": float(fill_ssim.mean()),
                        "l1_masked": float(np.abs(fill - chips)[mf].mean())}
    written = []
    rd = out / "reconstruct"
    rp = rd / "reconstruction.json"
    json_dump(rp, doc)
    written.append(rp)
    for i in range(min(cfg.reconstruct.n_triptychs, len(chips))):
        orig = chips[i].transpose(1, 2, 0)
        masked = np.where(masks[i][..., None], 0.0, orig)
        rec = trained["recon"][i].transpose(1, 2, 0)
        p = rd / f"triptych_{i:02d}.ppm"
        store.write_ppm(p, store.triptych(orig, masked, rec))
        written.append(p)
        for b in range(orig.shape[-1]):
            pb = rd / f"triptych_{i:02d}_band{b:02d}.pgm"
            store.write_pgm(pb, store.triptych(orig, masked, rec, bands=(b,))[..., 0])
            written.append(pb)
    write_manifest(out, "reconstruct", cfg, {"run": cfg.seed, "masks": stage_seed(cfg, "reconstruct")},
                   written, [out / "pretrain" / "encoder.svtc", out / "chips" / "eval.svta"])
    return doc


# --- finetune ----------------------------------------------------------------------------

def curtain_data(cfg: RunConfig, sc: C.ScalingConstants, extra: int = 0):
    cc = cfg.curtain
    params = synth.CurtainParams(chip_size=cfg.chip.chip_size, height_bins=cc.height_bins,
                                 max_height_m=cc.max_height_m, corr_length=cc.corr_length,
                                 cloud_cover=cc.cloud_cover)
    samples = synth.gen_curtain_dataset(stage_seed(cfg, "curtain", extra), cc.n_train + cc.n_val, params, sc)
    return samples[:cc.n_train], samples[cc.n_train:]


def finetune_config(cfg: RunConfig, epochs: int | None = None) -> heads.FinetuneConfig:
    f = cfg.finetune
    return dataclasses.replace(f, seed=stage_seed(cfg, "finetune", f.seed),
                               epochs=f.epochs if epochs is None else epochs)


def run_finetune_pair(cfg: RunConfig, state: heads.EncoderState, sc, epochs: int | None = None):
    train, val = curtain_data(cfg, sc)
    fc = finetune_config(cfg, epochs)
    pre = heads.finetune(train, val, "swin", state, state.config, fc)
    base = heads.finetune(train, val, "fcn", None, None, fc)
    return pre, base


def stage_finetune(cfg: RunConfig, out: Path) -> dict:
    state = load_mim_state(out, cfg)
    _, sc, _ = load_calibration(out)
    torch.set_num_threads(cfg.workers)
    pre, base = run_finetune_pair(cfg, state, sc)
    fd = out / "finetune"
    written = []
    doc = {}
    for name, res in (("pretrained", pre), ("fcn_baseline", base)):
        p = fd / f"{name}.svtc"
        store.save_checkpoint(p, res.model, {"backbone": res.model.backbone}, res.opt)
        written.append(p)
        doc[name] = {**res.report.to_json(), "train_loss": res.train_loss,
                     "parameters": count_parameters(res.model),
                     "head_parameters": res.model.head_parameter_count()}
    mp = fd / "curtain_metrics.json"
    json_dump(mp, _finite_json(doc))
    written.append(mp)
    write_manifest(out, "finetune", cfg, {"run": cfg.seed, "curtain": stage_seed(cfg, "curtain"),
                                          "finetune": finetune_config(cfg).seed},
                   written, [out / "pretrain" / "encoder.svtc", out / "calibration.json"])
    return doc


def _finite_json(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _finite_json(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_json(v) for v in obj]
    return obj


def _nan(v):
    return float("nan") if v is None else float(v)


# --- evaluate / report -----------------------------------------------------------------------

def stage_evaluate(cfg: RunConfig, out: Path) -> dict:
    rp = require(out / "reconstruct" / "reconstruction.json", "reconstruct")
    fp = require(out / "finetune" / "curtain_metrics.json", "finetune")
    recon = json.loads(rp.read_text())
    curt = json.loads(fp.read_text())
    reports: dict[str, metrics.MetricsReport] = {}
    for name in ("pretrained", "fcn_baseline", "untrained", "mean_fill"):
        r = metrics.MetricsReport()
        if name in recon:
            r.ssim_per_channel = list(recon[name]["ssim_per_channel"])
            r.ssim_mean = recon[name]["ssim_mean"]
            r.l1_masked = recon[name]["l1_masked"]
        if name in curt:
            c = curt[name]
            r.miou, r.accuracy = _nan(c["miou"]), _nan(c["accuracy"])
            r.false_negative_rate = _nan(c["false_negative_rate"])
            r.false_positive_rate = _nan(c["false_positive_rate"])
            r.auc = _nan(c["auc"])
            r.roc_points = [tuple(p) for p in c["roc_points"]]
        reports[name] = r
    csv_path = out / "metrics.csv"
    metrics.write_metrics_csv(csv_path, [r.csv_row(cfg.name, n) for n, r in reports.items()])
    roc_path = out / "roc.json"
    metrics.write_roc_json(roc_path, {n: reports[n] for n in ("pretrained", "fcn_baseline")})
    write_manifest(out, "evaluate", cfg, {"run": cfg.seed}, [csv_path, roc_path], [rp, fp])
    return {n: dataclasses.asdict(r) for n, r in reports.items()}


SCALE_COLUMNS = ("schema_version", "model", "dataset_size", "encoder_parameters", "final_train_l1",
                 "l1_masked", "ssim_mean", "miou", "accuracy", "auc",
                 *(f"ssim_ch{i:02d}" for i in range(14)))


def stage_scale_study(cfg: RunConfig, out: Path) -> dict:
    """Pre-train + evaluate every (model size x dataset size) cell and tabulate."""
    import csv
    train = load_chips(out, "train")
    held = load_chips(out, "eval")
    _, sc, _ = load_calibration(out)
    ss = cfg.scale_study
    torch.set_num_threads(cfg.workers)
    rows = []
    subset_rng = np.random.default_rng(stage_seed(cfg, "scale"))
    order = subset_rng.permutation(len(train))
    for mi, model_name in enumerate(ss.models):
        ecfg = cfg.encoder_variant(model_name)
        for n in ss.dataset_sizes:
            subset = train[np.sort(order[:min(n, len(train))])]
            pc = pretrain_config(cfg, ss.pretrain_epochs, extra=1 + mi)
            res = heads.pretrain(subset, ecfg, pc)
            masks = eval_masks(cfg, len(held), ecfg, cfg.reconstruct.mask_ratio)
            rs = reconstruction_scores(res.state.model, held, masks, cfg.precision)
            cur_train, cur_val = curtain_data(cfg, sc)
            ft = heads.finetune(cur_train, cur_val, "swin", res.state, ecfg, finetune_config(cfg, ss.finetune_epochs))
            row = {"schema_version": metrics.CSV_SCHEMA_VERSION, "model": model_name, "dataset_size": len(subset),
                   "encoder_parameters": count_parameters(res.state.model.encoder),
                   "final_train_l1": res.train_loss[-1], "l1_masked": rs["l1_masked"],
                   "ssim_mean": rs["ssim_mean"], "miou": ft.report.miou, "accuracy": ft.report.accuracy,
                   "auc": ft.report.auc}
            for i, v in enumerate(rs["ssim"].mean(0)):
                row[f"ssim_ch{i:02d}"] = float(v)
            rows.append({k: metrics._fmt(v) for k, v in row.items()})
            logger.info("scale cell %s/%d ssim %.4f miou %.4f", model_name, n, rs["ssim_mean"], ft.report.miou)
    path = out / "scale_study.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCALE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    trends = scale_trends(rows)
    tp = out / "scale_trends.json"
    json_dump(tp, trends)
    write_manifest(out, "scale-study", cfg, {"run": cfg.seed}, [path, tp],
                   [out / "chips" / "train.svta", out / "chips" / "eval.svta"])
    return {"rows": rows, "trends": trends}


def scale_trends(rows: list[dict]) -> dict:
    """Whether SSIM / mIoU improve with data (per model) and with model size (per dataset size)."""
    def val(r, k):
        return float(r[k])
    by_model: dict[str, list] = {}
    for r in rows:
        by_model.setdefault(r["model"], []).append(r)
    trends = {"data_scaling": {}, "model_scaling": {}}
    for m, rs in by_model.items():
        rs = sorted(rs, key=lambda r: int(r["dataset_size"]))
        trends["data_scaling"][m] = {k: all(val(a, k) <= val(b, k) for a, b in zip(rs, rs[1:]))
                                     for k in ("ssim_mean", "miou")}
    sizes = sorted({int(r["dataset_size"]) for r in rows})
    for n in sizes:
        rs = sorted((r for r in rows if int(r["dataset_size"]) == n), key=lambda r: int(r["encoder_parameters"]))
        trends["model_scaling"][str(n)] = {k: all(val(a, k) <= val(b, k) for a, b in zip(rs, rs[1:]))
                                           for k in ("ssim_mean", "miou")}
    return trends


def stage_report(cfg: RunConfig, out: Path) -> dict:
    mp = require(out / "metrics.csv", "evaluate")
    import csv
    with open(mp) as fh:
        rows = list(csv.DictReader(fh))
    lines = [f"# Run report: {cfg.name}", "", f"config digest `{cfg.digest()}`, seed {cfg.seed}", "",
             "| model | ssim_mean | l1_masked | miou | accuracy | fnr | fpr | auc |",
             "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['model']} | {r['ssim_mean']} | {r['l1_masked']} | {r['miou']} | {r['accuracy']} | "
                     f"{r['false_negative_rate']} | {r['false_positive_rate']} | {r['auc']} |")
    curve = out / "pretrain" / "loss_curve.json"
    if curve.exists():
        c = json.loads(curve.read_text())
        if c["eval_loss"]:
            lines += ["", f"held-out masked L1: {c['eval_loss'][0]:.5f} before training, "
                          f"{c['eval_loss'][-1]:.5f} after; constant-mean predictor {c['constant_mean_l1']:.5f}"]
    trends = out / "scale_trends.json"
    if trends.exists():
        lines += ["", "scale-study monotonicity (reported, not gated):", "",
                  "```", trends.read_text().strip(), "```"]
    rp = out / "report.md"
    rp.write_text("\n".join(lines) + "\n")
    write_manifest(out, "report", cfg, {"run": cfg.seed}, [rp], [mp])
    return {"report": str(rp)}


STAGES = {
    "synth": stage_synth,
    "calibrate": stage_calibrate,
    "composite": stage_composite,
    "chip": stage_chip,
    "pretrain": stage_pretrain,
    "reconstruct": stage_reconstruct,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
    "scale-study": stage_scale_study,
    "report": stage_report,
}
PIPELINE = ("synth", "calibrate", "composite", "chip", "pretrain", "reconstruct", "finetune", "evaluate", "report")


def run_pipeline(cfg: RunConfig, out: Path, stages=PIPELINE) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for s in stages:
        logger.info("stage %s", s)
        results[s] = STAGES[s](cfg, out)
    return results
