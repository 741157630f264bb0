"""Command-line entry point: ``rppglab {gen,train,eval,translate}``.

Exit codes: 0 success, 1 invalid input (config, arguments, file format),
2 runtime failure (missing artifacts, training abort, I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import classical, metrics, optics
from ..neural.checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from ..neural.models import GeneratorModel, PrnModel
from ..neural.training import (ClipSet, LogRow, TrainConfig, build_clips, train_joint,
                               train_prn)
from . import report as rpt
from .config import LEARNED, ConfigError, ExperimentConfig, load_config
from .rvid import RvidFormatError, read_rvid, read_subject, sidecar_path, write_rvid

log = logging.getLogger("rppglab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "data"


def model_dir(cfg: ExperimentConfig, method: str) -> Path:
    return cfg.out_dir / "models" / method


def log_path(cfg: ExperimentConfig, method: str) -> Path:
    return cfg.out_dir / "logs" / f"{method}.csv"


def report_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "report"


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cohort_scales(mix: str, n: int, seed: int, dark_fraction: float, explicit) -> list[str]:
    if mix == "ubfc-like":
        return optics.ubfc_like_scales(n, seed, dark_fraction)
    if mix == "light":
        return optics.ubfc_like_scales(n, seed, 0.0)
    if mix == "vital-like":
        return optics.vital_like_scales(n)
    if mix == "dark":
        return [optics.DARK_SCALES[k % 2] for k in range(n)]
    return [optics.parse_scale(s) for s in explicit]


def cmd_gen(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Simulate the training and evaluation cohorts and write them to ``out/data``."""
    ds = cfg.dataset
    root = data_dir(cfg)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        if not force:
            raise RuntimeError(f"{manifest_path} exists; use --force or a fresh --out")
        for entry in json.loads(manifest_path.read_text())["subjects"]:
            for p in (root / entry["path"], sidecar_path(root / entry["path"])):
                p.unlink(missing_ok=True)
        manifest_path.unlink()
    manifest = {}
    for split, prefix, offset in (("train", "t", 1), ("test", "e", 2)):
        n = getattr(ds, f"{'train' if split == 'train' else 'eval'}_subjects")
        if n == 0:
            continue
        mix = getattr(ds, f"{'train' if split == 'train' else 'eval'}_mix")
        explicit = getattr(ds, f"{'train' if split == 'train' else 'eval'}_scales")
        seed = 2 * cfg.seed + offset
        duration = ds.train_duration_s if split == "train" and ds.train_duration_s else ds.duration_s
        scales = cohort_scales(mix, n, seed, ds.dark_fraction, explicit)
        entries = optics.build_cohort(scales, seed, noise_sigma=ds.noise_sigma,
                                      hr_range=tuple(ds.hr_range), motion=ds.motion,
                                      duration_s=duration, drift=ds.hr_drift)
        manifest = optics.make_dataset(entries, {split: 1.0}, seed, root, duration, ds.fs,
                                       ds.size, ds.quantize, prefix=prefix)
    (cfg.out_dir / "config.toml").write_text(cfg.to_toml())
    return manifest


def load_split(cfg: ExperimentConfig, split: str) -> list[optics.Subject]:
    root = data_dir(cfg)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise RuntimeError(f"no dataset at {root}; run 'rppglab gen' first")
    entries = json.loads(manifest_path.read_text())["subjects"]
    return [read_subject(root / e["path"]) for e in entries if e["split"] == split]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _write_log(path: Path, rows: list[LogRow], resume: bool) -> None:
    """Write ``step,phase,loss``; on resume keep earlier rows that precede the new ones."""
    kept = []
    if resume and path.exists():
        first = rows[0].step if rows else float("inf")
        with path.open() as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["step"]) < first]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "phase", "loss"])
        for r in kept:
            w.writerow([r["step"], r["phase"], r["loss"]])
        for r in rows:
            w.writerow([r.step, r.phase, repr(float(r.loss))])


def read_log(path) -> list[LogRow]:
    with Path(path).open() as fh:
        return [LogRow(int(r["step"]), r["phase"], float(r["loss"])) for r in csv.DictReader(fh)]


def _final_meta(method: str, tc: TrainConfig, role: str) -> dict:
    return {"kind": role, "method": method, "config": tc.to_dict(), "seed": tc.seed}


def translate_clips(G: GeneratorModel, clips: ClipSet) -> ClipSet:
    """The clip set with every source clip replaced by its translation."""
    was = G.training
    G.eval()
    out = np.empty_like(clips.light)
    for k in range(len(clips)):
        out[k] = G(clips.light[k:k + 1].astype(np.float64)).value[0]
    G.train(was)
    return ClipSet(out, clips.pulse, clips.subject, None)


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> dict[str, Path]:
    """Train every learned method in ``cfg.methods``; returns final checkpoint paths."""
    methods = [m for m in cfg.methods if m in LEARNED]
    tc = replace(cfg.train, seed=cfg.seed, size=cfg.dataset.size)
    subjects = load_split(cfg, "train")
    if not subjects:
        raise RuntimeError("dataset has no training subjects")
    out: dict[str, Path] = {}
    # prn-synth consumes the generator of prn-augmented, so train that first
    for method in sorted(methods, key=lambda m: LEARNED.index(m) if m != "prn-synth" else 99):
        mdir = model_dir(cfg, method)
        total_epochs = tc.pretrain_epochs + tc.epochs
        if method == "prn-real":
            clips = build_clips(subjects, tc.clip_len)
            res = train_prn(clips, tc, checkpoint_dir=mdir, resume=resume, epochs=total_epochs)
        elif method == "prn-augmented":
            clips = build_clips(subjects, tc.clip_len, target_scale=tc.target_scale, seed=cfg.seed)
            res = train_joint(clips, tc, checkpoint_dir=mdir, resume=resume)
            save_checkpoint(mdir / "generator.pfck", res.generator,
                            _final_meta(method, tc, "generator"))
        else:
            gpath = model_dir(cfg, "prn-augmented") / "generator.pfck"
            if not gpath.exists():
                raise RuntimeError(f"prn-synth needs a trained generator at {gpath}; "
                                   "include prn-augmented in methods")
            G = GeneratorModel(tc.gen_base, tc.gen_blocks)
            load_checkpoint(gpath, G)
            clips = translate_clips(G, build_clips(subjects, tc.clip_len))
            res = train_prn(clips, tc, checkpoint_dir=mdir, resume=resume, epochs=total_epochs)
        save_checkpoint(mdir / "estimator.pfck", res.estimator, _final_meta(method, tc, "estimator"))
        _write_log(log_path(cfg, method), res.log, resume)
        out[method] = mdir / "estimator.pfck"
        log.info("trained %s -> %s", method, out[method])
    return out


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def load_estimator(path) -> PrnModel:
    meta = read_meta(path)
    channels = meta.get("config", {}).get("prn_channels", (8, 16, 32))
    E = PrnModel(tuple(channels))
    load_checkpoint(path, E)
    return E.eval()


def load_generator(path) -> tuple[GeneratorModel, dict]:
    meta = read_meta(path)
    tc = meta.get("config", {})
    G = GeneratorModel(tc.get("gen_base", 8), tc.get("gen_blocks", 2))
    load_checkpoint(path, G)
    return G.eval(), meta


def _estimate(method: str, subject: optics.Subject, cfg: ExperimentConfig, model) -> np.ndarray:
    if method == "oracle":
        return subject.pulse.samples
    if method in classical.EXTRACTORS:
        mask = classical.skin_mask(subject.video, tuple(cfg.eval.cr_range), tuple(cfg.eval.cb_range))
        return classical.extract(subject.video, method, mask).samples
    return model.predict(subject.video.frames, cfg.train.clip_len)


def _evaluate_one(args) -> metrics.SubjectMetrics:
    method, subject, cfg, model = args
    est = _estimate(method, subject, cfg, model)
    fs = subject.video.fs
    ev = cfg.eval
    gt = metrics.hr_from_profile(subject.pulse.hr_profile, len(est), fs, ev.window_s, ev.stride_s)
    return metrics.evaluate_pulse(subject.subject_id, subject.fitzpatrick,
                                  optics.scale_group(subject.fitzpatrick), est, fs,
                                  subject.pulse.samples, gt, ev.window_s, ev.stride_s,
                                  tuple(ev.band))


def cmd_eval(cfg: ExperimentConfig) -> dict:
    """Evaluate every method on the test split; write JSON, CSVs and figures."""
    models = {}
    for m in cfg.methods:
        if m in LEARNED:
            path = model_dir(cfg, m) / "estimator.pfck"
            if not path.exists():
                found = sorted(p.parent.name for p in (cfg.out_dir / "models").glob("*/estimator.pfck"))
                raise RuntimeError(f"no checkpoint for {m!r} at {path}; available: "
                                   f"{', '.join(found) if found else 'none'}")
            models[m] = load_estimator(path)
    subjects = sorted(load_split(cfg, "test"), key=lambda s: s.subject_id)
    if not subjects:
        raise RuntimeError("dataset has no test subjects")
    reports = []
    for m in cfg.methods:
        jobs = [(m, s, cfg, models.get(m)) for s in subjects]
        if cfg.eval.workers > 1:
            with ProcessPoolExecutor(cfg.eval.workers) as pool:
                rows = list(pool.map(_evaluate_one, jobs))
        else:
            rows = [_evaluate_one(j) for j in jobs]
        reports.append(metrics.MetricsReport.from_subjects(m, rows))
    doc = rpt.report_to_json(reports, cfg.seed)
    out = report_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rpt.dumps_report(doc))
    (out / "groups.csv").write_text(rpt.to_csv(rpt.group_table(doc),
                                               ["method", "group", "n", "mae", "rmse", "pcc", "snr"]))
    windows = rpt.window_rows(reports, cfg.eval.stride_s)
    (out / "hr_windows.csv").write_text(rpt.to_csv(
        windows, ["method", "subject", "group", "window", "t_start_s", "hr_est", "hr_gt"]))
    if cfg.eval.figures:
        rpt.render_figures(doc, windows, out / "figures")
    return doc


# ---------------------------------------------------------------------------
# translate
# ---------------------------------------------------------------------------

REGIONS = {
    "forehead": (slice(0, 1 / 3), slice(1 / 4, 3 / 4)),
    "left_cheek": (slice(1 / 3, 2 / 3), slice(0, 1 / 2)),
    "right_cheek": (slice(1 / 3, 2 / 3), slice(1 / 2, 1)),
    "chin": (slice(2 / 3, 1), slice(1 / 4, 3 / 4)),
}


def region_traces(frames: np.ndarray) -> dict[str, list[list[float]]]:
    """Mean RGB per frame for fixed face-like regions of the frame."""
    _, h, w, _ = frames.shape
    out = {}
    for name, (rs, cs) in REGIONS.items():
        r0, r1 = int(round(rs.start * h)), int(round(rs.stop * h))
        c0, c1 = int(round(cs.start * w)), int(round(cs.stop * w))
        out[name] = np.round(frames[:, r0:r1, c0:c1].mean(axis=(1, 2)), 8).tolist()
    return out


def pos_hr(frames: np.ndarray, fs: float) -> float:
    """POS heart rate (BPM): median over 30 s windows, or one whole-clip peak if shorter."""
    video = optics.VideoTensor(np.clip(frames, 0.0, 1.0), fs, {})
    pulse = metrics.butterworth_bandpass(classical.extract(video, "pos").samples, fs)
    if len(pulse) >= metrics.WINDOW_S * fs:
        return float(np.nanmedian(metrics.estimate_hr(pulse, fs).bpm))
    return 60.0 * metrics.peak_frequency(pulse, fs)


def cmd_translate(checkpoint, rvid_in, rvid_out) -> dict:
    """Translate one RVID video with a generator checkpoint; write RVID + diagnostics."""
    G, meta = load_generator(checkpoint)
    frames, fs = read_rvid(rvid_in)
    size = meta.get("config", {}).get("size")
    _, h, w, _ = frames.shape
    if size is not None and (h, w) != (size, size):
        raise ValueError(f"input is {h}x{w}; generator expects {size}x{size} frames")
    clip_len = meta.get("config", {}).get("clip_len", 64)
    out = G.translate(frames.astype(np.float64), clip_len).astype(np.float32)
    rvid_out = Path(rvid_out)
    write_rvid(rvid_out, out, fs)
    side_in = sidecar_path(rvid_in)
    if side_in.exists():
        side = json.loads(side_in.read_text())
        side["translated_from"] = side.get("id")
        side["fitzpatrick"] = meta.get("config", {}).get("target_scale", side.get("fitzpatrick"))
        sidecar_path(rvid_out).write_text(json.dumps(side, sort_keys=True) + "\n")
    lum_in, lum_out = optics.luminance(frames), optics.luminance(out)
    diag = {
        "input": str(rvid_in), "output": str(rvid_out), "fs": fs,
        "luminance_in": lum_in, "luminance_out": lum_out, "luminance_drop": lum_in - lum_out,
        "pos_hr_in": pos_hr(frames, fs), "pos_hr_out": pos_hr(out, fs),
        "regions_in": region_traces(frames), "regions_out": region_traces(out),
    }
    diag_path = rvid_out.with_name(rvid_out.stem + "_diagnostics.json")
    diag_path.write_text(json.dumps(diag, sort_keys=True) + "\n")
    return diag


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rppglab", description="Simulated rPPG skin-tone augmentation laboratory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the config output directory")

    g = sub.add_parser("gen", help="simulate training and evaluation cohorts")
    common(g)
    g.add_argument("--force", action="store_true", help="replace an existing dataset")
    t = sub.add_parser("train", help="train the learned methods")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from epoch checkpoints")
    e = sub.add_parser("eval", help="evaluate all methods and write the report")
    common(e)
    tr = sub.add_parser("translate", help="translate one RVID video with a generator")
    common(tr, config_required=False)
    tr.add_argument("--checkpoint", help="generator checkpoint (default: from --config run)")
    tr.add_argument("--input", required=True, help="input .rvid file")
    return p


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None and not (args.command == "translate" and args.out.endswith(".rvid")):
        cfg.out = args.out
    return cfg


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"rppglab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "gen":
            manifest = cmd_gen(cfg, force=args.force)
            print(f"wrote {len(manifest.get('subjects', []))} subjects to {data_dir(cfg)}")
        elif args.command == "train":
            for m, path in cmd_train(cfg, resume=args.resume).items():
                print(f"{m}: {path}")
        elif args.command == "eval":
            doc = cmd_eval(cfg)
            for m, body in doc["methods"].items():
                print(f"{m}: overall MAE {body['overall']['mae']} RMSE {body['overall']['rmse']} "
                      f"bias std {body['bias']['std_mae']}")
        else:
            ckpt = args.checkpoint or model_dir(cfg, "prn-augmented") / "generator.pfck"
            out = Path(args.out) if args.out and args.out.endswith(".rvid") else \
                Path(args.out or ".") / (Path(args.input).stem + "_translated.rvid")
            diag = cmd_translate(ckpt, args.input, out)
            print(f"wrote {out}: luminance {diag['luminance_in']:.4f} -> {diag['luminance_out']:.4f}, "
                  f"POS HR {diag['pos_hr_in']:.1f} -> {diag['pos_hr_out']:.1f} BPM")
    except (ConfigError, RvidFormatError, CheckpointError, ValueError) as exc:
        print(f"rppglab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure
        print(f"rppglab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
