"""Command-line entry point: generate-data, train, predict, evaluate.

Exit status is 0 on success, 2 on invalid input (configuration, file format,
unsatisfiable method request) and 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import METHODS, ConfigError, load_config
from .formats import (CkptMeta, FormatError, PredictionFile, checkpoint_name, file_digest, load_checkpoint,
                      load_dataset, load_predictions, save_checkpoint, save_dataset, save_predictions)
from .metrics import EvaluationReport, entropy_map, evaluate
from .posterior import (PREDICT_CHUNK, EnsembleSpec, InsufficientCheckpoints, bn_recalibrate,
                        ensemble_predict_batch, mc_dropout_predict_batch, select_records, swa_average,
                        temperature_scale)
from .segnet import NetConfig, ProbabilisticPrediction, SegNet, build
from .synthdata import CLASS_NAMES, Dataset, generate_split, sample_seed
from .tensor import Rng
from .trainer import (CheckpointRecord, CheckpointStore, TrainConfig, checkpoint_epochs, effective_cycles, train)

log = logging.getLogger("trajbayes")

REPORT_SCHEMA = "trajbayes.report/1"
SPLITS = (("train", "ID"), ("val_id", "ID"), ("test_ood_a", "OOD-A"), ("test_ood_b", "OOD-B"))


class UsageError(ValueError):
    """Invalid request detected before any work is done (exit status 2)."""


# --------------------------------------------------------------------------
# generate-data


def cmd_generate_data(config_path, out_dir) -> dict[str, Path]:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.phantom_params()
    counts = cfg.split_counts()
    manifest = {"schema": "trajbayes.manifest/1", "seed": cfg.seed, "phantom": asdict(base), "splits": {}}
    paths = {}
    for k, (split, domain) in enumerate(SPLITS):
        seed = sample_seed(cfg.seed, 1_000 + k)
        data = generate_split(base.shifted(domain), counts[split], seed)
        path = out / f"{split}.tbd"
        save_dataset(path, data)
        paths[split] = path
        manifest["splits"][split] = {"file": path.name, "count": len(data), "domain": domain,
                                     "seed": seed, "sha256": file_digest(path)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


# --------------------------------------------------------------------------
# train


def cmd_train(config_path, out_dir, schedule: str | None = None, data_path=None) -> Path:
    cfg = load_config(config_path)
    if schedule is not None:
        cfg = replace(cfg, schedule=schedule).validate()
    data_file = Path(data_path) if data_path else cfg.train_data_path()
    if not data_file.exists():
        raise UsageError(f"training data {data_file} does not exist; run generate-data first")
    data = load_dataset(data_file)
    net_cfg, train_cfg = cfg.net_config(), cfg.train_config()
    if data.images.shape[-1] % 2**net_cfg.depth or data.images.shape[-2] % 2**net_cfg.depth:
        raise UsageError(f"image size {data.images.shape[-2:]} is not divisible by 2**depth")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("ckpt_t*.bin"):
        old.unlink()
    marker = out / "INCOMPLETE"
    marker.write_text("training started\n")
    run = {
        "schema": "trajbayes.run/1",
        "net": net_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "schedule": cfg.schedule,
        "train_data": str(data_file.resolve()),
        "train_data_sha256": file_digest(data_file),
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")

    def progress(t, lr, loss):
        log.info("epoch %4d  lr %.6f  loss %.4f", t, lr, loss)

    try:
        result = train(build(net_cfg, Rng(cfg.seed)), data, train_cfg, cfg.schedule, progress)
    except Exception as exc:
        marker.write_text(f"training failed: {exc}\n")
        raise
    for rec in result.store.records:
        save_checkpoint(out / checkpoint_name(rec.epoch), rec.params,
                        CkptMeta(rec.epoch, rec.cycle, rec.t_c, rec.train_loss))
    result.log.write_jsonl(out / "trajectory.jsonl")
    kept = set(checkpoint_epochs(train_cfg, cfg.schedule))
    tc_len = train_cfg.epochs // effective_cycles(train_cfg, cfg.schedule)
    with open(out / "lr_log.tsv", "w") as fh:
        fh.write("epoch\tlr\ttrain_loss\trestart\tcheckpoint\n")
        for e in result.log.entries:
            t = e["t"]
            restart = int(cfg.schedule == "cyclical" and t % tc_len == 0)
            fh.write(f"{t}\t{e['lr']!r}\t{e['train_loss']!r}\t{restart}\t{int(t in kept)}\n")
    plotting.lr_schedule(result.log.epochs(), result.log.lrs(), out / "lr_schedule.png", sorted(kept))
    marker.unlink()
    return out


# --------------------------------------------------------------------------
# predict


@dataclass
class TrainedRun:
    path: Path
    net_config: NetConfig
    train_config: TrainConfig
    schedule: str
    train_data: Path
    store: CheckpointStore

    def final_net(self) -> SegNet:
        return SegNet(self.net_config, self.store.final().params)


def load_run(ckpt_dir) -> TrainedRun:
    d = Path(ckpt_dir)
    if (d / "INCOMPLETE").exists():
        raise UsageError(f"{d} holds a partial training run ({(d / 'INCOMPLETE').read_text().strip()})")
    try:
        run = json.loads((d / "run.json").read_text())
    except OSError:
        raise UsageError(f"{d} is not a training output directory (no run.json)") from None
    net_cfg = NetConfig(**run["net"])
    train_cfg = TrainConfig(**run["train"])
    m = effective_cycles(train_cfg, run["schedule"])
    store = CheckpointStore(m, train_cfg.epochs // m)
    files = sorted(d.glob("ckpt_t*.bin"))
    if not files:
        raise UsageError(f"no checkpoint files in {d}")
    for f in files:
        params, meta = load_checkpoint(f)
        try:
            SegNet(net_cfg, params)
        except ValueError as exc:
            raise UsageError(f"{f.name} does not match the network config in run.json: {exc}") from None
        store.add(CheckpointRecord(meta.epoch, meta.cycle, meta.t_c, params, meta.train_loss))
    return TrainedRun(d, net_cfg, train_cfg, run["schedule"], Path(run["train_data"]), store)


def _chunked_logits(net: SegNet, images: np.ndarray) -> np.ndarray:
    return np.concatenate([net.logits(images[i:i + PREDICT_CHUNK]) for i in range(0, len(images), PREDICT_CHUNK)])


def predict_method(method: str, runs: list[TrainedRun], data: Dataset, n: int = 30, stride: int = 2,
                   tau: float = 1.5, mc_n: int = 30, seed: int = 0) -> tuple[np.ndarray, dict]:
    """Probabilities (N, C, H, W) for ``data`` and a description of the members used."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {METHODS}")
    if not runs:
        raise UsageError("no checkpoint directory given")
    if method != "deepens" and len(runs) > 1:
        raise UsageError(f"method {method} takes exactly one checkpoint directory")
    run = runs[0]
    cfg = run.net_config
    images = data.images
    if images.shape[1] != cfg.in_channels or images.shape[2] % 2**cfg.depth or images.shape[3] % 2**cfg.depth:
        raise UsageError(f"data shape {images.shape[1:]} does not fit the trained network")
    info: dict = {"method": method}

    if method == "vanilla":
        rec = run.store.final()
        info["epochs"] = [rec.epoch]
        probs = ensemble_predict_batch([rec.params], cfg, images)
    elif method == "temp":
        rec = run.store.final()
        info.update(epochs=[rec.epoch], tau=tau)
        logits = _chunked_logits(run.final_net(), images)
        probs = np.stack([temperature_scale(z, tau).probs for z in logits])
    elif method in ("ckpt-single", "ckpt-multi"):
        spec = EnsembleSpec("single" if method == "ckpt-single" else "multi", n, stride)
        try:
            recs = select_records(run.store, spec)
        except InsufficientCheckpoints as exc:
            raise UsageError(str(exc)) from None
        info.update(epochs=[r.epoch for r in recs], n=n)
        if method == "ckpt-single":
            info["stride"] = stride
        probs = ensemble_predict_batch([r.params for r in recs], cfg, images)
    elif method == "swa":
        recs = run.store.cycle(run.store.cycles)
        if not run.train_data.exists():
            raise UsageError(f"SWA needs the training data {run.train_data} for batchnorm re-estimation")
        avg = SegNet(cfg, swa_average([r.params for r in recs]))
        net = bn_recalibrate(avg, load_dataset(run.train_data), run.train_config.batch_size)
        info["epochs"] = [r.epoch for r in recs]
        probs = ensemble_predict_batch([net.params], cfg, images)
    elif method == "mcdropout":
        if cfg.dropout_p == 0:
            warnings.warn("MC-Dropout on a network trained without dropout is deterministic")
        rec = run.store.final()
        info.update(epochs=[rec.epoch], mc_n=mc_n, dropout_p=cfg.dropout_p, seed=seed)
        probs = mc_dropout_predict_batch(run.final_net(), images, mc_n, Rng(seed).child(7))
    else:  # deepens
        if len(runs) < 2:
            raise UsageError("deepens needs at least two checkpoint directories")
        for other in runs[1:]:
            if other.net_config != cfg:
                raise UsageError(f"{other.path} was trained with a different network config")
        members = [r.store.final().params for r in runs]
        info["members"] = len(members)
        probs = ensemble_predict_batch(members, cfg, images)
    return probs, info


def cmd_predict(method: str, ckpt_dirs, data_path, out_path, n: int = 30, stride: int = 2, tau: float = 1.5,
                mc_n: int = 30, label: str | None = None) -> Path:
    dirs = [ckpt_dirs] if isinstance(ckpt_dirs, (str, Path)) else list(ckpt_dirs)
    runs = [load_run(d) for d in dirs]
    data = load_dataset(data_path)
    seed = int(os.environ.get("TB_SEED", runs[0].train_config.seed))
    probs, info = predict_method(method, runs, data, n, stride, tau, mc_n, seed)
    ent = np.stack([entropy_map(ProbabilisticPrediction(p)).ent for p in probs])
    header = {
        "schema": "trajbayes.pred/1",
        "label": label or method,
        "method": info,
        "split": Path(data_path).stem,
        "data_sha256": file_digest(data_path),
        "checkpoints": [Path(d).name for d in dirs],
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_predictions(out_path, PredictionFile(header, data.seeds, probs, ent))
    return Path(out_path)


# --------------------------------------------------------------------------
# evaluate


def evaluate_files(pred_paths, data_paths) -> tuple[list[EvaluationReport], list[PredictionFile], dict]:
    by_digest = {}
    for p in data_paths:
        by_digest[file_digest(p)] = (Path(p), load_dataset(p))
    reports, preds = [], []
    for pp in pred_paths:
        pred = load_predictions(pp)
        digest = pred.header.get("data_sha256")
        if digest not in by_digest:
            raise UsageError(f"split mismatch: {Path(pp).name} was predicted on data not among --data "
                             f"(split {pred.header.get('split')!r})")
        dpath, data = by_digest[digest]
        if len(pred.seeds) != len(data) or not np.array_equal(np.sort(pred.seeds), np.sort(data.seeds)):
            raise UsageError(f"split mismatch: {Path(pp).name} and {dpath.name} hold different samples")
        order = {int(s): i for i, s in enumerate(data.seeds)}
        gts = [data.labels[order[int(s)]] for s in pred.seeds]
        plist = [ProbabilisticPrediction(p) for p in pred.probs]
        reports.append(evaluate(pred.header["label"], pred.header["split"], plist, gts, CLASS_NAMES,
                                [int(s) for s in pred.seeds]))
        preds.append(pred)
    return reports, preds, {k: v[1] for k, v in by_digest.items()}


def report_document(reports: list[EvaluationReport]) -> dict:
    entries = sorted((r.to_dict() for r in reports), key=lambda e: (e["split"], e["method"]))
    return {"schema": REPORT_SCHEMA, "classes": {str(k): v for k, v in CLASS_NAMES.items()}, "entries": entries}


def report_table(reports: list[EvaluationReport]) -> str:
    names = list(CLASS_NAMES.values())
    lines = ["\t".join(["split", "method", "n"] + [f"dice_{c}" for c in names] + ["dice_fg_mean", "ece_percent"])]
    for r in sorted(reports, key=lambda r: (r.split, r.method)):
        cells = [r.split, r.method, str(r.n_volumes)]
        cells += [f"{r.dice_mean[c]:.4f}±{r.dice_sd[c]:.4f}" for c in names]
        cells += [f"{r.mean_foreground_dice:.4f}", f"{r.ece_percent:.3f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_evaluate(pred_paths, data_paths, out_dir, figures: bool = True) -> Path:
    reports, preds, datasets = evaluate_files(pred_paths, data_paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report_document(reports)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    table = report_table(reports)
    (out / "report.tsv").write_text(table)
    if figures:
        fig_dir = out / "figures"
        plotting.metric_bars(reports, fig_dir / "ece.png")
        plotting.metric_bars(reports, fig_dir / "dice.png", "mean_foreground_dice", "mean foreground Dice")
        for split in sorted({r.split for r in reports}):
            rs = sorted((r for r in reports if r.split == split), key=lambda r: r.method)
            plotting.reliability_diagram(rs, fig_dir / f"reliability_{split}.png", split)
            sp = [p for p in preds if p.header["split"] == split]
            data = datasets[sp[0].header["data_sha256"]]
            first = int(np.argmin(data.seeds))
            seed = data.seeds[first]
            rows = {}
            for p in sorted(sp, key=lambda p: p.header["label"]):
                i = int(np.nonzero(p.seeds == seed)[0][0])
                rows[p.header["label"]] = (p.probs[i].argmax(axis=0), p.entropy[i])
            plotting.uncertainty_panel(data.images[first, 0], data.labels[first], rows,
                                       fig_dir / f"uncertainty_{split}.png", split)
    print(table, end="")
    return out / "report.json"


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajbayes", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train / val_id / test_ood_a / test_ood_b datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one network and keep window checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--schedule", choices=("poly", "constant-tail", "cyclical"))
    t.add_argument("--data", help="training dataset (default: from the config)")

    p = sub.add_parser("predict", help="probabilities and entropy maps for one method")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--ckpts", required=True, nargs="+", help="training output dir(s); several for deepens")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=30, help="checkpoint ensemble size")
    p.add_argument("--stride", type=int, default=2, help="single-modal epoch step")
    p.add_argument("--tau", type=float, default=1.5, help="temperature")
    p.add_argument("--mc-n", type=int, default=30, help="MC-Dropout passes")
    p.add_argument("--label", help="method label in reports (default: method name)")

    e = sub.add_parser("evaluate", help="Dice / ECE report, table and figures")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--data", required=True, nargs="+")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--no-figures", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            for split, path in cmd_generate_data(args.config, args.out).items():
                print(f"{split}\t{path}")
        elif args.command == "train":
            print(cmd_train(args.config, args.out, args.schedule, args.data))
        elif args.command == "predict":
            if min(args.n, args.stride, args.mc_n) < 1 or args.tau <= 0:
                raise UsageError("--n, --stride and --mc-n must be >= 1 and --tau > 0")
            print(cmd_predict(args.method, args.ckpts, args.data, args.out, args.n, args.stride,
                              args.tau, args.mc_n, args.label))
        else:
            cmd_evaluate(args.pred, args.data, args.out, figures=not args.no_figures)
    except (ConfigError, FormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
