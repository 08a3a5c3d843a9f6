"""``crowdgan`` command line: synth, train, predict, group, eval.

Configuration is resolved as dataclass defaults, then the JSON config file
(``--config`` or ``$CROWDGAN_CONFIG``), then command-line flags. Exit codes:
0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    Scene,
    evaluation_windows,
    format_float,
    load_annotations,
    load_group_labels,
    make_windows,
    ped_sort_key,
    write_annotations,
    write_partition,
)
from .encoder import ModelConfig
from .errors import ContractViolation, MissingLabelsError, ParseError, ValidationError
from .gan import NoiseSource, TrainConfig, Trainer, generate, load_model
from .grouping import DbscanConfig, TsneConfig, detect_groups
from .metrics import ade_fde, group_mitre_scores, mean_scores, pairwise_scores, pool_scores
from .plots import forecast_svg, groups_svg
from .synth import SynthConfig, generate_corpus

log = logging.getLogger("crowdgan")

CONFIG_ENV = "CROWDGAN_CONFIG"
SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "tsne": TsneConfig,
    "dbscan": DbscanConfig,
}
SPLITS = ("train", "val", "test")


class UserError(Exception):
    """Bad input from the caller; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- configuration


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UserError("config file must hold a JSON object of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise UserError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise UserError(f"config section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(SECTIONS[name])}
        bad = set(section) - allowed
        if bad:
            raise UserError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
    return raw


def resolve(file_cfg: dict, overrides: dict[str, dict], sections) -> dict:
    """Instantiate the requested sections, flags winning over the file."""
    out = {}
    for name in sections:
        values = dict(file_cfg.get(name, {}))
        values.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        try:
            out[name] = SECTIONS[name](**values)
        except (TypeError, ContractViolation) as exc:
            raise UserError(f"invalid [{name}] config: {exc}") from None
    return out


def _config_json(resolved: dict) -> str:
    return json.dumps({k: dataclasses.asdict(v) for k, v in resolved.items()}, indent=2, sort_keys=True) + "\n"


def _log_config(resolved: dict, out_dir: Path | None) -> None:
    text = _config_json(resolved)
    log.info("resolved config:\n%s", text.rstrip())
    if out_dir is not None:
        (out_dir / "config.json").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- helpers


def _threads(value: int | None) -> int:
    return max(1, value or os.cpu_count() or 1)


def _scene_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.glob("*.tsv") if not q.name.endswith(".pred.tsv")))
        elif p.exists():
            files.append(p)
        else:
            raise UserError(f"no such file or directory: {p}")
    if not files:
        raise UserError("no scene files given")
    return files


def _load_scene(path: Path, frame_rate: float) -> Scene:
    return load_annotations(path, frame_rate=frame_rate)


def _ensure_dir(path: Path) -> Path:
    if path.exists() and not path.is_dir():
        raise UserError(f"{path} exists and is not a directory")
    if not path.parent.exists():
        raise UserError(f"parent directory {path.parent} does not exist")
    path.mkdir(exist_ok=True)
    return path


def _checkpoint_model(path):
    if not Path(path).is_file():
        raise UserError(f"checkpoint not found: {path}")
    return load_model(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args, file_cfg) -> int:
    cfg = resolve(file_cfg, {"synth": {"seed": args.seed}}, ["synth"])
    out = Path(args.out)
    if not out.parent.exists():
        raise UserError(f"parent directory {out.parent} does not exist")
    if out.exists() and not out.is_dir():
        raise UserError(f"{out} exists and is not a directory")
    corpus = generate_corpus(cfg["synth"], args.n_scenes, threads=_threads(args.threads))
    # build in a sibling temp dir and swap in, so a failure leaves nothing behind
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        for split in SPLITS:
            (tmp / split).mkdir()
            for scene in corpus.split(split):
                write_annotations(scene, tmp / split / f"{scene.scene_id}.tsv", tmp / split / f"{scene.scene_id}.groups")
        _log_config(cfg, tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d scenes to %s", len(corpus.scenes), out)
    return 0


def _split_windows(data_dir: Path, split: str, cfg: ModelConfig, frame_rate: float):
    folder = data_dir / split
    if not folder.is_dir():
        return []
    windows = []
    for f in sorted(folder.glob("*.tsv")):
        windows.extend(make_windows(_load_scene(f, frame_rate), cfg.t_obs, cfg.t_pred))
    return windows


def write_training_log(history, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss_D", "loss_G", "sparsity", "val_ADE"])
        for r in history:
            w.writerow([r.epoch, *(format_float(v) for v in (r.loss_d, r.loss_g, r.sparsity, r.val_ade))])


def cmd_train(args, file_cfg) -> int:
    data_dir = Path(args.data)
    if not (data_dir / "train").is_dir():
        raise UserError(f"{data_dir} has no train/ split (run `crowdgan synth` first)")
    out = _ensure_dir(Path(args.out))
    overrides = {
        "model": {"hidden_size": args.hidden_size, "t_obs": args.t_obs, "t_pred": args.t_pred, "z_dim": args.z_dim},
        "train": {
            "lam": args.lam, "learning_rate": args.learning_rate, "batch_size": args.batch_size,
            "epochs": args.epochs, "mode": args.mode, "seed": args.seed,
        },
    }
    if args.resume:
        if not Path(args.resume).is_file():
            raise UserError(f"checkpoint not found: {args.resume}")
        train_over = {k: v for k, v in overrides["train"].items() if v is not None}
        trainer = Trainer.load(args.resume, {**file_cfg.get("train", {}), **train_over})
        cfg = {"model": trainer.model_cfg, "train": trainer.config}
        log.info("resuming from epoch %d", trainer.epoch)
    else:
        cfg = resolve(file_cfg, overrides, ["model", "train"])
        trainer = Trainer(cfg["model"], cfg["train"])
    _log_config(cfg, out)
    model_cfg = cfg["model"]
    train_w = _split_windows(data_dir, "train", model_cfg, args.frame_rate)
    val_w = _split_windows(data_dir, "val", model_cfg, args.frame_rate)
    if not train_w:
        raise UserError("no training windows: trajectories shorter than t_pred?")
    remaining = max(0, cfg["train"].epochs - trainer.epoch)
    log.info("training %d epochs on %d windows (%d validation)", remaining, len(train_w), len(val_w))
    trainer.fit(train_w, val_w or None, epochs=remaining)
    trainer.save(out / "model.ckpt")
    write_training_log(trainer.history, out / "train_log.csv")
    log.info("best epoch %d, checkpoint %s", trainer.best_epoch, out / "model.ckpt")
    return 0


def _predict_scene(path: Path, model, seed: int, start_frame, frame_rate, out: Path, svg: bool) -> None:
    scene = _load_scene(path, frame_rate)
    cfg = model.cfg
    windows, missing = evaluation_windows(scene, cfg.t_obs, cfg.t_pred, start_frame)
    if missing:
        log.warning("%s: no full window for %s", scene.scene_id, ", ".join(missing))
    rows, tracks = [], []
    if windows:
        preds, _ = generate(windows, model, NoiseSource(seed, cfg.z_dim))
        for w, p in zip(windows, preds):
            for f, (x, y) in zip(w.frames[cfg.t_obs :], p.positions):
                rows.append((int(f), ped_sort_key(w.ped_id), w.ped_id, x, y))
            tracks.append((w.ped_id, w.observed, w.future, p.positions))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(out / f"{scene.scene_id}.pred.tsv", "w", encoding="utf-8") as fh:
        for f, _, ped, x, y in rows:
            fh.write(f"{f}\t{ped}\t{format_float(x)}\t{format_float(y)}\n")
    if svg:
        (out / f"{scene.scene_id}.svg").write_text(forecast_svg(tracks, scene.scene_id), encoding="utf-8")


def cmd_predict(args, file_cfg) -> int:
    model = _checkpoint_model(args.checkpoint)
    files = _scene_files(args.scene)
    out = _ensure_dir(Path(args.out))
    _log_config({"model": model.cfg}, out)

    def run(path):
        _predict_scene(path, model, args.seed, args.start_frame, args.frame_rate, out, args.svg)

    _parallel(run, files, args.threads)
    return 0


def _group_scene(path: Path, model, cfg: dict, start_frame, frame_rate, out: Path, svg: bool) -> None:
    scene = _load_scene(path, frame_rate)
    partition, emb = detect_groups(scene, model, cfg["tsne"], cfg["dbscan"], start_frame, return_embeddings=True)
    write_partition(partition, out / f"{scene.scene_id}.groups")
    with open(out / f"{scene.scene_id}.eta.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ped_id", "eta_x", "eta_y", "cluster", "group"])
        for i, ped in enumerate(emb.ped_ids):
            w.writerow([ped, format_float(emb.eta[i, 0]), format_float(emb.eta[i, 1]), int(emb.beta[i]), partition.assignment[ped]])
    if svg and emb.ped_ids:
        text = groups_svg(emb.ped_ids, emb.eta, partition.assignment, scene.scene_id)
        (out / f"{scene.scene_id}.groups.svg").write_text(text, encoding="utf-8")


def cmd_group(args, file_cfg) -> int:
    overrides = {
        "tsne": {"perplexity": args.perplexity, "iterations": args.tsne_iterations, "seed": args.seed},
        "dbscan": {"epsilon": args.epsilon, "min_pts": args.min_pts},
    }
    cfg = resolve(file_cfg, overrides, ["tsne", "dbscan"])
    model = _checkpoint_model(args.checkpoint)
    files = _scene_files(args.scene)
    out = _ensure_dir(Path(args.out))
    _log_config({"model": model.cfg, **cfg}, out)

    def run(path):
        _group_scene(path, model, cfg, args.start_frame, args.frame_rate, out, args.svg)

    _parallel(run, files, args.threads)
    return 0


def _parallel(fn, items, threads) -> None:
    n = _threads(threads)
    if n == 1 or len(items) == 1:
        for it in items:
            fn(it)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        list(pool.map(fn, items))


def _pair_files(pred_paths, truth_paths, suffix: str) -> list[tuple[str, Path, Path]]:
    """Match predictions to truth by scene stem; single files pair positionally."""
    preds = [Path(p) for p in pred_paths]
    truths = [Path(p) for p in truth_paths]
    if len(preds) == 1 and len(truths) == 1 and preds[0].is_dir() and truths[0].is_dir():
        truth_by_stem = {t.stem: t for t in truths[0].glob("*.tsv")}
        pairs = []
        for p in sorted(preds[0].glob(f"*{suffix}")):
            stem = p.name[: -len(suffix)]
            if stem not in truth_by_stem:
                raise UserError(f"no ground truth for {p.name} in {truths[0]}")
            pairs.append((stem, p, truth_by_stem[stem]))
        if not pairs:
            raise UserError(f"no *{suffix} files in {preds[0]}")
        return pairs
    if len(preds) != len(truths):
        raise UserError("--pred and --truth need the same number of files")
    for p in preds + truths:
        if not p.is_file():
            raise UserError(f"no such file: {p}")
    return [(t.stem, p, t) for p, t in zip(preds, truths)]


def _trajectory_rows(pairs, frame_rate) -> tuple[list[str], list[list]]:
    rows, errors = [], []
    for stem, pred_path, truth_path in pairs:
        pred = load_annotations(pred_path, frame_rate=frame_rate)
        truth = _load_scene(truth_path, frame_rate)
        per_scene = []
        for traj in pred.trajectories:
            try:
                gt = truth.trajectory(traj.ped_id)
            except KeyError:
                raise UserError(f"{stem}: pedestrian {traj.ped_id} missing from ground truth") from None
            idx = {int(f): i for i, f in enumerate(gt.frames)}
            if any(int(f) not in idx for f in traj.frames):
                raise UserError(f"{stem}: ground truth lacks frames predicted for {traj.ped_id}")
            per_scene.append(ade_fde(traj.positions, gt.positions[[idx[int(f)] for f in traj.frames]]))
        if per_scene:
            rows.append([stem, np.mean([e.ade for e in per_scene]), np.mean([e.fde for e in per_scene])])
        errors.extend(per_scene)
    if errors:
        rows.append(["pooled", np.mean([e.ade for e in errors]), np.mean([e.fde for e in errors])])
        rows.append(["mean", np.mean([r[1] for r in rows[:-1]]), np.mean([r[2] for r in rows[:-1]])])
    return ["scene_id", "ade", "fde"], rows


def _truth_partition(path: Path):
    if path.suffix == ".groups":
        return load_group_labels(path)
    scene = load_annotations(path)
    if scene.group_labels is None:
        raise MissingLabelsError(f"{path} has no group labels sidecar")
    return scene.group_labels


def _group_rows(pairs) -> tuple[list[str], list[list]]:
    rows = []
    scores = {"pairwise": [], "group-mitre": []}
    for stem, pred_path, truth_path in pairs:
        pred = load_group_labels(pred_path)
        truth = _truth_partition(truth_path)
        if pred.ped_ids != truth.ped_ids:
            raise UserError(f"{stem}: predicted and true partitions cover different pedestrians")
        for metric, fn in (("pairwise", pairwise_scores), ("group-mitre", group_mitre_scores)):
            s = fn(pred, truth)
            scores[metric].append(s)
            rows.append([stem, metric, s.precision, s.recall])
    for metric, got in scores.items():
        pooled = pool_scores(got)
        rows.append(["pooled", metric, pooled.precision, pooled.recall])
    for metric, got in scores.items():
        rows.append(["mean", metric, *mean_scores(got)])
    return ["scene_id", "metric", "precision", "recall"], rows


def _cells(row) -> list:
    return [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]


def cmd_eval(args, file_cfg) -> int:
    suffix = ".pred.tsv" if args.kind == "trajectory" else ".groups"
    pairs = _pair_files(args.pred, args.truth, suffix)
    header, rows = _trajectory_rows(pairs, args.frame_rate) if args.kind == "trajectory" else _group_rows(pairs)
    out = Path(args.out)
    if not out.parent.exists():
        raise UserError(f"parent directory {out.parent} does not exist")
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(_cells(r) for r in rows)
    for r in rows:
        if r[0] in ("pooled", "mean"):
            log.info("%s", " ".join(str(c) for c in _cells(r)))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV} if set)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    common.add_argument("--frame-rate", type=float, default=2.5, help="annotation frame rate in frames per second")

    parser = _Parser(prog="crowdgan", description="Trajectory forecasting and group detection in crowds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus with group labels")
    p.add_argument("--out", required=True, help="output directory (replaced atomically)")
    p.add_argument("--n-scenes", type=int, default=100, help="number of scenes (default 100)")
    p.add_argument("--seed", type=int, default=None, help="corpus seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus directory")
    p.add_argument("--data", required=True, help="corpus directory with train/ and val/ splits")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and train_log.csv")
    p.add_argument("--mode", choices=["gd-gan", "no-gan", "unconditional-gan", "no-l1"], default=None, help="objective variant")
    p.add_argument("--epochs", type=int, default=None, help="total generator epochs")
    p.add_argument("--lam", type=float, default=None, help="sparsity weight lambda")
    p.add_argument("--learning-rate", type=float, default=None, help="Adam step size")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size")
    p.add_argument("--seed", type=int, default=None, help="initialisation, shuffling and noise seed")
    p.add_argument("--hidden-size", type=int, default=None, help="recurrent hidden size")
    p.add_argument("--t-obs", type=int, default=None, help="observed steps per window")
    p.add_argument("--t-pred", type=int, default=None, help="total steps per window (observed + future)")
    p.add_argument("--z-dim", type=int, default=None, help="noise dimension")
    p.add_argument("--resume", default=None, help="continue training from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="forecast future positions for scenes")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--scene", required=True, nargs="+", help="scene TSV files or directories")
    p.add_argument("--out", required=True, help="output directory for <scene>.pred.tsv")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--start-frame", type=int, default=None, help="first frame of the window (default: scene start)")
    p.add_argument("--svg", action="store_true", help="also write <scene>.svg plots")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("group", parents=[common], help="detect pedestrian groups in scenes")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--scene", required=True, nargs="+", help="scene TSV files or directories")
    p.add_argument("--out", required=True, help="output directory for <scene>.groups and <scene>.eta.csv")
    p.add_argument("--seed", type=int, default=None, help="t-SNE seed")
    p.add_argument("--perplexity", type=float, default=None, help="t-SNE perplexity")
    p.add_argument("--tsne-iterations", type=int, default=None, help="t-SNE iterations")
    p.add_argument("--epsilon", type=float, default=None, help="DBSCAN radius")
    p.add_argument("--min-pts", type=int, default=None, help="DBSCAN core-point threshold")
    p.add_argument("--start-frame", type=int, default=None, help="first frame of the window (default: scene start)")
    p.add_argument("--svg", action="store_true", help="also write <scene>.groups.svg embedding plots")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("eval", parents=[common], help="score predictions or partitions against ground truth")
    p.add_argument("--kind", choices=["trajectory", "groups"], required=True, help="what is being scored")
    p.add_argument("--pred", required=True, nargs="+", help="prediction files, or one directory")
    p.add_argument("--truth", required=True, nargs="+", help="ground-truth files, or one directory")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        config_path = args.config or os.environ.get(CONFIG_ENV)
        file_cfg = load_config_file(config_path) if config_path else {}
        return args.func(args, file_cfg)
    except (UserError, ContractViolation, ParseError, ValidationError, MissingLabelsError) as exc:
        print(f"crowdgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"crowdgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"crowdgan {args.command}: internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
