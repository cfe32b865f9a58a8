"""Command-line front end: dataset generation, pretraining, adaptation,
one-shot clustering, and retrieval evaluation.

Every subcommand prints one machine-readable JSON document on stdout and a
short human-readable summary on stderr. Exit codes: 2 usage or config
errors, 3 file and I/O errors, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data import (
    FeatureFileError,
    LabelFileError,
    SynthSpec,
    generate_synthetic,
    read_features,
    read_labels,
    write_features,
    write_labels,
)
from .encoder import load_checkpoint, save_checkpoint
from .evaluate import pairwise_fscore, retrieval_eval
from .membank import BankDivergedError, MemoryBank
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    ZeroClustersError,
    adapt,
    extract_features,
    loss_csv_lines,
    metrics_csv_lines,
    offline_epoch,
    pretrain_source,
    source_top1_accuracy,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

SPLITS = ("source", "target_train", "target_query", "target_gallery")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _emit(doc: dict, human_lines=()):
    print(json.dumps(doc, sort_keys=True))
    for line in human_lines:
        print(line, file=sys.stderr)


def _load_config(args) -> TrainConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except OSError as err:
            raise CliError(f"cannot read config: {err}", EXIT_IO)
        except json.JSONDecodeError as err:
            raise CliError(f"config is not valid JSON: {err}", EXIT_USAGE)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    try:
        return TrainConfig.from_dict(doc)
    except ConfigError as err:
        raise CliError(str(err), EXIT_USAGE)
    except TypeError as err:
        raise CliError(f"bad config value: {err}", EXIT_USAGE)


def _load_split(data_dir, split):
    base = Path(data_dir) / split
    try:
        raw = read_features(f"{base}.drft")
        identity, camera = read_labels(f"{base}.csv")
    except (OSError, FeatureFileError, LabelFileError) as err:
        raise CliError(f"cannot load split {split!r}: {err}", EXIT_IO)
    if len(identity) != len(raw):
        raise CliError(f"split {split!r}: labels do not match features", EXIT_IO)
    return raw, identity, camera


def _load_ckpt(prefix):
    try:
        return load_checkpoint(prefix)
    except (OSError, FeatureFileError, ValueError, KeyError) as err:
        raise CliError(f"cannot load checkpoint {prefix}: {err}", EXIT_IO)


def _write_manifest(run_dir: Path, cfg: TrainConfig, command, data_dir, artifacts):
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data_dir": str(data_dir),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _run_dir(args) -> Path:
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_label_snapshot(path, labels):
    with open(path, "w") as fh:
        fh.write("index,coarse,refined\n")
        for i, (c, r) in enumerate(zip(labels.coarse, labels.refined)):
            fh.write(f"{i},{c},{r}\n")


def cmd_gen_data(args):
    try:
        spec = SynthSpec(
            num_identities=args.ids, samples_per_identity=args.per_id,
            num_cameras=args.cameras, d_in=args.dim,
            identity_spread=args.spread, intra_noise=args.noise,
            camera_shift_scale=args.camera_shift, domain_shift=args.domain_shift,
            seed=args.seed if args.seed is not None else 0)
        datasets = generate_synthetic(spec)
    except ValueError as err:
        raise CliError(f"invalid dataset spec: {err}", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, ds in zip(SPLITS, datasets):
        write_features(out / f"{split}.drft", ds.raw)
        write_labels(out / f"{split}.csv", ds.identity, ds.camera)
        files[split] = {"features": str(out / f"{split}.drft"),
                        "labels": str(out / f"{split}.csv"),
                        "samples": len(ds)}
    _emit({"splits": files, "seed": spec.seed, "d_in": spec.d_in},
          [f"wrote {len(datasets)} splits to {out}"])


def cmd_pretrain(args):
    cfg = _load_config(args)
    raw, identity, _ = _load_split(args.data, "source")
    run_dir = _run_dir(args)
    ckpt = run_dir / "pretrain"
    _write_manifest(run_dir, cfg, "pretrain", args.data, {"checkpoint": ckpt})
    state = pretrain_source(raw, identity, cfg)
    save_checkpoint(ckpt, state)
    top1 = source_top1_accuracy(state, raw, identity)
    _emit({"checkpoint": str(ckpt), "epochs": cfg.pretrain_epochs,
           "source_top1": top1},
          [f"pretrained {cfg.pretrain_epochs} epochs, source top-1 {top1:.3f}"])


def _find_resume_point(resume_dir: Path):
    epochs = sorted(int(p.stem.split("_")[-1])
                    for p in resume_dir.glob("ckpt_epoch_*.json"))
    if not epochs:
        raise CliError(f"no epoch checkpoints under {resume_dir}", EXIT_IO)
    return epochs[-1]


def cmd_adapt(args):
    cfg = _load_config(args)
    raw, identity, _ = _load_split(args.data, "target_train")
    run_dir = _run_dir(args)

    start_epoch = 0
    bank = None
    if args.resume:
        resume_dir = Path(args.resume)
        last = _find_resume_point(resume_dir)
        state = _load_ckpt(resume_dir / f"ckpt_epoch_{last:03d}")
        try:
            bank_rows = read_features(resume_dir / f"bank_epoch_{last:03d}.drft")
        except (OSError, FeatureFileError) as err:
            raise CliError(f"cannot load bank snapshot: {err}", EXIT_IO)
        bank = MemoryBank(v=bank_rows, mode=cfg.bank_mode, tau=cfg.bank_tau,
                          k_pos=cfg.k_pos)
        start_epoch = last + 1
    elif args.ckpt:
        state = _load_ckpt(args.ckpt)
    else:
        src_raw, src_identity, _ = _load_split(args.data, "source")
        state = pretrain_source(src_raw, src_identity, cfg)
        save_checkpoint(run_dir / "pretrain", state)

    final = run_dir / "final"
    _write_manifest(run_dir, cfg, "adapt", args.data,
                    {"final": final, "metrics": run_dir / "metrics.csv",
                     "losses": run_dir / "losses.csv"})

    loss_rows = []
    labels_dir = Path(args.dump_labels) if args.dump_labels else None
    if labels_dir:
        labels_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(metrics, epoch_state, epoch_bank, reports, labels):
        save_checkpoint(run_dir / f"ckpt_epoch_{metrics.epoch:03d}", epoch_state)
        write_features(run_dir / f"bank_epoch_{metrics.epoch:03d}.drft", epoch_bank.v)
        loss_rows.extend((metrics.epoch, i, r) for i, r in enumerate(reports))
        if labels_dir:
            _write_label_snapshot(
                labels_dir / f"labels_epoch_{metrics.epoch:03d}.csv", labels)

    try:
        state, history, bank = adapt(state, raw, cfg, truth=identity, bank=bank,
                                     start_epoch=start_epoch, on_epoch=on_epoch)
    except (TrainingDivergedError, BankDivergedError, ZeroClustersError) as err:
        save_checkpoint(run_dir / "diverged", state)
        raise CliError(f"training diverged: {err}", EXIT_DIVERGED)

    save_checkpoint(final, state)
    if args.dump_bank and bank is not None:
        write_features(args.dump_bank, bank.v)
    (run_dir / "metrics.csv").write_text("\n".join(metrics_csv_lines(history)) + "\n")
    (run_dir / "losses.csv").write_text("\n".join(loss_csv_lines(loss_rows)) + "\n")
    summary = {
        "final_checkpoint": str(final),
        "epochs_run": len(history),
        "metrics_csv": str(run_dir / "metrics.csv"),
        "losses_csv": str(run_dir / "losses.csv"),
    }
    if history:
        summary["last_epoch"] = {
            "num_clusters": history[-1].num_clusters,
            "outliers": history[-1].outliers,
            "fscore_refined": history[-1].fscore_refined,
            "total_loss": history[-1].total,
        }
    human = [f"epoch {m.epoch}: L={m.num_clusters} outliers={m.outliers} "
             f"total={m.total:.4f}" for m in history[-3:]]
    _emit(summary, human)


def cmd_cluster(args):
    cfg = _load_config(args)
    state = _load_ckpt(args.ckpt)
    raw, identity, _ = _load_split(args.data, "target_train")
    try:
        es = offline_epoch(state, raw, cfg, epoch=0, truth=identity,
                           keep_graph=bool(args.dump_jaccard))
    except ZeroClustersError as err:
        raise CliError(str(err), EXIT_DIVERGED)
    doc = {
        "N": len(raw),
        "N_outlier": es.outliers,
        "L": es.num_clusters,
        "eps": es.eps,
        "relabeled_fraction": es.labels.relabel_fraction(),
    }
    labels = es.labels
    precision, recall, fscore, _ = pairwise_fscore(labels.refined, identity)
    doc.update(precision=precision, recall=recall, fscore=fscore,
               fscore_coarse=es.fscore_coarse, fscore_refined=es.fscore_refined)
    if args.dump_labels:
        dump_dir = Path(args.dump_labels)
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / "labels_epoch_000.csv"
        _write_label_snapshot(path, labels)
        doc["labels_csv"] = str(path)
    if args.dump_jaccard:
        write_features(args.dump_jaccard, es.d_j)
        doc["jaccard"] = str(args.dump_jaccard)
    _emit(doc, [f"L={doc['L']} outliers={doc['N_outlier']} fscore={fscore:.4f}"])


def cmd_eval(args):
    cfg = _load_config(args)
    state = _load_ckpt(args.ckpt)
    q_raw, q_id, q_cam = _load_split(args.data, "target_query")
    g_raw, g_id, g_cam = _load_split(args.data, "target_gallery")
    try:
        result = retrieval_eval(extract_features(state, q_raw), q_id, q_cam,
                                extract_features(state, g_raw), g_id, g_cam)
    except ValueError as err:
        raise CliError(f"evaluation failed: {err}", EXIT_IO)
    doc = {"mAP": result.map, "R1": result.r1, "R5": result.r5, "R10": result.r10,
           "num_queries": len(q_raw), "num_gallery": len(g_raw)}
    if args.cluster_stats:
        raw, identity, _ = _load_split(args.data, "target_train")
        es = offline_epoch(state, raw, cfg, epoch=0, truth=identity)
        precision, recall, fscore, _ = pairwise_fscore(es.labels.refined, identity)
        doc.update(precision=precision, recall=recall, fscore=fscore,
                   N=len(raw), N_outlier=es.outliers)
    _emit(doc, [f"mAP {result.map:.4f}  R1 {result.r1:.4f}  "
                f"R5 {result.r5:.4f}  R10 {result.r10:.4f}"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidapt",
        description="Feature-space unsupervised domain adaptation for identity retrieval")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config; keys mirror TrainConfig")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="cap BLAS thread parallelism")
        if out_required:
            p.add_argument("--out", required=True, help="run directory")

    gen = sub.add_parser("gen-data", help="write synthetic dataset splits")
    gen.add_argument("--ids", type=int, required=True)
    gen.add_argument("--per-id", type=int, required=True, dest="per_id")
    gen.add_argument("--cameras", type=int, default=4)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--spread", type=float, default=1.0)
    gen.add_argument("--noise", type=float, default=0.6)
    gen.add_argument("--camera-shift", type=float, default=0.6, dest="camera_shift")
    gen.add_argument("--domain-shift", type=float, default=12.0, dest="domain_shift")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--threads", type=int)
    gen.set_defaults(func=cmd_gen_data)

    pre = sub.add_parser("pretrain", help="train the encoder on the source split")
    pre.add_argument("--data", required=True)
    common(pre)
    pre.set_defaults(func=cmd_pretrain)

    ada = sub.add_parser("adapt", help="alternating adaptation on target_train")
    ada.add_argument("--data", required=True)
    ada.add_argument("--ckpt", help="pretrained checkpoint prefix (else pretrain first)")
    ada.add_argument("--resume", help="run directory to continue from")
    ada.add_argument("--dump-bank", dest="dump_bank", help="write the final bank")
    ada.add_argument("--dump-labels", dest="dump_labels",
                     help="write per-epoch label snapshots into this directory")
    common(ada)
    ada.set_defaults(func=cmd_adapt)

    clu = sub.add_parser("cluster", help="one off-line labeling pass")
    clu.add_argument("--ckpt", required=True)
    clu.add_argument("--data", required=True)
    clu.add_argument("--dump-labels", dest="dump_labels")
    clu.add_argument("--dump-jaccard", dest="dump_jaccard")
    common(clu, out_required=False)
    clu.set_defaults(func=cmd_cluster)

    eva = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    eva.add_argument("--ckpt", required=True)
    eva.add_argument("--data", required=True)
    eva.add_argument("--cluster-stats", action="store_true", dest="cluster_stats",
                     help="also report pseudo-label quality on target_train")
    common(eva, out_required=False)
    eva.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = getattr(args, "threads", None)
        if threads:
            try:
                from threadpoolctl import threadpool_limits
            except ImportError:
                print("warning: threadpoolctl not installed, --threads ignored",
                      file=sys.stderr)
                args.func(args)
            else:
                with threadpool_limits(limits=threads):
                    args.func(args)
        else:
            args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
