"""One binary, eight subcommands: gen-data, train-detector, train-embedder,
evaluate, enroll, verify, identify, serve.

Settings resolve in three layers: built-in defaults, then an optional TOML
config file, then command-line flags. Every run directory receives the
fully resolved config that produced it. Heavy imports happen after
argument parsing so the --threads cap lands before numpy spins up its
thread pools.
"""

import argparse
import json
import os
import sys

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                   "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap(argv):
    # must run before numpy is imported anywhere in this process
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv) and argv[i + 1].isdigit():
            for var in THREAD_ENV_VARS:
                os.environ[var] = argv[i + 1]


def _load_config(args):
    from .config import RunConfig
    cfg = RunConfig.from_file(args.config) if args.config \
        else RunConfig.defaults()
    for flag, (section, key) in getattr(args, "flag_map", {}).items():
        value = getattr(args, flag)
        if value is not None:
            cfg.override(section, key, value)
    return cfg


def _add_common(p, flag_map, extra=()):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--threads", type=int,
                   help="cap numeric worker threads for this process")
    for flag, meta in extra:
        p.add_argument(flag, **meta)
    p.set_defaults(flag_map=flag_map)


def cmd_gen_data(args):
    from .synthgen import dataset_stats, gen_dataset

    cfg = _load_config(args)
    out = args.out or cfg["run"]["data"]
    d = cfg["data"]
    manifest = gen_dataset(out, d["train_ids"], d["val_ids"], d["test_ids"],
                           d["images_per_id"], cfg["run"]["seed"])
    cfg.save(os.path.join(out, "config.toml"))
    total = dataset_stats(manifest)
    print(f"wrote {total['images']} images for {total['identities']} "
          f"identities under {out}")
    return 0


def cmd_train_detector(args):
    from .detector import train_detector
    from .synthgen import gen_detection_scenes

    cfg = _load_config(args)
    run_dir = os.path.join(args.out or cfg["run"]["out"], args.run_id)
    os.makedirs(run_dir, exist_ok=True)
    d = cfg["detector"]
    scenes_dir = args.scenes_dir or os.path.join(run_dir, "scenes")
    if not os.path.isdir(scenes_dir) or not os.listdir(scenes_dir):
        gen_detection_scenes(scenes_dir, d["scenes"], cfg["run"]["seed"])
        print(f"generated {d['scenes']} scenes under {scenes_dir}")

    def progress(epoch, object_loss, box_loss):
        print(f"epoch {epoch:3d}  object_loss {object_loss:10.4f}  "
              f"box_loss {box_loss:8.4f}", flush=True)

    result = train_detector(scenes_dir, out_dir=run_dir,
                            epochs=d["epochs"], seed=cfg["run"]["seed"],
                            split_ratio=d["split_ratio"],
                            batch_size=d["batch_size"], progress=progress)
    cfg.save(os.path.join(run_dir, "config.toml"))
    print(f"holdout mAP@0.5 {result.holdout_map50:.4f}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_train_embedder(args):
    from .miner import train_embedder

    cfg = _load_config(args)
    run_dir = os.path.join(args.out or cfg["run"]["out"], args.run_id)
    seed = cfg["run"]["seed"]
    e = cfg["embedder"]

    def progress(epoch, mean_loss, val, report):
        print(f"epoch {epoch:3d}  loss {mean_loss:8.4f}  val {val:.4f}  "
              f"mined semi_hard {report.semi_hard} hard {report.hard}",
              flush=True)

    result = train_embedder(
        args.data or cfg["run"]["data"], run_dir,
        opt=cfg.optimizer_state(), mining_cfg=cfg.mining_config(),
        augment_cfg=cfg.augment_config(seed=seed),
        loss_params=cfg.loss_params(), epochs=e["epochs"], dim=e["dim"],
        seed=seed, far_target=e["far_target"],
        eval_pairs=(e["eval_pos_pairs"], e["eval_neg_pairs"]),
        preprocess_params=cfg.preprocess_params(), progress=progress)
    cfg.save(os.path.join(run_dir, "config.toml"))
    print(f"decision threshold {result.threshold!r}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_evaluate(args):
    import csv

    import numpy as np

    from .embedder import embed_batch
    from .evalkit import (metrics_at_threshold, pair_distances,
                          select_threshold, sample_pairs,
                          val_at_far_resampled, write_pairs_csv)
    from .imgproc import PreprocessParams
    from .miner import load_split_images
    from .neuralcore import load_checkpoint
    from .synthgen import load_manifest

    cfg = _load_config(args)
    run_dir = os.path.join(args.out or cfg["run"]["out"], args.run_id)
    os.makedirs(run_dir, exist_ok=True)
    net, _, meta = load_checkpoint(args.checkpoint)
    params = PreprocessParams.from_dict(meta["preprocess"]) \
        if "preprocess" in meta else cfg.preprocess_params()
    data_root = args.data or cfg["run"]["data"]
    manifest = load_manifest(data_root)
    size = net.spec.input_shape[1]
    images = load_split_images(data_root, manifest, args.split, size, params)

    refs, vectors = {}, {}
    for ident in sorted(images):
        vecs = embed_batch(net, images[ident])
        refs[ident] = [(ident, k) for k in range(len(vecs))]
        for k, v in enumerate(vecs):
            vectors[(ident, k)] = v

    n = cfg["evaluate"]["pairs"]
    pairs = sample_pairs(refs, n, n, seed=cfg["run"]["seed"])
    dists = pair_distances(vectors, pairs)
    threshold = select_threshold(dists)
    point = metrics_at_threshold(dists, threshold)
    val_mean, val_std, op = val_at_far_resampled(
        dists, cfg["evaluate"]["far_target"], k=cfg["evaluate"]["resamples"],
        seed=cfg["run"]["seed"])

    write_pairs_csv(os.path.join(run_dir, "pairs.csv"), dists)
    with open(os.path.join(run_dir, "embeddings.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        dim = net.out_shape[0]
        writer.writerow(["identity", "index"] + [f"e{i}" for i in range(dim)])
        for ident in sorted(refs):
            for ident_, k in refs[ident]:
                writer.writerow([ident, k] + [repr(float(x))
                                              for x in vectors[(ident, k)]])
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["val", "val_std", "far", "val_threshold",
                         "accuracy", "f1", "f1_threshold"])
        writer.writerow([repr(float(x)) for x in
                         (val_mean, val_std, op.far, op.threshold,
                          point.accuracy, point.f1, threshold)])
    cfg.save(os.path.join(run_dir, "config.toml"))
    print(f"VAL@FAR<={cfg['evaluate']['far_target']}: {val_mean:.4f} "
          f"+- {val_std:.4f} (threshold {op.threshold:.4f})")
    print(f"pair accuracy {point.accuracy:.4f}  f1 {point.f1:.4f}")
    print(f"artifacts under {run_dir}")
    return 0


def _runtime_from_args(args):
    from .service import load_runtime

    override = args.threshold_override
    if override is not None and override <= 0.0:
        override = None
    return load_runtime(args.checkpoint, args.detector_checkpoint,
                        args.gallery_path, threshold_override=override)


def _probe_embedding(args, rt):
    from .service import run_pipeline

    try:
        with open(args.image, "rb") as f:
            data = f.read()
    except OSError as e:
        print(f"DataError: cannot read image: {e}", file=sys.stderr)
        return None
    result = run_pipeline(data, rt.embed_net, rt.detect_net,
                          preprocess_params=rt.preprocess_params)
    if not result.ok:
        print(f"{result.error_code}: pipeline stopped at {result.stage} "
              f"stage", file=sys.stderr)
        return None
    return result.embedding


def cmd_enroll(args):
    from .gallery import EnrollmentRecord, METADATA_KEYS

    rt = _runtime_from_args(args)
    vector = _probe_embedding(args, rt)
    if vector is None:
        return 1
    metadata = {}
    for key in METADATA_KEYS:
        value = getattr(args, key)
        if value is not None:
            metadata[key] = value
    if args.extras:
        try:
            extra_map = json.loads(args.extras)
        except json.JSONDecodeError:
            extra_map = None
        if not isinstance(extra_map, dict):
            print("MALFORMED_REQUEST: extras must be a JSON object",
                  file=sys.stderr)
            return 1
        metadata.update(extra_map)
    rt.gallery.enroll(EnrollmentRecord(cattle_id=args.id, embedding=vector,
                                       metadata=metadata))
    print(json.dumps({"cattle_id": args.id, "dim": rt.gallery.dim,
                      "gallery_size": len(rt.gallery)}))
    return 0


def cmd_verify(args):
    rt = _runtime_from_args(args)
    vector = _probe_embedding(args, rt)
    if vector is None:
        return 1
    out = rt.gallery.verify(vector, args.id)
    print(json.dumps({"match": out.match, "distance": out.distance,
                      "threshold": out.threshold}))
    return 0


def cmd_identify(args):
    rt = _runtime_from_args(args)
    vector = _probe_embedding(args, rt)
    if vector is None:
        return 1
    out = rt.gallery.identify(vector, k=args.k)
    print(json.dumps({
        "candidates": [{"id": c.cattle_id, "distance": c.distance}
                       for c in out.candidates],
        "match": out.match}))
    return 0


def cmd_serve(args):
    from .service import run_server

    cfg = _load_config(args)
    s = cfg["serve"]
    override = args.threshold_override \
        if args.threshold_override is not None else s["threshold_override"]
    port = int(args.port) if args.port is not None else s["port"]
    run_server(args.checkpoint or s["checkpoint"],
               args.detector_checkpoint or s["detector_checkpoint"],
               args.gallery_path or s["gallery"],
               port=port,
               threshold_override=override if override > 0.0 else None,
               host=args.host or s["host"])
    return 0


def _env(name):
    return os.environ.get(name)


def _add_runtime_flags(p, require_paths=True):
    p.add_argument("--gallery-path", default=_env("MUZZLEID_GALLERY_PATH"),
                   required=require_paths and not _env("MUZZLEID_GALLERY_PATH"))
    p.add_argument("--checkpoint", default=_env("MUZZLEID_CHECKPOINT"),
                   required=require_paths and not _env("MUZZLEID_CHECKPOINT"))
    p.add_argument("--detector-checkpoint",
                   default=_env("MUZZLEID_DETECTOR_CHECKPOINT"),
                   required=require_paths
                   and not _env("MUZZLEID_DETECTOR_CHECKPOINT"))
    p.add_argument("--threshold-override", type=float,
                   help="decision threshold replacing the checkpoint value")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="muzzleid",
        description="cattle muzzle biometric identification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p, {
        "train_ids": ("data", "train_ids"), "val_ids": ("data", "val_ids"),
        "test_ids": ("data", "test_ids"), "images": ("data", "images_per_id"),
        "seed": ("run", "seed"),
    })
    p.add_argument("--train-ids", type=int)
    p.add_argument("--val-ids", type=int)
    p.add_argument("--test-ids", type=int)
    p.add_argument("--images", type=int, help="images per identity")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset directory (must be empty)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train the muzzle detector")
    _add_common(p, {
        "scenes": ("detector", "scenes"), "epochs": ("detector", "epochs"),
        "batch_size": ("detector", "batch_size"), "seed": ("run", "seed"),
    })
    p.add_argument("--scenes", type=int, help="scenes to generate")
    p.add_argument("--scenes-dir", help="reuse an existing scenes directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="runs root directory")
    p.add_argument("--run-id", default="detector")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-embedder", help="train the embedding network")
    _add_common(p, {
        "epochs": ("embedder", "epochs"), "dim": ("embedder", "dim"),
        "margin": ("embedder", "margin"),
        "lr": ("optimizer", "learning_rate"), "seed": ("run", "seed"),
    })
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--margin", type=float, help="triplet margin alpha")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="runs root directory")
    p.add_argument("--run-id", default="embedder")
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_common(p, {
        "pairs": ("evaluate", "pairs"),
        "far_target": ("evaluate", "far_target"), "seed": ("run", "seed"),
    })
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--pairs", type=int,
                   help="positive and negative pairs to sample, each")
    p.add_argument("--far-target", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="runs root directory")
    p.add_argument("--run-id", default="evaluate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("enroll", help="enroll one cattle from a photo")
    _add_runtime_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--id", required=True, help="cattle id to enroll")
    p.add_argument("--breed")
    p.add_argument("--gender")
    p.add_argument("--date-of-birth")
    p.add_argument("--disease-history")
    p.add_argument("--vaccine-history")
    p.add_argument("--extras", help="additional metadata as a JSON object")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", help="verify a claimed identity")
    _add_runtime_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--id", required=True, help="claimed cattle id")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("identify", help="rank gallery against a probe")
    _add_runtime_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("-k", type=int, default=5, help="candidates to return")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("serve", help="run the HTTP service")
    _add_common(p, {})
    _add_runtime_flags(p, require_paths=False)
    p.add_argument("--port", type=int, default=_env("MUZZLEID_PORT"))
    p.add_argument("--host")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    _apply_thread_cap(argv)
    args = build_parser().parse_args(argv)

    from .errors import MuzzleIdError
    try:
        return args.func(args)
    except MuzzleIdError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
