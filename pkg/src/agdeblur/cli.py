"""Command-line surface: dataset synthesis, training, deblurring, evaluation,
trajectory export, and the timing benchmark.

Configuration comes from an optional JSON file (--config) with command-line
flags taking precedence; the fully resolved config, including the defaulted
seed, is printed before any work starts. All randomness funnels through one
root seed; sub-seeds are derived by stable hashing of (seed, purpose).

Exit codes: 0 success, 2 usage error, 3 validation error, 4 file/format
error, 5 numeric failure (CG divergence, NaN loss), 6 missing resource.
"""

import argparse
import json
import os
import sys
import time

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5
EXIT_MISSING = 6

VALID_FILTERS = (1, 3, 5)


def _set_thread_env(argv):
    """Honor --threads before numpy loads its BLAS thread pool."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(n)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="agdeblur",
        description="Off-resonance blur simulation and correction for spiral MRI.",
        epilog="Exit codes: 0 ok, 2 usage, 3 validation, 4 file/format, "
               "5 numeric failure, 6 missing resource.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int, help="root seed (default 0)")
        sp.add_argument("--threads", type=int,
                        help="BLAS thread cap; 1 = deterministic mode")

    sp = sub.add_parser("synth", help="synthesize a phantom dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="dataset output directory")
    sp.add_argument("--groups", type=int, help="subject groups (default 12)")
    sp.add_argument("--frames", type=int, help="frames per group (default 50)")
    sp.add_argument("--size", type=int, help="image matrix size (default 64)")
    sp.add_argument("--readouts", help="comma list of readout lengths in ms")
    sp.add_argument("--cg-iters", type=int, help="blurred-input CG iterations")
    sp.add_argument("--noise-std", type=float, help="k-space noise sigma (default 0)")

    sp = sub.add_parser("train", help="train the CNN or AG-CNN deblurrer")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset manifest path")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--model", choices=["cnn", "agcnn"], default="agcnn")
    sp.add_argument("--f1", type=int, help="first AG filter size (1/3/5)")
    sp.add_argument("--f2", type=int, help="second AG filter size (1/3/5)")
    sp.add_argument("--reduction", type=int, help="AG bottleneck ratio (default 2)")
    sp.add_argument("--epochs", type=int, help="training epochs (default 200)")
    sp.add_argument("--batch", type=int, help="mini-batch size (default 64)")
    sp.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    sp.add_argument("--resume", action="store_true",
                    help="continue from the trainer state in --out")

    sp = sub.add_parser("deblur", help="deblur a dataset role frame-by-frame")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset manifest path")
    sp.add_argument("--role", default="test", choices=["train", "val", "test"])
    sp.add_argument("--method", required=True,
                    choices=["agcnn", "cnn", "mfi", "ir", "none"])
    sp.add_argument("--ckpt", help="checkpoint dir (agcnn/cnn)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--iters", type=int, help="IR CG iterations (default 15)")
    sp.add_argument("--mfi-basis", type=int, help="MFI basis count (default auto)")

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset manifest path")
    sp.add_argument("--role", default="test", choices=["train", "val", "test"])
    sp.add_argument("--pred", required=True, help="prediction directory")
    sp.add_argument("--out", required=True, help="report prefix (writes .json/.txt)")
    sp.add_argument("--method-label", default="method")

    sp = sub.add_parser("bench", help="time AG-CNN inference vs IR")
    common(sp)
    sp.add_argument("--out", help="write the timing report JSON here")
    sp.add_argument("--size", type=int, help="matrix size (default 64)")
    sp.add_argument("--iters", type=int, help="IR CG iterations (default 15)")
    sp.add_argument("--frames", type=int, help="timed frames (default 5)")
    sp.add_argument("--warmup", type=int, help="warmup frames (default 1)")
    sp.add_argument("--ckpt", help="checkpoint for the network (default random init)")

    sp = sub.add_parser("traj", help="export a spiral trajectory as SPDB")
    common(sp)
    sp.add_argument("--out", required=True, help="output SPDB path")
    sp.add_argument("--matrix", type=int, help="matrix size (default 64)")
    sp.add_argument("--fov", type=float, help="field of view in cm (default 20)")
    sp.add_argument("--readout", type=float, help="readout length in ms (default 2.52)")
    sp.add_argument("--interleaves", type=int, help="default: smallest Nyquist count")
    sp.add_argument("--dt", type=float, help="dwell time in us (default 4)")
    return p


def _resolve(args, defaults):
    """Merge defaults <- config file <- flags; returns a plain dict."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        for k, v in file_cfg.items():
            if k in cfg:
                cfg[k] = v
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg.get("seed") is None:
        cfg["seed"] = 0
    return cfg


def _print_config(command, cfg):
    print(f"[agdeblur {command}] resolved config: "
          + json.dumps(cfg, sort_keys=True))


def _load_entry_arrays(tensors_mod, data_dir, entry, *names):
    out = []
    for name in names:
        rel = getattr(entry, f"{name}_path")
        out.append(tensors_mod.load_tensor(os.path.join(data_dir, rel)))
    return out


def cmd_synth(args):
    from . import datagen
    defaults = dict(seed=None, groups=12, frames=50, size=64,
                    readouts=None, cg_iters=30, noise_std=0.0, out=args.out)
    cfg = _resolve(args, defaults)
    if cfg["readouts"]:
        if isinstance(cfg["readouts"], str):
            readouts = tuple(float(r) * 1e-3 for r in cfg["readouts"].split(","))
        else:
            readouts = tuple(float(r) * 1e-3 for r in cfg["readouts"])
    else:
        from . import spiral
        readouts = spiral.READOUT_LENGTHS_S
    _print_config("synth", {**cfg, "readouts_s": list(readouts)})
    dcfg = datagen.DatasetConfig(
        n_groups=cfg["groups"], frames_per_group=cfg["frames"],
        height=cfg["size"], width=cfg["size"], readouts=readouts,
        cg_iters=cfg["cg_iters"], noise_std=cfg["noise_std"], seed=cfg["seed"])
    n_done = [0]

    def progress(entry):
        n_done[0] += 1
        if n_done[0] % 25 == 0:
            print(f"  synthesized {n_done[0]} frames", flush=True)

    manifest = datagen.build_dataset(dcfg, cfg["out"], progress=progress)
    print(f"wrote {len(manifest['entries'])} frames to {cfg['out']}")
    return 0


def _model_from_cfg(cfg, nn):
    if cfg["model"] == "cnn":
        f1 = f2 = 0
    else:
        f1, f2 = cfg["f1"], cfg["f2"]
        for f in (f1, f2):
            if f not in VALID_FILTERS:
                raise UsageError(f"AG filter size {f} not in {VALID_FILTERS}")
    return nn.AgCnnModel(f1=f1, f2=f2, reduction=cfg["reduction"])


class UsageError(Exception):
    pass


def _load_role_samples(data_path, role, training, datagen, tensors):
    manifest = datagen.load_manifest(data_path)
    data_dir = os.path.dirname(os.path.abspath(data_path))
    entries = datagen.manifest_entries(manifest, role)
    samples = []
    for e in entries:
        inp, tgt = _load_entry_arrays(tensors, data_dir, e, "input", "target")
        samples.append(training.prepare_sample(inp, tgt)[:2])
    return samples, entries, manifest, data_dir


def cmd_train(args):
    from . import datagen, nn, tensors, training
    defaults = dict(seed=None, model=args.model, f1=3, f2=3, reduction=2,
                    epochs=200, batch=64, lr=1e-3, data=args.data, out=args.out,
                    resume=bool(args.resume))
    cfg = _resolve(args, defaults)
    _print_config("train", cfg)
    model = _model_from_cfg(cfg, nn)
    train_set, _, _, _ = _load_role_samples(cfg["data"], "train",
                                            training, datagen, tensors)
    val_set, _, _, _ = _load_role_samples(cfg["data"], "val",
                                          training, datagen, tensors)
    tcfg = training.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"],
        seed=tensors.derive_seed(cfg["seed"], "train/shuffle"))
    if cfg["resume"]:
        state = training.load_train_state(cfg["out"], model)
    else:
        nn.init_weights(model, tensors.Rng(
            tensors.derive_seed(cfg["seed"], "train/init")))
        state = training.new_train_state(model, tcfg)
    training.run_epochs(model, train_set, val_set, tcfg, state)
    for entry in state["log"][-min(len(state["log"]), cfg["epochs"]):]:
        print(f"  epoch {entry['epoch']:4d}  train {entry['train_loss']:.6f}"
              f"  val {entry['val_loss']:.6f}")
    training.save_train_state(cfg["out"], model, state)
    training.finalize_best(model, state)
    meta = {"seed": cfg["seed"], "model": cfg["model"], "data": cfg["data"],
            "epochs": cfg["epochs"], "batch": cfg["batch"], "lr": cfg["lr"]}
    training.save_checkpoint(cfg["out"], model, meta=meta, log=state["log"])
    print(f"saved checkpoint to {cfg['out']} "
          f"(best val loss {state['best_loss']:.6f})")
    return 0


def _rebuild_traj(entry, manifest, spiral):
    c = manifest["config"]
    return spiral.make_spiral(c["height"], c["fov_cm"], entry.readout_len_s,
                              None, c["dt_s"])


def cmd_deblur(args):
    from . import classical, datagen, encoder, spiral, tensors, training
    defaults = dict(seed=None, data=args.data, role=args.role,
                    method=args.method, ckpt=args.ckpt, out=args.out,
                    iters=15, mfi_basis=None)
    cfg = _resolve(args, defaults)
    _print_config("deblur", cfg)
    method = cfg["method"]
    model = None
    if method in ("agcnn", "cnn"):
        if not cfg["ckpt"]:
            raise UsageError(f"method {method} needs --ckpt")
        if not os.path.isdir(cfg["ckpt"]):
            raise FileNotFoundError(f"checkpoint dir {cfg['ckpt']} not found")
        model, _ = training.load_checkpoint(cfg["ckpt"])

    manifest = datagen.load_manifest(cfg["data"])
    data_dir = os.path.dirname(os.path.abspath(cfg["data"]))
    entries = datagen.manifest_entries(manifest, cfg["role"])
    os.makedirs(cfg["out"], exist_ok=True)
    times = []
    for entry in sorted(entries, key=lambda e: (e.readout_len_s, e.id)):
        t0 = time.perf_counter()
        if method == "none":
            (pred,) = _load_entry_arrays(tensors, data_dir, entry, "input")
        elif method in ("agcnn", "cnn"):
            (inp,) = _load_entry_arrays(tensors, data_dir, entry, "input")
            pred = training.apply_model(model, inp)
        else:
            fmap_path = os.path.join(data_dir, entry.fmap_path)
            if not os.path.exists(fmap_path):
                raise encoder.ValidationError(
                    f"{method} needs a field map; {fmap_path} is missing "
                    "(classical correction assumes the true map is known)")
            fmap, ksp_samples = _load_entry_arrays(tensors, data_dir, entry,
                                                   "fmap", "ksp")
            traj = _rebuild_traj(entry, manifest, spiral)
            ksp = encoder.KspaceData(ksp_samples, traj)
            if method == "ir":
                pred, _secs = classical.ir_deblur(ksp, fmap, iters=cfg["iters"])
            else:
                lo = min(fmap.min(), 0.0) - 1.0
                hi = max(fmap.max(), 0.0) + 1.0
                plan = classical.plan_mfi(traj, lo, hi,
                                          num_basis=cfg["mfi_basis"])
                pred = classical.mfi_deblur(ksp, fmap, plan, basis="cg")
        times.append(time.perf_counter() - t0)
        tensors.save_tensor(os.path.join(cfg["out"], f"{entry.id}.pred.spdb"),
                            pred)
    with open(os.path.join(cfg["out"], "deblur.json"), "w") as fh:
        json.dump({"method": method, "role": cfg["role"],
                   "n_frames": len(entries),
                   "seconds_per_frame": sum(times) / max(len(times), 1)},
                  fh, indent=2, sort_keys=True)
    print(f"deblurred {len(entries)} frames with {method} "
          f"({sum(times) / max(len(times), 1):.3f} s/frame)")
    return 0


def cmd_eval(args):
    from . import datagen, quality, tensors
    defaults = dict(seed=None, data=args.data, role=args.role, pred=args.pred,
                    out=args.out, method_label=args.method_label)
    cfg = _resolve(args, defaults)
    _print_config("eval", cfg)
    manifest = datagen.load_manifest(cfg["data"])
    data_dir = os.path.dirname(os.path.abspath(cfg["data"]))
    entries = datagen.manifest_entries(manifest, cfg["role"])
    overall = quality.QualityReport(method=cfg["method_label"])
    per_readout = {}
    timing_path = os.path.join(cfg["pred"], "deblur.json")
    if os.path.exists(timing_path):
        with open(timing_path) as fh:
            overall.seconds_per_frame = json.load(fh).get("seconds_per_frame")
    for entry in entries:
        (tgt,) = _load_entry_arrays(tensors, data_dir, entry, "target")
        pred = tensors.load_tensor(
            os.path.join(cfg["pred"], f"{entry.id}.pred.spdb"))
        overall.add_frame(entry.id, tgt, pred)
        rep = per_readout.setdefault(
            entry.readout_len_s,
            quality.QualityReport(method=cfg["method_label"],
                                  readout_len_s=entry.readout_len_s))
        rep.add_frame(entry.id, tgt, pred)
    result = {"overall": overall.to_dict(),
              "per_readout": {f"{k * 1e3:.3f}ms": v.to_dict()
                              for k, v in sorted(per_readout.items())}}
    with open(cfg["out"] + ".json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    table = quality.render_table(
        [overall] + [per_readout[k] for k in sorted(per_readout)])
    with open(cfg["out"] + ".txt", "w") as fh:
        fh.write(table)
    print(table, end="")
    agg = overall.aggregate()
    print(f"mean PSNR {agg['psnr_db_mean']:.2f} dB over {len(entries)} frames")
    return 0


def cmd_bench(args):
    from . import classical, datagen, encoder, nn, spiral, tensors, training
    defaults = dict(seed=None, out=None, size=64, iters=15, frames=5,
                    warmup=1, ckpt=None)
    cfg = _resolve(args, defaults)
    _print_config("bench", cfg)
    rng = tensors.Rng(tensors.derive_seed(cfg["seed"], "bench"))
    if cfg["ckpt"]:
        model, _ = training.load_checkpoint(cfg["ckpt"])
    else:
        model = nn.AgCnnModel(f1=3, f2=3)
        nn.init_weights(model, rng.spawn("init"))
    phantom = datagen.make_phantom(cfg["size"], cfg["size"], rng.spawn("phantom"))
    traj = spiral.make_spiral(cfg["size"], 20.0, spiral.READOUT_LENGTHS_S[-1])
    aug = encoder.AugmentationParams(alpha=1.5, beta=50.0)
    fmap = encoder.augment_field_map(phantom.fieldmap, aug)
    ksp = encoder.forward(phantom.image, fmap, traj)
    blurred = encoder.cg_recon(ksp, None, iters=15, tol=1e-4)

    def time_fn(fn):
        for _ in range(cfg["warmup"]):
            fn()
        t = []
        for _ in range(cfg["frames"]):
            t0 = time.perf_counter()
            fn()
            t.append(time.perf_counter() - t0)
        return sum(t) / len(t)

    cnn_s = time_fn(lambda: training.apply_model(model, blurred))
    ir_s = time_fn(lambda: classical.ir_deblur(ksp, fmap, iters=cfg["iters"]))
    report = {"matrix_size": cfg["size"], "ir_iters": cfg["iters"],
              "warmup_frames": cfg["warmup"], "timed_frames": cfg["frames"],
              "agcnn_s_per_frame": cnn_s, "ir_s_per_frame": ir_s,
              "speedup": ir_s / cnn_s if cnn_s > 0 else float("inf")}
    print(json.dumps(report, indent=2, sort_keys=True))
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return 0


def cmd_traj(args):
    from . import spiral, tensors
    defaults = dict(seed=None, out=args.out, matrix=64, fov=20.0, readout=2.52,
                    interleaves=None, dt=4.0)
    cfg = _resolve(args, defaults)
    _print_config("traj", cfg)
    traj = spiral.make_spiral(cfg["matrix"], cfg["fov"], cfg["readout"] * 1e-3,
                              cfg["interleaves"], cfg["dt"] * 1e-6)
    tensors.save_tensor(cfg["out"], spiral.trajectory_to_tensor(traj))
    print(f"wrote {traj.n_samples} samples ({traj.n_interleaves} interleaves) "
          f"to {cfg['out']}")
    return 0


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "deblur": cmd_deblur,
             "eval": cmd_eval, "bench": cmd_bench, "traj": cmd_traj}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    from . import classical, datagen, encoder, spiral, tensors, training
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (encoder.ValidationError, classical.MfiPlanError,
            classical.FieldOutsidePlanError, datagen.DatasetError,
            spiral.SpiralDesignError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except tensors.SpdbError as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (encoder.DivergenceError, training.NanLossError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"missing resource: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
