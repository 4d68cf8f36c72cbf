"""Command-line driver: synth -> preprocess -> search -> derive -> retrain -> eval -> report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
Every command writes into one run directory (``--out``) together with the
resolved configuration (``config.txt``) and timing metadata (``meta.json``).
"""
import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as datamod
from .autodiff import NumericError, kernels, set_default_dtype
from .checkpoint import (CheckpointError, load_checkpoint, load_search_state, load_train_state,
                         save_checkpoint, save_search_state, save_train_state)
from .config import ConfigError, RunConfig, format_value, load_config, paper_faithful_config
from .optim import Adam
from .search import derive, init_search, run_search
from .search_space import ArchParams, CellSpec, GenotypeFormatError, derive_genotype, load_genotype, save_genotype
from .supernet import DiscreteNet, HandUNet
from .train_eval import History, evaluate, train_network

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("nasunet")


class DataError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------

def resolve_config(args):
    cfg = paper_faithful_config() if getattr(args, "paper_faithful", False) else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.resolve()


def apply_runtime(cfg):
    backend = cfg.runtime.backend
    if backend == "auto":
        backend = "numba" if "numba" in kernels.available_backends() and kernels._env_wants_numba() else "numpy"
    kernels.use_backend(backend)
    set_default_dtype(np.float64 if cfg.runtime.dtype == "float64" else np.float32)


def prepare_out(out, cfg, command):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return {"command": command, "start": time.time()}


def finish_meta(out, meta, **extra):
    meta.update(extra)
    meta["end"] = time.time()
    meta["wall_clock_s"] = meta["end"] - meta["start"]
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_split(data_dir, split, cfg):
    if not os.path.exists(os.path.join(data_dir, "manifest.tsv")):
        raise DataError(f"no dataset at {data_dir} (manifest.tsv missing)")
    samples, _ = datamod.load_samples(data_dir, split)
    if not samples:
        raise DataError(f"{data_dir}: split {split!r} is empty")
    ds = datamod.Dataset.from_samples(samples, dtype=np.float64 if cfg.runtime.dtype == "float64" else np.float32)
    if tuple(ds.images.shape[2:]) != tuple(cfg.net.input_size):
        raise DataError(f"{data_dir}: images are {ds.images.shape[2:]}, config expects {cfg.net.input_size}")
    if ds.labels.max() >= cfg.net.num_classes:
        raise DataError(f"{data_dir}: label {ds.labels.max()} >= num_classes {cfg.net.num_classes}")
    return ds


def load_genotypes(directory):
    out = {}
    for role in ("down", "up"):
        path = os.path.join(directory, f"genotype_{role}.txt")
        if not os.path.exists(path):
            raise DataError(f"missing genotype file {path}")
        out[role] = load_genotype(path)
    return out


def write_metrics(path, metrics, cm):
    payload = metrics.as_dict()
    payload["confusion"] = cm.counts.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def build_model(kind, cfg, genotypes=None):
    if kind == "baseline":
        return HandUNet(cfg.net, seed=cfg.retrain.seed)
    return DiscreteNet(genotypes, cfg.net, seed=cfg.retrain.seed)


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    meta = prepare_out(args.out, cfg, "synth")
    samples = datamod.generate_synthetic(cfg.synth)
    if cfg.data.augment:
        samples = [a for s in samples for a in datamod.augment(
            s, cfg.data.window, cfg.data.trim_top, cfg.data.trim_bottom, cfg.data.overlap, cfg.data.flip)]
    header = {k: format_value(v) for k, v in cfg.items() if k.startswith(("synth.", "data."))}
    manifest = datamod.split_dataset(samples, cfg.data.split, cfg.seed, header=header)
    datamod.save_samples(samples, manifest, args.out, cfg.synth.num_classes)
    counts = manifest.counts()
    sources = {}
    for s, e in zip(samples, manifest.entries):
        sources.setdefault(e.split, set()).add(s.source)
    print(f"wrote {len(samples)} samples to {args.out}: "
          + ", ".join(f"{k} {counts[k]} ({len(sources[k])} sources)" for k in sorted(counts)))
    finish_meta(args.out, meta, samples=len(samples))
    return EXIT_OK


def cmd_preprocess(args, cfg):
    if not args.data:
        raise ConfigError("preprocess needs --data <dataset dir>")
    if not os.path.exists(os.path.join(args.data, "manifest.tsv")):
        raise DataError(f"no dataset at {args.data}")
    meta = prepare_out(args.out, cfg, "preprocess")
    samples, manifest = datamod.load_samples(args.data)
    samples = datamod.preprocess(samples, cfg.data.morphology_ops())
    manifest.header["preprocess"] = cfg.data.morphology
    datamod.save_samples(samples, manifest, args.out, cfg.synth.num_classes)
    print(f"preprocessed {len(samples)} samples with {cfg.data.morphology} -> {args.out}")
    finish_meta(args.out, meta, samples=len(samples))
    return EXIT_OK


def cmd_search(args, cfg):
    if not args.data:
        raise ConfigError("search needs --data <dataset dir>")
    train = load_split(args.data, "train", cfg)
    meta = prepare_out(args.out, cfg, "search")
    search_train, val = datamod.search_split(train, cfg.search.val_fraction, cfg.seed)
    config_text = cfg.to_text()
    if args.resume:
        state = load_search_state(args.resume, cfg.search, cfg.net)
        print(f"resuming search after epoch {state.epoch}")
    else:
        state = init_search(cfg.search, cfg.net)
    ckpt = os.path.join(args.out, "checkpoint.nasu")

    def on_epoch(st):
        st.history.to_csv(os.path.join(args.out, "history.csv"))
        every = cfg.runtime.checkpoint_every
        if every and (st.epoch % every == 0 or st.epoch == cfg.search.epochs):
            save_search_state(ckpt, st, cfg.seed, config_text)
        if args.stop_after and st.epoch >= args.stop_after:
            raise _Interrupted()

    try:
        genotypes, history, state = run_search(cfg.search, cfg.net, search_train, val, state=state,
                                               on_epoch=on_epoch, log=log.info)
    except _Interrupted:
        print(f"stopped after epoch {state.epoch}; resume with --resume {ckpt}")
        finish_meta(args.out, meta, interrupted=True)
        return EXIT_OK
    history.to_csv(os.path.join(args.out, "history.csv"))
    for role, g in genotypes.items():
        save_genotype(g, os.path.join(args.out, f"genotype_{role}.txt"))
    print(f"search finished: {len(history)} epochs, final val mIoU {history[-1].miou:.4f}")
    finish_meta(args.out, meta, model="NAS-Unet (search)", dataset=args.data)
    return EXIT_OK


class _Interrupted(Exception):
    pass


def cmd_derive(args, cfg):
    src = args.checkpoint or args.resume
    if not src:
        raise ConfigError("derive needs a search checkpoint")
    header, arrays, _ = load_checkpoint(src)
    if header.get("mode") != "search":
        raise DataError(f"{src} is not a search checkpoint")
    os.makedirs(args.out, exist_ok=True)
    for role in ("down", "up"):
        alpha = ArchParams(CellSpec(role, cfg.net.m))
        for i, row in enumerate(alpha.rows):
            key = f"alpha.{role}.{i}"
            if key not in arrays:
                raise DataError(f"{src}: missing {key} (does net.m match the search?)")
            row.data = arrays[key]
        g = derive_genotype(alpha)
        save_genotype(g, os.path.join(args.out, f"genotype_{role}.txt"))
        print(g.to_text(), end="")
    return EXIT_OK


def cmd_retrain(args, cfg):
    if not args.data:
        raise ConfigError("retrain needs --data <dataset dir>")
    genotypes = None if args.baseline else load_genotypes(args.genotypes or args.out)
    train = load_split(args.data, "train", cfg)
    test = load_split(args.data, "test", cfg)
    meta = prepare_out(args.out, cfg, "retrain")
    kind = "baseline" if args.baseline else "nas"
    net = build_model(kind, cfg, genotypes)
    opt = Adam(net.parameters(), cfg.retrain.lr, cfg.retrain.betas, weight_decay=cfg.retrain.weight_decay)
    ckpt = os.path.join(args.out, "model.nasu")
    start, history = 0, History()
    if args.resume:
        start, history = load_train_state(args.resume, net, opt)
    config_text = cfg.to_text()

    def on_epoch(epoch, net_, opt_, hist):
        hist.to_csv(os.path.join(args.out, "history.csv"))
        save_train_state(ckpt, net_, opt_, hist, epoch, cfg.seed, config_text)
        if args.stop_after and epoch >= args.stop_after:
            raise _Interrupted()

    try:
        net, history = train_network(net, train, test, cfg.retrain, start_epoch=start, optimizer=opt,
                                     history=history, on_epoch=on_epoch, log=log.info)
    except _Interrupted:
        print(f"stopped after epoch {args.stop_after}; resume with --resume {ckpt}")
        finish_meta(args.out, meta, interrupted=True)
        return EXIT_OK
    history.to_csv(os.path.join(args.out, "history.csv"))
    if genotypes:
        for role, g in genotypes.items():
            save_genotype(g, os.path.join(args.out, f"genotype_{role}.txt"))
    metrics, cm = evaluate(net, test, cfg.net.num_classes, return_confusion=True)
    write_metrics(os.path.join(args.out, "metrics.json"), metrics, cm)
    model_name = "Unet" if args.baseline else "NAS-Unet"
    print(f"{model_name}: test mIoU {metrics.miou:.4f} DSC {metrics.dsc:.4f} pixel acc {metrics.pixel_accuracy:.4f}")
    finish_meta(args.out, meta, model=model_name, dataset="synthetic", kind=kind,
                params=net.num_parameters())
    return EXIT_OK


def cmd_eval(args, cfg):
    if not args.data:
        raise ConfigError("eval needs --data <dataset dir>")
    model_dir = args.model or args.out
    ckpt = model_dir if os.path.isfile(model_dir) else os.path.join(model_dir, "model.nasu")
    run_dir = os.path.dirname(ckpt)
    header, arrays, _ = load_checkpoint(ckpt)
    kind = "baseline" if not os.path.exists(os.path.join(run_dir, "genotype_down.txt")) else "nas"
    net = build_model(kind, cfg, None if kind == "baseline" else load_genotypes(run_dir))
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    test = load_split(args.data, "test", cfg)
    os.makedirs(args.out, exist_ok=True)
    metrics, cm = evaluate(net, test, cfg.net.num_classes, return_confusion=True)
    write_metrics(os.path.join(args.out, "metrics.json"), metrics, cm)
    print(json.dumps({k: getattr(metrics, k) for k in ("pixel_accuracy", "miou", "dsc")}))
    return EXIT_OK


REPORT_HEADER = ["Model", "Dataset", "mIoU", "DSC", "Time(Tr.)"]


def _fmt_duration(seconds):
    seconds = int(round(seconds))
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h}h{m:02d}m{s:02d}s" if h else f"{m}m{s:02d}s"


def build_report(run_dirs):
    rows, progression = [], []
    for d in run_dirs:
        mpath = os.path.join(d, "metrics.json")
        if not os.path.exists(mpath):
            raise DataError(f"{d}: metrics.json missing (run retrain or eval first)")
        with open(mpath, encoding="utf-8") as fh:
            m = json.load(fh)
        meta = {}
        if os.path.exists(os.path.join(d, "meta.json")):
            with open(os.path.join(d, "meta.json"), encoding="utf-8") as fh:
                meta = json.load(fh)
        wall = meta.get("end", 0.0) - meta.get("start", 0.0)
        rows.append([meta.get("model", os.path.basename(d)), meta.get("dataset", "synthetic"),
                     f"{m['miou']:.4f}", f"{m['dsc']:.4f}", _fmt_duration(wall)])
        hpath = os.path.join(d, "history.csv")
        if os.path.exists(hpath):
            for r in History.from_csv(hpath):
                progression.append([rows[-1][0], r.epoch, f"{r.pixel_acc:.4f}", f"{r.miou:.4f}", f"{r.dsc:.4f}"])
    return rows, progression


def _table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def cmd_report(args, cfg):
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    rows, progression = build_report(args.runs)
    os.makedirs(args.out, exist_ok=True)
    text = _table(REPORT_HEADER, rows)
    prog_header = ["Model", "Epoch", "Pixel Accuracy", "mIoU", "DSC"]
    text += "\n" + _table(prog_header, progression) if progression else ""
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    for name, header, body in (("report.csv", REPORT_HEADER, rows), ("progression.csv", prog_header, progression)):
        with open(os.path.join(args.out, name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
    print(text, end="")
    return EXIT_OK


def cmd_config(args, cfg):
    print(cfg.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "config": cmd_config,
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "search": cmd_search,
    "derive": cmd_derive,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit run seed (overrides the config)")
    common.add_argument("--paper-faithful", action="store_true", help="start from the full-scale reference hyperparameters")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--resume", help="checkpoint to resume from")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="nasunet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate and split a synthetic dataset")
    pp = sub.add_parser("preprocess", parents=[common], help="apply morphology to a dataset")
    pp.add_argument("--data")
    ps = sub.add_parser("search", parents=[common], help="run the architecture search")
    ps.add_argument("--data")
    ps.add_argument("--stop-after", type=int, default=0, help="stop after this many epochs (resumable)")
    pd = sub.add_parser("derive", parents=[common], help="derive genotypes from a search checkpoint")
    pd.add_argument("checkpoint", nargs="?")
    pr = sub.add_parser("retrain", parents=[common], help="train a derived (or baseline) network")
    pr.add_argument("--data")
    pr.add_argument("--genotypes", help="directory holding genotype_down.txt and genotype_up.txt")
    pr.add_argument("--baseline", action="store_true", help="train the hand-designed Unet instead")
    pr.add_argument("--stop-after", type=int, default=0, help="stop after this many epochs (resumable)")
    pe = sub.add_parser("eval", parents=[common], help="evaluate a trained model on the test split")
    pe.add_argument("--data")
    pe.add_argument("--model", help="run directory or model.nasu file")
    prp = sub.add_parser("report", parents=[common], help="comparison table over run directories")
    prp.add_argument("runs", nargs="*")
    sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        apply_runtime(cfg)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GenotypeFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
