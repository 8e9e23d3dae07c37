"""Command-line pipeline: gen-data -> search -> decode -> train -> eval.

Every command exits 0 on success and prints a single ``error: ...`` line to
stderr (exit 1) otherwise.  Each command writes its artifacts under
``--out`` together with a metadata file echoing the canonical config, the
seed, the parallelism degree, and library versions.
"""

from __future__ import annotations

import argparse
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import (generate_rds, pfm_write, read_manifest, sample_random_spec,
                   write_manifest)
from .decode import (build_discrete, decode, read_genotype, write_genotype)
from .modules import SGD, rng_for
from .pipeline import full_forward
from .search import bilevel_search, make_split, train_network
from .tensor import Tensor, no_grad
from .trellis import ArchParams, Supernet


def _parallelism(config: RunConfig) -> int:
    if config.threads > 0:
        try:
            import threadpoolctl  # noqa: F401  (best effort; recorded either way)
            threadpoolctl.threadpool_limits(config.threads)
        except ImportError:
            pass
        return config.threads
    import os
    return int(os.environ.get("OMP_NUM_THREADS", 0)) or os.cpu_count() or 1


def write_metadata(directory: Path, command: str, config: RunConfig) -> None:
    meta = [
        f"command: {command}",
        f"stereonas: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"seed: {config.seed}",
        f"parallelism: {_parallelism(config)}",
        "config:",
        config.canonical(),
    ]
    (directory / "meta.txt").write_text("\n".join(meta))


def _dataset_dir(config: RunConfig, args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(config.out) / "dataset"


def _load_samples(config: RunConfig, args):
    ddir = _dataset_dir(config, args)
    manifest = ddir / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(
            f"no dataset manifest at {manifest}; run gen-data first")
    specs = read_manifest(manifest, config.max_disparity,
                          config.data_dot_size)
    return [generate_rds(s) for s in specs]


# ---- commands ------------------------------------------------------------------


def cmd_gen_data(config: RunConfig, args) -> None:
    ddir = _dataset_dir(config, args)
    (ddir / "gt").mkdir(parents=True, exist_ok=True)
    rng = rng_for(config.seed, "gen-data")
    specs = [
        sample_random_spec(rng, config.data_height, config.data_width,
                           config.data_density, config.disparity_values(),
                           config.max_disparity, config.data_min_regions,
                           config.data_max_regions, config.data_dot_size)
        for _ in range(config.data_samples)]
    write_manifest(ddir / "manifest.txt", specs)
    for i, spec in enumerate(specs):
        sample = generate_rds(spec)
        pfm_write(ddir / "gt" / f"sample_{i:04d}.pfm", sample.gt)
    write_metadata(ddir, "gen-data", config)
    print(f"wrote {len(specs)} samples to {ddir}")


def _search_phase(net, split, config, seed_tag, arch_group, out_dir, name,
                  config_obj):
    from .report import save_loss_curve, write_ledger
    ledger = []
    history = bilevel_search(
        split, config_obj.search_schedule(), net, config_obj.max_disparity,
        seed=config_obj.seed, ledger=ledger, arch_group=arch_group,
        tag=seed_tag)
    write_ledger(out_dir / f"{name}.tsv", ledger)
    save_loss_curve(ledger, out_dir / f"{name}.png", title=name)
    return history


def cmd_search(config: RunConfig, args) -> None:
    from .report import save_path_figure
    out_dir = Path(config.out) / "search"
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _load_samples(config, args)
    split = make_split(samples, config.eval_samples)
    net_cfg = config.network_config()
    net = Supernet(net_cfg, seed=config.seed)

    histories = {}
    if config.search_mode == "joint":
        histories["search"] = _search_phase(
            net, split, config, "search", "all", out_dir, "ledger", config)
    else:
        histories["feature"] = _search_phase(
            net, split, config, "search-feature", "feature", out_dir,
            "ledger_feature", config)
        histories["matching"] = _search_phase(
            net, split, config, "search-matching", "matching", out_dir,
            "ledger_matching", config)

    arrays = net.arch.snapshot()
    np.savez(out_dir / "arch_params.npz", **arrays)
    hist_arrays = {}
    for phase, hist in histories.items():
        for epoch, snap in enumerate(hist, start=1):
            for name, arr in snap.items():
                hist_arrays[f"{phase}/e{epoch:03d}/{name}"] = arr
    np.savez(out_dir / "arch_history.npz", **hist_arrays)

    genotype = decode(net.arch, net_cfg)
    write_genotype(out_dir / "genotype.txt", genotype)
    save_path_figure(genotype, out_dir / "paths.png")

    decoded = build_discrete(genotype, net_cfg, seed=config.seed)
    counts = (f"supernet_params: {net.num_parameters()}\n"
              f"decoded_params: {decoded.num_parameters()}\n")
    (out_dir / "params.txt").write_text(counts)
    write_metadata(out_dir, "search", config)
    print(f"search done; genotype at {out_dir / 'genotype.txt'}")
    print(counts.strip())


def _arch_from_npz(path, net_cfg) -> ArchParams:
    arrays = dict(np.load(path))
    fcfg = net_cfg.feature_trellis()
    mcfg = net_cfg.matching_trellis(net_cfg.volume_channels)
    arch = ArchParams(fcfg, mcfg)
    for name, t in arch.named():
        if name not in arrays:
            raise ValueError(f"architecture snapshot misses {name}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(
                f"architecture snapshot {name} has shape "
                f"{arrays[name].shape}, expected {t.data.shape}")
        t.data[:] = arrays[name]
    return arch


def cmd_decode(config: RunConfig, args) -> None:
    from .report import save_path_figure
    out_dir = Path(config.out) / "decode"
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = config.network_config()
    arch = _arch_from_npz(args.arch, net_cfg)
    genotype = decode(arch, net_cfg)
    write_genotype(out_dir / "genotype.txt", genotype)
    save_path_figure(genotype, out_dir / "paths.png")
    write_metadata(out_dir, "decode", config)
    print(f"decoded genotype at {out_dir / 'genotype.txt'}")


def _save_weights(path, net, opt: SGD, epoch: int) -> None:
    arrays = {f"param/{n}": p.data for n, p in net.named_parameters()}
    arrays.update(opt.state_arrays(prefix="velocity/"))
    arrays["epoch"] = np.asarray(epoch)
    np.savez(path, **arrays)


def _load_weights(path, net, opt: SGD = None) -> int:
    arrays = dict(np.load(path))
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise ValueError(
                f"weights file lacks {key}: genotype/network mismatch")
        if arrays[key].shape != p.data.shape:
            raise ValueError(
                f"weight {name} has shape {arrays[key].shape}, network "
                f"expects {p.data.shape}: genotype/network mismatch")
        p.data[:] = arrays[key]
    extra = [k for k in arrays if k.startswith("param/")
             and k[len("param/"):] not in dict(net.named_parameters())]
    if extra:
        raise ValueError(
            f"weights file has {len(extra)} unknown parameters "
            f"(first: {extra[0]}): genotype/network mismatch")
    if opt is not None:
        opt.load_state_arrays(arrays, prefix="velocity/")
    return int(arrays.get("epoch", 0))


def cmd_train(config: RunConfig, args) -> None:
    from .report import save_loss_curve, write_ledger
    out_dir = Path(config.out) / "train"
    out_dir.mkdir(parents=True, exist_ok=True)
    genotype = read_genotype(args.genotype)
    net_cfg = config.network_config()
    net = build_discrete(genotype, net_cfg, seed=config.seed)
    samples = _load_samples(config, args)
    split = make_split(samples, config.eval_samples)
    train_samples = split.train_w + split.train_arch

    schedule = config.search_schedule()
    opt = SGD(list(net.named_parameters()), momentum=schedule.momentum,
              weight_decay=schedule.weight_decay)
    start_epoch = 1
    if getattr(args, "resume", None):
        start_epoch = _load_weights(args.resume, net, opt) + 1
    ledger = []
    train_network(net, train_samples, config.train_epochs, schedule,
                  config.max_disparity, seed=config.seed, ledger=ledger,
                  start_epoch=start_epoch, optimizer=opt)
    _save_weights(out_dir / "weights.npz", net, opt, config.train_epochs)
    write_ledger(out_dir / "ledger.tsv", ledger)
    save_loss_curve(ledger, out_dir / "loss_curve.png", title="train")
    (out_dir / "params.txt").write_text(
        f"decoded_params: {net.num_parameters()}\n")
    write_metadata(out_dir, "train", config)
    print(f"trained weights at {out_dir / 'weights.npz'}")


def _evaluate(net, samples, config: RunConfig):
    abs_err_sum, n_valid, n_bad = 0.0, 0, 0
    preds = []
    for chunk_start in range(0, len(samples), config.batch_size):
        chunk = samples[chunk_start:chunk_start + config.batch_size]
        left = np.stack([s.left for s in chunk])
        right = np.stack([s.right for s in chunk])
        gt = np.stack([s.gt for s in chunk])
        valid = np.stack([s.valid for s in chunk])
        with no_grad():
            disp, _loss = full_forward(net, left, right, gt, valid,
                                       config.max_disparity)
        err = np.abs(disp.data - gt)[valid]
        abs_err_sum += err.sum()
        n_valid += err.size
        n_bad += int((err > 1.0).sum())
        preds.extend(disp.data)
    return abs_err_sum / n_valid, 100.0 * n_bad / n_valid, preds


def cmd_eval(config: RunConfig, args) -> None:
    from .report import save_disparity_figure
    out_dir = Path(config.out) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    genotype = read_genotype(args.genotype)
    net = build_discrete(genotype, config.network_config(), seed=config.seed)
    _load_weights(args.weights, net)
    samples = _load_samples(config, args)
    split = make_split(samples, config.eval_samples)
    held_out = split.eval_samples

    t0 = time.perf_counter()
    epe_value, bad_value, preds = _evaluate(net, held_out, config)
    wall = time.perf_counter() - t0

    report = (f"epe: {float(epe_value)!r}\n"
              f"bad_1.0: {float(bad_value)!r}\n"
              f"params: {net.num_parameters()}\n"
              f"wall_time_s: {wall:.2f}\n")
    (out_dir / "report.txt").write_text(report)
    for i in range(min(3, len(held_out))):
        save_disparity_figure(held_out[i], preds[i],
                              out_dir / f"disparity_{i:02d}.png")
    write_metadata(out_dir, "eval", config)
    print(report, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "decode": cmd_decode,
    "train": cmd_train,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereonas",
        description="Hierarchical architecture search for volumetric stereo "
                    "matching at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--search-mode", choices=("joint", "separate"))
        p.add_argument("--cell", choices=("residual", "direct"))
        p.add_argument("--opset", choices=("reduced", "large"))
        p.add_argument("--data", help="dataset directory (default: OUT/dataset)")

    p = sub.add_parser("gen-data", help="write a random-dot-stereogram dataset")
    common(p)
    p = sub.add_parser("search", help="bilevel architecture search + decode")
    common(p)
    p = sub.add_parser("decode", help="turn an architecture snapshot into a genotype")
    common(p)
    p.add_argument("--arch", required=True, help="arch_params.npz from search")
    p = sub.add_parser("train", help="train a decoded network")
    common(p)
    p.add_argument("--genotype", required=True, help="genotype file")
    p.add_argument("--resume", help="weights.npz to resume from")
    p = sub.add_parser("eval", help="evaluate trained weights on held-out data")
    common(p)
    p.add_argument("--genotype", required=True, help="genotype file")
    p.add_argument("--weights", required=True, help="weights.npz from train")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "search_mode": getattr(args, "search_mode", None),
        "cell": args.cell,
        "opset": args.opset,
    }
    try:
        config = load_config(args.config, overrides)
        COMMANDS[args.command](config, args)
    except Exception as e:  # noqa: BLE001  (single-line machine-parseable error)
        msg = " ".join(str(e).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
