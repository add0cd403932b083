"""Command-line entry point: generate | simulate | train | eval | decode | sta.

Every command reads one configuration tree, writes into ``--out`` and leaves
a ``manifest_<command>.json`` (config echo, input/output digests, version)
next to its outputs.  Exit codes: 0 success, 2 configuration, 3 data,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import warnings
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigurationError, DataError, HocnnError, TrainingAborted, UndefinedResultError
from .network import init_network, load_checkpoint, mcintosh_layers, save_checkpoint, train
from .pipeline import evaluate_model, make_train_data, network_input, simulate_split
from .readout import (
    build_feature_matrix,
    default_tap,
    evaluate_readout,
    fit_readout,
    select_lambda,
    write_scatter_csv,
    write_summary_csv,
)
from .retina import (
    ModelCell,
    bootstrap_reliability,
    cell_to_dict,
    make_cell_bank,
    read_responses,
    simulate_rates,
    write_reliability_csv,
    write_responses,
)
from .sta import binary_noise, compute_sta, svd_decompose, write_spatial_pgm, write_sta_file, write_temporal_csv
from .stimulus import PARAM_NAMES, StimulusDataset, generate_dataset, read_dataset, write_dataset, write_labels_csv

log = logging.getLogger("hocnn")
COMMANDS = ("generate", "simulate", "train", "eval", "decode", "sta")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg, out: Path, force: bool):
        self.command, self.cfg, self.out, self.force = command, cfg, out, force
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def target(self, name: str) -> Path:
        path = self.out / name
        if path.exists() and not self.force:
            raise ConfigurationError(f"{path} exists; pass --force to overwrite")
        self.outputs.append(path)
        return path

    def source(self, name: str) -> Path:
        path = Path(name) if Path(name).is_absolute() else self.out / name
        if not path.exists():
            raise DataError(f"missing input {path}; run the producing command first")
        self.inputs.append(path)
        return path

    def finish(self) -> None:
        config_path = self.out / "config.toml"
        config_path.write_text(cfgmod.dump_config(self.cfg))
        manifest = {
            "command": self.command,
            "version": _version(),
            "config": cfgmod.config_to_dict(self.cfg),
            "inputs": {p.name: _digest(p) for p in self.inputs},
            "outputs": {p.name: _digest(p) for p in self.outputs if p.exists()},
        }
        path = self.out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _cells(cfg, ds: StimulusDataset):
    return make_cell_bank(cfg.cells, ds.frame_shape[1:], cfg.seed)


def cmd_generate(run: Run) -> int:
    cfg = run.cfg
    if cfg.stimulus.n_train + cfg.stimulus.n_test == 0:
        raise DataError("stimulus config asks for zero sequences")
    ds = generate_dataset(cfg.stimulus, cfg.seed)
    write_dataset(ds, run.target(cfg.paths.dataset))
    write_labels_csv(ds, run.target(cfg.paths.labels))
    log.info("wrote %d train and %d test sequences", len(ds.train_videos), len(ds.test_videos))
    return 0


def cmd_simulate(run: Run) -> int:
    cfg = run.cfg
    ds = read_dataset(run.source(cfg.paths.dataset))
    cells = _cells(cfg, ds)
    bpf = cfg.cells.bins_per_frame
    if ds.train_videos.shape[0]:
        train_resp = simulate_split(ds, cells, "train", 1, cfg.seed, bpf)
        write_responses(train_resp, run.target(cfg.paths.responses_train))
    if ds.test_videos.shape[0] == 0:
        raise DataError("the dataset has no test sequences to estimate reliability on")
    test_resp = simulate_split(ds, cells, "test", ds.n_repeats, cfg.seed + 1, bpf)
    write_responses(test_resp, run.target(cfg.paths.responses_test))
    rel = bootstrap_reliability(test_resp, cfg.n_bootstrap, cfg.seed)
    write_reliability_csv(test_resp, rel, run.target(cfg.paths.reliability))
    cells_path = run.target(cfg.paths.cells)
    cells_path.write_text(json.dumps([cell_to_dict(c) for c in cells], indent=1, sort_keys=True) + "\n")
    log.info("mean reliability %.3f", float(np.nanmean(rel.mean)))
    return 0


def _layers(cfg, n_cells: int):
    m = cfg.model
    return mcintosh_layers(m.kind, n_cells, m.channels, m.windows, m.order)


def cmd_train(run: Run, fraction: float | None) -> int:
    cfg = run.cfg
    fraction = cfg.train.fraction if fraction is None else fraction
    train_cfg = cfg.train.to_train_config(cfg.seed)
    if not 0.0 < fraction <= 1.0 - train_cfg.val_fraction + 1e-12:
        raise ConfigurationError(f"--fraction {fraction} must lie in (0, {1 - train_cfg.val_fraction:g}]")
    ds = read_dataset(run.source(cfg.paths.dataset))
    responses = read_responses(run.source(cfg.paths.responses_train))
    layers = _layers(cfg, len(responses.cell_ids))
    state = init_network(layers, (ds.train_videos.shape[1],) + ds.frame_shape[1:] + (1,), cfg.seed)
    data = make_train_data(ds, responses, state.history, bins_per_frame=cfg.cells.bins_per_frame)
    status = 0
    try:
        best, train_log = train(state, data, train_cfg, fraction, progress=lambda r: log.info(
            "epoch %d train %.5f val %.5f lr %.2e", r["epoch"], r["train_loss"], r["val_loss"], r["lr"]))
    except TrainingAborted as exc:
        log.error("%s", exc)
        best, train_log, status = exc.checkpoint, exc.log, 4
    save_checkpoint(best, run.target(cfg.paths.checkpoint))
    train_log.write_csv(run.target(cfg.paths.train_log))
    return status


def cmd_eval(run: Run) -> int:
    cfg = run.cfg
    state = load_checkpoint(run.source(cfg.paths.checkpoint))
    ds = read_dataset(run.source(cfg.paths.dataset))
    responses = read_responses(run.source(cfg.paths.responses_test))
    summary, pred, target = evaluate_model(state, ds, responses, bins_per_frame=cfg.cells.bins_per_frame)
    with open(run.target("metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("cell_id", "kind", "rho"))
        for i, cid in enumerate(responses.cell_ids):
            writer.writerow((cid, responses.groups[i], _fmt(summary.per_cell[i])))
        writer.writerow(("mean", "", _fmt(summary.mean)))
        writer.writerow(("stderr", "", _fmt(summary.stderr)))
    with open(run.target("predictions.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("cell_id", "frame", "predicted", "trial_mean"))
        for i, cid in enumerate(responses.cell_ids):
            for f in range(pred.shape[1]):
                writer.writerow((cid, f, _fmt(pred[i, f]), _fmt(target[i, f])))
    if summary.n_excluded:
        log.warning("%d cells with constant responses were excluded", summary.n_excluded)
    log.info("correlation to mean %.4f +/- %.4f", summary.mean, summary.stderr)
    return 0


def cmd_decode(run: Run) -> int:
    cfg = run.cfg
    state = load_checkpoint(run.source(cfg.paths.checkpoint))
    ds = read_dataset(run.source(cfg.paths.dataset))
    rc = cfg.readout
    tap = default_tap(state) if rc.tap < 0 else rc.tap
    train_fm = build_feature_matrix(state, network_input(ds.train_videos), ds.train_labels, tap, rc.per_frame)
    test_fm = build_feature_matrix(state, network_input(ds.test_videos), ds.test_labels, tap, rc.per_frame)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lam = rc.lam if rc.lam >= 0 else select_lambda(train_fm, rc.lambdas)[0]
        readout = fit_readout(train_fm, lam)
    ev = evaluate_readout(readout, test_fm)
    model = "hocnn" if state.layers[0].kind == "hoconv3d" else "baseline"
    write_summary_csv([(model, "all", name, float(ev.rho[k])) for k, name in enumerate(PARAM_NAMES)], run.target("decode_summary.csv"))
    write_scatter_csv(ev, run.target("decode_scatter.csv"))
    undefined = [PARAM_NAMES[k] for k in np.flatnonzero(~ev.defined)]
    if undefined:
        log.warning("correlation undefined for %s", ", ".join(undefined))
    log.info("lambda %g, rho(H11) %s, rho(H22) %s", lam, _fmt(ev.rho_of("H11")), _fmt(ev.rho_of("H22")))
    return 0


def sta_cells(sc, seed: int) -> list:
    """Planted linear cells spread over the noise frame."""
    rng = np.random.default_rng(seed)
    cells = []
    margin = cfgmod.STA_MARGIN
    for i in range(sc.n_cells):
        center = (rng.uniform(margin, sc.height - 1 - margin), rng.uniform(margin, sc.width - 1 - margin))
        cells.append(ModelCell(f"sta{i:02d}", "linear_LNP", center, radius=4, gain=sc.gain, offset=sc.offset, base_rate=sc.base_rate))
    return cells


def cmd_sta(run: Run) -> int:
    cfg, sc = run.cfg, run.cfg.sta
    noise = binary_noise(sc.n_frames, sc.height, sc.width, cfg.seed)
    cells = sta_cells(sc, cfg.seed)
    rates = simulate_rates(cells, (noise + 1.0) / 2.0)
    spikes = np.random.default_rng(cfg.seed + 1).poisson(rates)
    stas, ids = [], []
    with open(run.target("sta_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("cell_id", "n_spikes", "separability", "filter_rho", "status"))
        for cell, y in zip(cells, spikes):
            try:
                sta = compute_sta(noise, y, sc.n_lags, sc.frame_rate)
                rf = svd_decompose(sta)
            except UndefinedResultError as exc:
                writer.writerow((cell.cell_id, int(y.sum()), "nan", "nan", f"error: {exc}"))
                continue
            truth = cell.linear_filter((sc.height, sc.width), sc.n_lags)
            rho = float(np.corrcoef(rf.reconstruction().ravel(), np.sign(cell.gain) * truth.ravel())[0, 1])
            writer.writerow((cell.cell_id, _fmt(sta.n_spikes), _fmt(rf.separability), _fmt(rho), "ok"))
            write_temporal_csv(run.target(f"sta_{cell.cell_id}_temporal.csv"), rf, sc.frame_rate)
            write_spatial_pgm(run.target(f"sta_{cell.cell_id}_spatial.pgm"), rf)
            stas.append(sta)
            ids.append(cell.cell_id)
    if stas:
        write_sta_file(run.target("sta.hsta"), stas, ids)
    return 0


def _fmt(x) -> str:
    return "nan" if not math.isfinite(float(x)) else repr(float(x))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hocnn", description="Higher-order convolution experiments on synthetic retinas.")
    parser.add_argument("--config", type=Path, help="TOML configuration (defaults to the reference file)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "train":
            p.add_argument("--fraction", type=float, help="training fraction taken from the front (0, 0.9]")
            p.add_argument("--model", choices=("baseline", "hocnn"), help="override model.kind")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "model", None):
            cfg = replace(cfg, model=replace(cfg.model, kind=args.model))
        run = Run(args.command, cfg, args.out, args.force)
        if args.command == "generate":
            status = cmd_generate(run)
        elif args.command == "simulate":
            status = cmd_simulate(run)
        elif args.command == "train":
            status = cmd_train(run, args.fraction)
        elif args.command == "eval":
            status = cmd_eval(run)
        elif args.command == "decode":
            status = cmd_decode(run)
        else:
            status = cmd_sta(run)
        run.finish()
        return status
    except HocnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
