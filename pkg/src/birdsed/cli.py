"""Command line entry point: ``birdsed <command> [options]``.

Exit codes: 0 success, 1 domain error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .audio import WavError, load_wav, resample
from .calibrate import (
    PenaltyConfig,
    apply_thresholds,
    fit_class_thresholds,
    global_threshold_decisions,
    penalize,
    read_decisions,
    read_predictions,
    score_histograms,
    write_decisions,
    write_predictions,
    write_thresholds,
    PredictionTable,
)
from .config import ConfigError, RunConfig, load_config
from .dataset import (
    ClipLoader,
    MetadataError,
    SpeciesTable,
    parse_metadata,
    read_species_table,
    read_truth,
    synth_dataset,
    write_species_table,
)
from .dsp import melspectrogram_batch, save_tensor
from .inference import predict_segments, segment_clip
from .metrics import f1_report
from .model import WeightsFileError, grad_cam, load_weights, save_weights
from .train import TrainingError, train

log = logging.getLogger("birdsed")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad invocation or missing input (exit code 2)."""


class _Formatter(argparse.HelpFormatter):
    # fixed width so --help output does not depend on the terminal
    def __init__(self, prog):
        super().__init__(prog, width=88, max_help_position=30)


def _fmt(x) -> str:
    return repr(float(x))


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _require_dir(path: Path, what: str) -> Path:
    if not Path(path).is_dir():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _out_dir(cfg: RunConfig) -> Path:
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {cfg.out_dir}: {exc.strerror}") from None
    return cfg.out_dir


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _species_for(weights_path: Path, override, cfg: RunConfig) -> SpeciesTable:
    """Species list for a weights file: explicit flag, then sibling species.csv, then the config."""
    if override:
        return read_species_table(_require_file(Path(override), "species table"))
    sibling = Path(weights_path).parent / "species.csv"
    if sibling.is_file():
        return read_species_table(sibling)
    return read_species_table(_require_file(cfg.species, "species table"))


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    res = synth_dataset(cfg.synth, cfg.seed, out)
    write_species_table(out / "class_counts.csv", res.table, sort_by_count=True)
    print(f"{'species':<10} {'count':>6}  scored")
    for sp, n, scored in sorted(zip(res.table.species, res.table.counts, res.table.scored_mask),
                                key=lambda r: (-r[1], r[0])):
        print(f"{sp:<10} {int(n):>6}  {'yes' if scored else 'no'}")
    print(f"wrote {int(res.table.counts.sum())} labels over {len(res.table)} species to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    audio_dir = _require_dir(Path(args.audio_dir), "audio directory")
    out = _out_dir(cfg) / "spectrograms"
    out.mkdir(exist_ok=True)
    rows = []
    for path in sorted(audio_dir.glob("*.wav")):
        try:
            clip = load_wav(path)
        except WavError as exc:
            warnings.warn(f"skipping {path.name}: {exc}")
            rows.append((path.stem, 0, "skipped", str(exc)))
            continue
        if clip.sample_rate != cfg.params.sample_rate:
            clip = resample(clip, cfg.params.sample_rate)
        specs = melspectrogram_batch(segment_clip(clip, cfg.infer_chunk_s), cfg.params)
        save_tensor(out / f"{path.stem}.tensor", specs)
        rows.append((path.stem, len(specs), "ok", ""))
    _write_csv(out / "index.csv", ["recording", "segments", "status", "message"], rows)
    print(f"{sum(r[2] == 'ok' for r in rows)} files -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _require_file(cfg.metadata, "metadata file")
    table = read_species_table(_require_file(cfg.species, "species table")) if cfg.species.is_file() else None
    recs = parse_metadata(cfg.metadata, table)
    if table is None:
        table = SpeciesTable(sorted({lab for r in recs for lab in r.labels}))
    missing = [r.audio_path for r in recs if not Path(r.audio_path).is_file()]
    if missing:
        raise UsageError(f"{len(missing)} audio file(s) listed in {cfg.metadata} not found, first: {missing[0]}")
    noise = []
    if cfg.train.noise is not None and cfg.noise_dir is not None and cfg.noise_dir.is_dir():
        noise = [load_wav(p) for p in sorted(cfg.noise_dir.glob("*.wav"))]
    tc = cfg.train
    print(f"{len(recs)} recordings, {len(table)} species, {len(noise)} noise clips, "
          f"{tc.total_steps} steps of batch {tc.batch_size}")
    if args.dry_run:
        print("dry run: configuration is valid")
        return EXIT_OK
    out = _out_dir(cfg)
    res = train(recs, table, tc, noise_clips=noise or None, log_path=out / "train_log.csv",
                loader=ClipLoader(cfg.params.sample_rate))
    save_weights(res.weights, out / "weights.bin")
    write_species_table(out / "species.csv", table)
    last = res.stats[-1]
    val = "n/a (no validation split)" if np.isnan(last.val_micro_f1) else f"{last.val_micro_f1:.3f}"
    print(f"final loss {last.loss:.4f}, validation micro-F1 {val}; weights -> {out / 'weights.bin'}")
    return EXIT_OK


def _score_file(job):
    path, weights, params, chunk_s = job
    try:
        clip = load_wav(path)
    except WavError as exc:
        return path, None, str(exc), 0.0
    t0 = time.perf_counter()
    probs = predict_segments(weights, clip, params, chunk_s)
    return path, probs, "", time.perf_counter() - t0


def cmd_infer(args, cfg: RunConfig) -> int:
    audio_dir = _require_dir(Path(args.audio_dir), "audio directory")
    weights_path = _require_file(Path(args.weights) if args.weights else cfg.weights, "weights file")
    weights = load_weights(weights_path)
    table = _species_for(weights_path, args.species, cfg)
    if len(table) != weights.config.n_classes:
        raise UsageError(f"species table has {len(table)} entries but the weights expect {weights.config.n_classes}")
    out = _out_dir(cfg)
    files = sorted(audio_dir.glob("*.wav"))
    jobs = [(p, weights, cfg.params, cfg.infer_chunk_s) for p in files]
    if cfg.infer_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.infer_workers) as pool:
            results = list(pool.map(_score_file, jobs))
    else:
        results = [_score_file(j) for j in jobs]

    keys, rows, report = [], [], []
    total_s, total_chunks = 0.0, 0
    for path, probs, err, elapsed in results:
        if probs is None:
            log.warning("skipping undecodable file %s: %s", path.name, err)
            report.append((path.stem, 0, "skipped", err))
            continue
        keys.extend((path.stem, i) for i in range(len(probs)))
        rows.append(probs)
        report.append((path.stem, len(probs), "ok", ""))
        total_s += elapsed
        total_chunks += len(probs)
        print(f"{path.name}: {len(probs)} chunks, {1000 * elapsed / len(probs):.2f} ms per chunk")
    probs = np.concatenate(rows) if rows else np.zeros((0, len(table)))
    write_predictions(out / "predictions.csv", PredictionTable(keys, table.species, probs))
    _write_csv(out / "infer_report.csv", ["recording", "segments", "status", "message"], report)
    per_chunk = 1000 * total_s / total_chunks if total_chunks else 0.0
    print(f"latency: {per_chunk:.2f} ms per {cfg.infer_chunk_s:g} s chunk "
          f"({total_chunks} chunks, {len(rows)} files, {len(files) - len(rows)} skipped)")
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    preds = read_predictions(_require_file(Path(args.predictions), "predictions file"))
    target = read_predictions(_require_file(Path(args.apply), "predictions file")) if args.apply else None
    out = _out_dir(cfg)
    if args.penalize is not None:
        table = read_species_table(_require_file(Path(args.species or cfg.species), "species table"))
        counts = {sp: n for sp, n in zip(table.species, table.counts)}
        unknown = [sp for sp in preds.species if sp not in counts]
        if unknown:
            raise UsageError(f"species table lacks counts for {unknown}")
        pen = PenaltyConfig(args.penalize, tuple(counts[sp] for sp in preds.species))
        if args.truth:
            # composed path: penalize first, then fit class-wise thresholds on the result
            preds = penalize(preds, pen)
            target = penalize(target, pen) if target is not None else None
            write_predictions(out / "penalized.csv", preds)
        else:
            src = target if target is not None else preds
            penalized = penalize(src, pen)
            write_predictions(out / "penalized.csv", penalized)
            write_decisions(out / "decisions.csv", global_threshold_decisions(penalized, args.threshold))
            print(f"penalty factor {args.penalize:g} applied to {len(src.keys)} segments; "
                  f"decisions at threshold {args.threshold:g}")
            return EXIT_OK
    if not args.truth:
        raise UsageError("class-wise calibration needs --truth (or use --penalize)")
    truth = read_truth(_require_file(Path(args.truth), "truth file"))
    call_truth = {(t.recording, t.segment_index): t.is_call for t in truth}
    thresholds = fit_class_thresholds(preds, call_truth, cfg.quantile_grid)
    write_thresholds(out / "thresholds.csv", thresholds)
    hist = score_histograms(preds, call_truth, cfg.histogram_bins)
    _write_csv(out / "score_histograms.csv", ["species", "bin_lo", "bin_hi", "call", "nocall"],
               [(sp, _fmt(lo), _fmt(hi), c, n) for sp, lo, hi, c, n in hist])
    for e in thresholds.values():
        print(f"{e.species:<10} q={e.quantile:<5g} threshold={e.threshold:.4f} score={e.score:.4f}")
    if target is not None:
        write_decisions(out / "decisions.csv", apply_thresholds(target, thresholds))
        write_decisions(out / "decisions_global.csv", global_threshold_decisions(target, args.threshold))
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    decisions = read_decisions(_require_file(Path(args.decisions), "decisions file"))
    truth = {(t.recording, t.segment_index): t.labels
             for t in read_truth(_require_file(Path(args.truth), "truth file"))}
    rows = f1_report(decisions, truth)
    out = _out_dir(cfg)
    name = args.name or "metrics"
    _write_csv(out / f"{name}.csv", ["class", "tp", "fp", "fn", "precision", "recall", "f1"],
               [(c, tp, fp, fn, _fmt(p), _fmt(r), _fmt(f)) for c, tp, fp, fn, p, r, f in rows])
    print(f"{'class':<10} {'tp':>5} {'fp':>5} {'fn':>5} {'prec':>6} {'rec':>6} {'f1':>6}")
    for c, tp, fp, fn, p, r, f in rows:
        print(f"{c:<10} {tp:>5} {fp:>5} {fn:>5} {p:>6.3f} {r:>6.3f} {f:>6.3f}")
    return EXIT_OK


def _heatmap_svg(cam: np.ndarray, title: str, cell: int = 6) -> str:
    h, w = cam.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell + 20}">',
             f'<text x="2" y="14" font-size="12">{title}</text>']
    for i in range(h):
        for j in range(w):
            v = int(round(255 * cam[h - 1 - i, j]))  # low frequencies at the bottom
            parts.append(f'<rect x="{j * cell}" y="{20 + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({v},{v // 3},{255 - v})"/>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def cmd_gradcam(args, cfg: RunConfig) -> int:
    weights_path = _require_file(Path(args.weights) if args.weights else cfg.weights, "weights file")
    weights = load_weights(weights_path)
    table = _species_for(weights_path, args.species, cfg)
    if args.target not in table.species:
        raise UsageError(f"unknown species {args.target!r}; known: {' '.join(table.species)}")
    clip = load_wav(_require_file(Path(args.audio), "audio file"))
    if clip.sample_rate != cfg.params.sample_rate:
        clip = resample(clip, cfg.params.sample_rate)
    segs = segment_clip(clip, cfg.infer_chunk_s)
    if not 0 <= args.segment < len(segs):
        raise UsageError(f"segment {args.segment} outside [0, {len(segs)})")
    spec = melspectrogram_batch(segs[args.segment:args.segment + 1], cfg.params)[0]
    cam = grad_cam(spec.astype(np.float64), weights, table.index(args.target))
    out = _out_dir(cfg)
    stem = f"gradcam_{Path(args.audio).stem}_{args.segment}_{args.target}"
    _write_csv(out / f"{stem}.csv", ["freq_row"] + [f"t{j}" for j in range(cam.shape[1])],
               [[i] + [_fmt(v) for v in row] for i, row in enumerate(cam)])
    if args.svg:
        (out / f"{stem}.svg").write_text(_heatmap_svg(cam, f"{args.target} segment {args.segment}"))
    col = cam.sum(axis=0)
    peak = int(np.argmax(col)) if col.any() else -1
    print(f"heatmap {cam.shape[0]}x{cam.shape[1]} -> {out / (stem + '.csv')}; peak time column {peak}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="birdsed", formatter_class=_Formatter,
        description="Few-shot long-tailed birdcall recognition: synthetic data, training, "
                    "inference, calibration and evaluation.",
        epilog="exit codes: 0 success, 1 domain error, 2 usage or configuration error",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--config", metavar="PATH", help="INI run configuration (default: built-in defaults)")
    glob.add_argument("--seed", type=int, metavar="N", help="random seed; overrides [run] seed")
    glob.add_argument("--out", metavar="DIR", help="output directory; overrides [run] out_dir")
    glob.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[glob], help=help_, description=help_, formatter_class=_Formatter)
        sp.set_defaults(func=func)
        return sp

    add("synth", cmd_synth, "write a long-tailed synthetic dataset and print its class counts")

    sp = add("preprocess", cmd_preprocess, "dump log-mel spectrograms of every chunk as tensor files")
    sp.add_argument("audio_dir", help="directory of .wav files")

    sp = add("train", cmd_train, "train a model on the metadata csv of the configured data_dir")
    sp.add_argument("--dry-run", action="store_true", help="validate config and inputs, then exit")

    sp = add("infer", cmd_infer, "score every 5 s chunk of every .wav file in a directory")
    sp.add_argument("audio_dir", help="directory of .wav files")
    sp.add_argument("--weights", metavar="PATH", help="weights file (default: [run] weights)")
    sp.add_argument("--species", metavar="PATH", help="species table (default: next to the weights)")

    sp = add("calibrate", cmd_calibrate, "fit class-wise quantile thresholds, or apply the penalty instead "
                                         "(with both --penalize and --truth, penalize then fit)")
    sp.add_argument("predictions", help="calibration predictions csv")
    sp.add_argument("--truth", metavar="PATH", help="segment truth csv (call/nocall is used)")
    sp.add_argument("--apply", metavar="PATH", help="predictions csv to turn into decisions")
    sp.add_argument("--penalize", type=float, metavar="F", help="apply the class-distribution penalty with factor F")
    sp.add_argument("--species", metavar="PATH", help="species table with counts (for --penalize)")
    sp.add_argument("--threshold", type=float, default=0.5, metavar="T",
                    help="global threshold for the baseline/penalized decisions (default: 0.5)")

    sp = add("evaluate", cmd_evaluate, "micro/macro F1 report of decisions against segment truth")
    sp.add_argument("decisions", help="decisions csv")
    sp.add_argument("truth", help="segment truth csv")
    sp.add_argument("--name", metavar="NAME", help="report file stem (default: metrics)")

    sp = add("gradcam", cmd_gradcam, "Grad-CAM heatmap of one chunk for one species")
    sp.add_argument("audio", help=".wav file")
    sp.add_argument("target", metavar="SPECIES", help="species to explain")
    sp.add_argument("--segment", type=int, default=0, metavar="I", help="chunk index (default: 0)")
    sp.add_argument("--weights", metavar="PATH", help="weights file (default: [run] weights)")
    sp.add_argument("--species", metavar="PATH", help="species table (default: next to the weights)")
    sp.add_argument("--svg", action="store_true", help="also render the heatmap as SVG")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"birdsed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"birdsed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, WavError, MetadataError, WeightsFileError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"birdsed {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
