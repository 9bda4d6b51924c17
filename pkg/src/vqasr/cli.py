"""Command-line entry point: extract, train, decode, score, compare, sweep.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .audio_io import read_manifest, read_wav
from .config import ExperimentConfig, load_config
from .decode_score import (ErrorDistribution, WERReport, align_and_score, average_checkpoints,
                           error_distribution, read_hypotheses, write_aggregate_csv,
                           write_hypotheses, write_score_csv)
from .errors import ConfigError, DataError, EmptyReference, NoCheckpoints, NumericError, VQASRError
from .features import read_feature_file, write_feature_file
from .model import (Speech2Text, Utterance, Vocab, list_checkpoints, relative_reduction, summarize,
                    train, transcribe, welch_p_value)
from .pipeline import FeatureSelection, extract_features

log = logging.getLogger("vqasr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MAX_FAILURE_RATE = 0.10
INDEX_NAME = "index.tsv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# features


def _extract_one(job):
    uid, audio_path, selection_text, out_path, seed = job
    try:
        feats = extract_features(read_wav(audio_path), FeatureSelection.parse(selection_text), uid,
                                 seed=seed)
        write_feature_file(out_path, feats)
        return uid, None
    except (VQASRError, OSError, ValueError) as e:
        return uid, f"{type(e).__name__}: {e}"


def extract_corpus(manifest, selection: FeatureSelection, out_dir, workers: int = 1,
                   seed: int = 0) -> Path:
    """Write one FeatureFile per utterance plus ``index.tsv``; returns the index path."""
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"manifest {manifest} is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(e.id, e.audio_path, str(selection), str(out_dir / f"{e.id}.vqfb"), seed)
            for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(j) for j in jobs]
    failed = [(uid, msg) for uid, msg in results if msg is not None]
    for uid, msg in failed:
        log.warning("skipping %s: %s", uid, msg)
    if len(failed) > MAX_FAILURE_RATE * len(entries):
        raise DataError(f"{len(failed)} of {len(entries)} utterances failed extraction")
    index = out_dir / INDEX_NAME
    bad = {uid for uid, _ in failed}
    with open(index, "w", encoding="utf-8") as f:
        for e in entries:
            if e.id not in bad:
                f.write(f"{e.id}\t{e.id}.vqfb\n")
    return index


def read_index(path) -> dict[str, Path]:
    path = Path(path)
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                uid, rel = line.rstrip("\n").split("\t")
                out[uid] = path.parent / rel
    return out


def load_utterances(manifest, cfg: ExperimentConfig, cache_name: str) -> list[Utterance]:
    """Features for every manifest entry, on the fly or through precomputed files."""
    if not manifest:
        raise DataError(f"no {cache_name} manifest configured")
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"manifest {manifest} is empty")
    selection = cfg.selection
    mode = cfg.feature_mode
    if mode == "auto":
        mode = "precompute" if selection.needs_precompute else "on_the_fly"
    if mode == "on_the_fly":
        return [Utterance(e.id, extract_features(read_wav(e.audio_path), selection, e.id).data,
                          e.transcript) for e in entries]
    feat_dir = Path(cfg.feature_dir or Path(cfg.out_dir) / "features") / cache_name
    index_path = feat_dir / INDEX_NAME
    if not index_path.exists():
        extract_corpus(manifest, selection, feat_dir, cfg.workers)
    index = read_index(index_path)
    utts = []
    for e in entries:
        if e.id not in index:
            continue
        feats = read_feature_file(index[e.id])
        if feats.n_channels != selection.n_channels:
            raise DataError(f"{index[e.id]} has {feats.n_channels} channels, "
                            f"expected {selection.n_channels}")
        utts.append(Utterance(e.id, feats.data.astype("float64"), e.transcript))
    return utts


# ---------------------------------------------------------------------------
# train / decode


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed{seed}"


def run_train(cfg: ExperimentConfig, seed: int, resume: bool = False, out=None):
    utts = load_utterances(cfg.train_manifest, cfg, "train")
    dev = load_utterances(cfg.dev_manifest, cfg, "dev") if cfg.dev_manifest else None
    return train(utts, cfg.model_config(), cfg.train_config(), seed, out or run_dir(cfg, seed),
                 dev_utts=dev, resume=resume)


def run_decode(cfg: ExperimentConfig, seed: int, checkpoints=None, out_dir=None,
               beam: int | None = None):
    """Average the last ``n_average`` checkpoints, decode the test set, write reports.

    Returns the per-utterance ``(id, WERReport)`` list.
    """
    directory = Path(out_dir or run_dir(cfg, seed))
    paths = list(checkpoints) if checkpoints else list_checkpoints(directory)
    if not paths:
        raise NoCheckpoints(f"no checkpoints found in {directory}")
    paths = sorted(paths, key=_ckpt_step)[-cfg.n_average:]
    if len(paths) < cfg.n_average:
        log.warning("averaging %d checkpoints (fewer than %d available)", len(paths), cfg.n_average)
    if not cfg.test_manifest or not Path(cfg.test_manifest).exists():
        raise DataError(f"test manifest not found: {cfg.test_manifest!r}")
    test = load_utterances(cfg.test_manifest, cfg, "test")
    model = Speech2Text(cfg.model_config())
    model.load_tensors(average_checkpoints(paths))
    hyps = transcribe(model, test, Vocab(), beam or cfg.beam)
    directory.mkdir(parents=True, exist_ok=True)
    write_hypotheses(directory / "hypotheses.tsv", hyps)
    scored = score_hypotheses({u.id: u.transcript for u in test}, dict(hyps))
    write_reports(directory, scored, f"seed{seed}")
    return scored


def _ckpt_step(path) -> int:
    stem = Path(path).stem
    try:
        return int(stem.rsplit("_", 1)[1])
    except (IndexError, ValueError):
        return -1


def score_hypotheses(refs: dict[str, str], hyps: dict[str, str]) -> list[tuple[str, WERReport]]:
    missing = set(refs) - set(hyps)
    if missing:
        log.warning("%d reference utterances have no hypothesis; scored as empty", len(missing))
    return [(uid, align_and_score(ref, hyps.get(uid, ""))) for uid, ref in refs.items()]


def write_reports(directory, scored, group: str) -> ErrorDistribution:
    directory = Path(directory)
    write_score_csv(directory / "scores.csv", scored)
    dist = error_distribution([r for _, r in scored], group)
    write_aggregate_csv(directory / "aggregate.csv", [dist])
    return dist


# ---------------------------------------------------------------------------
# sweeps and comparison


def sweep(cfg: ExperimentConfig, seeds, out_dir=None, label: str = "") -> dict:
    """Train and decode once per seed. Returns WERs, summary and pooled error counts."""
    base = Path(out_dir or cfg.out_dir)
    wers, reports = [], []
    for seed in seeds:
        directory = base / f"seed{seed}"
        run_train(cfg, seed, out=directory)
        scored = run_decode(cfg, seed, out_dir=directory)
        total = sum((r for _, r in scored), WERReport(0))
        wers.append(total.wer)
        reports.extend(r for _, r in scored)
        log.info("%s seed %d: WER %.2f", label or cfg.features, seed, total.wer)
    summary = summarize(wers) if len(wers) > 1 else None
    return {"label": label or str(cfg.selection), "seeds": list(seeds), "wers": wers,
            "summary": summary, "distribution": error_distribution(reports, label or cfg.features)}


def compare_results(a: dict, b: dict) -> dict:
    mean_a = sum(a["wers"]) / len(a["wers"])
    mean_b = sum(b["wers"]) / len(b["wers"])
    return {"relative_reduction": relative_reduction(mean_a, mean_b),
            "p_value": welch_p_value(a["wers"], b["wers"]), "mean_a": mean_a, "mean_b": mean_b}


def write_compare_report(out_dir, a: dict, b: dict, result: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_seed.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "seed", "wer"])
        for res in (a, b):
            for seed, wer in zip(res["seeds"], res["wers"]):
                w.writerow([res["label"], seed, f"{wer:.4f}"])
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "mean_wer", "stderr", "relative_reduction", "p_value"])
        for res in (a, b):
            s = res["summary"]
            w.writerow([res["label"], f"{sum(res['wers']) / len(res['wers']):.4f}",
                        f"{s.stderr:.4f}" if s else "", f"{result['relative_reduction']:.4f}",
                        f"{result['p_value']:.6g}"])
    write_aggregate_csv(out_dir / "error_types.csv", [a["distribution"], b["distribution"]])


def format_compare(a: dict, b: dict, result: dict) -> str:
    lines = []
    for res in (a, b):
        s = res["summary"]
        spread = f" ± {s.stderr:.2f}" if s else ""
        lines.append(f"{res['label']}: WER {sum(res['wers']) / len(res['wers']):.2f}{spread} "
                     f"(seeds {', '.join(f'{w:.2f}' for w in res['wers'])})")
    lines.append(f"relative reduction: {result['relative_reduction']:.2f}%  p = {result['p_value']:.4g}")
    lines.append(f"{'config':<20} {'S':>6} {'D':>6} {'I':>6} {'S%':>6} {'D%':>6} {'I%':>6}")
    for res in (a, b):
        dist = res["distribution"]
        s, d, i = dist.shares()
        t = dist.total
        lines.append(f"{res['label']:<20} {t.substitutions:>6} {t.deletions:>6} {t.insertions:>6} "
                     f"{100 * s:>6.1f} {100 * d:>6.1f} {100 * i:>6.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def _load(args) -> ExperimentConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _seeds(args, cfg) -> list[int]:
    return list(args.seeds) if getattr(args, "seeds", None) else list(cfg.seeds)


def cmd_extract(args) -> int:
    index = extract_corpus(args.manifest, FeatureSelection.parse(args.features), args.out,
                           args.workers, args.seed)
    print(index)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    result = run_train(cfg, seed, resume=args.resume)
    print(f"trained to step {result.final_step}; {len(result.checkpoints)} checkpoints in "
          f"{run_dir(cfg, seed)}")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    ckpts = sorted(glob.glob(args.checkpoints)) if args.checkpoints else None
    if args.checkpoints and not ckpts:
        raise NoCheckpoints(f"no checkpoints match {args.checkpoints}")
    scored = run_decode(cfg, seed, ckpts, beam=args.beam)
    total = sum((r for _, r in scored), WERReport(0))
    print(f"WER {total.wer:.2f} ({total.errors} errors / {total.n_ref_words} words)")
    return EXIT_OK


def cmd_score(args) -> int:
    refs = {e.id: e.transcript for e in read_manifest(args.ref)}
    if not refs:
        raise DataError(f"reference manifest {args.ref} is empty")
    scored = score_hypotheses(refs, read_hypotheses(args.hyp))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out, scored, args.group)
    total = sum((r for _, r in scored), WERReport(0))
    print(f"WER {total.wer:.2f} ({total.errors} errors / {total.n_ref_words} words)")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg_a, cfg_b = load_config(args.config_a), load_config(args.config_b)
    if cfg_a.test_manifest != cfg_b.test_manifest:
        raise ConfigError("configs must share the test manifest")
    seeds = list(args.seeds) if args.seeds else list(cfg_a.seeds)
    out = Path(args.out)
    a = sweep(cfg_a, seeds, out / "A", label=args.label_a or f"A:{cfg_a.features}")
    b = sweep(cfg_b, seeds, out / "B", label=args.label_b or f"B:{cfg_b.features}")
    result = compare_results(a, b)
    write_compare_report(out, a, b, result)
    print(format_compare(a, b, result))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    res = sweep(cfg, _seeds(args, cfg), args.out)
    s = res["summary"]
    spread = f" ± {s.stderr:.2f}" if s else ""
    print(f"{res['label']}: WER {sum(res['wers']) / len(res['wers']):.2f}{spread}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vqasr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("extract", help="precompute feature files for a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--features", required=True, help="e.g. FB40+Pitch+J+S, FB+Rand, FB80")
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--seed", type=int, default=0, help="seed for random control features")
    e.set_defaults(func=cmd_extract)

    def config_args(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="train one model")
    config_args(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="average checkpoints, decode and score the test set")
    config_args(d)
    d.add_argument("--seed", type=int)
    d.add_argument("--checkpoints", help="glob of checkpoint files (default: run directory)")
    d.add_argument("--beam", type=int)
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="score a hypothesis TSV against a manifest")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--group", default="all")
    s.set_defaults(func=cmd_score)

    c = sub.add_parser("compare", help="seed sweeps of two configs plus significance")
    c.add_argument("--config-a", required=True)
    c.add_argument("--config-b", required=True)
    c.add_argument("--seeds", type=int, nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--label-a")
    c.add_argument("--label-b")
    c.set_defaults(func=cmd_compare)

    w = sub.add_parser("sweep", help="train and decode one config over several seeds")
    config_args(w)
    w.add_argument("--seeds", type=int, nargs="+")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NoCheckpoints, EmptyReference, VQASRError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
