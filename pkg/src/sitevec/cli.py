"""sitevec command line: one subcommand per pipeline stage.

Exit codes: 0 ok, 1 usage, 2 network, 3 compatibility, 4 data.  Failures are
reported on stderr as a single JSON line.
"""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import VisualStore, parse_label_records, read_classes, read_content
from .embed import (
    LAYOUT_V1,
    ExternalEncoder,
    FeatureMatrix,
    SocketTransport,
    StdioTransport,
    StubEncoder,
    assemble,
    read_features,
    write_features,
)
from .errors import CompatibilityError, DataError, FetchError, SitevecError
from .evaluate import PredictionSet, balanced_eval, calibrate, calibration_bins, per_language_report, unbalanced_eval
from .extract import DEFAULT_METATAGS, DEFAULT_TLDS, extract_page, load_metatags, load_tlds
from .fetch import FetchConfig, fetch_homepage, probe_status
from .model import embed, load_weights, predict_proba, save_weights
from .train import TrainConfig, ablation_run, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("sitevec")

EXIT_OK, EXIT_USAGE, EXIT_NETWORK, EXIT_COMPAT, EXIT_DATA = 0, 1, 2, 3, 4
OUTPUT_DIGITS = 7


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=False) + "\n")


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _fetch_config(args, config: dict) -> FetchConfig:
    values = dict(config.get("fetch", {}))
    for key in ("timeout", "max_redirects", "max_body", "user_agent", "insecure"):
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            values[key] = flag
    return FetchConfig(**values)


def _train_config(args, config: dict) -> TrainConfig:
    values = dict(config.get("train", {}))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    for key in ("holdout_size", "max_epochs"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return TrainConfig.from_mapping(values)


def _backend(args):
    if getattr(args, "encoder_cmd", None):
        return ExternalEncoder(StdioTransport(shlex.split(args.encoder_cmd)), identifier=f"stdio:{args.encoder_cmd}")
    if getattr(args, "encoder_socket", None):
        host, _, port = args.encoder_socket.rpartition(":")
        return ExternalEncoder(SocketTransport(host or "127.0.0.1", int(port)), identifier=f"tcp:{args.encoder_socket}")
    return StubEncoder()


def _tables(args):
    tlds = load_tlds(args.tlds) if getattr(args, "tlds", None) else DEFAULT_TLDS
    metatags = load_metatags(args.metatags) if getattr(args, "metatags", None) else DEFAULT_METATAGS
    return tlds, metatags


def _visual_store(args):
    if getattr(args, "visual_bin", None):
        if not args.visual_idx:
            raise UsageError("--visual-bin needs --visual-idx")
        return VisualStore(args.visual_bin, args.visual_idx)
    return None


def _align(features: FeatureMatrix, classes_path):
    """Rows of ``features`` that have a classes entry, with their labels and languages."""
    with open(classes_path, encoding="utf-8") as f:
        table = read_classes(f)
    index = {int(u): i for i, u in enumerate(table.uids)}
    rows = [i for i, u in enumerate(features.uids) if int(u) in index]
    if not rows:
        raise DataError("no uid in the features file has a classes entry")
    lab = [index[int(features.uids[i])] for i in rows]
    sub = FeatureMatrix(features.uids[rows], features.values[rows], features.masks[rows], features.layout)
    return sub, table.flags[lab], [table.langs[i] for i in lab]


def _check_layout(model, features: FeatureMatrix):
    if model.layout_version != features.layout.version:
        raise CompatibilityError(
            f"model layout {model.layout_version!r} does not match features layout {features.layout.version!r}"
        )


def _round(values) -> list[float]:
    return [round(float(v), OUTPUT_DIGITS) for v in values]


# --- subcommands ------------------------------------------------------------------


def cmd_fetch(args, config):
    fc = _fetch_config(args, config)
    if args.probe:
        urls = [u.strip() for u in Path(args.probe).read_text(encoding="utf-8").splitlines() if u.strip()]
        status = probe_status(urls, fc, args.parallelism or 8)
        out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
        try:
            out.write("url\taccessible\treason\n")
            for u in urls:
                reason = status[u]
                out.write(f"{u}\t{int(reason is None)}\t{reason or ''}\n")
        finally:
            if args.out:
                out.close()
        return EXIT_OK
    if not args.url:
        raise UsageError("fetch needs a URL or --probe FILE")
    result = fetch_homepage(args.url, fc, allow_non_homepage=args.any_path)
    if args.out:
        Path(args.out).write_text(result.html, encoding="utf-8")
    else:
        sys.stdout.write(result.html)
    sys.stderr.write(json.dumps({"final_url": result.final_url, "status": result.status,
                                 "elapsed": round(result.elapsed, 3), "truncated": result.truncated}) + "\n")
    return EXIT_OK


def cmd_extract(args, config):
    tlds, metatags = _tables(args)
    html = Path(args.input).read_text(encoding="utf-8", errors="replace")
    page = extract_page(html, args.url, tlds, metatags)
    if args.out:
        Path(args.out).write_text(page.to_json(), encoding="utf-8")
    else:
        sys.stdout.write(page.to_json())
    return EXIT_OK


def cmd_assemble(args, config):
    tlds, metatags = _tables(args)
    with open(args.labels, encoding="utf-8") as f:
        records = parse_label_records(f).records
    urls = {r.uid: r.url for r in records}
    with open(args.content, encoding="utf-8") as f:
        pages = [(uid, html) for uid, html in read_content(f) if uid in urls]
    store = _visual_store(args)
    backend = _backend(args)

    def one(item):
        uid, html = item
        page = extract_page(html, urls[uid], tlds, metatags)
        visual = store.get(uid) if store is not None and not args.no_visual else None
        return assemble(page, visual, backend)

    try:
        if (args.parallelism or 1) > 1:
            with ThreadPoolExecutor(args.parallelism) as pool:
                vectors = list(pool.map(one, pages))
        else:
            vectors = [one(p) for p in pages]
    finally:
        if hasattr(backend, "close"):
            backend.close()
    write_features(args.out, FeatureMatrix.from_vectors([u for u, _ in pages], vectors))
    logger.info("wrote %d feature records to %s", len(vectors), args.out)
    return EXIT_OK


def cmd_train(args, config):
    features = read_features(args.features)
    features, labels, _ = _align(features, args.classes)
    cfg = _train_config(args, config)
    result = train(features.values, labels, cfg, layout_version=features.layout.version)
    checksum = save_weights(result.weights, args.out)
    history_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    with open(history_path, "w", encoding="utf-8") as f:
        result.history.write_csv(f)
    sys.stdout.write(json.dumps({"model": args.out, "checksum": checksum, "epochs": len(result.history.epochs),
                                 "best_epoch": result.history.best_epoch,
                                 "stop_reason": result.history.stop_reason}) + "\n")
    return EXIT_OK


def _predictions(args):
    features = read_features(args.features)
    model = load_weights(args.model)
    _check_layout(model, features)
    features, labels, langs = _align(features, args.classes)
    scores = predict_proba(features.values, model)
    preds = PredictionSet(features.uids, scores, labels, langs=langs, class_names=model.class_order)
    return model, preds


def cmd_evaluate(args, config):
    model, preds = _predictions(args)
    if model.priors is None:
        raise CompatibilityError("model file carries no class priors; calibration impossible")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bal = balanced_eval(preds, seed=args.seed)
    unb = unbalanced_eval(preds, model.priors, n_bins=args.bins)
    if any(preds.langs or []):
        bal.per_language = per_language_report(preds, args.min_lang_samples, seed=args.seed)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump({"balanced": bal.to_dict(), "unbalanced": unb.to_dict()}, f, indent=2)
        f.write("\n")
    with open(out / "report.csv", "w", encoding="utf-8") as f:
        bal.write_csv(f)
        unb.write_csv(f)
    with open(out / "pr_curves.csv", "w", encoding="utf-8") as f:
        unb.write_pr_csv(f)
    with open(out / "calibration.csv", "w", encoding="utf-8") as f:
        unb.write_calibration_csv(f)
    sys.stdout.write(json.dumps({"balanced": bal.macro, "unbalanced": unb.macro}) + "\n")
    return EXIT_OK


def cmd_calibrate_report(args, config):
    model, preds = _predictions(args)
    if model.priors is None:
        raise CompatibilityError("model file carries no class priors; calibration impossible")
    raw_bins = calibration_bins(preds, args.bins, use_calibrated=False)
    cal_bins = calibration_bins(preds.with_calibration(model.priors), args.bins)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        out.write("class\tscores\tlower\tupper\tmean_score\tpositive_fraction\tcount\n")
        for kind, bins in (("raw", raw_bins), ("calibrated", cal_bins)):
            for name, rows in bins.items():
                for b in rows:
                    mean = "" if b.mean_score is None else repr(b.mean_score)
                    frac = "" if b.positive_fraction is None else repr(b.positive_fraction)
                    out.write(f"{name}\t{kind}\t{b.lower!r}\t{b.upper!r}\t{mean}\t{frac}\t{b.count}\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_ablate(args, config):
    order = [b.strip() for b in args.order.split(",") if b.strip()]
    tr, ytr, _ = _align(read_features(args.features), args.classes)
    te, yte, _ = _align(read_features(args.test_features), args.test_classes)
    cfg = _train_config(args, config)
    steps = ablation_run(tr, ytr, te, yte, order, cfg, eval_seed=args.seed or 0)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        out.write("blocks\tinput_dim\tprecision\trecall\tf1\tauc\n")
        for s in steps:
            m = s.report.macro
            cells = ["" if m[k] is None else repr(m[k]) for k in ("precision", "recall", "f1", "auc")]
            out.write("+".join(s.blocks) + f"\t{s.input_dim}\t" + "\t".join(cells) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def prediction_output(url, html, model, backend, *, visual=None, uid=None, tlds=DEFAULT_TLDS,
                      metatags=DEFAULT_METATAGS, model_checksum=None, visual_backend=None) -> dict:
    """Classify and embed one page; returns the serializable prediction record."""
    if model.layout_version != LAYOUT_V1.version:
        raise CompatibilityError(f"model layout {model.layout_version!r} is not {LAYOUT_V1.version!r}")
    if model.priors is None:
        raise CompatibilityError("model file carries no class priors; calibration impossible")
    page = extract_page(html, url, tlds, metatags)
    fv = assemble(page, visual, backend)
    raw = predict_proba(fv.values[None, :], model)[0]
    probs = calibrate(raw.astype(np.float64), model.priors)
    emb = embed(fv.values, model)
    return {
        "url": url,
        "uid": uid,
        "probabilities": dict(zip(model.class_order, _round(probs))),
        "embedding": _round(emb),
        "backends": {"text": backend.identifier, "visual": visual_backend if visual is not None else None},
        "model_checksum": model_checksum or model.checksum(),
    }


def cmd_predict(args, config):
    model = load_weights(args.model)
    checksum = Path(args.model).read_bytes()[-32:].hex()
    if args.html:
        html = Path(args.html).read_text(encoding="utf-8", errors="replace")
    else:
        html = fetch_homepage(args.url, _fetch_config(args, config), allow_non_homepage=True).html
    visual = None
    store = _visual_store(args)
    if store is not None and not args.no_visual:
        if args.uid is None:
            raise UsageError("--visual-bin needs --uid")
        visual = store.get(args.uid)
    tlds, metatags = _tables(args)
    backend = _backend(args)
    try:
        out = prediction_output(args.url, html, model, backend, visual=visual, uid=args.uid, tlds=tlds,
                                metatags=metatags, model_checksum=checksum,
                                visual_backend="visual-store-v1" if store is not None else None)
    finally:
        if hasattr(backend, "close"):
            backend.close()
    if args.json:
        sys.stdout.write(json.dumps(out, ensure_ascii=False) + "\n")
    else:
        top = sorted(out["probabilities"].items(), key=lambda kv: -kv[1])
        sys.stdout.write(f"{args.url}\n")
        for name, p in top:
            sys.stdout.write(f"  {name:<14}{p:.3f}\n")
    return EXIT_OK


def export_embeddings(features_path, model_path, out_path) -> int:
    """Write ``uid`` plus the 100 embedding values per record as TSV; returns the row count."""
    features = read_features(features_path)
    model = load_weights(model_path)
    _check_layout(model, features)
    dim = model.dims[2]
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("uid\t" + "\t".join(f"e{i}" for i in range(dim)) + "\n")
        for start in range(0, len(features), 1024):
            block = embed(features.values[start : start + 1024], model) if len(features) else []
            for uid, row in zip(features.uids[start : start + 1024], block):
                f.write(f"{int(uid)}\t" + "\t".join(f"{float(v):.9g}" for v in row) + "\n")
    return len(features)


def cmd_export_embeddings(args, config):
    n = export_embeddings(args.features, args.model, args.out)
    sys.stdout.write(json.dumps({"written": n, "out": args.out}) + "\n")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def _fetch_flags(p):
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-redirects", type=int)
    p.add_argument("--max-body", type=int)
    p.add_argument("--user-agent")
    p.add_argument("--insecure", action="store_true", help="accept invalid TLS certificates")


def _encoder_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--encoder-cmd", help="command of an encoder child process (framed JSON on stdio)")
    g.add_argument("--encoder-socket", help="HOST:PORT of an encoder service")
    p.add_argument("--tlds", help="alternate TLD table")
    p.add_argument("--metatags", help="alternate metatag table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sitevec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sitevec {__version__}")
    parser.add_argument("--config", help="TOML file with [fetch] and [train] tables")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fetch", help="download a homepage or probe a URL list")
    p.add_argument("url", nargs="?")
    p.add_argument("--probe", help="file with one URL per line")
    p.add_argument("--out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--any-path", action="store_true", help="allow non-homepage URLs")
    _fetch_flags(p)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("extract", help="HTML to structured page features (JSON)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--url", required=True)
    p.add_argument("--out")
    p.add_argument("--tlds")
    p.add_argument("--metatags")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("assemble", help="content + labels to features.bin")
    p.add_argument("--content", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--visual-bin")
    p.add_argument("--visual-idx")
    p.add_argument("--no-visual", action="store_true")
    p.add_argument("--parallelism", type=int)
    _encoder_flags(p)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("train", help="train a model on features.bin + classes.tsv")
    p.add_argument("--features", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (
        ("evaluate", cmd_evaluate, "balanced and unbalanced evaluation reports"),
        ("calibrate-report", cmd_calibrate_report, "calibration bins before/after prior adjustment"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--features", required=True)
        p.add_argument("--classes", required=True, help="labels to score against (may be an enriched set)")
        p.add_argument("--model", required=True)
        p.add_argument("--bins", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        if name == "evaluate":
            p.add_argument("--out-dir", required=True)
            p.add_argument("--min-lang-samples", type=int, default=300)
        else:
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="incremental feature-block retraining")
    p.add_argument("--features", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--test-features", required=True)
    p.add_argument("--test-classes", required=True)
    p.add_argument("--order", default=",".join(LAYOUT_V1.names))
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="classify and embed one website")
    p.add_argument("url")
    p.add_argument("--model", required=True)
    p.add_argument("--html", help="use pre-fetched HTML instead of downloading")
    p.add_argument("--uid", type=int)
    p.add_argument("--visual-bin")
    p.add_argument("--visual-idx")
    p.add_argument("--no-visual", action="store_true")
    p.add_argument("--json", action="store_true")
    _fetch_flags(p)
    _encoder_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-embeddings", help="write 100-d embeddings for a features file")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except FetchError as exc:
        _emit_error(type(exc).__name__, str(exc), reason=exc.reason, url=exc.url)
        return EXIT_NETWORK
    except SitevecError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return exc.exit_code
    except (OSError, tomllib.TOMLDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_DATA
    except (TypeError, ValueError) as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
