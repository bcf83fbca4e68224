"""Command-line front end: ``nkf-aec {simulate,run,train,evaluate}``.

Settings come from (lowest to highest precedence) built-in defaults, a
``key = value`` config file (``--config``), environment variables
``NKF_AEC_<SECTION>_<FIELD>`` and explicit flags. Keys are namespaced by
section, e.g. ``tfdkf.transition = 0.999`` or ``train.lr = 0.001``.

Exit codes: 0 ok, 1 configuration error, 2 numerical failure, 3 I/O error.
"""

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import AecError, ConfigError, NumericalError
from .filters import PnlmsConfig, TfdkfConfig, pnlms_run, tfdkf_run
from .metrics import REPORT_CAP_DB, cap_db, erle, erle_curve, frames_to_threshold, sdr
from .nkf import NkfConfig, nkf_run
from .signal import SAMPLE_RATE, StftConfig, istft, stft
from .sim import (
    SUBSETS, ManifestRow, SpeechCorpus, read_manifest, sample_eval_config, scene_from_config,
    write_manifest,
)
from .train import TrainConfig, train, write_loss_csv
from .wavio import read_wav, write_wav
from .weights_io import load_weights, save_weights

log = logging.getLogger("nkf_aec")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
METHODS = ("pnlms", "tfdkf", "nkf")
ENV_PREFIX = "NKF_AEC_"
CURVE_WINDOW = 1024
CURVE_HOP = 256

SECTIONS = {
    "stft": StftConfig,
    "tfdkf": TfdkfConfig,
    "pnlms": PnlmsConfig,
    "nkf": NkfConfig,
    "train": TrainConfig,
}


# ---------------------------------------------------------------------------
# settings

def _convert(text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(","))
    if text.lower() == "none":
        return None
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if default is None:
        try:
            return int(text)
        except ValueError:
            return float(text)
    if isinstance(default, float):
        return float(text)
    return text


def _known_keys():
    keys = {}
    for section, cls in SECTIONS.items():
        proto = cls()
        for f in dataclasses.fields(cls):
            keys[f"{section}.{f.name}"] = getattr(proto, f.name)
    return keys


def parse_config_file(path):
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def load_settings(config_path=None, environ=None):
    """Merge config file and environment into ``{section: {field: value}}``."""
    environ = os.environ if environ is None else environ
    known = _known_keys()
    raw = parse_config_file(config_path) if config_path else {}
    for key in known:
        env = ENV_PREFIX + key.replace(".", "_").upper()
        if env in environ:
            raw[key] = environ[env]
    settings = {s: {} for s in SECTIONS}
    for key, text in raw.items():
        if key not in known:
            raise ConfigError(f"unknown setting {key!r}")
        section, name = key.split(".", 1)
        try:
            settings[section][name] = _convert(text, known[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return settings


def build(settings, section, **overrides):
    values = dict(settings.get(section, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SECTIONS[section](**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc


# ---------------------------------------------------------------------------
# processing

def process(method, far, mic, stft_config, settings, weights=None, precision="f64"):
    """Run one canceller on time signals. Returns ``(estimate, rtf)``."""
    start = time.perf_counter()
    if method == "pnlms":
        est = pnlms_run(far, mic, build(settings, "pnlms"))
    elif method in ("tfdkf", "nkf"):
        dtype = np.complex64 if precision == "f32" else np.complex128
        X = stft(far, stft_config, dtype=dtype)
        Y = stft(mic, stft_config, dtype=dtype)
        if method == "tfdkf":
            S = tfdkf_run(X, Y, build(settings, "tfdkf"))
        else:
            if weights is None:
                raise ConfigError("method nkf needs --weights")
            S = nkf_run(X, Y, weights, dtype=dtype)
        est = istft(S, stft_config, len(mic)).astype(np.float64)
    else:
        raise ConfigError(f"unknown method {method!r}")
    rtf = (time.perf_counter() - start) / (len(mic) / SAMPLE_RATE)
    if not np.all(np.isfinite(est)):
        raise NumericalError(f"{method} produced non-finite output")
    return est, rtf


def clip_metrics(mic, est, echo=None, near=None):
    """ERLE of the echo estimate ``mic - est`` and SDR of ``est``; NaN when
    the reference is missing or silent."""
    e_db = s_db = math.nan
    if echo is not None and np.any(echo):
        e_db = cap_db(erle(echo, mic - est))
    if near is not None and np.any(near):
        s_db = cap_db(sdr(near, est))
    return e_db, s_db


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(round(float(v), 6))


def _load_weights(path, settings):
    if path is None:
        return None
    taps = settings["nkf"].get("taps")
    return load_weights(path, NkfConfig(taps=taps) if taps else None)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args, settings):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = SpeechCorpus(args.corpus) if args.corpus else SpeechCorpus()
    subsets = args.subset or list(SUBSETS)
    rows = []
    for subset in subsets:
        # seeded per subset so a subset's scenes do not depend on which others are requested
        rng = np.random.default_rng([args.seed, SUBSETS.index(subset)])
        for i in range(args.count):
            clip_id = f"{subset.lower()}-{i:03d}"
            config = sample_eval_config(subset, rng, duration=args.duration)
            source_seed = int(rng.integers(0, 2 ** 31))
            scene = scene_from_config(config, corpus, source_seed)
            paths = {}
            for name in ("far", "near", "echo", "mic"):
                fname = f"{clip_id}_{name}.wav"
                write_wav(out / fname, getattr(scene, name), fmt="float32")
                paths[name] = fname
            rows.append(ManifestRow(clip_id, subset, config, source_seed, paths))
    write_manifest(out / "manifest.jsonl", rows)
    print(f"wrote {len(rows)} scenes to {out}")
    return EXIT_OK


def _load_scene_signals(row, base):
    sig = {}
    for name in ("far", "near", "echo", "mic"):
        if name in row.paths:
            sig[name] = read_wav(Path(base) / row.paths[name])
    return sig


def cmd_run(args, settings):
    stft_config = build(settings, "stft")
    weights = _load_weights(args.weights, settings) if args.method == "nkf" else None
    if args.method == "nkf" and weights is None:
        raise ConfigError("method nkf needs --weights")
    if args.manifest:
        rows = {r.clip_id: r for r in read_manifest(args.manifest)}
        if args.clip not in rows:
            raise ConfigError(f"clip {args.clip!r} not in {args.manifest}")
        sig = _load_scene_signals(rows[args.clip], Path(args.manifest).parent)
        clip_id = args.clip
    else:
        if not (args.far and args.mic):
            raise ConfigError("give --far and --mic, or --manifest and --clip")
        sig = {"far": read_wav(args.far), "mic": read_wav(args.mic)}
        if args.echo:
            sig["echo"] = read_wav(args.echo)
        if args.near:
            sig["near"] = read_wav(args.near)
        clip_id = args.clip or Path(args.mic).stem
    if len(sig["far"]) != len(sig["mic"]):
        raise ConfigError("far and mic lengths differ")
    est, rtf = process(args.method, sig["far"], sig["mic"], stft_config, settings, weights,
                       args.precision)
    write_wav(args.out, est, fmt="float32")
    e_db, s_db = clip_metrics(sig["mic"], est, sig.get("echo"), sig.get("near"))
    if args.metrics:
        path = Path(args.metrics)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as f:
            if new:
                f.write("clip_id,method,erle_db,sdr_db\n")
            f.write(f"{clip_id},{args.method},{_fmt(e_db)},{_fmt(s_db)}\n")
    print(f"{clip_id} {args.method} erle_db={_fmt(e_db) or 'n/a'} sdr_db={_fmt(s_db) or 'n/a'} "
          f"rtf={rtf:.4f}")
    return EXIT_OK


def cmd_train(args, settings):
    overrides = dict(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                     num_clips=args.clips, seed=args.seed, optimizer=args.optimizer,
                     bins_per_clip=args.bins_per_clip)
    config = build(settings, "train", **overrides)
    nkf_config = build(settings, "nkf")
    weights = load_weights(args.weights, nkf_config) if args.weights else None
    corpus = SpeechCorpus(args.corpus) if args.corpus else SpeechCorpus()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"epoch {row['epoch']} lr {row['lr']:.6g} mean_loss {row['mean_loss']:.6g}",
              flush=True)

    try:
        weights, history = train(corpus, config, nkf_config, weights, start_epoch=args.start_epoch,
                                 out_dir=out / "checkpoints", progress=progress)
    except NumericalError as exc:
        history = getattr(exc, "history", [])
        write_loss_csv(out / "loss.csv", history)
        if getattr(exc, "weights", None) is not None:
            save_weights(out / "last_good.nkfw", exc.weights)
        raise
    save_weights(out / "weights.nkfw", weights)
    write_loss_csv(out / "loss.csv", history)
    print(f"wrote {out / 'weights.nkfw'} ({weights.real_param_count()} real parameters)")
    return EXIT_OK


def _curve_stats(curve, switch_sample, num_samples):
    """Frames to 10 dB from the clip start and from the path switch, both
    counted from the first curve point whose window lies wholly after the event."""
    def from_event(sample):
        start = int(math.ceil(sample / CURVE_HOP)) - 1 if sample > 0 else 0
        clean = int(math.ceil((sample + CURVE_WINDOW) / CURVE_HOP)) - 1
        return frames_to_threshold(curve, start, 10.0, settle=max(clean - start, 0))

    conv = from_event(0)
    rec = from_event(switch_sample) if switch_sample is not None else None
    return conv, rec


def evaluate_clip(row, base, methods, weights, stft_config, settings, precision, corpus):
    sig = _load_scene_signals(row, base)
    if not {"far", "mic", "echo"} <= set(sig):
        scene = scene_from_config(row.config, corpus, row.source_seed)
        sig = {n: getattr(scene, n) for n in ("far", "near", "echo", "mic")}
    switch = None
    if row.config.switch_time is not None:
        switch = int(round(row.config.switch_time * SAMPLE_RATE))
    results = []
    for method in methods:
        try:
            est, rtf = process(method, sig["far"], sig["mic"], stft_config, settings, weights,
                               precision)
            e_db, s_db = clip_metrics(sig["mic"], est, sig["echo"], sig.get("near"))
            _, curve = erle_curve(sig["echo"], sig["mic"] - est, CURVE_WINDOW, CURVE_HOP)
            conv, rec = _curve_stats(curve, switch, len(sig["mic"]))
            results.append(dict(clip_id=row.clip_id, subset=row.subset, method=method,
                                erle_db=e_db, sdr_db=s_db, rtf=rtf, curve=curve,
                                converge=conv, recover=rec, error=None))
        except (AecError, FloatingPointError, ValueError) as exc:
            results.append(dict(clip_id=row.clip_id, subset=row.subset, method=method,
                                error=f"{type(exc).__name__}: {exc}"))
    return results


def _nanmean(values):
    values = [v for v in values if v is not None and not math.isnan(v)]
    return sum(values) / len(values) if values else math.nan


def cmd_evaluate(args, settings):
    stft_config = build(settings, "stft")
    methods = args.method or ["tfdkf"]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    weights = _load_weights(args.weights, settings)
    if "nkf" in methods and weights is None:
        raise ConfigError("method nkf needs --weights")
    rows = read_manifest(args.manifest)
    if args.subset:
        rows = [r for r in rows if r.subset in args.subset]
    if not rows:
        raise ConfigError("no clips to evaluate")
    base = Path(args.manifest).parent
    corpus = SpeechCorpus()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def job(row):
        return evaluate_clip(row, base, methods, weights, stft_config, settings, args.precision,
                             corpus)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        per_clip = list(pool.map(job, rows))
    results = [r for clip in per_clip for r in clip]
    ok = [r for r in results if r["error"] is None]
    failed = [r for r in results if r["error"] is not None]

    with open(out / "metrics.csv", "w", newline="") as f:
        f.write("clip_id,method,erle_db,sdr_db\n")
        for r in ok:
            f.write(f"{r['clip_id']},{r['method']},{_fmt(r['erle_db'])},{_fmt(r['sdr_db'])}\n")
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subset", "method", "clips", "erle_db", "sdr_db", "converge_frames",
                    "recover_frames"])
        for subset in SUBSETS:
            for method in methods:
                sel = [r for r in ok if r["subset"] == subset and r["method"] == method]
                if not sel:
                    continue
                w.writerow([subset, method, len(sel), _fmt(_nanmean([r["erle_db"] for r in sel])),
                            _fmt(_nanmean([r["sdr_db"] for r in sel])),
                            _fmt(_nanmean([r["converge"] for r in sel])),
                            _fmt(_nanmean([r["recover"] for r in sel if r["recover"] is not None]))])
    with open(out / "convergence.csv", "w", newline="") as f:
        f.write("clip_id,method,converge_frames,recover_frames\n")
        for r in ok:
            rec = "" if r["recover"] is None else str(r["recover"])
            f.write(f"{r['clip_id']},{r['method']},{r['converge']},{rec}\n")
    with open(out / "timing.csv", "w", newline="") as f:
        f.write("method,mean_rtf\n")
        for method in methods:
            f.write(f"{method},{_fmt(_nanmean([r['rtf'] for r in ok if r['method'] == method]))}\n")
    _write_curve(out / "erle_curve.csv", ok, methods, args.curve_subset)
    if failed:
        with open(out / "failures.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["clip_id", "method", "error"])
            for r in failed:
                w.writerow([r["clip_id"], r["method"], r["error"]])
        for r in failed:
            log.warning("%s %s failed: %s", r["clip_id"], r["method"], r["error"])
    print(f"evaluated {len(rows)} clips x {len(methods)} methods; {len(failed)} failures; "
          f"reports in {out}")
    if not ok:
        return EXIT_NUMERIC
    return EXIT_OK


def _write_curve(path, results, methods, subset):
    """Per-frame ERLE curve averaged (in dB, ignoring gaps) across ``subset``."""
    curves = {}
    for m in methods:
        sel = [r["curve"] for r in results if r["method"] == m and r["subset"] == subset]
        if sel:
            n = min(len(c) for c in sel)
            stack = np.array([c[:n] for c in sel])
            with np.errstate(all="ignore"):
                counts = np.sum(~np.isnan(stack), axis=0)
                curves[m] = np.where(counts > 0, np.nansum(stack, axis=0) / np.maximum(counts, 1),
                                     np.nan)
    with open(path, "w", newline="") as f:
        f.write("frame,time_s," + ",".join(curves) + "\n")
        if not curves:
            return
        n = min(len(c) for c in curves.values())
        for i in range(n):
            t = (i + 1) * CURVE_HOP / SAMPLE_RATE
            vals = ",".join(_fmt(min(curves[m][i], REPORT_CAP_DB)) for m in curves)
            f.write(f"{i},{t!r},{vals}\n")


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="nkf-aec", description="Kalman and neural Kalman echo cancellation toolkit")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--threads", type=int, default=1, help="clip-level worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate the synthetic evaluation subsets")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=20, help="scenes per subset")
    s.add_argument("--subset", action="append", choices=SUBSETS)
    s.add_argument("--duration", type=float, default=8.0)
    s.add_argument("--corpus", help="directory of 16 kHz mono WAV files (default: built-in generator)")

    r = sub.add_parser("run", help="cancel the echo in one clip")
    r.add_argument("--method", choices=METHODS, required=True)
    r.add_argument("--weights")
    r.add_argument("--far")
    r.add_argument("--mic")
    r.add_argument("--echo", help="ground-truth echo for ERLE")
    r.add_argument("--near", help="ground-truth near end for SDR")
    r.add_argument("--manifest")
    r.add_argument("--clip")
    r.add_argument("--out", required=True, help="output WAV")
    r.add_argument("--metrics", help="CSV to append clip_id,method,erle_db,sdr_db")
    r.add_argument("--precision", choices=("f32", "f64"), default="f64")
    r.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train NKF weights on built-in or WAV speech")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--clips", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--bins-per-clip", type=int)
    t.add_argument("--weights", help="initial weights (resume)")
    t.add_argument("--start-epoch", type=int, default=1)
    t.add_argument("--corpus")

    e = sub.add_parser("evaluate", help="evaluate methods over a scene manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", action="append", choices=METHODS)
    e.add_argument("--weights")
    e.add_argument("--subset", action="append", choices=SUBSETS)
    e.add_argument("--out", required=True)
    e.add_argument("--precision", choices=("f32", "f64"), default="f64")
    e.add_argument("--curve-subset", default="DT-EPC", choices=SUBSETS)
    e.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config)
        return COMMANDS[args.command](args, settings)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AecError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
