"""Command line interface.

Subcommands: synth, filter, train, eval, loso, gate, tsne.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.  All errors go to stderr with an ``error[CODE]:`` prefix.
Output files are written atomically (temp name + rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import data as datamod
from . import dsp, models, plots, training, tsne
from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    EegGateError,
    FormatError,
    LengthError,
    NumericError,
)
from .gate import gate_block_forward


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file; flags win over file values")
    for f in dataclasses.fields(RunConfig):
        typ = {int: int, float: float}.get(f.type if isinstance(f.type, type) else None)
        if typ is None:
            typ = float if isinstance(f.default, float) else int
        p.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=typ,
            default=None,
            help=f"{f.name} (default {f.default})",
        )


def _build_parser() -> _Parser:
    parser = _Parser(prog="eeggate", description="Rest-similarity gated MI-EEG pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic trial container")
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("filter", help="design the bandpass filter, emit response CSV")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="magnitude response CSV (freq_hz, gain_db)")
    p.add_argument("--sections-out", default=None, help="optional CSV of biquad sections")
    p.add_argument("--plot", default=None, help="optional SVG/CSV plot path prefix")
    p.add_argument("--points", type=int, default=512)

    p = sub.add_parser("train", help="train one model, optionally holding a subject out")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout-subject", type=int, default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-gate", dest="use_gate", action="store_true", default=True)
    g.add_argument("--no-gate", dest="use_gate", action="store_false")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a saved model")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--subject", type=int, default=None, help="restrict to one subject")

    p = sub.add_parser("loso", help="leave-one-subject-out comparison, with vs without gate")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gate", help="dump one trial's gate trace as CSV + SVG")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--trial", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix (.csv/.svg)")

    p = sub.add_parser("tsne", help="project model features to 2-D")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output CSV (x, y, label)")
    p.add_argument("--limit", type=int, default=288, help="max trials (deterministic subsample)")

    return parser


def _run_config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(RunConfig)}
    return RunConfig.from_sources(args.config, overrides)


def _synth_config(cfg: RunConfig) -> datamod.SynthConfig:
    return datamod.SynthConfig(
        n_subjects=cfg.n_subjects,
        trials_per_class=cfg.trials_per_class,
        n_channels=cfg.n_channels,
        fs=cfg.fs,
        trial_seconds=cfg.trial_seconds,
        erd_depth=cfg.erd_depth,
        noise_level=cfg.noise_level,
        rhythm_amp=cfg.rhythm_amp,
        subject_scale=cfg.subject_scale,
        seed=cfg.seed,
    )


def _preproc_config(cfg: RunConfig) -> dsp.PreprocConfig:
    return dsp.PreprocConfig(
        filter_order=cfg.filter_order,
        band_lo=cfg.band_lo,
        band_hi=cfg.band_hi,
        ems_alpha=cfg.ems_alpha,
        ems_eps=cfg.ems_eps,
    )


def _train_config(cfg: RunConfig, use_gate: bool) -> training.TrainConfig:
    return training.TrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        eta_min=cfg.eta_min,
        seed=cfg.seed,
        use_gate=use_gate,
        gate_dropout=cfg.gate_dropout,
        clf_dropout=cfg.clf_dropout,
    )


def _atomic_text(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cmd_synth(args) -> int:
    cfg = _run_config(args)
    ts = datamod.synth_generate(_synth_config(cfg))
    datamod.save(ts, args.out)
    print(f"wrote {ts.n_trials} trials to {args.out}")
    return 0


def _cmd_filter(args) -> int:
    cfg = _run_config(args)
    casc = dsp.design_butterworth_bandpass(cfg.filter_order, cfg.band_lo, cfg.band_hi, cfg.fs)
    freqs = np.linspace(0.0, cfg.fs / 2.0, args.points)
    gains = np.abs(dsp.frequency_response(casc, freqs))
    gains_db = 20.0 * np.log10(np.maximum(gains, 1e-300))
    plots.write_csv(args.out, ("freq_hz", "gain_db"), zip(freqs, gains_db))
    if args.sections_out:
        plots.write_csv(
            args.sections_out,
            ("b0", "b1", "b2", "a1", "a2"),
            ((s[0], s[1], s[2], s[4], s[5]) for s in casc.sections),
        )
    if args.plot:
        plots.emit_plot("filter-response", {"freq_hz": freqs, "gain_db": gains_db}, args.plot)
    print(f"designed order-{2 * cfg.filter_order} bandpass, {len(casc.sections)} sections")
    return 0


def _load_prepared(args, cfg: RunConfig) -> tuple[datamod.TrialSet, training.Prepared]:
    ts = datamod.load(args.data)
    return ts, training.prepare(ts, _preproc_config(cfg))


def _cmd_train(args) -> int:
    cfg = _run_config(args)
    ts, prepared = _load_prepared(args, cfg)
    if args.holdout_subject is not None:
        keep = prepared.subject_ids != args.holdout_subject
        idx = training._canonical_order(prepared.subject_ids, keep)
        prepared = prepared.subset(idx)
        forbid = {args.holdout_subject}
    else:
        idx = training._canonical_order(prepared.subject_ids, np.ones(len(prepared), dtype=bool))
        prepared = prepared.subset(idx)
        forbid = set()
    tc = _train_config(cfg, args.use_gate)
    n_ch, t_mi = prepared.mi.shape[1], prepared.mi.shape[2]
    model = models.build_model(
        n_ch, ts.fs, t_mi, args.use_gate,
        gate_dropout=cfg.gate_dropout, clf_dropout=cfg.clf_dropout, seed=cfg.seed,
    )
    history = training.fit(model, prepared, tc, forbid_subjects=forbid)
    models.save_model(args.out, model, models.config_hash(cfg.as_dict()))
    print(f"final loss {history[-1]:.6f}; saved model to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _run_config(args)
    _, prepared = _load_prepared(args, cfg)
    model = models.load_model(args.model)
    if args.subject is not None:
        prepared = prepared.subset(np.nonzero(prepared.subject_ids == args.subject)[0])
    acc = training.evaluate(model, prepared)
    print(f"accuracy {acc:.6f}")
    return 0


def _format_report(result: dict, subjects: list[int]) -> str:
    lines = ["# LOSO report (accuracies in %, std = population std across subjects)"]
    lines.append("subject " + " ".join(f"{s:>7d}" for s in subjects))
    for tag, key in (("w/o", "without"), ("w/", "with")):
        m = result[key]
        accs = " ".join(f"{100 * a:7.2f}" for a in m.per_subject_accuracy)
        lines.append(f"{tag:<7s} {accs}  avg {m.avg:.4f}  std {m.std:.4f}")
    lines.append(f"Diff.   avg {result['diff_avg']:+.4f}  std {result['diff_std']:+.4f}")
    return "\n".join(lines) + "\n"


def _cmd_loso(args) -> int:
    cfg = _run_config(args)
    _, prepared = _load_prepared(args, cfg)
    tc = _train_config(cfg, True)
    result = training.loso_compare(prepared, tc, jobs=args.jobs)
    subjects = sorted(int(s) for s in np.unique(prepared.subject_ids))
    _atomic_text(args.report, _format_report(result, subjects))
    print(f"wrote report to {args.report}")
    return 0


def _cmd_gate(args) -> int:
    cfg = _run_config(args)
    _, prepared = _load_prepared(args, cfg)
    model = models.load_model(args.model)
    if not (0 <= args.trial < len(prepared)):
        raise DomainError(f"trial {args.trial} outside [0,{len(prepared)})")
    rest = prepared.rest[args.trial:args.trial + 1]
    mi = prepared.mi[args.trial:args.trial + 1]
    out = gate_block_forward(rest, mi, model.gate, "eval")
    trace = out.gate.data[0]
    plots.emit_plot(
        "gate-trace",
        {
            "sample_index": np.arange(len(trace)),
            "gate_value": trace,
            "cosine": out.cosine[0],
        },
        args.out,
    )
    print(f"wrote {args.out}.csv and {args.out}.svg ({len(trace)} steps)")
    return 0


def _cmd_tsne(args) -> int:
    cfg = _run_config(args)
    _, prepared = _load_prepared(args, cfg)
    model = models.load_model(args.model)
    n = len(prepared)
    if args.limit < n:
        idx = np.linspace(0, n - 1, args.limit).astype(np.int64)
        prepared = prepared.subset(idx)
    feats = []
    for start in range(0, len(prepared), 64):
        sl = slice(start, min(start + 64, len(prepared)))
        feats.append(models.features(model, prepared.rest[sl], prepared.mi[sl]))
    feats = np.concatenate(feats, axis=0)
    pts = tsne.tsne_project(feats, perplexity=cfg.perplexity, iters=cfg.tsne_iters, seed=cfg.seed)
    plots.write_csv(args.out, ("x", "y", "label"), zip(pts[:, 0], pts[:, 1], prepared.labels))
    print(f"wrote {len(pts)} points to {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "filter": _cmd_filter,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "loso": _cmd_loso,
    "gate": _cmd_gate,
    "tsne": _cmd_tsne,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DomainError, DimensionError, LengthError, ContractError, OSError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 3
    except EegGateError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
