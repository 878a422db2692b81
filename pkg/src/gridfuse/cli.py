"""``gridfuse`` command line: synth, preprocess, train, evaluate, attribute,
report.

Every command that writes files takes an exclusive lock on its output
directory, writes a ``manifest.json`` with sha256 digests of its inputs and
outputs, and exits 0 only after every declared output has been re-read and
verified. Randomness comes from the config's ``seed`` key through
:func:`gridfuse.config.derive_seed`.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, config, evalkit, shapx, synth, trainer
from .checkpoint import read_prm1, write_prm1
from .errors import ConfigError, GridfuseError
from .grid import FieldCatalog, GridField, read_grd1, write_grd1
from .models import ModelConfig, Model, build_model
from .preprocess import SplitSpec, StandardizerStats, stats_from_field, stats_to_field

CATALOG = "catalog.csv"
MANIFEST = "manifest.json"
LOCK = ".gridfuse.lock"
PREPARED = "prepared.csv"


# ---------------------------------------------------------------- plumbing


def sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def locked(out: Path):
    """Exclusive ownership of an output directory for one command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise GridfuseError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, command: str, out: Path, raw_cfg: dict | None):
        self.command, self.out = command, out
        self.raw_cfg = dict(raw_cfg or {})
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.resolved: dict = {}
        self.t0 = time.perf_counter()
        self.timings: dict[str, float] = {}

    def read(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise GridfuseError(f"missing input file: {p}")
        self.inputs[str(p)] = sha256(p)
        return p

    def wrote(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def lap(self, name: str):
        self.timings[name] = time.perf_counter() - self.t0

    def finish(self) -> dict:
        outs = {}
        for p in self.outputs:
            if not p.exists():
                raise GridfuseError(f"declared output was not written: {p}")
            outs[p.name] = sha256(p)
        manifest = {
            "tool": "gridfuse", "version": __version__, "command": self.command,
            "config": self.raw_cfg, "resolved": self.resolved, "seeds": self.seeds,
            "inputs": self.inputs, "outputs": outs,
            "timings": {**self.timings, "total": time.perf_counter() - self.t0},
        }
        path = self.out / MANIFEST
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        for name, digest in outs.items():  # validate after writing
            if sha256(self.out / name) != digest:
                raise GridfuseError(f"output {name} changed while the manifest was written")
        return manifest


def write_field(run: Run, field: GridField, path: Path) -> None:
    write_grd1(field, path)
    if not read_grd1(path).equals(field):
        raise GridfuseError(f"re-read of {path} does not match what was written")
    run.wrote(path)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GRIDFUSE_THREADS", "1")))
    except ValueError:
        raise ConfigError("GRIDFUSE_THREADS must be a positive integer") from None


def load_config(path: str | None, required=()) -> dict[str, str]:
    raw = config.read(path) if path else {}
    config.require(raw, required)
    return raw


def split_spec(raw: dict) -> SplitSpec:
    d = SplitSpec()
    return SplitSpec(config.extra(raw, "split_train", d.train_fraction),
                     config.extra(raw, "split_valid", d.valid_fraction),
                     config.extra(raw, "split_test", d.test_fraction))


# ---------------------------------------------------------------- catalogs on disk


def write_catalog_dir(run: Run, cat: FieldCatalog, out: Path, index: str = CATALOG, prefix: str = "") -> None:
    rows = []
    for name in cat.names():
        fn = f"{prefix}{name}.grd"
        write_field(run, cat[name], out / fn)
        rows.append((name, cat.role(name), fn))
    with open(out / index, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "role", "file"])
        w.writerows(rows)
    run.wrote(out / index)


def read_catalog_dir(run: Run, d: Path, index: str = CATALOG) -> FieldCatalog:
    cat = FieldCatalog()
    with open(run.read(d / index), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cat.add(row["name"], read_grd1(run.read(d / row["file"])), row["role"])
    return cat


def save_prepared(run: Run, data: trainer.PreparedData, out: Path) -> None:
    """Standardized catalog, per-entry stats, raw truth, events and splits."""
    write_catalog_dir(run, data.catalog, out, prefix="std_")
    label = data.catalog.label_name()
    tmpl = data.truth
    for name, st in [*data.input_stats.items(), (label, data.label_stats)]:
        write_field(run, stats_to_field(st, data.catalog[name]), out / f"stats_{name}.grd")
    write_field(run, tmpl, out / "raw_truth.grd")
    write_field(run, data.events, out / "events.grd")
    with open(out / PREPARED, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for seg, r in zip(("train", "valid", "test"), data.splits):
            w.writerow([f"{seg}_start", r.start])
            w.writerow([f"{seg}_stop", r.stop])
        w.writerow(["inputs", ",".join(data.input_names)])
        w.writerow(["epsilon", repr(data.label_stats.epsilon)])
    run.wrote(out / PREPARED)


def load_prepared(run: Run, d: Path) -> trainer.PreparedData:
    if not (d / PREPARED).exists():
        raise GridfuseError(f"{d} is not a preprocessed directory (no {PREPARED}); run `gridfuse preprocess`")
    with open(run.read(d / PREPARED), newline="", encoding="utf-8") as fh:
        kv = {r["key"]: r["value"] for r in csv.DictReader(fh)}
    cat = read_catalog_dir(run, d)
    eps = float(kv["epsilon"])
    names = tuple(kv["inputs"].split(","))
    label = cat.label_name()

    def stats(n) -> StandardizerStats:
        return stats_from_field(read_grd1(run.read(d / f"stats_{n}.grd")), eps)

    splits = tuple(range(int(kv[f"{s}_start"]), int(kv[f"{s}_stop"])) for s in ("train", "valid", "test"))
    return trainer.PreparedData(cat, read_grd1(run.read(d / "raw_truth.grd")), read_grd1(run.read(d / "events.grd")),
                                stats(label), {n: stats(n) for n in names}, splits, names)


def save_model(run: Run, model: Model, path: Path, tcfg: trainer.TrainConfig) -> None:
    write_prm1(model.state_dict(), path)
    back = read_prm1(path)
    if any(back[k].tobytes() != np.asarray(v, "<f4").tobytes() for k, v in model.state_dict().items()):
        raise GridfuseError(f"re-read of {path} does not match the model")
    run.wrote(path)
    side = path.with_suffix(".cfg")
    side.write_text(config.dump([model.cfg], {"stage": tcfg.stage}), encoding="utf-8")
    run.wrote(side)


def load_model(run: Run, path: Path) -> tuple[Model, str]:
    """Checkpoint plus its ``.cfg`` sidecar; returns the model and its stage."""
    side = path.with_suffix(".cfg")
    if not side.exists():
        raise GridfuseError(f"checkpoint {path} has no config sidecar {side}")
    raw = config.read(run.read(side))
    model = build_model(config.build(ModelConfig, raw))
    model.load_state_dict(read_prm1(run.read(path)))
    return model, raw.get("stage", "regressor")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    raw = load_config(args.config, required=("seed",))
    out = Path(args.out)
    with locked(out):
        run = Run("synth", out, raw)
        if args.config:
            run.read(args.config)
        cfg = config.build(synth.SynthConfig, raw)
        run.seeds["synth"] = cfg.seed
        run.resolved["synth"] = config.dump([cfg])
        cat = synth.generate(cfg, threads=_threads())
        run.lap("generate")
        write_catalog_dir(run, cat, out)
        desc = synth.describe(cat)
        with open(out / "describe.json", "w", encoding="utf-8") as fh:
            json.dump(desc, fh, indent=1, sort_keys=True, default=float)
        run.wrote(out / "describe.json")
        run.finish()
    print(f"wrote {len(cat)} fields to {out}")
    return 0


def cmd_preprocess(args) -> int:
    raw = load_config(args.config)
    src, out = Path(args.input), Path(args.out)
    with locked(out):
        run = Run("preprocess", out, raw)
        cat = read_catalog_dir(run, src)
        data = trainer.prepare(cat, split_spec(raw))
        run.resolved["splits"] = [[r.start, r.stop] for r in data.splits]
        save_prepared(run, data, out)
        run.finish()
    tr, va, te = data.splits
    print(f"standardized {len(data.input_names)} inputs; split {len(tr)}/{len(va)}/{len(te)}")
    return 0


def _model_config(raw: dict, arch: str, stage: str, n_in: int, mask_shape, seed: int) -> ModelConfig:
    mode = "classifier" if stage == "classifier" else "regressor"
    base = config.build(ModelConfig, raw, arch=arch, head_mode=mode, seed=seed, in_channels=1,
                        height=mask_shape[0], width=mask_shape[1])
    ch = n_in * (base.timesteps if arch == "cnn_transformer" else 1)
    return replace(base, in_channels=ch)


def cmd_train(args) -> int:
    raw = load_config(args.config, required=("seed",))
    src, out = Path(args.input), Path(args.out)
    stage = args.stage
    with locked(out):
        run = Run(f"train --stage {stage} --model {args.model}", out, raw)
        data = load_prepared(run, src)
        seed = int(raw["seed"])
        run.seeds["model"] = config.derive_seed(seed, "model", args.model, stage)
        run.seeds["train"] = config.derive_seed(seed, "train", args.model, stage)
        tcfg = config.build(trainer.TrainConfig, raw, stage=stage, seed=run.seeds["train"], epochs=args.epochs,
                            learning_rate=args.lr, hard_mask=True if args.hard_mask else None)
        prob = None
        if stage == "regressor":
            if not args.probabilities:
                raise ConfigError("--stage regressor needs --probabilities from a classifier run")
            prob = read_grd1(run.read(args.probabilities))
        elif args.probabilities:
            raise ConfigError("--probabilities only applies to --stage regressor")
        n_in = len(data.input_names) + (1 if prob is not None else 0)
        mcfg = _model_config(raw, args.model, stage, n_in, data.mask.shape, run.seeds["model"])
        model = build_model(mcfg)
        run.resolved["model"] = mcfg.to_dict()
        run.resolved["train"] = {k: getattr(tcfg, k) for k in trainer.TrainConfig.field_names()}
        if stage == "classifier":
            model, rec, prob_out = trainer.train_stage1_classifier(data, model, tcfg)
            write_field(run, prob_out, out / "probability.grd")
        else:
            if stage == "regressor":
                model, rec = trainer.train_stage2_regressor(data, prob, model, tcfg)
            else:
                model, rec = trainer.train_direct(data, model, tcfg)
            pred, clamped = trainer.predict_precipitation(model, data, prob, tcfg.hard_mask)
            run.resolved["clamped_negative"] = clamped
            write_field(run, pred, out / "prediction.grd")
        run.lap("train")
        save_model(run, model, out / "model.prm1", tcfg)
        rec.checkpoint = "model.prm1"
        rec.to_csv(out / "losses.csv")
        run.wrote(out / "losses.csv")
        run.resolved["best_epoch"] = rec.best_epoch
        run.resolved["lr_halved"] = rec.lr_halved
        run.finish()
    print(f"{stage} {args.model}: best epoch {rec.best_epoch}, "
          f"valid loss {min(rec.valid_losses) if rec.valid_losses else float('nan'):.5f}")
    return 0


def _segment(field: GridField, spec: str | None) -> GridField:
    if not spec:
        return field
    try:
        a, b = (int(s) if s else None for s in spec.split(":"))
    except ValueError:
        raise ConfigError(f"--time-range must look like START:STOP, got {spec!r}") from None
    return field.isel_time(slice(a, b))


def _map_name(metric: str, thr) -> str:
    return metric if thr is None else f"{metric}_{thr:g}"


def cmd_evaluate(args) -> int:
    raw = load_config(args.config)
    out = Path(args.out)
    thresholds = ([float(s) for s in args.thresholds.split(",")] if args.thresholds
                  else config.extra(raw, "thresholds", [0.1, 25.0], list))
    with locked(out):
        run = Run("evaluate", out, raw)
        pred = _segment(read_grd1(run.read(args.pred)), args.time_range)
        obs = _segment(read_grd1(run.read(args.obs)), args.time_range)
        base = _segment(read_grd1(run.read(args.baseline)), args.time_range) if args.baseline else None
        hq = args.heavy_quantile if args.heavy_quantile is not None else config.extra(raw, "heavy_quantile", None)
        if hq is not None:
            heavy = synth.heavy_threshold(obs, hq)
            run.resolved["heavy_threshold"] = {"quantile": hq, "value": heavy}
            thresholds = thresholds + [heavy]
            print(f"heavy threshold: p{hq:g} of observations = {heavy:.4f}")
        run.resolved["thresholds"] = thresholds
        rows = evalkit.summary_rows(pred, obs, thresholds, model="model")
        if base is not None:
            rows += evalkit.summary_rows(base, obs, thresholds, model="baseline")
        evalkit.write_scalar_csv(rows, out / "scores.csv")
        run.wrote(out / "scores.csv")
        specs = [(m, None) for m in evalkit.CONTINUOUS] + [(m, t) for t in thresholds for m in evalkit.EVENT]
        for metric, thr in specs:
            name = _map_name(metric, thr)
            m = evalkit.skill_map(pred, obs, metric, thr)
            evalkit.write_map_csv(m, out / f"map_{name}.csv")
            evalkit.write_map_pgm(m, out / f"map_{name}.pgm")
            run.wrote(out / f"map_{name}.csv")
            run.wrote(out / f"map_{name}.pgm")
            if base is not None:
                d = evalkit.diff_map(m, evalkit.skill_map(base, obs, metric, thr))
                evalkit.write_map_csv(d, out / f"diff_{name}.csv")
                evalkit.write_map_pgm(d, out / f"diff_{name}.pgm")
                run.wrote(out / f"diff_{name}.csv")
                run.wrote(out / f"diff_{name}.pgm")
        run.finish()
    for r in rows[:4]:
        print(f"{r['model']} {r['metric']}: {r['value']:.4f}")
    return 0


def attribution_samples(data: trainer.PreparedData, n: int, rng: np.random.Generator, segment: range):
    """Seeded (day, lat, lon) triples from a segment's valid cells."""
    ii, jj = np.nonzero(data.mask)
    t = rng.integers(segment.start, segment.stop, n)
    c = rng.integers(0, len(ii), n)
    return t, ii[c], jj[c]


def cmd_attribute(args) -> int:
    raw = load_config(args.config, required=("seed",))
    out = Path(args.out)
    with locked(out):
        run = Run("attribute", out, raw)
        data = load_prepared(run, Path(args.input))
        model, stage = load_model(run, Path(args.checkpoint))
        prob = None
        names = list(data.input_names)
        if stage == "regressor":
            if not args.probabilities:
                raise ConfigError("hybrid checkpoint: --probabilities is required")
            prob = read_grd1(run.read(args.probabilities))
            names.append("CLASS")
        x = trainer.input_stack(data, prob)
        n_bg = args.background or config.extra(raw, "background", 100, int)
        n_samples = args.samples or config.extra(raw, "attribution_samples", 20, int)
        perms = args.permutations or config.extra(raw, "permutations", 1000, int)
        mode = "sampled" if args.sampled else "exact"
        seed = config.derive_seed(int(raw["seed"]), "attribute")
        run.seeds["attribute"] = seed
        rng = np.random.default_rng(seed)
        tt, ii, jj = attribution_samples(data, n_samples, rng, data.splits[2])
        cfg = model.cfg
        reports, ids = [], []
        for k, (t, i, j) in enumerate(zip(tt, ii, jj)):
            bg_days = rng.integers(data.splits[0].start, data.splits[0].stop, n_bg)
            w = cfg.timesteps
            if cfg.arch in ("unet", "transunet"):
                f = shapx.CellModel(model, x[t], i, j)
                xs, bg, groups = x[t, i, j], x[bg_days, i, j], None
            elif cfg.arch == "cnn_transformer":
                def stacked(day):
                    win = x[np.clip(np.arange(day - w + 1, day + 1), 0, None)]
                    return win.transpose(1, 2, 0, 3).reshape(*win.shape[1:3], -1)
                day = stacked(t)
                f = shapx.CellModel(model, day, i, j)
                xs = day[i, j]
                bg = np.stack([stacked(b)[i, j] for b in bg_days])
                groups = shapx.channel_groups(w, len(names))
            else:
                def window(day):
                    return x[np.clip(np.arange(day - w + 1, day + 1), 0, None), i, j].reshape(-1)
                f = shapx.RowModel(model)
                xs, bg = window(t), np.stack([window(b) for b in bg_days])
                groups = shapx.channel_groups(w, len(names))
            q = shapx.AttributionQuery(f, xs, bg, mode, perms, seed + k, groups)
            reports.append(shapx.explain(q))
            ids.append(f"t{t}_i{i}_j{j}")
        summary = shapx.aggregate_attribution(reports, names, ids)
        shapx.write_summary_csv(summary, out / "attribution_summary.csv")
        shapx.write_long_csv(summary, out / "attribution_long.csv")
        run.wrote(out / "attribution_summary.csv")
        run.wrote(out / "attribution_long.csv")
        run.resolved.update(mode=mode, background=n_bg, samples=n_samples,
                            max_local_accuracy_gap=max(abs(r.local_accuracy_gap) for r in reports))
        run.finish()
    for name, pct in sorted(zip(summary.feature_names, summary.percent), key=lambda p: -p[1]):
        print(f"{name}: {pct:.2f}%")
    return 0


def cmd_report(args) -> int:
    """Collect the scalar scores of several evaluate runs into one table."""
    rows = []
    for d in args.runs:
        p = Path(d) / "scores.csv"
        if not p.exists():
            raise GridfuseError(f"missing input file: {p}")
        label = Path(d).name
        with open(p, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows.append({"run": label, **r})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "model", "metric", "threshold", "value"])
        for r in rows:
            w.writerow([r["run"], r["model"], r["metric"], r["threshold"], r["value"]])
    key = [r for r in rows if r["model"] == "model" and r["metric"] in ("r", "rmse")]
    for r in key:
        print(f"{r['run']:>24} {r['metric']:>5} {r['value']}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gridfuse",
        description="Two-stage (classifier + regressor) fusion of gridded precipitation products.",
        epilog="config keys (file given with --config, one 'key = value' per line):\n" + config.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"gridfuse {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic catalog")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="standardize a catalog and split it in time")
    s.add_argument("--config")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a classifier, hybrid regressor or direct regressor")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=trainer.STAGES, required=True)
    s.add_argument("--model", choices=("unet", "transunet", "transformer", "lstm", "cnn_transformer"),
                   required=True)
    s.add_argument("--in", dest="input", required=True, help="preprocessed directory")
    s.add_argument("--out", required=True)
    s.add_argument("--probabilities", help="classifier probability.grd (regressor stage)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--hard-mask", action="store_true", help="threshold the probability channel at 0.5")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a prediction against observations")
    s.add_argument("--config")
    s.add_argument("--pred", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--baseline", help="reference field for difference maps (e.g. ensemble mean)")
    s.add_argument("--thresholds", help="comma-separated event thresholds, default 0.1,25")
    s.add_argument("--heavy-quantile", type=float, help="add the observations' percentile as a threshold")
    s.add_argument("--time-range", help="START:STOP day indices to score")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attribute", help="Shapley attribution of a trained regressor")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True, help="preprocessed directory")
    s.add_argument("--probabilities")
    s.add_argument("--sampled", action="store_true", help="permutation sampling instead of exact enumeration")
    s.add_argument("--background", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--permutations", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("report", help="combine the scores of several evaluate runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(_threads()):
            return args.func(args)
    except ConfigError as e:
        print(f"gridfuse: configuration error: {e}", file=sys.stderr)
        return 2
    except (GridfuseError, OSError) as e:
        print(f"gridfuse: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
