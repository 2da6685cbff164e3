"""Command-line driver: data generation, training, evaluation and reports.

Every failure prints one line ``error: <code>: <message>`` to stderr and
exits nonzero (2 for usage errors, 1 otherwise).
"""

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from pcmask import __version__, kernels
from pcmask.data import (
    DATA_MAGIC,
    DatasetSchema,
    ScalerStats,
    Split,
    apply_scaler,
    fit_scaler,
    generate_synthetic,
    load_dataset,
    read_schema,
    read_truth,
    save_binary,
    save_csv,
    shuffle_and_split,
    synthetic_spec_from_section,
    translate_indices,
    write_schema,
    write_synthetic_spec,
    write_truth,
)
from pcmask.errors import DataError, PCMaskError, ShapeError, UsageError
from pcmask.evalattrib import (
    AttributionMatrix,
    background_sample,
    compare_masks,
    driver_recovery,
    mean_abs_attribution,
    profile_report,
    r2,
    write_json,
)
from pcmask.masks import BinaryMask, read_mask, read_mask_vector, write_mask, write_mask_vector
from pcmask.nncore import CKPT_MAGIC, LrSchedule, Mode, load_checkpoint, save_checkpoint
from pcmask.pcmasking import (
    ThresholdGrid,
    TrainingConfig,
    build_threshold_grid,
    extract_mask_vector,
    read_sweep_csv,
    select_best,
    sweep_thresholds,
    train_premask,
    write_sweep_csv,
)

log = logging.getLogger("pcmask")

OUTPUT_ROOT_ENV = "PCMASK_OUTPUT_ROOT"
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
STAGES = ("data", "premask", "mask_vector", "grid", "sweep", "select")

# section -> key -> default (as text); the single source of accepted keys
CONFIG_DEFAULTS = {
    "data": {
        "train": "",
        "val": "",
        "test": "",
        "schema": "",
        "truth": "",
        "fractions": "0.6, 0.2, 0.2",
        "format": "csv",
    },
    "training": {
        "lambda": "0.001",
        "epochs_premask": "9",
        "epochs_mask": "9",
        "initial_lr": "0.001",
        "lr_decay_factor": "5",
        "lr_decay_every": "3",
        "train_batch": "1024",
        "eval_batch": "8192",
        "seed": "42",
        "n_thresholds": "20",
        "hidden": ", ".join(["256"] * 9),
        "slope": "0.3",
        "input_init": "zeros",
        "jobs": "1",
    },
    "output": {
        "dir": "",
        "formats": "csv, json",
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config -----------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """Resolved settings for one training run."""

    training: TrainingConfig
    jobs: int
    output_dir: Path
    formats: tuple
    train_path: Path | None = None
    val_path: Path | None = None
    test_path: Path | None = None
    schema_path: Path | None = None
    truth_path: Path | None = None
    synthetic: object = None
    fractions: tuple = DEFAULT_FRACTIONS
    parser: configparser.ConfigParser | None = None

    def validate(self):
        if self.train_path is None and self.synthetic is None:
            raise UsageError("config needs [data] train or a [synthetic] section")
        for p in (self.train_path, self.val_path, self.test_path, self.schema_path, self.truth_path):
            if p is not None and not p.exists():
                raise DataError(f"{p}: no such file")
        bad = set(self.formats) - {"csv", "json"}
        if bad:
            raise UsageError(f"unknown report format(s): {', '.join(sorted(bad))}")
        return self


def _split_list(text):
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(CONFIG_DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise UsageError(f"{path}: {str(exc).splitlines()[0]}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} is not section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name] = value.strip()
    for section in cp.sections():
        if section == "synthetic":
            continue
        if section not in CONFIG_DEFAULTS:
            raise UsageError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - set(CONFIG_DEFAULTS[section])
        if unknown:
            raise UsageError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return cp


def _floats(text, what):
    try:
        return tuple(float(t) for t in _split_list(text))
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def training_config(cp):
    sec = cp["training"]
    try:
        sched = LrSchedule(float(sec["initial_lr"]), float(sec["lr_decay_factor"]), int(sec["lr_decay_every"]))
        return TrainingConfig(
            lam=float(sec["lambda"]),
            epochs_premask=int(sec["epochs_premask"]),
            epochs_mask=int(sec["epochs_mask"]),
            lr_schedule=sched,
            train_batch=int(sec["train_batch"]),
            eval_batch=int(sec["eval_batch"]),
            seed=int(sec["seed"]),
            n_thresholds=int(sec["n_thresholds"]),
            hidden=tuple(int(h) for h in _split_list(sec["hidden"])),
            slope=float(sec["slope"]),
            input_init=sec["input_init"].strip(),
        )
    except ValueError as exc:
        raise UsageError(f"[training]: {exc}") from None


def _resolve(base, text):
    if not text.strip():
        return None
    p = Path(text.strip()).expanduser()
    return p if p.is_absolute() else (base / p)


def output_dir(cp, flag=None, default_name="run"):
    """``--out`` flag, then ``[output] dir``, then ``$PCMASK_OUTPUT_ROOT/<default_name>``.

    A relative ``[output] dir`` is taken under the output root when the
    environment variable is set.
    """
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if flag:
        return Path(flag)
    configured = cp["output"]["dir"].strip() if cp is not None else ""
    if configured:
        p = Path(configured).expanduser()
        return p if p.is_absolute() or not root else Path(root) / p
    return Path(root or ".") / default_name


def run_config(cp, config_path=None, out_flag=None):
    base = Path(config_path).parent if config_path else Path(".")
    data = cp["data"]
    fractions = _floats(data["fractions"], "[data] fractions")
    try:
        jobs = int(cp["training"]["jobs"])
    except ValueError:
        raise UsageError("[training] jobs must be an integer") from None
    if jobs < 1:
        raise UsageError("[training] jobs must be >= 1")
    synthetic = None
    if cp.has_section("synthetic"):
        synthetic = synthetic_spec_from_section(dict(cp["synthetic"]))
    return RunConfig(
        training=training_config(cp),
        jobs=jobs,
        output_dir=output_dir(cp, out_flag),
        formats=tuple(_split_list(cp["output"]["formats"])),
        train_path=_resolve(base, data["train"]),
        val_path=_resolve(base, data["val"]),
        test_path=_resolve(base, data["test"]),
        schema_path=_resolve(base, data["schema"]),
        truth_path=_resolve(base, data["truth"]),
        synthetic=synthetic,
        fractions=fractions,
        parser=cp,
    ).validate()


def config_text(cp, snapshot=False):
    """INI text of ``cp``; ``snapshot`` drops settings that cannot change results."""
    buf = io.StringIO()
    out = configparser.ConfigParser(interpolation=None)
    out.read_dict(cp)
    if snapshot:
        out.remove_option("output", "dir")
        out.remove_option("training", "jobs")
    out.write(buf)
    return buf.getvalue()


# -- manifest ---------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    """Stage log for one output directory; artifact paths are relative to it."""

    root: Path
    command: str
    config: str = ""
    seed: int | None = None
    stages: dict = dataclasses.field(default_factory=dict)
    created: str = dataclasses.field(default_factory=_now)
    updated: str = ""
    tool_version: str = __version__
    backend: str = kernels.BACKEND

    FILENAME = "manifest.json"

    def record(self, stage, status, artifacts=(), error=None, started=None):
        entry = {
            "status": status,
            "artifacts": {str(Path(a).relative_to(self.root)): sha256_file(a) for a in artifacts},
            "started": started or _now(),
            "finished": _now(),
        }
        if error:
            entry["error"] = error
        self.stages[stage] = entry
        self.save()

    def completed(self, stage):
        """True when ``stage`` finished and every artifact still has its checksum."""
        entry = self.stages.get(stage)
        if not entry or entry["status"] != "completed":
            return False
        for rel, digest in entry["artifacts"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                log.info("stage %s: %s changed on disk, rerunning", stage, rel)
                return False
        return True

    def to_dict(self):
        return {
            "tool": "pcmask",
            "tool_version": self.tool_version,
            "backend": self.backend,
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "stages": self.stages,
            "created": self.created,
            "updated": self.updated,
        }

    def save(self):
        self.updated = _now()
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / (self.FILENAME + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tmp.replace(self.root / self.FILENAME)

    @classmethod
    def load(cls, root):
        path = Path(root) / cls.FILENAME
        try:
            obj = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"{path}: no manifest to resume from") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt manifest ({exc})") from None
        return cls(
            Path(root), obj["command"], obj.get("config", ""), obj.get("seed"), obj.get("stages", {}),
            obj.get("created", ""), obj.get("updated", ""), obj.get("tool_version", ""), obj.get("backend", ""),
        )


def strip_timestamps(manifest_dict):
    """Manifest content that must match between identical runs."""
    out = {k: v for k, v in manifest_dict.items() if k not in ("created", "updated")}
    out["stages"] = {
        name: {k: v for k, v in entry.items() if k not in ("started", "finished")}
        for name, entry in manifest_dict["stages"].items()
    }
    return out


# -- gen-data ---------------------------------------------------------------


def cmd_gen_data(args):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if not cp.read(args.spec):
            raise UsageError(f"{args.spec}: cannot read spec file")
    except configparser.Error as exc:
        raise UsageError(f"{args.spec}: {str(exc).splitlines()[0]}") from None
    if not cp.has_section("synthetic"):
        raise UsageError(f"{args.spec}: missing [synthetic] section")
    spec = synthetic_spec_from_section(dict(cp["synthetic"]))
    data = cp["data"] if cp.has_section("data") else {}
    fractions = _floats(data.get("fractions", "0.6, 0.2, 0.2"), "[data] fractions")
    fmt = args.format or data.get("format", "csv").strip()
    if fmt not in ("csv", "binary"):
        raise UsageError(f"format must be csv or binary, got {fmt!r}")
    out = output_dir(None, args.out, "data")
    out.mkdir(parents=True, exist_ok=True)

    raw = generate_synthetic(spec)
    parts = shuffle_and_split(raw, fractions, spec.seed)
    manifest = RunManifest(out, "gen-data", seed=spec.seed)
    started = _now()
    written = []
    ext = "csv" if fmt == "csv" else "bin"
    for split, ds in parts.items():
        path = out / f"{split.value}.{ext}"
        (save_csv if fmt == "csv" else save_binary)(path, ds)
        written.append(path)
    write_truth(out / "truth.txt", raw.truth_drivers)
    write_schema(out / "schema.ini", raw.schema)
    write_synthetic_spec(out / "synthetic.ini", spec)
    written += [out / "truth.txt", out / "schema.ini", out / "synthetic.ini"]
    manifest.config = (out / "synthetic.ini").read_text()
    manifest.record("generate", "completed", written, started=started)
    print(f"wrote {len(parts)} splits ({', '.join(str(ds.n) for ds in parts.values())} rows) to {out}")
    return 0


# -- train ------------------------------------------------------------------


def _load_split(path, schema, split):
    ds = load_dataset(path, schema, split)
    if ds.split is not split:
        ds = ds.replace(split=split)
    return ds


def load_run_data(rc):
    """Unscaled ``{split: Dataset}`` for a run; missing splits are ``None``."""
    if rc.train_path is not None:
        schema = read_schema(rc.schema_path) if rc.schema_path else None
        out = {Split.TRAIN: _load_split(rc.train_path, schema, Split.TRAIN)}
        for split, p in ((Split.VAL, rc.val_path), (Split.TEST, rc.test_path)):
            out[split] = _load_split(p, schema, split) if p is not None else None
        if rc.truth_path is not None:
            truth = read_truth(rc.truth_path)
            out = {k: None if v is None else v.replace(truth_drivers=truth) for k, v in out.items()}
        if rc.synthetic is not None:
            log.info("[data] train is set; ignoring [synthetic]")
        return out
    raw = generate_synthetic(rc.synthetic)
    return shuffle_and_split(raw, rc.fractions, rc.synthetic.seed)


def _write_history(path, result):
    with open(path, "w") as fh:
        fh.write("epoch,mse,l1_penalty,total\n")
        rows = [("initial", result.initial)] + list(enumerate(result.history)) + [("final", result.final_full)]
        for epoch, lb in rows:
            fh.write(f"{epoch},{lb.mse!r},{lb.l1_penalty!r},{lb.total!r}\n")


def write_grid(path, grid):
    lines = [f"p70 {grid.p70!r}", f"requested {grid.requested}"] + [repr(t) for t in grid.thresholds]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path):
    lines = Path(path).read_text().split("\n")
    p70 = float(lines[0].split()[1])
    requested = int(lines[1].split()[1])
    return ThresholdGrid(tuple(float(t) for t in lines[2:] if t.strip()), p70, requested)


def _sweep_name(i):
    return f"t{i:03d}.ckpt"


class Trainer:
    """Stage-by-stage training run with manifest bookkeeping and resume."""

    def __init__(self, rc, resume=False, stop_after=None):
        self.rc = rc
        self.out = rc.output_dir
        self.cfg = rc.training
        self.stop_after = stop_after
        snapshot = config_text(rc.parser, snapshot=True)
        if resume and (self.out / RunManifest.FILENAME).exists():
            self.manifest = RunManifest.load(self.out)
            if self.manifest.config != snapshot:
                raise UsageError("config differs from the manifest being resumed; use a fresh output directory")
        else:
            self.manifest = RunManifest(self.out, "train", snapshot, self.cfg.seed)
        self.resuming = resume
        self.train = self.val = self.test = None
        self.scaler = None
        self.premask_net = None
        self.mask_vector = None
        self.grid = None
        self.sweep = None
        self.best = None

    def path(self, name):
        return self.out / name

    def run(self):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "effective_config.ini").write_text(config_text(self.rc.parser))
        self.manifest.save()
        redo = not self.resuming
        for stage in STAGES:
            if not redo and self.manifest.completed(stage):
                log.info("stage %s: up to date, loading", stage)
                getattr(self, f"_load_{stage}")()
            else:
                # everything downstream of a rerun stage is stale
                redo = True
                started = _now()
                try:
                    artifacts = getattr(self, f"_run_{stage}")()
                except PCMaskError as exc:
                    self.manifest.record(stage, "failed", error=f"{exc.code}: {exc}", started=started)
                    raise
                self.manifest.record(stage, "completed", artifacts, started=started)
            if stage == self.stop_after:
                return None
        return self.best

    # data: scaler fit on the training split
    def _scaled(self, parts):
        self.raw_train = parts[Split.TRAIN]
        scale = lambda ds: None if ds is None else apply_scaler(self.scaler, ds)
        self.train, self.val, self.test = scale(parts[Split.TRAIN]), scale(parts.get(Split.VAL)), scale(parts.get(Split.TEST))

    def _run_data(self):
        parts = load_run_data(self.rc)
        self.scaler = fit_scaler(parts[Split.TRAIN])
        self.path("scaler.json").write_text(self.scaler.to_json() + "\n")
        write_schema(self.path("schema.ini"), parts[Split.TRAIN].schema)
        arts = [self.path("scaler.json"), self.path("schema.ini")]
        if parts[Split.TRAIN].truth_drivers is not None:
            write_truth(self.path("truth.txt"), parts[Split.TRAIN].truth_drivers)
            arts.append(self.path("truth.txt"))
        self._scaled(parts)
        return arts

    def _load_data(self):
        self.scaler = ScalerStats.from_json(self.path("scaler.json").read_text())
        self._scaled(load_run_data(self.rc))

    def _run_premask(self):
        res = train_premask(self.train, self.cfg, self.val)
        self.premask_net = res.net
        save_checkpoint(self.path("premask.ckpt"), res.net, self.cfg.seed)
        _write_history(self.path("premask_history.csv"), res)
        return [self.path("premask.ckpt"), self.path("premask_history.csv")]

    def _load_premask(self):
        self.premask_net, _ = load_checkpoint(self.path("premask.ckpt"))

    def _run_mask_vector(self):
        self.mask_vector = extract_mask_vector(self.premask_net)
        write_mask_vector(self.path("mask_vector.txt"), self.mask_vector)
        return [self.path("mask_vector.txt")]

    def _load_mask_vector(self):
        self.mask_vector = read_mask_vector(self.path("mask_vector.txt"))

    def _run_grid(self):
        self.grid = build_threshold_grid(self.mask_vector, self.cfg.n_thresholds)
        write_grid(self.path("grid.txt"), self.grid)
        return [self.path("grid.txt")]

    def _load_grid(self):
        self.grid = read_grid(self.path("grid.txt"))

    def _run_sweep(self):
        self.sweep = sweep_thresholds(self.premask_net, self.train, self.cfg, self.val, self.grid, self.rc.jobs)
        sweep_dir = self.path("sweep")
        sweep_dir.mkdir(exist_ok=True)
        for old in sweep_dir.glob("*.ckpt"):
            old.unlink()
        arts = [self.path("sweep.csv")]
        write_sweep_csv(arts[0], self.sweep)
        for i, net in enumerate(self.sweep.networks):
            if net is not None:
                save_checkpoint(sweep_dir / _sweep_name(i), net, self.cfg.seed)
                arts.append(sweep_dir / _sweep_name(i))
        return arts

    def _load_sweep(self):
        self.sweep = read_sweep_csv(self.path("sweep.csv"))
        self.sweep.grid = self.grid
        self.sweep.networks = []
        for i, rec in enumerate(self.sweep.records):
            p = self.path("sweep") / _sweep_name(i)
            self.sweep.networks.append(load_checkpoint(p)[0] if rec.error is None else None)

    def _run_select(self):
        self.best = select_best(self.sweep)
        mask = BinaryMask(self.best.record.bits, self.best.threshold, self.mask_vector.values)
        write_mask(self.path("best_mask.txt"), mask)
        save_checkpoint(self.path("best_mask.ckpt"), self.best.network, self.cfg.seed)
        summary = {
            "index": self.best.index,
            "threshold": self.best.threshold,
            "selected": sorted(mask.selected),
            "selected_count": mask.count,
            "final_train_loss": self.best.record.final_train_loss,
            "final_val_loss": self.best.record.final_val_loss,
            "lambda": self.cfg.lam,
            "p70": self.grid.p70,
            "grid_size": len(self.grid),
        }
        if self.raw_train.truth_drivers is not None:
            summary["driver_recovery"] = driver_recovery(mask, self.raw_train.truth_drivers).to_dict()
        write_json(self.path("selection.json"), summary)
        return [self.path("best_mask.txt"), self.path("best_mask.ckpt"), self.path("selection.json")]

    def _load_select(self):
        self.best = select_best(self.sweep)


def cmd_train(args):
    cp = load_config(args.config, _overrides(args))
    if args.print_config:
        sys.stdout.write(config_text(cp))
        return 0
    if args.config is None:
        raise UsageError("train needs a config file")
    rc = run_config(cp, args.config, args.out)
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        rc.jobs = args.jobs
    trainer = Trainer(rc, resume=args.resume, stop_after=args.stop_after)
    best = trainer.run()
    if best is None:
        print(f"stopped after stage {args.stop_after}; outputs in {rc.output_dir}")
        return 0
    print(
        f"best threshold {best.threshold!r}: {int(best.record.selected_count)} of {trainer.premask_net.d} inputs, "
        f"train loss {best.record.final_train_loss:.6g}; outputs in {rc.output_dir}"
    )
    return 0


def _overrides(args):
    out = list(args.set or [])
    if args.lam is not None:
        out.append(f"training.lambda={args.lam!r}")
    if args.jobs is not None:
        out.append(f"training.jobs={args.jobs}")
    return out


# -- evaluate / attribute ---------------------------------------------------


def _find_sibling(ckpt, name):
    ckpt = Path(ckpt)
    for d in (ckpt.parent, ckpt.parent.parent):
        if (d / name).exists():
            return d / name
    return None


def _load_scaled(args, d):
    """Dataset at ``args.dataset`` scaled like the checkpoint's training data."""
    schema_path = args.schema or _find_sibling(args.checkpoint, "schema.ini")
    with open(args.dataset, "rb") as fh:
        binary = fh.read(8) == DATA_MAGIC
    schema = None if binary or schema_path is None else read_schema(schema_path)
    if not binary and schema is None:
        schema = None if d is None else DatasetSchema.default(d)
    ds = load_dataset(args.dataset, schema)
    if d is not None and ds.d != d:
        raise ShapeError(f"checkpoint expects {d} inputs, dataset {args.dataset} has {ds.d}")
    scaler_path = args.scaler or _find_sibling(args.checkpoint, "scaler.json")
    if scaler_path is None:
        log.warning("no scaler.json found; using the dataset as-is")
        return ds, None
    scaler = ScalerStats.from_json(Path(scaler_path).read_text())
    if scaler.mean.size != ds.d:
        raise ShapeError(f"scaler has {scaler.mean.size} columns, dataset has {ds.d}")
    return apply_scaler(scaler, ds.replace(split=None)), scaler


def cmd_evaluate(args):
    net, header = load_checkpoint(args.checkpoint)
    ds, _ = _load_scaled(args, net.d)
    pred = net.predict(ds.X, batch_size=args.batch_size)
    report = r2(pred, ds.y, ds.schema.output_name)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(report)
    payload.update(defined=report.defined, checkpoint=str(args.checkpoint), dataset=str(args.dataset), mode=header.mode.value)
    write_json(out / "r2.json", payload)
    groups = ds.groups if ds.groups is not None else np.zeros(ds.n, dtype=np.int64)
    profile_report(pred, ds.y, groups).write_csv(out / "profile.csv")
    shown = "undefined (constant targets)" if report.r2 is None else f"{report.r2:.6f}"
    print(f"R^2 {shown}  MSE {report.mse:.6g}  n {report.n}")
    return 0


def cmd_attribute(args):
    net, _ = load_checkpoint(args.checkpoint)
    ds, scaler = _load_scaled(args, net.d)
    if args.n_samples < 1 or args.background < 1:
        raise UsageError("--n-samples and --background must be >= 1")
    rng = np.random.default_rng(args.seed)
    n = min(args.n_samples, ds.n)
    samples = ds.X[np.sort(rng.choice(ds.n, size=n, replace=False))]
    bg_source = ds.X
    if args.background_data:
        bg_ds, _ = _load_scaled(argparse.Namespace(**{**vars(args), "dataset": args.background_data}), net.d)
        bg_source = bg_ds.X
    bg = background_sample(bg_source, args.background, args.seed)
    method = "exact" if args.exact else "sampled"
    vals = mean_abs_attribution(net, samples, bg, method, args.n_permutations, args.seed)
    if args.physical and scaler is not None:
        vals = vals / scaler.output_scale
    matrix = AttributionMatrix(vals[None, :], ds.schema.input_names, (ds.schema.output_name,), n, f"{len(bg)} rows")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "attribution.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    matrix.write_csv(out)
    top = np.argsort(-vals)[:5]
    print(f"{method} attributions over {n} samples -> {out}")
    print("top inputs: " + ", ".join(f"{ds.schema.input_names[j]}={vals[j]:.4g}" for j in top))
    return 0


# -- compare-masks / inspect ------------------------------------------------


def cmd_compare_masks(args):
    a, b = read_mask(args.mask_a), read_mask(args.mask_b)
    if len(a) != len(b):
        raise ShapeError(f"masks differ in length ({len(a)} vs {len(b)})")
    level_map = None
    if args.levels:
        if len(a) % args.levels:
            raise UsageError(f"--levels {args.levels} does not divide mask length {len(a)}")
        level_map = [j % args.levels for j in range(len(a))]
    b_sel = b.selected
    if args.translate:
        if not args.levels:
            raise UsageError("--translate needs --levels")
        b_sel = translate_indices(b_sel, args.translate, args.levels, len(a) // args.levels)
    bits_b = np.zeros(len(b), dtype=bool)
    bits_b[list(b_sel)] = True
    report = compare_masks(a, BinaryMask(bits_b, b.threshold), level_map)
    if args.out:
        report.write_csv(args.out)
    if args.json:
        write_json(args.json, report)
    jac = "undefined" if report.jaccard is None else f"{report.jaccard:.4f}"
    print(f"jaccard {jac}  only_a {len(report.only_a)}  only_b {len(report.only_b)}  both {len(report.both)}")
    return 0


def _inspect_checkpoint(path):
    net, h = load_checkpoint(path)
    lines = [
        f"checkpoint {path}",
        f"  format version {h.version}, mode {h.mode.value}, seed {h.seed}",
        f"  inputs {h.d}, hidden {list(h.hidden)}",
        f"  slopes {sorted(set('linear' if s == 1.0 else s for s in h.slopes), key=str)}",
        f"  parameters {net.n_params()}",
    ]
    if net.mode is Mode.MASK:
        lines.append(f"  mask threshold {net.mask.threshold!r}, {net.mask.count} of {h.d} inputs kept")
        lines.append(f"  kept {sorted(net.mask.selected)}")
    else:
        m = extract_mask_vector(net).values
        lines.append(f"  input strengths min {m.min():.4g} max {m.max():.4g}")
    return lines


def _inspect_dataset(path):
    ds = load_dataset(path)
    lines = [f"dataset {path}", f"  rows {ds.n}, inputs {ds.d}, split {None if ds.split is None else ds.split.value}"]
    lines.append(f"  output {ds.schema.output_name} (norm constant {ds.schema.output_norm_constant!r})")
    if ds.truth_drivers is not None:
        lines.append(f"  truth drivers {sorted(ds.truth_drivers)}")
    return lines


def _inspect_mask(path):
    m = read_mask(path)
    return [
        f"mask {path}",
        f"  inputs {len(m)}, threshold {m.threshold!r}, kept {m.count}",
        f"  kept {sorted(m.selected)}",
    ]


def _inspect_manifest(path):
    obj = json.loads(Path(path).read_text())
    lines = [f"manifest {path}", f"  command {obj.get('command')}, tool {obj.get('tool_version')}, seed {obj.get('seed')}"]
    stages = obj.get("stages", {})
    order = sorted(stages, key=lambda s: STAGES.index(s) if s in STAGES else len(STAGES))
    for name in order:
        entry = stages[name]
        extra = f" ({entry['error']})" if entry.get("error") else ""
        lines.append(f"  {name:<12} {entry['status']}{extra}, {len(entry['artifacts'])} artifact(s)")
    return lines


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir():
        path = path / RunManifest.FILENAME
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == CKPT_MAGIC:
        lines = _inspect_checkpoint(path)
    elif head == DATA_MAGIC:
        lines = _inspect_dataset(path)
    elif head.lstrip().startswith(b"{"):
        lines = _inspect_manifest(path)
    else:
        lines = _inspect_mask(path)
    print("\n".join(lines))
    return 0


# -- entry point ------------------------------------------------------------


def build_parser():
    p = _Parser(prog="pcmask", description="Two-phase input masking for dense regression networks.")
    p.add_argument("--version", action="version", version=f"pcmask {__version__} ({kernels.BACKEND} kernels)")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic benchmark")
    g.add_argument("spec", help="INI file with a [synthetic] section")
    g.add_argument("--out", help="output directory")
    g.add_argument("--format", choices=("csv", "binary"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="run the pre-mask, sweep and selection stages")
    t.add_argument("config", nargs="?")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", action="store_true", help="skip stages whose artifacts are intact")
    t.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    t.add_argument("--jobs", type=int, help="worker threads for the sweep")
    t.add_argument("--lambda", dest="lam", type=float, help="override [training] lambda")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--stop-after", choices=STAGES, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="R^2 and per-group profile of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--schema")
    e.add_argument("--scaler")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.add_argument("--batch-size", type=int, default=8192)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attribute", parents=[common], help="mean absolute Shapley attributions")
    a.add_argument("checkpoint")
    a.add_argument("dataset")
    a.add_argument("--n-samples", type=int, default=1000)
    a.add_argument("--exact", action="store_true", help="enumerate all coalitions (small d only)")
    a.add_argument("--n-permutations", type=int, default=64)
    a.add_argument("--background", type=int, default=100, help="background rows")
    a.add_argument("--background-data", help="draw the background from this file instead")
    a.add_argument("--physical", action="store_true", help="report in physical output units")
    a.add_argument("--seed", type=int, default=42)
    a.add_argument("--schema")
    a.add_argument("--scaler")
    a.add_argument("--out", help="CSV path")
    a.set_defaults(func=cmd_attribute)

    c = sub.add_parser("compare-masks", parents=[common], help="overlap of two binary masks")
    c.add_argument("mask_a")
    c.add_argument("mask_b")
    c.add_argument("--levels", type=int, help="group inputs by level (index mod LEVELS)")
    c.add_argument("--translate", type=int, default=0, help="move mask B by this many levels first")
    c.add_argument("--out", help="overlap CSV path")
    c.add_argument("--json", help="JSON summary path")
    c.set_defaults(func=cmd_compare_masks)

    i = sub.add_parser("inspect", parents=[common], help="describe a checkpoint, dataset, mask or run directory")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no command given (try --help)")
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except UsageError as exc:
        _fail(exc.code, exc)
        return 2
    except PCMaskError as exc:
        _fail(exc.code, exc)
        return 1
    except (OSError, configparser.Error) as exc:
        _fail("io", exc)
        return 1
    except ValueError as exc:
        _fail("value", exc)
        return 1


def _fail(code, exc):
    msg = " ".join(str(exc).split())
    print(f"error: {code}: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
