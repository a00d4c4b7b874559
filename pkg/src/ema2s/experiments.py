"""Experiment orchestration: corpus -> training -> synthesis -> evaluation.

A run directory looks like::

    config.yaml            fully resolved configuration (re-runnable)
    corpus/                generated corpus (unless an existing one is given)
    stage1/                epoch_NNNN.ckpt, final.ckpt, loss.csv
    stage2/                same layout
    synth/<id>.f32(.json)  mel-spectrograms for an external vocoder
    synth/<id>.wav         phase-reconstructed waveforms
    metrics.csv, metrics.json
"""

import copy
import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigurationError, StageError
from .features import FEWER_SENSORS, SENSORS
from .fileio import load_checkpoint, save_checkpoint, write_json, write_loss_log
from .metrics import MetricsReport, evaluate_run, make_transcriber
from .model import ArchitectureConfig
from .synthdata import SyntheticCorpusConfig, build_corpus, load_corpus
from .training import VARIANTS, TrainConfig, evaluate_loss, get_variant, train_stage1, train_stage2

logger = logging.getLogger(__name__)

SENSOR_PRESETS = {"all": SENSORS, "fewer": FEWER_SENSORS}

ARCH_PRESETS = {
    "paper": {},
    "desk": {
        "spec_hidden": [48, 64],
        "ema_hidden": [32, 64],
        "decoder_hidden": [64, 64, 64],
        "spec_embed_width": 64,
        "ema_embed_width": 64,
    },
}

DEFAULTS = {
    "variant": "EMA2S",
    "sensors": "all",
    "architecture": "paper",
    "corpus": SyntheticCorpusConfig().to_dict(),
    "corpus_dir": None,
    "train": TrainConfig().to_dict(),
    "stage1_epochs": None,
    "mel": {"n_mels": 80, "fmin": 0.0, "fmax": 8000.0, "sample_rate": 16000},
    "metrics": {"transcriber": "identity", "order": 24, "gl_iterations": 60, "corrupt_rate": 0.1},
    "out": "runs/ema2s",
}


def parse_sensors(value):
    """``"all"``, ``"fewer"``, a comma list or a sequence -> tuple of labels."""
    if isinstance(value, str):
        if value in SENSOR_PRESETS:
            return tuple(SENSOR_PRESETS[value])
        value = [v.strip() for v in value.split(",") if v.strip()]
    sensors = tuple(value)
    if not sensors:
        raise ConfigurationError("sensor subset is empty")
    unknown = [s for s in sensors if s not in SENSORS]
    if unknown:
        raise ConfigurationError(f"unknown sensors {unknown}; valid labels are {list(SENSORS)}")
    if len(set(sensors)) != len(sensors):
        raise ConfigurationError("duplicate sensors in subset")
    return sensors


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; build with :meth:`from_dict`."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d=None):
        unknown = set(d or {}) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def with_overrides(self, **kwargs):
        """Copy with CLI-style overrides (``seed``, ``variant``, ``sensors``, ``out``, ``corpus_dir``)."""
        raw = copy.deepcopy(self.raw)
        for key, value in kwargs.items():
            if value is None:
                continue
            if key == "seed":
                raw["train"]["seed"] = int(value)
                raw["corpus"]["seed"] = int(value)
            elif key in ("variant", "sensors", "out", "corpus_dir", "architecture", "stage1_epochs"):
                raw[key] = value
            else:
                raise ConfigurationError(f"unsupported override {key!r}")
        return ExperimentConfig.from_dict(raw)

    def validate(self):
        get_variant(self.raw["variant"])
        self.sensors
        self.corpus_config
        self.train_config
        self.arch
        if self.raw["corpus_dir"] is not None and not (Path(self.raw["corpus_dir"]) / "manifest.json").exists():
            raise ConfigurationError(f"corpus directory {self.raw['corpus_dir']} has no manifest.json")

    @property
    def variant(self):
        return get_variant(self.raw["variant"])

    @property
    def sensors(self):
        return parse_sensors(self.raw["sensors"])

    @property
    def corpus_config(self):
        return SyntheticCorpusConfig(**self.raw["corpus"])

    @property
    def train_config(self):
        return TrainConfig(**self.raw["train"])

    @property
    def stage1_train_config(self):
        epochs = self.raw["stage1_epochs"]
        tc = self.train_config
        return tc if epochs is None else TrainConfig(**{**tc.to_dict(), "epochs": int(epochs)})

    @property
    def ema_width(self):
        """Context-windowed EMA width: 5 frames x coordinates x sensors."""
        return 5 * self.raw["corpus"].get("dims", 2) * len(self.sensors)

    @property
    def arch(self):
        spec = self.raw["architecture"]
        if isinstance(spec, str):
            if spec not in ARCH_PRESETS:
                raise ConfigurationError(f"unknown architecture preset {spec!r}")
            spec = ARCH_PRESETS[spec]
        return ArchitectureConfig(**{**spec, "ema_width": self.ema_width})

    @property
    def out(self):
        return Path(self.raw["out"])

    def resolved(self):
        """Plain dict with presets expanded, suitable for the run snapshot."""
        raw = copy.deepcopy(self.raw)
        raw["sensors"] = list(self.sensors)
        raw["architecture"] = self.arch.to_dict()
        raw["corpus"] = self.corpus_config.to_dict()
        raw["train"] = self.train_config.to_dict()
        raw["out"] = str(self.raw["out"])
        return raw

    def to_yaml(self):
        return yaml.safe_dump(self.resolved(), sort_keys=True)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def _epoch_saver(directory, every):
    def save(epoch, ckpt):
        if every and epoch % every == 0:
            save_checkpoint(directory / f"epoch_{epoch:04d}.ckpt", ckpt)

    return save


def prepare_corpus(config, out):
    """Return the corpus directory, generating it under ``out`` when needed."""
    if config.raw["corpus_dir"] is not None:
        return Path(config.raw["corpus_dir"])
    corpus_dir = out / "corpus"
    if not (corpus_dir / "manifest.json").exists():
        _stage("gen-corpus", build_corpus, config.corpus_config, corpus_dir)
    return corpus_dir


def train_run(config, out=None):
    """Corpus + both training stages; returns ``(out, stage1, stage2, train, test)``."""
    out = Path(out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.to_yaml())
    corpus_dir = prepare_corpus(config, out)
    train = _stage("load-corpus", load_corpus, corpus_dir, "train", config.sensors)
    test = _stage("load-corpus", load_corpus, corpus_dir, "test", config.sensors)
    width = train.examples[0].ema.shape[1]
    if width != config.ema_width:
        raise StageError("load-corpus", f"EMA feature width {width} != expected {config.ema_width}")
    variant = config.variant
    mel = config.raw["mel"]
    stage1 = None
    if variant.stage1_enabled:
        d1 = out / "stage1"
        d1.mkdir(exist_ok=True)
        tc = config.stage1_train_config
        stage1 = _stage("train-stage1", train_stage1, train.examples, tc, variant, config.arch, mel,
                        _epoch_saver(d1, tc.checkpoint_every))
        save_checkpoint(d1 / "final.ckpt", stage1)
        write_loss_log(d1 / "loss.csv", stage1.loss_history)
    d2 = out / "stage2"
    d2.mkdir(exist_ok=True)
    tc = config.train_config
    stage2 = _stage("train-stage2", train_stage2, train.examples, tc, variant, stage1, config.arch, mel,
                    _epoch_saver(d2, tc.checkpoint_every))
    save_checkpoint(d2 / "final.ckpt", stage2)
    write_loss_log(d2 / "loss.csv", stage2.loss_history)
    return out, stage1, stage2, train, test


def evaluate_checkpoint(config, checkpoint, test, out):
    """Synthesize and score the test split; writes synth/ and metrics files."""
    m = config.raw["metrics"]
    transcriber = make_transcriber(
        m["transcriber"], test.transcripts,
        **({"rate": m["corrupt_rate"], "seed": config.train_config.seed} if m["transcriber"] == "corrupt" else {}),
    )
    synth_dir = out / "synth"
    synth_dir.mkdir(parents=True, exist_ok=True)
    val = evaluate_loss(test.examples, checkpoint)
    report = evaluate_run(test, checkpoint, transcriber, m["gl_iterations"], m["order"],
                          metadata={"val_l_spec": val.l_spec, "val_total": val.total},
                          mel_dir=synth_dir, wav_dir=synth_dir)
    report.save(out)
    return report


def run_experiment(config):
    """Full pipeline for one variant; returns the run directory."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    out, _, stage2, _, test = train_run(config)
    _stage("evaluate", evaluate_checkpoint, config, stage2, test, out)
    return out


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

COLUMNS = ("mcd_db", "pesq", "stoi", "ccr")
LOWER_IS_BETTER = {"mcd_db"}


@dataclass
class ComparisonTable:
    rows: list
    warnings: list = field(default_factory=list)

    def best(self):
        """Column -> name of the best row (``pesq`` is never ranked)."""
        out = {}
        for col in ("mcd_db", "stoi", "ccr"):
            scored = [(r[col], r["name"]) for r in self.rows if r.get(col) is not None]
            if scored:
                pick = min(scored) if col in LOWER_IS_BETTER else max(scored, key=lambda t: (t[0], ""))
                out[col] = pick[1]
        return out

    def row(self, name):
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)

    def to_markdown(self):
        best = self.best()
        lines = ["| System | Loss | E_spec | MCD | PESQ | STOI | CCR |", "|---|---|---|---|---|---|---|"]
        for r in self.rows:
            cells = []
            for col in COLUMNS:
                v = r.get(col)
                text = "-" if v is None else f"{v:.3f}"
                if best.get(col) == r["name"]:
                    text = f"**{text}**"
                cells.append(text)
            spec_enc = {True: "yes", False: "no"}.get(r.get("uses_spectral_encoder"), "?")
            name = r["name"] + (" (failed)" if r.get("status") == "failed" else "")
            lines.append(f"| {name} | {r.get('loss_columns', '')} | {spec_enc} | " + " | ".join(cells) + " |")
        for w in self.warnings:
            lines.append(f"\nWARNING: {w}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["name", "status", "loss_columns", "uses_spectral_encoder", *COLUMNS, "val_l_spec", "corpus_hash"]
        writer.writerow(header)
        for r in self.rows:
            writer.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                             for k in header])
        return buf.getvalue()

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(self.to_csv())
        (out / "comparison.md").write_text(self.to_markdown())
        write_json(out / "comparison.json", {"rows": self.rows, "warnings": self.warnings, "best": self.best()})


def _row_from_report(name, report, variant=None):
    agg = report.aggregate
    v = VARIANTS.get(variant or report.metadata.get("variant", ""))
    return {
        "name": name,
        "status": "ok",
        "loss_columns": v.loss_columns if v else "",
        "uses_spectral_encoder": v.uses_spectral_encoder if v else None,
        "mcd_db": agg["mcd_db"],
        "pesq": None,
        "stoi": agg["stoi"],
        "ccr": agg["ccr"],
        "val_l_spec": report.metadata.get("val_l_spec"),
        "corpus_hash": report.metadata.get("corpus_hash", ""),
        "failures": agg["failures"],
    }


def run_ablation(base, variants=("S_I", "S_II", "S_III", "EMA2S")):
    """Train and evaluate each variant on one shared corpus with shared seeds.

    Each variant trains its own stage 1 according to its loss column.
    Results land in ``<out>/<variant>/`` and ``<out>/comparison.*``.
    """
    if not isinstance(base, ExperimentConfig):
        base = ExperimentConfig.from_dict(base)
    variants = list(variants)
    if len(variants) < 2:
        raise ConfigurationError("an ablation needs at least two variants")
    for v in variants:
        get_variant(v)
    out = base.out
    out.mkdir(parents=True, exist_ok=True)
    corpus_dir = prepare_corpus(base, out)
    rows = []
    for name in variants:
        cfg = base.with_overrides(variant=name, out=str(out / name), corpus_dir=str(corpus_dir))
        try:
            run_dir = run_experiment(cfg)
            rows.append(_row_from_report(name, MetricsReport.load(run_dir / "metrics.json"), name))
        except Exception as exc:  # noqa: BLE001 - a failed variant becomes a failed row
            logger.error("variant %s failed: %s", name, exc)
            v = get_variant(name)
            rows.append({"name": name, "status": "failed", "error": str(exc), "loss_columns": v.loss_columns,
                         "uses_spectral_encoder": v.uses_spectral_encoder, "mcd_db": None, "pesq": None,
                         "stoi": None, "ccr": None, "val_l_spec": None, "corpus_hash": ""})
    table = ComparisonTable(rows)
    table.save(out)
    return table


def compare_reports(paths):
    """Merge saved metrics reports (``metrics.json`` or run directories) into one table."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigurationError("compare needs at least one report")
    rows, warnings = [], []
    for p in paths:
        target = p / "metrics.json" if p.is_dir() else p
        try:
            report = MetricsReport.load(target)
        except Exception as exc:  # noqa: BLE001 - unreadable reports are skipped
            warnings.append(f"skipped unreadable report {target}: {exc}")
            continue
        name = report.metadata.get("variant") or target.parent.name
        if any(r["name"] == name for r in rows):
            name = f"{name} ({target.parent.name})"
        rows.append(_row_from_report(name, report))
    if not rows:
        raise ConfigurationError("none of the given reports could be read")
    hashes = {r["corpus_hash"] for r in rows}
    if len(hashes) > 1:
        warnings.append(f"reports come from {len(hashes)} different corpora; rows are not comparable")
    return ComparisonTable(rows, warnings)


def load_run_checkpoint(run_dir):
    return load_checkpoint(Path(run_dir) / "stage2" / "final.ckpt")


def run_config(run_dir):
    return ExperimentConfig.from_dict(yaml.safe_load((Path(run_dir) / "config.yaml").read_text()))
