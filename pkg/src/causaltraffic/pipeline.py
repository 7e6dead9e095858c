"""Configuration and the end-to-end steps shared by the CLI and demos."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .ckb import CausalKnowledgeBase
from .ckb.build import BuildReport, CkbConfig, build_ckb
from .cpn import ModelConfig, ModelState, init_params, load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_PERIODS,
    DataError,
    PeriodBins,
    SyntheticDataset,
    SyntheticSpec,
    generate_synthetic,
    injected_effects,
    load_speed_csv,
    read_ledger,
)
from .evaluation import ablation_compare, sign_agreement
from .events import read_records
from .features import DEFAULT_LAMBDA
from .graph import RoadGraph, load_graph
from .training import TrainConfig, TrainResult, progressive_train
from .windows import WindowSet, build_windows


def ckb_config_from_dict(d: dict) -> CkbConfig:
    d = dict(d)
    unknown = set(d) - {f.name for f in fields(CkbConfig)}
    if unknown:
        raise ValueError(f"unknown ckb config fields: {sorted(unknown)}")
    if "periods" in d:
        d["periods"] = PeriodBins.from_dict(d["periods"])
    cfg = CkbConfig(**d)
    cfg.validate()
    return cfg


@dataclass
class PipelineConfig:
    """Everything a run needs besides the data itself."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ckb: CkbConfig = field(default_factory=CkbConfig)
    synthetic: SyntheticSpec | None = None
    # optional separate dataset for the knowledge base: overrides applied to ``synthetic``
    ckb_source: dict | None = None
    lam: float = DEFAULT_LAMBDA
    periods: PeriodBins = DEFAULT_PERIODS
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "train": self.train.to_dict(), "ckb": self.ckb.to_dict(),
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "ckb_source": self.ckb_source, "lambda": self.lam, "periods": self.periods.to_dict(),
            "seed": self.seed, "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {"model", "train", "ckb", "synthetic", "ckb_source", "lambda", "periods", "seed", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config sections: {sorted(unknown)}")
        out = cls()
        if "model" in d:
            out.model = ModelConfig.from_dict(d["model"])
        if "train" in d:
            out.train = TrainConfig.from_dict(d["train"])
        if "ckb" in d:
            out.ckb = ckb_config_from_dict(d["ckb"])
        if d.get("synthetic") is not None:
            out.synthetic = SyntheticSpec.from_dict(d["synthetic"])
        out.ckb_source = d.get("ckb_source")
        out.lam = float(d.get("lambda", DEFAULT_LAMBDA))
        if "periods" in d:
            out.periods = PeriodBins.from_dict(d["periods"])
        out.seed = int(d.get("seed", 0))
        out.paths = dict(d.get("paths", {}))
        if not out.lam > 0:
            raise ValueError("lambda must be positive")
        return out

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"config not found: {path}") from None
        return cls.from_dict(doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def bundled_config(name: str) -> PipelineConfig:
    """``benchmark`` (50-segment synthetic run) or ``train`` (full-size defaults)."""
    text = resources.files(__package__).joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return PipelineConfig.from_dict(json.loads(text))


# -- data directories ---------------------------------------------------------

@dataclass
class DataDir:
    root: Path

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"missing input file: {p}")
        return p

    def series(self):
        return load_speed_csv(self.require("speeds.csv"))

    def records(self):
        return read_records(self.require("records.jsonl"))

    def graph(self, segment_ids, path=None):
        p = Path(path) if path else self.path("edges.csv")
        return load_graph(p, segment_ids) if p.exists() else None


def make_windows(series, records, ckb, graph, cfg: PipelineConfig) -> WindowSet:
    return build_windows(series, records, ckb, graph, cfg.model, cfg.lam, cfg.periods)


def train_model(windows: WindowSet, cfg: PipelineConfig, log_path=None, on_epoch=None) -> TrainResult:
    state = ModelState(cfg.model, init_params(cfg.model, np.random.default_rng(cfg.train.seed)),
                       windows.normalizer)
    return progressive_train(state, windows, cfg.train, log_path=log_path, on_epoch=on_epoch)


def save_run(out_dir, result: TrainResult, cfg: PipelineConfig, ckb: CausalKnowledgeBase) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result.state)
    ckb.save(out / "ckb.json")
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")


def load_run(ckpt_dir, ckb_path=None):
    """Checkpoint, knowledge base and config saved by :func:`save_run`."""
    state = load_checkpoint(ckpt_dir)
    root = Path(ckpt_dir) if Path(ckpt_dir).is_dir() else Path(ckpt_dir).parent
    ckb_file = Path(ckb_path) if ckb_path else root / "ckb.json"
    if not ckb_file.exists():
        raise DataError(f"knowledge base not found: {ckb_file}")
    ckb = CausalKnowledgeBase.load(ckb_file)
    cfg = PipelineConfig.load(root / "config.json") if (root / "config.json").exists() else PipelineConfig()
    cfg.model = state.config
    return state, ckb, cfg


# -- the synthetic benchmark ---------------------------------------------------

def ckb_source_dataset(cfg: PipelineConfig, seed: int) -> SyntheticDataset:
    """Separate segments used only to estimate the knowledge base."""
    src = dict(cfg.ckb_source or {})
    offset = int(src.pop("seed_offset", 1000))
    spec = replace(cfg.synthetic, random_seed=seed + offset, **src)
    return generate_synthetic(spec)


@dataclass
class BenchmarkResult:
    seed: int
    ablation: dict
    sign_agreement: float
    sign_windows: int
    mae_causal: float
    mae_neutral: float
    ckb_report: BuildReport
    log: list
    seconds: dict

    @property
    def improved(self) -> bool:
        return self.mae_causal < self.mae_neutral


def run_benchmark(cfg: PipelineConfig, seed: int, on_epoch=None) -> BenchmarkResult:
    """Generate, estimate the knowledge base on separate segments, train and
    compare against the neutral-feature ablation on the test split."""
    if cfg.synthetic is None:
        raise ValueError("benchmark config needs a synthetic section")
    t0 = time.perf_counter()
    source = ckb_source_dataset(cfg, seed)
    ckb, report = build_ckb(source.records, source.series, replace(cfg.ckb, seed=seed))
    t1 = time.perf_counter()
    ds = generate_synthetic(replace(cfg.synthetic, random_seed=seed))
    graph = RoadGraph.from_edges(ds.edges, [s.segment_id for s in ds.series])
    run_cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    windows = make_windows(ds.series, ds.records, ckb, graph, run_cfg)
    result = train_model(windows, run_cfg, on_epoch=on_epoch)
    t2 = time.perf_counter()
    test = windows.windows["test"]
    rep, preds = ablation_compare(result.state, windows, test)
    effect = ds.effect_matrix()
    trows = test[:, 1:2] + np.arange(1, cfg.model.horizon + 1)
    share, n = sign_agreement(preds.a_causal, effect[test[:, 0:1], trows], mask=preds.event)
    return BenchmarkResult(seed, rep.to_dict(), share, n, rep.causal.mae, rep.neutral.mae, report,
                           result.log, {"ckb": t1 - t0, "train": t2 - t1,
                                        "evaluate": time.perf_counter() - t2})


def ledger_effects(data: DataDir, windows: WindowSet, pairs) -> np.ndarray | None:
    """Injected effect over each window's horizon when the data directory
    carries a generator ledger, else ``None``."""
    lp, sp = data.path("ledger.json"), data.path("spec.json")
    if not (lp.exists() and sp.exists()):
        return None
    spec = SyntheticSpec.load(sp)
    series = data.series()
    eff = injected_effects(series, read_ledger(lp), spec)
    idx = {s.segment_id: i for i, s in enumerate(series)}
    rows = np.array([idx[s] for s in windows.segment_ids])
    trows = pairs[:, 1:2] + np.arange(1, windows.config.horizon + 1)
    return eff[rows[pairs[:, 0:1]], trows]
