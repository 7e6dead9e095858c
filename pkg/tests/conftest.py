import numpy as np
import pytest

from causaltraffic.ckb import AteEntry, CausalKnowledgeBase
from causaltraffic.cpn import ModelConfig, ModelState, init_params
from causaltraffic.data import PERIODS, SyntheticSpec, generate_synthetic
from causaltraffic.graph import RoadGraph
from causaltraffic.windows import build_windows


def small_ckb(tau=-10.0):
    return CausalKnowledgeBase.from_entries(
        AteEntry("Accident", p, tau, 0.5, 40, 1e-6) for p in PERIODS)


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(segment_count=4, horizon_days=2, event_rate=4.0, random_seed=3,
                         event_types=("Accident",),
                         injected_effects={"Accident": {p: -10.0 for p in PERIODS}})
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def tiny_windows(tiny_data):
    ds = tiny_data
    cfg = ModelConfig(lookback=6, horizon=2, hidden=8, layers=1, heads=2, neighbors=2)
    graph = RoadGraph.from_edges(ds.edges, [s.segment_id for s in ds.series])
    return build_windows(ds.series, ds.records, small_ckb(), graph, cfg)


def fresh_state(windows, seed=0):
    cfg = windows.config
    return ModelState(cfg, init_params(cfg, np.random.default_rng(seed)), windows.normalizer)
