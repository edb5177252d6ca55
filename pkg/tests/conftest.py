import pytest

from sohkit.pipeline import IndicatorConfig, extract_indicators
from sohkit.simulator import (CellSpec, OcvModel, iter_campaign_cycles, rpt_records,
                              simulate_campaign, five_cell_specs)


class Campaign:
    """In-memory simulated campaign bundle shared by tests."""

    def __init__(self, specs, plans, seed):
        self.specs = specs
        self.plans = plans
        self.seed = seed
        self.records = []
        self.truths = {s.cell_id: [] for s in specs}
        for _, rec, truth in iter_campaign_cycles(specs, plans, seed):
            self.records.append(rec)
            self.truths[truth.cell_id].append(truth)
        self.rpts = []
        for spec, plan in zip(specs, plans):
            self.rpts.extend(rpt_records(spec, plan))
        self.ocv_charge, self.ocv_discharge = OcvModel(specs[0].hysteresis_scale).curves()


@pytest.fixture(scope="session")
def small_campaign():
    """Five cells, 24 cycles each, 1 mV voltage noise."""
    specs = five_cell_specs(sigma_v_V=0.001)
    return Campaign(specs, [[8, 8, 8]] * 5, seed=42)


@pytest.fixture(scope="session")
def small_indicators(small_campaign):
    cfg = IndicatorConfig()
    return extract_indicators(small_campaign.records, cfg, small_campaign.ocv_charge,
                              on_error="raise")


@pytest.fixture(scope="session")
def clean_cycle():
    """One noise-free C/2 cycle with its ground truth."""
    from sohkit.simulator import simulate_cycle
    spec = CellSpec("NF", 0.5)
    return simulate_cycle(spec, 1, (7, 1))


@pytest.fixture(scope="session")
def disk_campaign(tmp_path_factory):
    """Tiny two-cell campaign written to disk for CLI tests."""
    out = tmp_path_factory.mktemp("campaign")
    specs = [CellSpec("W8", 0.5, sigma_v_V=0.001), CellSpec("W9", 1.0, sigma_v_V=0.001)]
    campaign = simulate_campaign(specs, [[3, 3], [3, 3]], seed=5, out_dir=out)
    return out, campaign
