"""Toolkit config file: flat key/value sections (INI) mapped onto dataclasses."""
from __future__ import annotations

import configparser
from importlib import resources
from pathlib import Path

from .core import ConfigError
from .indicators import VoltageWindow
from .pipeline import IndicatorConfig
from .segmentation import PeakConfig


def default_config_text() -> str:
    return resources.files("sohkit.data").joinpath("default.ini").read_text()


def load_config(path=None) -> IndicatorConfig:
    """Parse a toolkit config file; missing keys fall back to the defaults."""
    parser = configparser.ConfigParser()
    parser.read_string(default_config_text())
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None

    try:
        w = parser["windows"]
        charge = VoltageWindow(w.getfloat("charge_v_start"), w.getfloat("charge_v_end"), "rising")
        discharge = VoltageWindow(w.getfloat("discharge_v_start"), w.getfloat("discharge_v_end"), "falling")
        impedance = VoltageWindow(w.getfloat("impedance_v_start"), w.getfloat("impedance_v_end"), "rising")
        p = parser["peaks"]
        peaks = PeakConfig(
            i_step_min_A=p.getfloat("i_step_min_A"),
            w_step=p.getint("w_step"),
            hold_min=p.getint("hold_min"),
            baseline_len=p.getint("baseline_len"),
        )
        return IndicatorConfig(
            charge_window=charge,
            discharge_window=discharge,
            impedance_window=impedance,
            peaks=peaks,
            tau_max_s=parser["autocorrelation"].getfloat("tau_max_s"),
            outlier_decades=parser["outliers"].getfloat("threshold_decades"),
            nominal_capacity_Ah=parser["cell"].getfloat("nominal_capacity_Ah"),
            target=parser["estimation"].get("target"),
            exit_policy=parser["windows"].get("exit_policy"),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
