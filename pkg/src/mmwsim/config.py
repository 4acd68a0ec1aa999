"""Read and write flat ``key = value`` parameter cards.

A card is an INI file whose section names mirror the dataclasses they
populate, e.g.::

    [BandParameters]
    carrier_freq = 28.0
    nlos_alpha = 72.0
    ...

A ``[BandParameters]`` section may instead hold a single ``preset = name``
line, optionally followed by fields that override the preset.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .channel_model import PRESETS, BandParameters, get_preset

BAND_SECTION = "BandParameters"


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep field names case-sensitive
    return cp


def read_card(path) -> configparser.ConfigParser:
    cp = _parser()
    text = Path(path).read_text(encoding="utf-8")
    cp.read_string(text, source=str(path))
    return cp


def band_from_section(section) -> BandParameters:
    values = dict(section)
    preset = values.pop("preset", None)
    base = get_preset(preset) if preset else None
    names = BandParameters.field_names()
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"unknown BandParameters fields: {sorted(unknown)}")
    kwargs = {k: float(v) for k, v in values.items()}
    if base is not None:
        return base.replace(**kwargs)
    missing = [n for n in names if n not in kwargs]
    if missing:
        raise ValueError(f"missing BandParameters fields: {missing}")
    return BandParameters(**kwargs, name="card")


def load_band(spec: str) -> BandParameters:
    """Resolve a preset name or a card path into :class:`BandParameters`."""
    if spec in PRESETS:
        return PRESETS[spec]
    cp = read_card(spec)
    if BAND_SECTION not in cp:
        raise ValueError(f"{spec}: no [{BAND_SECTION}] section")
    band = band_from_section(cp[BAND_SECTION])
    return dataclasses.replace(band, name=str(spec))


def format_card(sections: dict[str, dict]) -> str:
    cp = _parser()
    for name, values in sections.items():
        cp[name] = {k: _fmt(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def format_band_card(band: BandParameters) -> str:
    values = {n: getattr(band, n) for n in BandParameters.field_names()}
    return format_card({BAND_SECTION: values})


def save_band_card(band: BandParameters, path) -> None:
    Path(path).write_text(format_band_card(band), encoding="utf-8")
