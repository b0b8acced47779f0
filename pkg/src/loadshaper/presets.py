"""Bundled battery models and time-of-use tariffs."""

from __future__ import annotations

import numpy as np

from .model import BatterySpec, Tariff


class UnknownPreset(ValueError):
    """Requested preset name is not bundled."""


class GridMisalignment(ValueError):
    """The slot grid cannot represent the tariff's switching times."""


# capacity kWh, charge peak kW, discharge peak kW
BATTERY_PRESETS: dict[str, tuple[float, float, float]] = {
    "powervault-g200": (4.0, 1.2, 1.4),
    "tesla-powerwall-2": (13.5, 5.0, 5.0),
}

# Switching times in hours from midnight and the price of each window,
# pence per kWh. The overnight off-peak window wraps midnight, so it shows
# up split into a leading and a trailing segment of the day.
TARIFF_PRESETS: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "tide-uk": ((0.0, 6.0, 16.0, 19.0, 23.0, 24.0), (4.99, 11.99, 24.99, 11.99, 4.99)),
}


def preset_battery(name: str) -> BatterySpec:
    """Look up a bundled battery by name."""
    try:
        capacity, charge, discharge = BATTERY_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(BATTERY_PRESETS))
        raise UnknownPreset(f"unknown battery preset {name!r} (known: {known})") from None
    return BatterySpec(capacity_kwh=capacity, charge_peak_kw=charge, discharge_peak_kw=discharge)


def preset_tariff(name: str, slot_hours: float, n_slots: int) -> Tariff:
    """Instantiate a bundled tariff on a concrete slot grid.

    The grid must span exactly the tariff's 24 h day and every switching
    time must fall on a slot boundary; otherwise GridMisalignment is raised.
    """
    try:
        hours, prices = TARIFF_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(TARIFF_PRESETS))
        raise UnknownPreset(f"unknown tariff preset {name!r} (known: {known})") from None
    horizon = n_slots * slot_hours
    if abs(horizon - hours[-1]) > 1e-9:
        raise GridMisalignment(
            f"tariff {name!r} covers {hours[-1]} h but the load spans {horizon} h"
        )
    boundaries = []
    for h in hours:
        slots = h / slot_hours
        rounded = round(slots)
        if abs(slots - rounded) > 1e-9:
            raise GridMisalignment(
                f"switching time {h} h is not a multiple of the {slot_hours} h slot"
            )
        boundaries.append(int(rounded))
    return Tariff(boundaries=np.array(boundaries), prices=np.array(prices))
