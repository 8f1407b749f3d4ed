"""Named machine profiles for the planner, simulator and CLI.

Two reference nodes are shipped: an older 16 GB-class accelerator with a
slow host (``v100-node``) and a current-generation node with a fast host
and wide pinned channel (``h100-node``).  Rates ending in ``_params_per_s``
count float32 parameters per second; ``_bytes_per_s`` rates count bytes on
the half-precision side of conversions or the wire side of copies.
``fast_capacity_bytes`` is the budget for *dynamic* (in-flight) optimizer
state on the fast tier; the working model, gradients and any static
residents are provisioned outside it.
"""

from __future__ import annotations

from .core import SystemProfile

_H100_CAVEAT = (
    "host-side conversion and allocation rates in this profile are "
    "calibrated from mixed-unit sources; absolute times are indicative, "
    "ratios and placement decisions are robust"
)

PROFILES: dict[str, SystemProfile] = {
    "v100-node": SystemProfile(
        name="v100-node",
        channel_params_per_s=3.0e9,  # 12 GB/s pinned, per direction
        fast_update_params_per_s=35.0e9,
        cpu_update_params_per_s=2.0e9,
        cpu_downscale_params_per_s=8.7e9,
        fast_convert_bytes_per_s=0.9e12,
        host_convert_bytes_per_s=30.0e9,
        host_alloc_bytes_per_s=4.0e9,
        pageable_d2h_bytes_per_s=6.0e9,
        pageable_h2d_bytes_per_s=5.5e9,
        fast_capacity_bytes=8_000_000_000,
    ),
    "h100-node": SystemProfile(
        name="h100-node",
        channel_params_per_s=13.75e9,  # 55 GB/s pinned, per direction
        fast_update_params_per_s=100.0e9,
        cpu_update_params_per_s=8.0e9,
        cpu_downscale_params_per_s=15.5e9,
        fast_convert_bytes_per_s=1.2e12,
        host_convert_bytes_per_s=62.0e9,
        host_alloc_bytes_per_s=4.0e9,
        pageable_d2h_bytes_per_s=10.0e9,
        pageable_h2d_bytes_per_s=9.0e9,
        fast_capacity_bytes=16_000_000_000,
        caveat=_H100_CAVEAT,
    ),
}


def get_profile(name: str) -> SystemProfile:
    try:
        return PROFILES[name]
    except KeyError:
        known = ", ".join(sorted(PROFILES))
        raise KeyError(f"unknown profile {name!r}; known profiles: {known}") from None


def list_profiles() -> list[str]:
    return sorted(PROFILES)
