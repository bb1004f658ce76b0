"""Unit conventions and the single headway conversion point.

Internal units are kilometres, minutes and vehicles: speeds are km/min,
flows veh/min, densities veh/km.  Headways are expressed in *seconds* at
every public interface (CLI flags, network documents, headway fields) and
converted to minutes here, in exactly one place, so no other module carries
a stray factor of 60.
"""

SECONDS_PER_MINUTE = 60.0


def headway_s_to_min(h_seconds):
    """Convert a headway (scalar or array) from seconds to minutes."""
    return h_seconds / SECONDS_PER_MINUTE


def headway_min_to_s(h_minutes):
    """Convert a headway (scalar or array) from minutes to seconds."""
    return h_minutes * SECONDS_PER_MINUTE
