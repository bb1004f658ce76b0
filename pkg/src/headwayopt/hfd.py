"""Headway-dependent fundamental diagram of an automated-vehicle link.

All vehicles keep the same time headway h on a link, so spacing is
h*v + L_veh and the flow-density relation has two branches:

    f(rho) = v_f * rho                 for rho <  1/(h*v_f + L)   (free)
    f(rho) = (1 - rho*L) / h           for rho >= 1/(h*v_f + L)   (congested)

which meet continuously at the critical density 1/(h*v_f + L).  A larger
headway shrinks the free-flow region, lowers the peak flow v_f/(h*v_f+L)
and slows the backward propagation of freed space.

Headways are seconds at the interface (converted here), speeds km/min,
densities veh/km, flows veh/min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .network import LinkParams
from .units import headway_s_to_min


class DomainError(ValueError):
    """Input outside the physical domain (for example rho above jam)."""


class RegimeError(RuntimeError):
    """No fundamental-diagram branch is consistent with the given state."""


@dataclass(frozen=True)
class FdEval:
    """One evaluation of the fundamental diagram."""

    density: float        # veh/km
    headway_s: float
    flow: float           # veh/min
    regime: int           # 0 free, 1 congested


def critical_density(h_s: float, free_flow_speed: float, veh_len_km: float) -> float:
    """Density at the free/congested branch boundary, 1/(h*v_f + L)."""
    h = headway_s_to_min(h_s)
    return 1.0 / (h * free_flow_speed + veh_len_km)


def flow_fd(rho: float, h_s: float, link: LinkParams, veh_len_km: float) -> float:
    """Evaluate the piecewise flow-density relation at density rho."""
    if rho < -1e-12:
        raise DomainError(f"negative density {rho}")
    jam = 1.0 / veh_len_km
    if rho > jam * (1 + 1e-12):
        raise DomainError(f"density {rho} above jam density {jam}")
    h = headway_s_to_min(h_s)
    rho_c = critical_density(h_s, link.free_flow_speed, veh_len_km)
    if rho < rho_c:
        return link.free_flow_speed * rho
    return (1.0 - rho * veh_len_km) / h


def fd_eval(rho: float, h_s: float, link: LinkParams, veh_len_km: float) -> FdEval:
    rho_c = critical_density(h_s, link.free_flow_speed, veh_len_km)
    return FdEval(
        density=rho,
        headway_s=h_s,
        flow=flow_fd(rho, h_s, link, veh_len_km),
        regime=0 if rho < rho_c else 1,
    )


def max_flow(h_s: float, free_flow_speed: float, veh_len_km: float) -> float:
    """Peak of the diagram, v_f / (h*v_f + L), attained at critical density."""
    return free_flow_speed * critical_density(h_s, free_flow_speed, veh_len_km)


def shockwave_steps(h_s: float, dt_min: float, veh_len_km: float, length_km: float) -> int:
    """Intervals needed for freed space to travel back across the link.

    Returns the unique integer n with

        n * dt * L / h     <= length
        (n+1) * dt * L / h >  length

    i.e. floor(length*h / (dt*L)), where the boundary case of an exact
    integer ratio keeps the lower count.  Requires dt*L < length*h so the
    count is at least one; otherwise the shockwave would resolve within a
    single interval and the discretization is too coarse.
    """
    h = headway_s_to_min(h_s)
    cell = dt_min * veh_len_km
    if not cell < length_km * h:
        raise DomainError(
            f"dt*L = {cell:.6g} >= length*h = {length_km * h:.6g}: shockwave "
            "resolves within one interval")
    ratio = length_km * h / cell
    n = int(math.floor(ratio + 1e-9))
    # guard against float rounding on either side of the defining inequalities
    while n * cell > length_km * h * (1 + 1e-12):
        n -= 1
    while (n + 1) * cell <= length_km * h * (1 - 1e-12):
        n += 1
    return n


def density_update(rho_prev: float, u: float, f: float, dt_min: float,
                   length_km: float, veh_len_km: float | None = None) -> float:
    """One-interval density recursion rho + dt*(u - f)/length."""
    if rho_prev < -1e-12 or u < -1e-12 or f < -1e-12:
        raise DomainError("negative input to density update")
    rho = rho_prev + dt_min * (u - f) / length_km
    if rho < -1e-9:
        raise DomainError(f"density update produced {rho} < 0 (outflow exceeds content)")
    if veh_len_km is not None and rho > 1.0 / veh_len_km + 1e-9:
        raise DomainError(f"density update produced {rho} above jam density")
    return max(rho, 0.0)


def resolve_regime(rho_prev: float, u: float, h_s: float, link: LinkParams,
                   dt_min: float, veh_len_km: float) -> tuple[int, float, float]:
    """Solve the coupled FD / density-update pair for one interval.

    Given the previous density and the inflow during the interval, the flow
    leaving the flow area and the new density satisfy simultaneously the
    density recursion and the branch equality of the diagram.  Closed forms:

      free:       f = (len*v_f*rho_prev + dt*v_f*u) / (len + dt*v_f)
      congested:  f = (len - L*len*rho_prev - L*dt*u) / (len*h - L*dt)

    The branch whose resulting density lies in its own validity range is
    selected; a density exactly at the breakpoint reports congested.
    Returns (regime, flow, new_density).
    """
    h = headway_s_to_min(h_s)
    v_f = link.free_flow_speed
    length = link.length_km
    rho_c = critical_density(h_s, v_f, veh_len_km)
    jam = 1.0 / veh_len_km

    denom_free = length + dt_min * v_f
    f_free = (length * v_f * rho_prev + dt_min * v_f * u) / denom_free
    rho_free = (length * rho_prev + dt_min * u) / denom_free
    if rho_free < rho_c:
        return 0, f_free, rho_free

    denom_cong = length * h - veh_len_km * dt_min
    if denom_cong <= 0:
        raise RegimeError(
            f"length*h - L*dt = {denom_cong:.6g} <= 0: discretization condition violated")
    f_cong = (length - veh_len_km * length * rho_prev - veh_len_km * dt_min * u) / denom_cong
    rho_cong = (h * length * rho_prev + h * dt_min * u - dt_min) / denom_cong
    tol = 1e-9 * max(1.0, rho_c)
    if rho_cong >= rho_c - tol and rho_cong <= jam + tol and f_cong >= -1e-9:
        return 1, max(f_cong, 0.0), min(rho_cong, jam)
    raise RegimeError(
        f"no consistent branch: rho_free={rho_free:.6g}, rho_cong={rho_cong:.6g}, "
        f"rho_c={rho_c:.6g} (rho_prev={rho_prev:.6g}, u={u:.6g}, h={h_s:.3g}s)")
