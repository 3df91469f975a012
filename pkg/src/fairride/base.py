"""Shared record types and exceptions."""

from __future__ import annotations

from dataclasses import dataclass

# Driver location while travelling on an edge (g_v = -1).
IN_TRANSIT = -1


class InputError(ValueError):
    """Bad user-supplied data: unknown node, malformed file, bad parameter."""


class InfeasibleAssignment(ValueError):
    """A driver/request pair with an unreachable leg."""


class TrainingError(RuntimeError):
    """Numerical failure during learning (non-finite loss or update)."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True, slots=True)
class Request:
    id: int
    t: int
    s: int
    d: int
