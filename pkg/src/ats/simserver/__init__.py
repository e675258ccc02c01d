"""CLI and live-session service around the behavior stack."""

from .cli import main
from .service import (
    PROTOCOL_VERSION,
    Service,
    Session,
    SessionError,
    create_app,
    generate_window,
    resample_observer,
    step_seed,
)

__all__ = [
    "PROTOCOL_VERSION",
    "Service",
    "Session",
    "SessionError",
    "create_app",
    "generate_window",
    "main",
    "resample_observer",
    "step_seed",
]
