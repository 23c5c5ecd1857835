"""Aggregate event-driven engine (counts per site, not per-ball identities)."""
from .core import (
    ConservativeFragment,
    RunFragment,
    box_sites,
    colour_change_count,
    init_bernoulli,
    run_conservative,
    run_until,
    step,
)
from .state import (
    Budget,
    EngineError,
    EventRecord,
    Extinct,
    LatticeState,
    Overflow,
    SimClock,
    TriState,
    TrustRegion,
)
