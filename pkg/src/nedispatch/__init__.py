"""Non-exclusive ride-hailing dispatch toolkit."""

from .core import (
    DEFAULT_TYPE_MIX,
    Driver,
    MarketParams,
    NotificationPlan,
    NotificationProfile,
    Rider,
    Scenario,
    TraceError,
    ValidationError,
    load_trace,
    sample_scenario,
    score,
    validate_plan,
    write_trace,
)
from .valuation import (
    BA,
    FA,
    KAccept,
    Protocol,
    ba_value,
    fa_value,
    k_accept_value,
    marginal_gain,
    mc_value_oracle,
    value,
)

__version__ = "0.1.0"
