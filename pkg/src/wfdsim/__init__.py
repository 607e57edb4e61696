"""Multi-group Wi-Fi Direct publish/subscribe protocol library and simulator."""

from .core import (
    CredentialBundle,
    DEFAULT_GO_ADDR,
    Endpoint,
    GroupId,
    InterfaceKind,
    Message,
    NodeId,
    Publication,
    PublicationId,
    Role,
    TopicId,
    Violation,
    validate_topology,
)
from .netsim import AUDIT, NetGroup, RunCounters, SimConfig, TrafficGenerator, World, generate_traffic
from .protocol import Directory, NodeState, ProtocolParams
from .routing import (
    ALL_ENDPOINTS,
    AnchorView,
    ForwardingTable,
    SUBSCRIBER_DIRECTED,
    flood_oracle,
    forward_decision,
    recompute_tables,
    subscribe,
    unsubscribe,
)
from .scenarios import (
    BootstrapError,
    ExperimentPlan,
    RunResult,
    ScenarioSpec,
    aggregate,
    builtin_scenarios,
    extended_scenarios,
    get_scenario,
    read_csv,
    run_experiment,
    run_single,
    write_csv,
)

__version__ = "0.1.0"
