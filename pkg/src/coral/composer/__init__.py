"""Compose and params files, and the process supervisor that runs them."""

from coral.composer.config import (
    ComponentSpec,
    InstanceConfig,
    load_compose,
    load_params,
    parse_compose,
    parse_duration,
    parse_params,
)
from coral.composer.supervisor import Instance, Relay, down_instance, up_instance

__all__ = [
    "ComponentSpec", "InstanceConfig", "load_compose", "load_params", "parse_compose",
    "parse_duration", "parse_params", "Instance", "Relay", "down_instance", "up_instance",
]
