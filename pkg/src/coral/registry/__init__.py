"""Runtime behavior discovery: manifests, export/fetch, leaf binding."""

from coral.registry.binding import BindError, PollLeaf, PublishLeaf, ServiceLeaf, bind_leaves
from coral.registry.discovery import (
    MANIFEST_TOPIC,
    export_manifest,
    fetch_manifests,
    manifest_channel,
)
from coral.registry.manifest import (
    MANIFEST_VERSION,
    BehaviorDecl,
    BehaviorManifest,
    Binding,
    ManifestError,
    Port,
    manifest_from_dict,
    manifest_parse,
    manifest_serialize,
    poll_topic,
    ports,
    publish,
    service,
    validate_manifest,
)

__all__ = [
    "BindError", "PollLeaf", "PublishLeaf", "ServiceLeaf", "bind_leaves",
    "MANIFEST_TOPIC", "export_manifest", "fetch_manifests", "manifest_channel",
    "MANIFEST_VERSION", "BehaviorDecl", "BehaviorManifest", "Binding", "ManifestError", "Port",
    "manifest_from_dict", "manifest_parse", "manifest_serialize", "poll_topic", "ports",
    "publish", "service", "validate_manifest",
]
