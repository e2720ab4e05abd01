"""Paged KV-cache control plane with merge-staged descriptor transport, simulated end to end."""
from .errors import KvrmError
from .far_view import FarViewConfig
from .pager import FrameDelta, KVPager, PagerConfig, ViewDescriptor
from .transport import Descriptor, DmaTrain, Kind, TransportConfig

__all__ = [
    "Descriptor", "DmaTrain", "FarViewConfig", "FrameDelta", "KVPager", "Kind", "KvrmError",
    "PagerConfig", "TransportConfig", "ViewDescriptor",
]
__version__ = "0.1.0"
