from .core import (
    ADMIN_ENDPOINTS,
    INSEC_ENDPOINTS,
    KEY_ENDPOINTS,
    MONITOR_ENDPOINTS,
    PROTOCOL_ENDPOINTS,
    Controller,
    PollConfig,
    SystemClock,
    VirtualClock,
)
from .http import ControllerServer
from .transport import ControllerClient, HttpTransport, LoopbackTransport

__all__ = [
    "ADMIN_ENDPOINTS",
    "INSEC_ENDPOINTS",
    "KEY_ENDPOINTS",
    "MONITOR_ENDPOINTS",
    "PROTOCOL_ENDPOINTS",
    "Controller",
    "ControllerClient",
    "ControllerServer",
    "HttpTransport",
    "LoopbackTransport",
    "PollConfig",
    "SystemClock",
    "VirtualClock",
]
