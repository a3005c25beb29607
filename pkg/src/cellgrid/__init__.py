"""cellgrid: software co-simulation testbed for cell-based volt-var control.

Pieces: a sectioned network file format and model (netmodel/netfile), a
Newton power-flow engine with a compiled hot kernel (powerflow), voltage
sensitivity clustering into control cells (clustering), a differential
evolution dispatcher (dispatch), a barrier-synchronized pub/sub bus with
in-process and TCP transports (bus/tcpbus), the device clients that hang off
the bus (clients), and the experiment orchestration plus CLI (experiment/cli).
"""

__version__ = "0.1.0"

from .powerflow import kernel_backend  # noqa: F401
