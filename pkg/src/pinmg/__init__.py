"""Pinning-based distributed secondary control of islanded inverter microgrids.

Modules: ``netmodel`` (network data), ``powerflow`` (droop load flow),
``dynamics`` (time-domain model), ``simulate`` (stiff integration),
``cybergraph`` (communication graphs), ``control`` (secondary control),
``pindecide`` / ``pinlearn`` (choosing pinned DGs), ``scenario`` and ``cli``.
"""

__version__ = "0.1.0"
