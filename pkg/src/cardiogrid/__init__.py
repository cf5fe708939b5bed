"""cardiogrid: a desk-scale privacy-preserving cardiac streaming testbed.

Wearable-style clients stream RR intervals through an MQTT gateway, batches
cross the untrusted zone only as sealed ciphertext, HRV analytics run inside
an attested boundary process, and a micro-batch engine plus benchmark harness
measure secure-vs-plain stability.
"""

__version__ = "0.1.0"

from .hrv import (  # noqa: F401
    DEFAULT_BANDS,
    DEFAULT_GRID,
    FrequencyBands,
    HrvReport,
    RRSample,
    RRWindow,
    SpectralGrid,
    analyze,
)
