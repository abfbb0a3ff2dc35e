"""In-network L4 load balancing for a container cluster, in user space.

Modules:

* :mod:`clusterlb.codec` - Ethernet/IPv4/TCP/UDP codec, checksums, CRC-16
* :mod:`clusterlb.control` - agent -> dataplane control message
* :mod:`clusterlb.dataplane` - router pipeline (classify, ECMP, rewrite, LPM)
* :mod:`clusterlb.agent` - cluster-state watcher emitting control messages
* :mod:`clusterlb.netsim` - discrete-event evaluation harness
* :mod:`clusterlb.cli` - command-line entry point
"""

__version__ = "0.1.0"
