"""Reader for the topology part of SNDlib native-format network files.

Only the ``NODES`` and ``LINKS`` sections are used::

    NODES (
      Oslo ( 10.75 59.95 )
    )
    LINKS (
      L1 ( Oslo Bergen ) 0.00 0.00 0.00 0.00 ( 1000.00 10.00 )
    )
"""

from __future__ import annotations

import math
import re

from .errors import ConfigError
from .simnet import Topology

_SECTION = re.compile(r"^\s*([A-Z_]+)\s*\(\s*$")
_NODE = re.compile(r"^\s*(\S+)\s*\(\s*([-\d.eE+]+)\s+([-\d.eE+]+)\s*\)")
_LINK = re.compile(r"^\s*(\S+)\s*\(\s*(\S+)\s+(\S+)\s*\)")

# great-circle distance to one-way delay over fibre (~5 us/km)
US_PER_KM = 5


def parse_sndlib(text: str):
    """Returns (nodes {name: (lon, lat)}, links [(id, u, v)])."""
    nodes, links = {}, []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            continue
        if line.strip() == ")":
            section = None
            continue
        if section == "NODES":
            m = _NODE.match(line)
            if not m:
                raise ConfigError(f"line {lineno}: malformed node entry")
            nodes[m.group(1)] = (float(m.group(2)), float(m.group(3)))
        elif section == "LINKS":
            m = _LINK.match(line)
            if not m:
                raise ConfigError(f"line {lineno}: malformed link entry")
            lid, u, v = m.groups()
            if u not in nodes or v not in nodes:
                raise ConfigError(f"line {lineno}: link {lid} references an unknown node")
            links.append((lid, u, v))
    if not nodes:
        raise ConfigError("no NODES section found")
    return nodes, links


def haversine_km(a, b) -> float:
    lon1, lat1, lon2, lat2 = map(math.radians, (*a, *b))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * 6371.0 * math.asin(math.sqrt(h))


def load_topology(text: str, delay=None) -> Topology:
    """Topology with one switch per node; link delay from coordinates unless ``delay`` (us) is given."""
    nodes, links = parse_sndlib(text)
    topo = Topology()
    for n in nodes:
        topo.add_switch(n)
    for _, u, v in links:
        d = delay if delay is not None else round(haversine_km(nodes[u], nodes[v]) * US_PER_KM)
        topo.add_link(u, v, d)
    return topo
