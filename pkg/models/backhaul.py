"""
Discrete-event model of the OBTS backhaul.

Two architectures share one simpy event loop:

- centralized: each OBTS reports MU registrations to an optical network
  controller (ONC) that answers location lookups for data forwarding;
- decentralized: OBTSs flood their MU association tables, discover neighbours
  with Hello packets, flood neighbour tables and route with Dijkstra.

Links are ports; port i of a node leads to its i-th neighbour in ascending id order.
"""
import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import count

import networkx as nx
import numpy as np
import simpy

from models.errors import ParameterError, UnknownMobileUserError
from models.ooc import hex_cells

logger = logging.getLogger(__name__)

MODES = ("centralized", "decentralized")
PACKET_TYPES = ("MU-AT-update", "Hello", "Hello-reply", "NT-broadcast", "data")
FLOODED = ("MU-AT-update", "NT-broadcast")
ONC = "ONC"


@dataclass(frozen=True)
class SignalingPacket:
    packet_type: str
    source_id: int
    number: int
    payload: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.packet_type not in PACKET_TYPES:
            raise ParameterError(f"unknown packet type '{self.packet_type}'")

    @property
    def key(self):
        return self.source_id, self.number


@dataclass
class ObtsNode:
    """
    One base station with its MU association table (MU-AT), neighbour table (NT) and routing table (RT).

    `locations` is the node's replicated view of where every MU is served,
    kept as MU id -> (registration stamp, OBTS id).
    """

    id: int
    ports: list
    mu_at: dict = field(default_factory=dict)
    nt: dict = field(default_factory=dict)
    rt: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    topology: dict = field(default_factory=dict)
    locations: dict = field(default_factory=dict)
    last_numbers: dict = field(default_factory=dict)
    _numbers: count = field(default_factory=count, repr=False)

    def next_number(self):
        return next(self._numbers)

    def port_to(self, neighbour):
        return self.ports.index(neighbour)


class OncDatabase:
    """Serving OBTS of every MU as seen by the network controller."""

    def __init__(self):
        self._entries = {}

    def apply(self, mu_id, obts_id, stamp, present):
        current = self._entries.get(mu_id)
        if present:
            if current is None or stamp > current[0]:
                self._entries[mu_id] = (stamp, obts_id)
        elif current is not None and current[1] == obts_id and stamp >= current[0]:
            del self._entries[mu_id]

    def lookup(self, mu_id):
        if mu_id not in self._entries:
            raise UnknownMobileUserError(f"ONC has no serving OBTS for MU {mu_id}")
        return self._entries[mu_id][1]

    def as_dict(self):
        return {mu: obts for mu, (_, obts) in self._entries.items()}


def lexicographic_dijkstra(adjacency, source):
    """
    Hop-count shortest paths from `source` with ties broken by the lowest first-hop id.

    Args:
        adjacency (dict[int, iterable[int]]): Known links per node.
        source (int): Root node.

    Returns:
        dict[int, tuple[int, int]]: Destination -> (hops, first hop); the source is excluded.
    """
    best = {source: (0, None)}
    heap = [(0, -1, source)]
    while heap:
        dist, first, node = heapq.heappop(heap)
        if best.get(node) != (dist, None if first == -1 else first):
            continue
        for nbr in sorted(adjacency.get(node, ())):
            label = (dist + 1, nbr if node == source else first)
            if nbr == source:
                continue
            if nbr not in best or label < best[nbr]:
                best[nbr] = label
                heapq.heappush(heap, (label[0], label[1], nbr))
    best.pop(source)
    return best


class BackhaulNetwork:
    """
    OBTS backhaul driven by a simpy environment.

    Args:
        graph (networkx.Graph): OBTS topology with integer node ids.
        mode (str): 'centralized' or 'decentralized'.
        link_delay (float): Delay of every backhaul link in time units.
        nt_period (float): Period of the neighbour-table broadcast timer.
        onc_attachment (int | None): OBTS the ONC hangs off; None links the ONC to every OBTS.
    """

    def __init__(self, graph, mode="decentralized", link_delay=1.0, nt_period=100.0, onc_attachment=None):
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got '{mode}'")
        if link_delay <= 0 or nt_period <= 0:
            raise ParameterError("link delay and NT period must be positive")
        if onc_attachment is not None and onc_attachment not in graph:
            raise ParameterError(f"ONC attachment {onc_attachment} is not an OBTS")
        self.graph = graph
        self.mode = mode
        self.link_delay = link_delay
        self.nt_period = nt_period
        self.onc_attachment = onc_attachment
        self.env = simpy.Environment()
        self.nodes = {n: ObtsNode(n, sorted(graph.neighbors(n))) for n in sorted(graph.nodes)}
        self.onc = OncDatabase()
        self.serving = {}
        self.trace = []
        self.transmissions = Counter()
        self.misdeliveries = []
        self._stamps = count(1)
        self._onc_numbers = count()

    # -- transport -----------------------------------------------------------------

    def _log(self, node, event_type, packet):
        self.trace.append((self.env.now, node, event_type, packet.packet_type, packet.source_id, packet.number))

    def _send(self, node_id, port, packet):
        self.transmissions[packet.key] += 1
        self._log(node_id, "send", packet)
        self.env.process(self._carry(node_id, port, packet))

    def _carry(self, node_id, port, packet):
        yield self.env.timeout(self.link_delay)
        receiver = self.nodes[node_id].ports[port]
        self._receive(receiver, packet, self.nodes[receiver].port_to(node_id))

    def _receive(self, node_id, packet, arrival_port):
        node = self.nodes[node_id]
        if packet.packet_type == "Hello":
            self._log(node_id, "receive", packet)
            self._send(node_id, arrival_port, SignalingPacket("Hello-reply", node_id, node.next_number(), {"id": node_id}))
        elif packet.packet_type == "Hello-reply":
            self._log(node_id, "receive", packet)
            node.nt[packet.payload["id"]] = arrival_port
        elif packet.key in node.seen:
            self._log(node_id, "drop", packet)
        else:
            self._log(node_id, "receive", packet)
            self._process_flooded(node, packet)
            for port in range(len(node.ports)):
                if port != arrival_port:
                    self._send(node_id, port, packet)

    def _process_flooded(self, node, packet):
        node.seen.add(packet.key)
        source = packet.source_id
        if packet.number <= node.last_numbers.get((packet.packet_type, source), -1):
            return
        node.last_numbers[(packet.packet_type, source)] = packet.number
        if packet.packet_type == "NT-broadcast":
            node.topology[source] = frozenset(packet.payload["neighbors"])
            return
        table = packet.payload["mu_at"]
        for mu, (_, obts) in list(node.locations.items()):
            if obts == source and mu not in table:
                del node.locations[mu]
        for mu, stamp in table.items():
            if mu not in node.locations or stamp > node.locations[mu][0]:
                node.locations[mu] = (stamp, source)

    def _unicast_to_onc(self, origin, packet):
        hops = 1 if self.onc_attachment is None else len(self.path(origin, self.onc_attachment))
        for _ in range(hops):
            self.transmissions[packet.key] += 1
            yield self.env.timeout(self.link_delay)
        self._log(ONC, "receive", packet)
        self.onc.apply(packet.payload["mu"], origin, packet.payload["stamp"], packet.payload["present"])

    def run(self, until=None):
        """Processes events until the queue drains or the clock reaches `until`."""
        self.env.run(until=until)

    # -- flooding, discovery, routing ------------------------------------------

    def flood(self, packet, origin_id):
        """
        Starts a flood of `packet` at `origin_id`; run() delivers it.

        Returns:
            tuple[int, int]: The (source, number) key of the flood.
        """
        if packet.packet_type not in FLOODED:
            raise ParameterError(f"{packet.packet_type} packets are not flooded")
        node = self.nodes[origin_id]
        if packet.key in node.seen:
            return packet.key
        self._log(origin_id, "originate", packet)
        self._process_flooded(node, packet)
        for port in range(len(node.ports)):
            self._send(origin_id, port, packet)
        return packet.key

    def delivered(self, key):
        """OBTSs that processed the flood `key`."""
        return {n for n, node in self.nodes.items() if key in node.seen}

    def hello_exchange(self, node_id):
        """Sends a Hello on every port; replies fill the node's NT during run()."""
        node = self.nodes[node_id]
        for port in range(len(node.ports)):
            self._send(node_id, port, SignalingPacket("Hello", node_id, node.next_number()))
        return node.nt

    def broadcast_nt(self, node_id):
        node = self.nodes[node_id]
        return self.flood(SignalingPacket("NT-broadcast", node_id, node.next_number(),
                                          {"neighbors": frozenset(node.nt)}), node_id)

    def start_nt_timers(self, until):
        """Periodic NT broadcast from every node, first at t = now, last before `until`."""
        def timer(node_id):
            while self.env.now < until:
                self.broadcast_nt(node_id)
                yield self.env.timeout(self.nt_period)

        for node_id in self.nodes:
            self.env.process(timer(node_id))

    def compute_rt(self, node_id):
        """
        Routing table of `node_id` from its NT and the NT broadcasts it received.

        Returns:
            dict[int, int]: Destination OBTS -> output port; unreachable destinations are absent.
        """
        node = self.nodes[node_id]
        adjacency = dict(node.topology)
        adjacency[node_id] = frozenset(node.nt)
        routes = lexicographic_dijkstra(adjacency, node_id)
        node.rt = {dest: node.nt[first] for dest, (_, first) in routes.items() if first in node.nt}
        return node.rt

    def converge(self):
        """Hello discovery, one NT broadcast round and RT computation on every node."""
        for node_id in self.nodes:
            self.hello_exchange(node_id)
        self.run()
        for node_id in self.nodes:
            self.broadcast_nt(node_id)
        self.run()
        for node_id in self.nodes:
            self.compute_rt(node_id)

    def path(self, src, dst):
        """Hop-by-hop route on the true topology with the same tie-breaking as the RTs."""
        route = [src]
        adjacency = {n: list(self.graph.neighbors(n)) for n in self.graph.nodes}
        while route[-1] != dst:
            hops = lexicographic_dijkstra(adjacency, route[-1])
            if dst not in hops:
                raise ParameterError(f"OBTS {dst} is unreachable from {src}")
            route.append(hops[dst][1])
        return route

    # -- MU registration ------------------------------------------------------------

    def _announce(self, obts_id, mu_id, stamp, present):
        node = self.nodes[obts_id]
        if self.mode == "decentralized":
            packet = SignalingPacket("MU-AT-update", obts_id, node.next_number(), {"mu_at": dict(node.mu_at)})
            self.flood(packet, obts_id)
        else:
            packet = SignalingPacket("MU-AT-update", obts_id, node.next_number(),
                                     {"mu": mu_id, "stamp": stamp, "present": present})
            self._log(obts_id, "send", packet)
            self.env.process(self._unicast_to_onc(obts_id, packet))

    def register_mu(self, obts_id, mu_id):
        """
        Adds `mu_id` to the MU-AT of `obts_id`, eliminating it from its previous OBTS.

        Returns:
            dict: MU-AT delta with 'added' and 'removed_from'; empty for a repeated registration.
        """
        if obts_id not in self.nodes:
            raise ParameterError(f"unknown OBTS {obts_id}")
        old = self.serving.get(mu_id)
        if old == obts_id:
            return {}
        if old is not None:
            self.deregister_mu(old, mu_id)
        stamp = next(self._stamps)
        self.nodes[obts_id].mu_at[mu_id] = stamp
        self.serving[mu_id] = obts_id
        self._announce(obts_id, mu_id, stamp, True)
        return {"added": mu_id, "obts": obts_id, "removed_from": old}

    def deregister_mu(self, obts_id, mu_id):
        node = self.nodes[obts_id]
        if mu_id not in node.mu_at:
            return {}
        stamp = node.mu_at.pop(mu_id)
        if self.serving.get(mu_id) == obts_id:
            del self.serving[mu_id]
        self._announce(obts_id, mu_id, stamp, False)
        return {"removed": mu_id, "obts": obts_id}

    def location_view(self, node_id):
        return {mu: obts for mu, (_, obts) in self.nodes[node_id].locations.items()}

    # -- data plane -----------------------------------------------------------------

    def _misdeliver(self, src, mu_id, at, reason):
        self.misdeliveries.append({"time": self.env.now, "src": src, "mu": mu_id, "at": at, "reason": reason})
        logger.debug("misdelivery of data for MU %s at OBTS %s (%s)", mu_id, at, reason)

    def forward_data(self, src_obts, mu_id):
        """
        Route a data packet from `src_obts` towards the OBTS currently believed to serve `mu_id`.

        Returns:
            list: Traversed nodes; 'ONC' appears on centralized paths.
        """
        node = self.nodes[src_obts]
        packet = SignalingPacket("data", src_obts, node.next_number(), {"mu": mu_id})
        self._log(src_obts, "originate", packet)
        if mu_id in node.mu_at:
            return [src_obts]

        if self.mode == "centralized":
            target = self.onc.lookup(mu_id)
            if self.onc_attachment is None:
                route = [src_obts, ONC, target]
            else:
                route = self.path(src_obts, self.onc_attachment) + [ONC] + self.path(self.onc_attachment, target)
        else:
            if mu_id not in node.locations:
                raise UnknownMobileUserError(f"OBTS {src_obts} has no location for MU {mu_id}")
            target = node.locations[mu_id][1]
            route = [src_obts]
            while route[-1] != target:
                port = self.nodes[route[-1]].rt.get(target)
                if port is None or len(route) > len(self.nodes):
                    self._misdeliver(src_obts, mu_id, route[-1], "no-route")
                    return route
                route.append(self.nodes[route[-1]].ports[port])

        if mu_id not in self.nodes[target].mu_at:
            self._misdeliver(src_obts, mu_id, target, "stale-location")
        self.trace.append((self.env.now, target, "deliver", "data", src_obts, packet.number))
        return route

    def trace_lines(self):
        return [", ".join(str(v) for v in entry) for entry in self.trace]


def load_topology(path):
    """Reads an `obts_id obts_id` edge list."""
    graph = nx.read_edgelist(path, nodetype=int)
    if graph.number_of_nodes() == 0:
        raise ParameterError(f"topology file {path} holds no edges")
    return graph


def write_topology(graph, path):
    nx.write_edgelist(graph, path, data=False)


def random_topology(n_nodes, seed, edge_probability=None):
    """Seeded connected G(n, p) graph; the draw is repeated with a derived seed until it is connected."""
    if n_nodes < 1:
        raise ParameterError("topology needs at least one OBTS")
    p = edge_probability if edge_probability is not None else min(1.0, 3.0 / max(n_nodes - 1, 1))
    rng = np.random.default_rng(seed)
    while True:
        graph = nx.gnp_random_graph(n_nodes, p, seed=int(rng.integers(2 ** 31)))
        if nx.is_connected(graph):
            return graph


def hex_topology(n_rings):
    """Backhaul links between neighbouring cells of a hexagonal cluster."""
    return nx.from_dict_of_lists({cell: sorted(nbrs) for cell, nbrs in hex_cells(n_rings).items()})
