"""Ping every node of a five-radio line and a small diamond."""

from sa_gateway.mesh_sim import ChannelModel, Topology, network_scan

line = Topology.line([0x01, 0x02, 0x03, 0x04, 0x05])
print(network_scan(line, 0x01, ChannelModel(0.70)).table())
print()

diamond = Topology()
for a in (0xA, 0xB, 0xC, 0xD):
    diamond.add_node(a)
diamond.add_link(0xA, 0xB, -55.0)
diamond.add_link(0xA, 0xC, -95.0)
diamond.add_link(0xB, 0xD, -60.0)
diamond.add_link(0xC, 0xD, -60.0)
print(network_scan(diamond, 0xA, ChannelModel(0.70)).table())
