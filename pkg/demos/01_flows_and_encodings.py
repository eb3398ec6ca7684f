"""Walk through one synthetic flow: packets, bursts, and the six encodings.

Run:  python demos/01_flows_and_encodings.py
"""
import numpy as np

from antkit.features import Encoding, Kind, encode, fit_norm_stats, payload_packets
from antkit.synth import CLASS_NAMES, generate_flows
from antkit.traffic import assemble_flows, split_bursts

flows = generate_flows(20, seed=1)
print(f"{len(flows)} synthetic flows across classes {CLASS_NAMES}")

# The generator returns flows already grouped; re-assembling the interleaved
# packet stream must give the same grouping back.
stream = sorted((p for f in flows for p in f.packets), key=lambda p: p.timestamp_us)
again = assemble_flows(stream)
print(f"re-assembled {len(stream)} packets into {len(again)} flows")

flow = flows[0]
print(f"\nflow {flow.tuple}, label {CLASS_NAMES[flow.label]}, {len(flow)} packets")
print("directions:", "".join("+" if d == 1 else "-" for d in flow.directions))
for b in split_bursts(flow):
    sizes = [p.size for p in b.packets]
    print(f"  burst {b.index}: direction {b.direction:+d}, packets {b.start}..{b.stop - 1}, sizes {sizes}")

stats = fit_norm_stats(flows)
print(f"\nnormalization stats: {stats}")
pkt = payload_packets(flow)[0]
for kind in Kind:
    enc = Encoding(kind, n=4, m=20, max_pkt_size=64)
    item = pkt if kind.category == "PC" else flow
    x = encode(item, enc, stats)
    print(f"{kind.name:9s} length {enc.length:4d}  first values {np.round(x[:6], 3).tolist()}")
