"""Train a small packet classifier, then craft a universal padding perturbation.

The padding perturbation is optimized on validation packets of one class and
scored on that class's test packets.  A random pad of the same size is the
baseline.  Takes about a minute on one CPU.

Run:  python demos/02_train_and_attack.py
"""
import numpy as np

from antkit import attacks as A
from antkit.features import Encoding, Kind, encode_many, payload_packets, samples_for
from antkit.ingest import split
from antkit.nn import TrainConfig, cnn_spec, evaluate, train
from antkit.synth import CLASS_NAMES, generate_flows

flows = generate_flows(120, seed=0)
ds = split(flows, [f.label for f in flows], seed=0, class_labels=list(CLASS_NAMES))
enc = Encoding(Kind.PC_P, max_pkt_size=128)


def xy(subset):
    items, y = samples_for(enc, subset.items, subset.labels)
    return encode_many(items, enc), y


model = train(cnn_spec(enc.length, 4), xy(ds.train), xy(ds.validation),
              TrainConfig(epochs=5, seed=0), encoding=enc, labels=list(CLASS_NAMES))
print(f"clean test accuracy: {evaluate(model, *xy(ds.test)).accuracy:.3f}")

target = 2
val = [p for f in ds.validation.of_class(target) for p in payload_packets(f)]
test = [p for f in ds.test.of_class(target) for p in payload_packets(f)]
print(f"\ntarget class {CLASS_NAMES[target]!r}: {len(val)} validation packets, {len(test)} test packets")

for oh in (5, 10, 20):
    uap = A.gen_advpad(val, target, model, loc=A.START, overhead_pct=oh, iterations=150,
                       batch_size=64, eps=0.01, seed=0)
    adv = np.mean(model.predict(A.apply_many(test, uap)[0]) == target)
    rand = np.mean([np.mean(model.predict(A.apply_many(test, r)[0]) == target)
                    for r in A.rand_baseline("randpad", enc, target,
                                             {"loc": A.START, "overhead_pct": oh}, runs=5)])
    print(f"overhead {oh:3d}%  recall with UAP {adv:.3f}  with random pad {rand:.3f}")

# A UAP is a byte string once quantized; materializing it yields a real packet.
pkt = test[0]
padded = A.materialize_advpad(pkt, uap)
print(f"\npacket of {pkt.size} bytes becomes {padded.size} bytes after a {uap.params['overhead_pct']}% pad")
