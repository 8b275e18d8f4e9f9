"""What an eavesdropper on the message bus gets to see.

Records one encrypted run, audits the transcript for any plaintext leakage,
then plants a raw fixed-point value in an upload and audits again.
"""
import json
import random

from privopt import keygen, paper_instance, run_protocol, SolverConfig
from privopt import protocol as pr
from privopt.encoding import FixedPointCodec

inst = paper_instance()
keys = keygen(512, random.Random("demo/keys"))
res = run_protocol(inst, SolverConfig(k_max=50), sigma=4, seed="audit", keypair=keys)
codec = FixedPointCodec(4, keys[0].n)

forbidden = pr.forbidden_plaintexts(codec, res.trace, [inst.c, inst.d])
report = pr.audit_transcript(res.transcript, forbidden)
print(report.format())

first = res.transcript.records[0].to_dict()
print("a share message on the wire:", str(first)[:160], "...")

# swap the first upload ciphertext for an unencrypted encoding of 0.5
log = res.transcript.dumps().splitlines()
idx = next(i for i, line in enumerate(log) if '"cipher_upload"' in line)
doc = json.loads(log[idx])
doc["message"]["c"][0] = format(codec.encode(0.5), "x")
log[idx] = json.dumps(doc)
tampered = pr.Transcript.loads("\n".join(log) + "\n")
print(pr.audit_transcript(tampered, forbidden).format())
