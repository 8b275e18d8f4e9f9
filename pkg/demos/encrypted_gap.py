"""Encrypted protocol against the plaintext baseline.

Runs the operator and three agents over the in-process bus with a 512-bit key
and shows how the fixed-point precision sigma controls the distance between
the encrypted and the plaintext iterates.
"""
import random

from privopt import keygen, paper_instance, run_protocol, solve_plaintext, SolverConfig
from privopt import spds

inst = paper_instance()
cfg = SolverConfig()
keys = keygen(512, random.Random("demo/keys"))
baseline = solve_plaintext(inst, cfg)
print(f"plaintext baseline: {baseline.iterations} iterations")

for sigma in (2, 4, 6, 8):
    res = run_protocol(inst, cfg, sigma=sigma, seed="demo", keypair=keys)
    gaps = spds.gap_series(res.trace, baseline.trace)
    worst = max(max(dx, dl) for _, dx, dl in gaps)
    msgs = len(res.transcript.records)
    print(f"sigma={sigma}: {res.status} after {res.final.k} rounds, {msgs} messages, max gap={worst:.2e}")
