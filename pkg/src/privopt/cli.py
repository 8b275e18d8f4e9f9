"""Command-line driver.

    privopt run --mode plaintext --instance paper_sva
    privopt run --mode encrypted-sim --bits 1024 --sigma 4 --seed 1 --out runs/s4
    privopt audit runs/s4/transcript.log
    privopt keygen --bits 2048 --out keys.json

Exit codes: 0 success, 2 configuration, 3 non-convergence, 4 transport,
5 audit finding.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

from . import paillier as ph
from . import problem as pb
from . import protocol as pr
from . import spds
from . import transport as tp
from .encoding import DEFAULT_SIGMA, FixedPointCodec

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_TRANSPORT, EXIT_AUDIT = 0, 2, 3, 4, 5
MODES = ("plaintext", "encrypted-sim", "encrypted-net", "agent", "operator")

log = logging.getLogger("privopt")


class ConfigError(Exception):
    pass


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privopt", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve an instance")
    run.add_argument("--mode", choices=MODES, default="plaintext")
    run.add_argument("--instance", default="paper_sva", help="bundled fixture name or JSON path")
    run.add_argument("--alpha", type=float, default=1.6e-2)
    run.add_argument("--beta", type=float, default=0.8)
    run.add_argument("--tau-x", type=float, default=1.0)
    run.add_argument("--tau-lambda", type=float, default=1.0)
    run.add_argument("--eps0", type=float, default=1e-3)
    run.add_argument("--k-max", type=int, default=1000)
    run.add_argument("--window", type=int, default=5, help="iterations the error must stay below eps0")
    run.add_argument("--bits", type=int, default=ph.DEFAULT_BITS)
    run.add_argument("--sigma", type=int, default=DEFAULT_SIGMA)
    run.add_argument("--seed", default=None)
    run.add_argument("--out", type=Path, default=Path("."))
    run.add_argument("--listen", type=_address, help="broker bind address (operator, encrypted-net)")
    run.add_argument("--connect", type=_address, help="broker address (agent)")
    run.add_argument("--agent-id", type=int, help="1-based agent id (agent mode)")
    run.add_argument("--keys", type=Path, help="keypair file from 'privopt keygen'")
    run.add_argument("--timeout", type=float, default=pr.DEFAULT_TIMEOUT, help="per-round barrier timeout, s")
    run.add_argument("--audit", action="store_true", help="audit the transcript after the run")

    audit = sub.add_parser("audit", help="audit a transcript log")
    audit.add_argument("transcript", type=Path)
    audit.add_argument("--instance", help="also flag encodings of this instance's c and d")
    audit.add_argument("--trace", type=Path, help="also flag encodings of the iterates in this trace.csv")

    keygen = sub.add_parser("keygen", help="write a shared agent keypair")
    keygen.add_argument("--bits", type=int, default=ph.DEFAULT_BITS)
    keygen.add_argument("--seed", default=None, help="deterministic keys, for testing only")
    keygen.add_argument("--out", type=Path, required=True)
    return parser


# -- helpers --------------------------------------------------------------------

def _solver_config(args) -> spds.SolverConfig:
    try:
        return spds.SolverConfig(alpha=args.alpha, beta=args.beta, tau_x=args.tau_x,
                                 tau_lambda=args.tau_lambda, eps0=args.eps0, k_max=args.k_max,
                                 window=args.window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _seeded_rng(seed, label):
    return None if seed is None else random.Random(f"{seed}/{label}")


def write_keys(path: Path, pk: ph.PublicKey, sk: ph.PrivateKey) -> None:
    path.write_text(json.dumps({"public_key": pk.to_dict(), "private_key": sk.to_dict()}, indent=2))


def read_public_key(path: Path) -> ph.PublicKey:
    try:
        return ph.PublicKey.from_dict(json.loads(path.read_text())["public_key"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read public key from {path}: {exc}") from None


def read_keypair(path: Path) -> tuple[ph.PublicKey, ph.PrivateKey]:
    try:
        doc = json.loads(path.read_text())
        pk = ph.PublicKey.from_dict(doc["public_key"])
        sk = ph.PrivateKey.from_dict(doc["private_key"])
        ph.check_keypair(pk, sk)
    except (OSError, ValueError, KeyError, ph.KeyMismatchError) as exc:
        raise ConfigError(f"cannot read keypair from {path}: {exc}") from None
    return pk, sk


def _keypair_for(args):
    if args.keys is not None:
        return read_keypair(args.keys)
    return ph.keygen(args.bits, _seeded_rng(args.seed, "keygen"))


def _write_trace(path: Path, trace) -> None:
    with open(path, "w") as fh:
        spds.write_trace_csv(trace, fh)


def _final_summary(trace) -> dict:
    final = trace[-1]
    return {"iterations": final.k, "x": [xi.tolist() for xi in final.x], "lambda": final.lam.tolist(),
            "epsilon": final.epsilon}


def _audit_report(transcript: pr.Transcript, trace=(), vectors=()) -> pr.AuditReport:
    codec = FixedPointCodec(transcript.sigma, transcript.public_key.n)
    return pr.audit_transcript(transcript, pr.forbidden_plaintexts(codec, trace, vectors))


# -- modes ----------------------------------------------------------------------

def _run_plaintext(args, inst, cfg) -> tuple[int, dict]:
    t0 = time.perf_counter()
    res = spds.solve_plaintext(inst, cfg)
    wall = time.perf_counter() - t0
    _write_trace(args.out / "trace.csv", res.trace)
    summary = {"mode": "plaintext", "status": res.status, "wall_time_s": wall, **_final_summary(res.trace)}
    return (EXIT_OK if res.converged else EXIT_NONCONVERGENCE), summary


def _run_encrypted(args, inst, cfg) -> tuple[int, dict]:
    transport = "sim" if args.mode == "encrypted-sim" else "tcp"
    if transport == "sim" and args.seed is None:
        raise ConfigError("--seed is required in encrypted-sim mode")
    keypair = _keypair_for(args)
    base = spds.solve_plaintext(inst, cfg)
    t0 = time.perf_counter()
    res = pr.run_protocol(inst, cfg, sigma=args.sigma, seed=args.seed, transport=transport,
                          keypair=keypair, address=args.listen, timeout=args.timeout)
    wall = time.perf_counter() - t0
    _write_trace(args.out / "trace.csv", res.trace)
    _write_trace(args.out / "baseline_trace.csv", base.trace)
    gaps = spds.gap_series(res.trace, base.trace)
    with open(args.out / "gap.csv", "w") as fh:
        spds.write_gap_csv(gaps, fh)
    res.transcript.write(args.out / "transcript.log")
    final_gap = max(max(abs(a - b).max() for a, b in zip(res.final.x, base.final.x)),
                    abs(res.final.lam - base.final.lam).max())
    summary = {
        "mode": args.mode, "status": res.status, "wall_time_s": wall, "sigma": args.sigma,
        "bits": res.public_key.bit_length, "key_id": res.public_key.key_id,
        "messages": len(res.transcript.records), **_final_summary(res.trace),
        "baseline_iterations": base.iterations,
        "max_primal_gap": max((g[1] for g in gaps), default=0.0),
        "max_dual_gap": max((g[2] for g in gaps), default=0.0),
        "final_gap": float(final_gap),
    }
    code = EXIT_OK if res.converged else EXIT_NONCONVERGENCE
    if args.audit:
        report = _audit_report(res.transcript, res.trace, [inst.c, inst.d])
        summary["audit_findings"] = len(report.findings)
        print(report.format())
        if not report.ok:
            code = EXIT_AUDIT
    return code, summary


def _run_operator(args, inst, cfg) -> tuple[int, dict]:
    if args.keys is None:
        raise ConfigError("operator mode needs --keys (only the public key is read)")
    pk = read_public_key(args.keys)
    codec = FixedPointCodec(args.sigma, pk.n)
    so = pr.SystemOperator(pk, inst.operator_view(), codec,
                           _seeded_rng(args.seed, "so/shares"), _seeded_rng(args.seed, "so/nonces"))
    host, port = args.listen or ("127.0.0.1", 0)
    t0 = time.perf_counter()
    with tp.Broker(host, port) as broker:
        print(f"broker listening on {broker.address[0]}:{broker.address[1]}", flush=True)
        with tp.TcpClient(broker.address, so.role) as client:
            pr.drive_endpoint(so, client, args.timeout)
        # let the agents read the halt before the broker goes away
        if not broker.wait_drained(args.timeout):
            log.warning("agents still connected after halt")
        envelopes = list(broker.log)
    transcript = pr.Transcript.from_envelopes(pk, args.sigma, inst.n, envelopes)
    transcript.write(args.out / "transcript.log")
    summary = {"mode": "operator", "status": "halted", "iterations": so.k + 1, "messages": len(envelopes),
               "wall_time_s": time.perf_counter() - t0}
    code = EXIT_OK
    if args.audit:
        report = _audit_report(transcript, vectors=[inst.c, inst.d])
        print(report.format())
        summary["audit_findings"] = len(report.findings)
        code = EXIT_OK if report.ok else EXIT_AUDIT
    return code, summary


def _run_agent(args, inst, cfg) -> tuple[int, dict]:
    if args.connect is None or args.agent_id is None or args.keys is None:
        raise ConfigError("agent mode needs --connect, --agent-id and --keys")
    if not 1 <= args.agent_id <= inst.n:
        raise ConfigError(f"--agent-id must be in [1, {inst.n}]")
    pk, sk = read_keypair(args.keys)
    i = args.agent_id - 1
    agent = pr.Agent(inst.agent_view(i), pk, sk, FixedPointCodec(args.sigma, pk.n), cfg,
                     inst.dual_lower, inst.dual_upper, rng=_seeded_rng(args.seed, f"agent{i + 1}/nonces"))
    t0 = time.perf_counter()
    with tp.TcpClient(args.connect, agent.role) as client:
        pr.drive_endpoint(agent, client, args.timeout)
    trace = [spds.IterationState(k, (x,), lam, eps) for k, x, lam, eps in agent.history]
    with open(args.out / f"agent{args.agent_id}_trace.csv", "w") as fh:
        spds.write_trace_csv(trace, fh, agent_ids=[args.agent_id])
    summary = {"mode": "agent", "agent_id": args.agent_id,
               "status": "converged" if agent.converged else "max_iter",
               "wall_time_s": time.perf_counter() - t0, **_final_summary(trace)}
    return (EXIT_OK if agent.converged else EXIT_NONCONVERGENCE), summary


def cmd_run(args) -> int:
    try:
        inst = pb.read_instance(args.instance)
        cfg = _solver_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        runner = {"plaintext": _run_plaintext, "encrypted-sim": _run_encrypted,
                  "encrypted-net": _run_encrypted, "operator": _run_operator, "agent": _run_agent}[args.mode]
        code, summary = runner(args, inst, cfg)
    except (ConfigError, pb.InstanceError, ph.KeyGenerationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pr.ProtocolTransportError, tp.TransportError, OSError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    summary["instance"] = args.instance
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("mode", "status", "iterations") if k in summary}))
    return code


def cmd_audit(args) -> int:
    try:
        transcript = pr.Transcript.read(args.transcript)
        vectors = []
        if args.instance:
            inst = pb.read_instance(args.instance)
            vectors = [inst.c, inst.d]
        trace = []
        if args.trace:
            with open(args.trace) as fh:
                trace = spds.read_trace_csv(fh)
    except (OSError, pr.TranscriptFormatError, pb.InstanceError, ValueError, KeyError) as exc:
        print(f"cannot audit {args.transcript}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = _audit_report(transcript, trace, vectors)
    print(report.format())
    return EXIT_OK if report.ok else EXIT_AUDIT


def cmd_keygen(args) -> int:
    try:
        pk, sk = ph.keygen(args.bits, _seeded_rng(args.seed, "keygen"))
    except ph.KeyGenerationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_keys(args.out, pk, sk)
    print(f"wrote {args.bits}-bit keypair {pk.key_id} to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "audit": cmd_audit, "keygen": cmd_keygen}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
