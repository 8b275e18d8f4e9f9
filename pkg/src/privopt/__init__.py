"""Privacy-preserving distributed optimization with Paillier encryption.

Agents jointly minimize a coupled quadratic cost under a global linear
constraint. A system operator masks its coupling terms with additive shares,
agents upload encrypted local contributions, and only the encrypted aggregate
is broadcast back.
"""
from .encoding import FixedPointCodec
from .paillier import Ciphertext, PrivateKey, PublicKey, decrypt, encrypt, hom_add, hom_scale, keygen
from .problem import ProblemInstance, load_instance, paper_instance, read_instance
from .protocol import ProtocolResult, Transcript, audit_transcript, run_protocol
from .spds import SolverConfig, solve_plaintext

__version__ = "0.1.0"

__all__ = [
    "Ciphertext", "FixedPointCodec", "PrivateKey", "ProblemInstance", "ProtocolResult", "PublicKey",
    "SolverConfig", "Transcript", "audit_transcript", "decrypt", "encrypt", "hom_add", "hom_scale",
    "keygen", "load_instance", "paper_instance", "read_instance", "run_protocol", "solve_plaintext",
]
