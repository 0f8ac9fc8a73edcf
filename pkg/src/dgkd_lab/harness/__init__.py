from .manifest import RunManifest, code_state_hash, corpus_hash
from .run import ensure_corpora, run
from .ablate import ablate, load_plan
from .report import report

__all__ = [
    "RunManifest", "code_state_hash", "corpus_hash", "ensure_corpora", "run",
    "ablate", "load_plan", "report",
]
