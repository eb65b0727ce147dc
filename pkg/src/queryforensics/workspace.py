"""Plain-file analyst workspace: databases, fingerprints, and query logs.

Layout under the workspace root:

    procedures.json    shared procedure database
    attacks.json       attack database + the procedure ordering it assumes
    fingerprints/      one JSON per recorded incident
    logs/              query-log directories (simulated or captured)

Writes are atomic (temp file + rename) and guarded by an exclusive file lock
so concurrent enrollments cannot interleave.
"""

from __future__ import annotations

import json
from pathlib import Path

from filelock import FileLock

from .attribution import AttackDB
from .errors import IncompatibleDatabaseError, InvalidInputError
from .fingerprint import Fingerprint, FingerprintDB
from .procedures import ProcedureDB
from .storage import atomic_write_json

PROCEDURES_FILE = "procedures.json"
ATTACKS_FILE = "attacks.json"
FINGERPRINT_DIR = "fingerprints"
LOG_DIR = "logs"
LOCK_FILE = ".workspace.lock"


class Workspace:
    """Handle on a workspace directory; loads databases lazily-consistently."""

    def __init__(self, root):
        self.root = Path(root)

    @classmethod
    def init(cls, root) -> "Workspace":
        ws = cls(root)
        ws.root.mkdir(parents=True, exist_ok=True)
        (ws.root / FINGERPRINT_DIR).mkdir(exist_ok=True)
        (ws.root / LOG_DIR).mkdir(exist_ok=True)
        if not (ws.root / PROCEDURES_FILE).exists():
            pdb = ProcedureDB.generic()
            atomic_write_json(ws.root / PROCEDURES_FILE, pdb.to_json())
            atomic_write_json(ws.root / ATTACKS_FILE,
                              AttackDB().to_json(pdb.ids))
        return ws

    def lock(self) -> FileLock:
        return FileLock(str(self.root / LOCK_FILE))

    def load(self) -> tuple[ProcedureDB, AttackDB]:
        if not (self.root / PROCEDURES_FILE).exists():
            raise InvalidInputError(f"{self.root} is not a workspace (missing "
                                    f"{PROCEDURES_FILE}); run `init` first")
        pdb = ProcedureDB.load(self.root / PROCEDURES_FILE)
        pdb.validate()
        adb, order = AttackDB.load(self.root / ATTACKS_FILE)
        if order != pdb.ids[:len(order)]:
            raise IncompatibleDatabaseError(
                "attacks.json procedure order disagrees with procedures.json")
        return pdb, adb

    def save(self, pdb: ProcedureDB, adb: AttackDB):
        pdb.validate()
        atomic_write_json(self.root / PROCEDURES_FILE, pdb.to_json())
        atomic_write_json(self.root / ATTACKS_FILE, adb.to_json(pdb.ids))

    def save_fingerprint(self, fp: Fingerprint) -> Path:
        path = self.root / FINGERPRINT_DIR / f"{fp.incident_id}.json"
        if path.exists():
            raise InvalidInputError(f"incident {fp.incident_id!r} already recorded")
        atomic_write_json(path, fp.to_json())
        return path

    def load_fingerprints(self) -> FingerprintDB:
        db = FingerprintDB()
        for path in sorted((self.root / FINGERPRINT_DIR).glob("*.json")):
            with open(path, encoding="utf-8") as fh:
                db.add(Fingerprint.from_json(json.load(fh)))
        return db
