"""The desk-scale training world: a three-step lockbox.

The device record tracks `stage` (0 locked, 1 unlocked, 2 open) and an
`alarm` flag. `unlock` and `open_lid` only succeed in order; any
out-of-order press, or a `jiggle`, trips the alarm. Tasks reward an
open lid with the alarm untripped, so the only winning line from stage 0
is unlock -> open_lid -> announce completion.
"""

from __future__ import annotations

from typing import Any, Mapping

from agentloop.db import Database

DEVICE_TABLE = "device"
DEVICE_ID = "main"


def _device(db: Database) -> dict:
    return db._tables[DEVICE_TABLE][DEVICE_ID]


def unlock(db: Database, args: Mapping[str, Any]) -> Any:
    dev = _device(db)
    if dev["stage"] == 0 and not dev["alarm"]:
        dev["stage"] = 1
        return {"stage": 1}
    dev["alarm"] = True
    return {"alarm": True}


def open_lid(db: Database, args: Mapping[str, Any]) -> Any:
    dev = _device(db)
    if dev["stage"] == 1 and not dev["alarm"]:
        dev["stage"] = 2
        return {"stage": 2}
    dev["alarm"] = True
    return {"alarm": True}


def jiggle(db: Database, args: Mapping[str, Any]) -> Any:
    dev = _device(db)
    dev["alarm"] = True
    return {"alarm": True}


def context_of(db: Database) -> int:
    """Policy context id: 3 when the alarm is tripped, else the stage."""
    dev = db.get_record(DEVICE_TABLE, DEVICE_ID)
    return 3 if dev["alarm"] else int(dev["stage"])


N_CONTEXTS = 4

HANDLERS = {
    "unlock": unlock,
    "open_lid": open_lid,
    "jiggle": jiggle,
}
