"""Regenerate ``golden_trace.json``: 3 items, 5 days, click-model ranking.

Run from the repository root:  python3 tests/data/make_golden.py
"""
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from rlltv import market as M

CONFIG = dict(seed=1234, n_items=3, daily_budget=600.0, initial_age_max=20)


def golden_days(days: int = 5) -> list[dict]:
    state = M.initial_state(M.SimConfig(**CONFIG))
    out = []
    for _ in range(days):
        k = len(state)
        res = M.advance(state, np.full(k, 0.5), np.full(k, 0.9), lambda ids, yc, yr: yc)
        out.append({"day": res.day, "items": {str(int(i)): asdict(res.outcome(j)) for j, i in enumerate(res.item_ids)}})
    return out


if __name__ == "__main__":
    path = Path(__file__).with_name("golden_trace.json")
    path.write_text(json.dumps({"config": CONFIG, "days": golden_days()}, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path}")
