"""Collects per-criterion outcomes so the session summary can print one line each."""

CRITERIA = {
    1: "kernel moments match Monte-Carlo oracles",
    2: "linear-Gaussian head equals the conjugate posterior",
    3: "initialized head reproduces the pretrained output layer",
    4: "pretrained model accuracy and stabilization",
    5: "proposed method beats bounded-memory retraining without forgetting",
    6: "proposed per-sample time is lowest and flat",
    7: "predicted variance increases with data noise",
    8: "invariant property suite",
}

_parts: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, ok: bool, detail: str = "") -> bool:
    _parts.setdefault(criterion, []).append((part, bool(ok), detail))
    return bool(ok)


def lines() -> list[str]:
    if not _parts:
        return []
    out = []
    for c, title in CRITERIA.items():
        parts = _parts.get(c)
        if not parts:
            out.append(f"criterion {c}: NOT RUN ({title})")
            continue
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p} {'ok' if ok else 'FAILED'}{': ' + d if d else ''}" for p, ok, d in parts)
        out.append(f"criterion {c}: {verdict} ({title}) [{detail}]")
    return out
