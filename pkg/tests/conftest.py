from mmv2v.config import parse_config


def vehicle(rnti, x, y=0.0, vx=0.0, elements=1, **antenna):
    return {
        "rnti": rnti,
        "position": [x, y, 1.6],
        "velocity": [vx, 0.0, 0.0],
        "antenna": {"elements": elements, **antenna},
    }


def pair_config(distance=50.0, *, interval="1ms", packet_size=1024, echo=False, overrides=(), **sections):
    """Two co-moving vehicles ``distance`` apart with one CBR flow 0 -> 1."""
    doc = {
        "name": "pair",
        "seed": 1,
        "duration": "100ms",
        "channel": {"scenario": "Highway", "forced_state": "LOS"},
        "vehicles": [vehicle(0, 0.0), vehicle(1, distance)],
        "groups": [{"name": "g", "members": [0, 1]}],
        "traffic": [{"src": 0, "dst": 1, "packet_size": packet_size, "interval": interval, "echo": echo}],
    }
    for k, v in sections.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    return parse_config(doc, list(overrides))


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
