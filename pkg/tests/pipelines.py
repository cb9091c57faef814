"""Small seeded keygen -> watermark -> forge -> verify -> trace run through the CLI."""

import contextlib
import io
import json
from pathlib import Path

from chipwm import cli

TOML = """\
n_train = 800
n_test = 300
epochs = 10
lr = 0.05
decay_epochs = [8]
forge_iterations = 300
forge_polish_iterations = 100
"""


def run(ws, *argv, as_json=True):
    """(exit code, parsed stdout) for one in-process CLI call."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main([argv[0], "--workspace", str(ws), *(["--json"] if as_json else []), *argv[1:]])
    out = buf.getvalue()
    return code, (json.loads(out) if as_json and out.strip() else out)


def pipeline(ws: Path) -> dict:
    ws.mkdir(parents=True, exist_ok=True)
    (ws / "chip.toml").write_text(TOML)
    return {
        "keygen": run(ws, "keygen", "--profile", "standard", "--seed", "0xabc"),
        "watermark": run(ws, "watermark", "--seed", "1"),
        "forge": run(ws, "forge", "--users", "2"),
        "verify": run(ws, "verify", "--suspect", "master"),
        "verify_user": run(ws, "verify", "--suspect", "users/user0", "--claim", "users/user0"),
        "trace": run(ws, "trace", "--suspect", "users/user1", "--tau-fidelity", "0.5"),
    }


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
