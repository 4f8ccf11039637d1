"""Shared helpers for the experiment scripts: corpus generation and config files."""
from pathlib import Path

from daml.cli import main


def ensure_corpus(root: Path, spec_text: str = "") -> Path:
    """Generate the default synthetic corpus under ``root/data`` unless it already exists."""
    data = root / "data"
    if not (data / "manifest.json").exists():
        root.mkdir(parents=True, exist_ok=True)
        (root / "synth.cfg").write_text(spec_text)
        if main(["gen-data", "--config", str(root / "synth.cfg"), "--out", str(data)]) != 0:
            raise SystemExit("corpus generation failed")
    return data


def write_config(path: Path, **fields) -> Path:
    path.write_text("".join(f"{k}={v}\n" for k, v in fields.items()))
    return path
