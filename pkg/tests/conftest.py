import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from voicelike import manifest, synth


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 one-second clips from two speakers: 8 train, 2 val, 2 test."""
    out = tmp_path_factory.mktemp("tiny")
    synth.generate_corpus(out, synth.SynthConfig(n_speakers=2, clips_per_speaker=6, duration_sec=1.0, seed=5))
    return out, manifest.read_manifest(out / "manifest.jsonl")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
