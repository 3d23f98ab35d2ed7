import numpy as np
import pytest

from desk_embed.encoder import Encoder, EncoderConfig, TokenBatch


def toy_config(**changes):
    base = dict(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=64, trained_context=16)
    base.update(changes)
    return EncoderConfig(**base)


def random_batch(rng, n, max_len, vocab=64, min_len=1):
    seqs = [rng.integers(5, vocab, size=rng.integers(min_len, max_len + 1)) for _ in range(n)]
    return TokenBatch.from_sequences(seqs)


@pytest.fixture
def toy_encoder():
    return Encoder(toy_config(), seed=3)


# -- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        entry["ok"] &= report.passed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}")
