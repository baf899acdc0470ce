import numpy as np
import pytest

from coinfer.tensors import ProbMap, RegionMaskSet

# filled by test_acceptance, printed once the session ends
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_probmap(rng, m, h, w, concentration=1.0):
    return ProbMap(rng.dirichlet(np.full(m, concentration), size=(h, w)).transpose(2, 0, 1))


def random_masks(rng, h, w, max_masks=6):
    masks = []
    for _ in range(rng.integers(0, max_masks + 1)):
        m = rng.random((h, w)) < rng.uniform(0.1, 0.7)
        if not m.any():
            m[rng.integers(h), rng.integers(w)] = True
        masks.append(m)
    return RegionMaskSet(masks, shape=(h, w))


def two_by_two_pred():
    """Class-0 plane [[0.9, 0.2], [0.4, 0.1]], class 1 is the complement."""
    c0 = np.array([[0.9, 0.2], [0.4, 0.1]])
    return ProbMap(np.stack([c0, 1 - c0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def malformed_frames(rng, valid_frames, count):
    """Frames broken in ways that must never decode, drawn from several corruption families."""
    import struct

    out = []
    for i in range(count):
        frame = valid_frames[int(rng.integers(len(valid_frames)))]
        length, kind = struct.unpack_from("<IB", frame)
        payload = frame[5:]
        family = i % 9
        if family == 0:
            bad = frame[:int(rng.integers(0, 5))]
        elif family == 1:
            wrong = length + int(rng.integers(1, 50)) * (1 if rng.random() < 0.5 else -1)
            bad = struct.pack("<IB", wrong if wrong >= 0 else length + 1, kind) + payload
        elif family == 2:
            bad = frame[:-int(rng.integers(1, min(len(payload), 20) + 1))]
        elif family == 3:
            k = int(rng.choice([0] + list(range(4, 256))))
            bad = frame[:4] + bytes([k]) + payload
        elif family == 4:
            pos = int(rng.integers(len(payload)))
            p = payload[:pos] + bytes([int(rng.integers(128, 256))]) + payload[pos + 1:]
            bad = frame[:5] + p
        elif family == 5:
            p = b"Z" + payload[1:]
            bad = struct.pack("<IB", len(p), kind) + p
        elif family == 6:
            tokens = payload.split()
            p = b" ".join(tokens[:-1]) + b"\n"
            bad = struct.pack("<IB", len(p), kind) + p
        elif family == 7:
            tokens = payload.split()
            j = int(rng.integers(len(tokens) - 1, len(tokens)))
            tokens[j] = b"x" + tokens[j]
            p = b" ".join(tokens)
            bad = struct.pack("<IB", len(p), kind) + p
        else:
            # payload of one kind under another kind's header
            other = {1: 2, 2: 1, 3: 1}[kind]
            bad = struct.pack("<IB", length, other) + payload
        out.append(bad)
    return out
