"""OTIDS-style CAN log parsing/serialization and synthetic traffic generation.

Line layout (one frame per line)::

    Timestamp: 0.000222 ID: 0316 DLC: 8 Data: 05 21 68 09 21 21 00 6f

The parser tolerates runs of whitespace and the unused ``000`` column found in
raw OTIDS dumps; the writer always emits the single-spaced form above.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from canforest.errors import EmptyInputError, InvalidInputError, ParseError
from canforest.types import CanFrame, CanLog, TrafficClass

_LINE_RE = re.compile(
    r"^Timestamp:\s+(?P<ts>\S+)\s+ID:\s+(?P<id>[0-9A-Fa-f]+)\s+(?:[0-9A-Fa-f]{3}\s+)?"
    r"DLC:\s+(?P<dlc>\d+)\s*(?:Data:(?P<data>.*))?$"
)


def parse_line(line: str, label: TrafficClass, line_no: int = 1) -> CanFrame:
    m = _LINE_RE.match(line.strip())
    if m is None:
        raise ParseError(line_no, f"does not match OTIDS layout: {line.strip()!r}")
    try:
        ts = float(m["ts"])
    except ValueError:
        raise ParseError(line_no, f"bad timestamp {m['ts']!r}") from None
    dlc = int(m["dlc"])
    tokens = (m["data"] or "").split()
    if len(tokens) != dlc:
        raise ParseError(line_no, f"DLC {dlc} but {len(tokens)} data bytes")
    try:
        payload = bytes(int(t, 16) for t in tokens)
    except ValueError:
        raise ParseError(line_no, f"bad data byte in {tokens}") from None
    if any(len(t) > 2 for t in tokens):
        raise ParseError(line_no, "data bytes must be two hex digits")
    try:
        return CanFrame(ts, int(m["id"], 16), dlc, payload, label)
    except InvalidInputError as exc:
        raise ParseError(line_no, str(exc)) from None


def parse_can_log(path: str | Path, label: TrafficClass | str) -> CanLog:
    """Read an OTIDS text log, labelling every frame with `label`."""
    label = TrafficClass.parse(label) if isinstance(label, str) else label
    if label is TrafficClass.ADVERSARIAL:
        raise InvalidInputError("ingestion never produces Adversarial traffic")
    path = Path(path)
    frames = []
    prev = -1.0
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            frame = parse_line(line, label, line_no)
            if frame.timestamp < prev:
                raise ParseError(line_no, "timestamp decreases")
            prev = frame.timestamp
            frames.append(frame)
    if not frames:
        raise EmptyInputError(f"{path} holds no frames")
    return CanLog(tuple(frames), source=str(path))


def format_frame(frame: CanFrame) -> str:
    data = " ".join(f"{b:02x}" for b in frame.payload)
    return f"Timestamp: {frame.timestamp:.6f} ID: {frame.can_id:04x} DLC: {frame.dlc} Data: {data}"


def write_can_log(log: CanLog, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w") as fh:
        for frame in log.frames:
            fh.write(format_frame(frame))
            fh.write("\n")
    tmp.replace(path)


# --------------------------------------------------------------------------
# synthetic traffic

# A fixed in-vehicle ID census: 48 periodic IDs spread over the 11-bit range.
_BASE_IDS = tuple(int(i) for i in np.sort(np.random.default_rng(2016).choice(np.arange(0x40, 0x600), 48, replace=False)))
_PERIOD_MENU = (0.01, 0.02, 0.02, 0.05, 0.05, 0.1, 0.1, 0.1, 0.2, 0.5)
_BASE_PERIODS = tuple(_PERIOD_MENU[i % len(_PERIOD_MENU)] for i in range(len(_BASE_IDS)))


@dataclass(frozen=True)
class TrafficProfile:
    """Class-conditional traffic model.

    `attack_share` is the fraction of frames injected by the attacker (DoS, Fuzzy).
    For Impersonation the frames of `attack_id` are replaced by a replay stream
    running at `replay_period`.
    """

    traffic_class: TrafficClass
    ids: tuple[int, ...] = _BASE_IDS
    periods: tuple[float, ...] = _BASE_PERIODS
    jitter: float = 0.05
    attack_share: float = 0.0
    attack_id: int = 0x000
    replay_period: float | None = None
    fuzzy_id_range: tuple[int, int] = (0x000, 0x7FF)

    def __post_init__(self):
        if len(self.ids) != len(self.periods) or not self.ids:
            raise InvalidInputError("ids and periods must be non-empty and aligned")
        if any(p <= 0 for p in self.periods):
            raise InvalidInputError("periods must be positive")
        if not 0.0 <= self.attack_share < 1.0:
            raise InvalidInputError("attack_share must be in [0, 1)")
        if self.traffic_class is TrafficClass.ADVERSARIAL:
            raise InvalidInputError("synthesis never produces Adversarial traffic")
        if self.traffic_class is TrafficClass.IMPERSONATION:
            if self.attack_id not in self.ids or not self.replay_period:
                raise InvalidInputError("impersonation needs a legitimate attack_id and replay_period")


def default_profile(traffic_class: TrafficClass | str) -> TrafficProfile:
    tc = TrafficClass.parse(traffic_class) if isinstance(traffic_class, str) else traffic_class
    if tc is TrafficClass.ATTACK_FREE:
        return TrafficProfile(tc)
    if tc is TrafficClass.DOS:
        return TrafficProfile(tc, attack_share=0.6, attack_id=0x000)
    if tc is TrafficClass.FUZZY:
        return TrafficProfile(tc, attack_share=0.2)
    if tc is TrafficClass.IMPERSONATION:
        target = _BASE_IDS[len(_BASE_IDS) // 3]
        return TrafficProfile(tc, attack_id=target, replay_period=0.002)
    raise InvalidInputError(f"no synthetic profile for {tc.value}")


def _periodic(rng, period, duration, jitter):
    phase = rng.uniform(0.0, period)
    n = int((duration - phase) / period) + 1
    t = phase + period * np.arange(max(n, 0))
    if jitter > 0 and n > 0:
        t = t + rng.normal(0.0, jitter * period, size=n)
    return np.sort(np.clip(t, 0.0, None))


def generate_synthetic(profile: TrafficProfile, n_frames: int, seed: int) -> CanLog:
    """Deterministic synthetic CAN log of exactly `n_frames` frames."""
    if n_frames < 1:
        raise EmptyInputError("n_frames must be at least 1")
    rng = np.random.default_rng(seed)
    tc = profile.traffic_class
    ids = list(profile.ids)
    periods = list(profile.periods)
    replay = None
    if tc is TrafficClass.IMPERSONATION:
        k = ids.index(profile.attack_id)
        replay = (ids.pop(k), periods.pop(k))

    legit_rate = sum(1.0 / p for p in periods)
    if replay is not None:
        legit_rate += 1.0 / profile.replay_period
    share = profile.attack_share if tc in (TrafficClass.DOS, TrafficClass.FUZZY) else 0.0
    attack_rate = legit_rate * share / (1.0 - share)
    duration = 1.1 * n_frames / (legit_rate + attack_rate) + max(max(periods), 1e-3)

    times, cids = [], []
    for cid, period in zip(ids, periods):
        t = _periodic(rng, period, duration, profile.jitter)
        times.append(t)
        cids.append(np.full(t.size, cid, dtype=np.int64))
    if replay is not None:
        t = _periodic(rng, profile.replay_period, duration, profile.jitter)
        times.append(t)
        cids.append(np.full(t.size, replay[0], dtype=np.int64))
    if attack_rate > 0:
        n_att = int(np.ceil(attack_rate * duration))
        if tc is TrafficClass.DOS:
            t = np.sort(np.linspace(0.0, duration, n_att) + rng.uniform(0, 0.1 / attack_rate, n_att))
            c = np.full(n_att, profile.attack_id, dtype=np.int64)
        else:
            t = np.sort(rng.uniform(0.0, duration, n_att))
            lo, hi = profile.fuzzy_id_range
            c = rng.integers(lo, hi + 1, size=n_att)
        times.append(t)
        cids.append(c)

    t_all = np.concatenate(times)
    c_all = np.concatenate(cids)
    order = np.lexsort((c_all, t_all))[:n_frames]
    t_all = np.round(t_all[order], 6)
    c_all = c_all[order]
    if t_all.size < n_frames:
        raise InvalidInputError("profile produced too few frames")
    payloads = rng.integers(0, 256, size=(n_frames, 8), dtype=np.uint8)
    frames = tuple(
        CanFrame(float(t), int(c), 8, payloads[i].tobytes(), tc)
        for i, (t, c) in enumerate(zip(t_all, c_all))
    )
    return CanLog(frames, source=f"synthetic:{tc.value}:seed={seed}")
