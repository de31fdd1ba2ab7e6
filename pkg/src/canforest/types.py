"""CAN traffic records."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from canforest.errors import EmptyInputError, InvalidInputError

MAX_CAN_ID = 1 << 29


class TrafficClass(str, enum.Enum):
    ATTACK_FREE = "AttackFree"
    DOS = "DoS"
    FUZZY = "Fuzzy"
    IMPERSONATION = "Impersonation"
    # Only ever assigned by the augmentation loop.
    ADVERSARIAL = "Adversarial"

    @classmethod
    def parse(cls, name: str) -> "TrafficClass":
        for member in cls:
            if name in (member.value, member.name) or name.lower() == member.value.lower():
                return member
        raise InvalidInputError(f"unknown traffic class {name!r}")


BENIGN_CLASSES: tuple[str, ...] = (
    TrafficClass.ATTACK_FREE.value,
    TrafficClass.DOS.value,
    TrafficClass.FUZZY.value,
    TrafficClass.IMPERSONATION.value,
)


@dataclass(frozen=True, slots=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    label: TrafficClass

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise InvalidInputError(f"negative timestamp {self.timestamp}")
        if not 0 <= self.can_id < MAX_CAN_ID:
            raise InvalidInputError(f"CAN id {self.can_id:#x} out of range")
        if not 0 <= self.dlc <= 8:
            raise InvalidInputError(f"DLC {self.dlc} out of range")
        if len(self.payload) != self.dlc:
            raise InvalidInputError(f"payload has {len(self.payload)} bytes, DLC says {self.dlc}")


@dataclass(frozen=True)
class CanLog:
    frames: tuple[CanFrame, ...]
    source: str = ""

    def __post_init__(self):
        if not self.frames:
            raise EmptyInputError(f"empty CAN log ({self.source or 'unnamed'})")
        prev = -1.0
        for i, fr in enumerate(self.frames):
            if fr.timestamp < prev:
                raise InvalidInputError(f"timestamps decrease at frame {i}")
            prev = fr.timestamp

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)
