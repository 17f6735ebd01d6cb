"""Token segment tags, in prompt order."""
import enum


class Segment(enum.IntEnum):
    SYSTEM = 0
    VISION = 1
    INSTRUCTION = 2
    GENERATED = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Segment":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown segment {text!r}") from None


TEXT_SEGMENTS = (Segment.INSTRUCTION, Segment.GENERATED)
