from dataclasses import asdict, dataclass
from typing import List, Tuple

from scripts.errors import ProtocolError

MODES = ("shifting", "expanding")


@dataclass(frozen=True)
class WindowSpec:
    """
    One backtest iteration.

    Training covers years b+delta .. b+o+k-1 with delta = k (shifting) or
    0 (expanding); the test year is b+o+k.
    """

    baseline: int
    offset: int
    mode: str
    k: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.offset < 1:
            raise ValueError(f"offset must be >= 1, got {self.offset}")
        if self.k < 0:
            raise ValueError(f"iteration k must be >= 0, got {self.k}")

    @property
    def delta(self) -> int:
        return self.k if self.mode == "shifting" else 0

    @property
    def train_range(self) -> Tuple[int, int]:
        """Inclusive first and last training year."""
        return self.baseline + self.delta, self.baseline + self.offset + self.k - 1

    @property
    def train_years(self) -> List[int]:
        first, last = self.train_range
        return list(range(first, last + 1))

    @property
    def test_year(self) -> int:
        return self.baseline + self.offset + self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WindowSpec":
        return cls(**data)


def window_plan(baseline: int, offset: int, mode: str, last_test_year: int) -> List[WindowSpec]:
    """
    All windows from k = 0 until the test year reaches last_test_year.

    Raises:
        ProtocolError: If last_test_year < baseline + offset (empty plan).
    """
    count = last_test_year - baseline - offset + 1
    if count < 1:
        raise ProtocolError(
            f"empty window plan: last test year {last_test_year} precedes {baseline + offset}"
        )
    return [WindowSpec(baseline, offset, mode, k) for k in range(count)]
