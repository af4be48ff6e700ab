from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class DetectionResult:
    """Outcome of a watermark test at significance level ``alpha``.

    ``score`` is the scheme's test statistic (green count for KGW, minimum
    alignment cost for KTH) and ``count`` the number of tokens that entered it.
    """

    scheme: str
    score: float
    count: int
    p_value: float
    alpha: float = 0.01
    z: float | None = None
    per_document: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if self.count < 0:
            raise ValueError("count must be nonnegative")

    @property
    def decision(self) -> bool:
        return self.p_value < self.alpha

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decision"] = self.decision
        return d
