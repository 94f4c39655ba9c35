from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass(frozen=True)
class CircuitConfig:
    """Track layout and energy characteristics of one circuit.

    ``zone_sectors`` holds 0-based sector numbers within a lap that contain an
    activation zone. The detection point is the final sector of each lap.
    """

    name: str = "melbourne"
    laps: int = 58
    sectors_per_lap: int = 3
    zone_sectors: tuple[int, ...] = (2,)
    recharge_ratio: float = 1.0
    derate_offset: float | None = None

    def __post_init__(self):
        if self.laps < 1 or self.sectors_per_lap < 1:
            raise ValueError("circuit needs at least one lap and one sector")
        if not self.zone_sectors:
            raise ValueError("at least one activation zone per lap is required")
        if any(not 0 <= s < self.sectors_per_lap for s in self.zone_sectors):
            raise ValueError(f"zone sectors {self.zone_sectors} out of range")
        object.__setattr__(self, "zone_sectors", tuple(sorted(set(self.zone_sectors))))

    @property
    def n_sectors(self) -> int:
        return self.laps * self.sectors_per_lap

    @property
    def detection_sector(self) -> int:
        return self.sectors_per_lap - 1

    @property
    def l_derate_throttle_offset(self) -> float:
        # Mandatory super-clipping at low-regen circuits raises L_derate's clipping fraction.
        if self.derate_offset is not None:
            return self.derate_offset
        return 0.10 if self.recharge_ratio <= 1.0 else 0.0

    def is_zone(self, sector: int) -> bool:
        return sector in self.zone_sectors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zone_sectors"] = list(self.zone_sectors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitConfig":
        d = dict(d)
        if "zone_sectors" in d:
            d["zone_sectors"] = tuple(d["zone_sectors"])
        return cls(**d)


MELBOURNE = CircuitConfig()
BAKU = CircuitConfig(name="baku", laps=51, recharge_ratio=2.2)
