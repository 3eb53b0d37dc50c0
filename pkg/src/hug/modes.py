"""The cumulative ablation ladder, rows (0) through (7)."""
from __future__ import annotations

from dataclasses import dataclass

COMPONENT, INSTANCE, MODALITY = "component", "instance", "modality"


@dataclass(frozen=True)
class ModeSpec:
    index: int
    name: str
    probabilistic: bool = True
    pooled_variance: bool = False
    fc_pools: tuple[str, ...] = ()
    coord_in_fusion: bool = False
    coord_loss: bool = False
    dynamic_weights: bool = False

    @property
    def heads(self) -> tuple[str, ...]:
        if not self.probabilistic:
            return ()
        return ("v", "t", "m") if self.coord_in_fusion else ("v", "t")


MODES: tuple[ModeSpec, ...] = (
    ModeSpec(0, "point", probabilistic=False),
    ModeSpec(1, "prob", pooled_variance=True),
    ModeSpec(2, "compFC", fc_pools=(COMPONENT,)),
    ModeSpec(3, "instFC", fc_pools=(COMPONENT, INSTANCE)),
    ModeSpec(4, "modFC", fc_pools=(COMPONENT, INSTANCE, MODALITY)),
    ModeSpec(5, "crossmodal", fc_pools=(COMPONENT, INSTANCE, MODALITY), coord_in_fusion=True),
    ModeSpec(6, "cordloss", fc_pools=(COMPONENT, INSTANCE, MODALITY), coord_in_fusion=True,
             coord_loss=True),
    ModeSpec(7, "full", fc_pools=(COMPONENT, INSTANCE, MODALITY), coord_in_fusion=True,
             coord_loss=True, dynamic_weights=True),
)

FULL = MODES[7]


def get_mode(mode: int | str) -> ModeSpec:
    if isinstance(mode, str):
        if mode.isdigit():
            mode = int(mode)
        else:
            for m in MODES:
                if m.name == mode:
                    return m
            raise ValueError(f"unknown mode {mode!r}; expected 0-7 or one of "
                             f"{[m.name for m in MODES]}")
    if not 0 <= mode < len(MODES):
        raise ValueError(f"mode must be in 0..7, got {mode}")
    return MODES[mode]
