"""Target species and their body-plan classes.

The body-plan class selects the prompt template: canids get the
face-first lesion progression, hoofstock get the dorsal-sparing rule,
and the raccoon reuses the canid progression with face/tail emphasis
(a documented extrapolation, not an observed pattern).
"""

from enum import Enum


class BodyPlan(Enum):
    CANID = "canid"
    HOOFSTOCK = "hoofstock"
    PROCYONID = "procyonid"


BODY_PLAN_BY_SPECIES: dict[str, BodyPlan] = {
    "gray wolf": BodyPlan.CANID,
    "red fox": BodyPlan.CANID,
    "gray fox": BodyPlan.CANID,
    "white-tailed deer": BodyPlan.HOOFSTOCK,
    "mule deer": BodyPlan.HOOFSTOCK,
    "elk": BodyPlan.HOOFSTOCK,
    "cervid": BodyPlan.HOOFSTOCK,
    "raccoon": BodyPlan.PROCYONID,
}

TARGET_SPECIES: tuple[str, ...] = tuple(sorted(BODY_PLAN_BY_SPECIES))
