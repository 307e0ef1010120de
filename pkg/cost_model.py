# cost_model.py - Training-cost accounting in units of one network pass (N)

from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from error_handler import ConfigError

COST_METHODS = ("no-defense", "abnn", "pgd-at", "oudefend")


@dataclass(frozen=True)
class CostModel:
    """Cost of one training step as an exact integer multiple of N"""
    method: str
    coefficient: int
    t_max: Optional[int] = None

    def __str__(self):
        return f"{self.coefficient}N"

    def as_dict(self) -> Dict[str, Any]:
        return {"method": self.method, "coefficient": self.coefficient, "t_max": self.t_max, "cost": str(self)}


@dataclass(frozen=True)
class PassEvent:
    network: str
    direction: str  # "forward" | "backward"


def _check_t_max(t_max: int):
    if t_max is None or int(t_max) != t_max or t_max < 1:
        raise ConfigError(f"t_max must be an integer >= 1, got {t_max}")


def cost_no_defense() -> CostModel:
    return CostModel("no-defense", 2)


def cost_abnn() -> CostModel:
    """substitute forward + target forward + target backward"""
    return CostModel("abnn", 3)


def cost_pgd_at(t_max: int) -> CostModel:
    _check_t_max(t_max)
    return CostModel("pgd-at", 2 * (t_max + 1), t_max)


def cost_oudefend(t_max: int) -> CostModel:
    """Every PGD-AT pass also traverses a denoising network of equal cost"""
    _check_t_max(t_max)
    return CostModel("oudefend", 4 * (t_max + 1), t_max)


def cost_ratio(t_max: int) -> float:
    """How many times more a PGD-AT step costs than an ABNN step: 2(t_max+1)/3"""
    return cost_pgd_at(t_max).coefficient / cost_abnn().coefficient


def inference_cost_plain() -> int:
    return 1


def inference_cost_abnn() -> int:
    # the substitute forward is the only overhead at inference
    return 2


def predicted_cost(method: str, t_max: Optional[int] = None) -> CostModel:
    if method == "no-defense":
        return cost_no_defense()
    if method == "abnn":
        return cost_abnn()
    if method == "pgd-at":
        return cost_pgd_at(t_max)
    if method == "oudefend":
        return cost_oudefend(t_max)
    raise ConfigError(f"unknown method {method!r}", details=f"expected one of {COST_METHODS}")


def step_schedule(method: str, t_max: Optional[int] = None) -> List[PassEvent]:
    """Ordered pass events of one training step"""
    def pair(network):
        return [PassEvent(network, "forward"), PassEvent(network, "backward")]

    if method == "no-defense":
        return pair("plain")
    if method == "abnn":
        return [PassEvent("substitute", "forward"), PassEvent("target", "forward"), PassEvent("target", "backward")]
    if method == "pgd-at":
        _check_t_max(t_max)
        return pair("plain") * (t_max + 1)
    if method == "oudefend":
        _check_t_max(t_max)
        one = [PassEvent("target", "forward"), PassEvent("denoiser", "forward"),
               PassEvent("target", "backward"), PassEvent("denoiser", "backward")]
        return one * (t_max + 1)
    raise ConfigError(f"unknown method {method!r}", details=f"expected one of {COST_METHODS}")


def cost_table(t_max: int) -> List[Dict[str, Any]]:
    abnn = cost_abnn().coefficient
    rows = []
    for method in COST_METHODS:
        cost = predicted_cost(method, t_max)
        rows.append({
            "method": method,
            "training_cost": str(cost),
            "coefficient": cost.coefficient,
            "ratio_to_abnn": cost.coefficient / abnn,
        })
    return rows


def verify_cost_model(counter, predicted: CostModel) -> bool:
    """True iff every recorded training step used exactly predicted.coefficient passes"""
    totals = list(getattr(counter, "step_totals", []))
    return bool(totals) and all(total == predicted.coefficient for total in totals)
