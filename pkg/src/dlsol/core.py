"""Parameter types, the constants ledger, measure conventions and the report schema."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Any

import yaml


class ConstraintViolation(ValueError):
    """A configuration inequality failed; ``name`` identifies which one."""

    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"{name}: {detail}" if detail else name)
        self.name = name
        self.detail = detail


class PreconditionViolation(ValueError):
    pass


class SpaceKind(str, enum.Enum):
    DL = "DL"
    SOL = "Sol"


class MeasureKind(str, enum.Enum):
    VOLUME = "Volume"
    MU = "Mu"


@dataclass(frozen=True)
class ModelParams:
    kind: SpaceKind
    m: Any
    n: Any

    def __post_init__(self):
        kind = SpaceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is SpaceKind.DL:
            if int(self.m) != self.m or int(self.n) != self.n:
                raise ConstraintViolation("params", "DL parameters must be integers")
            object.__setattr__(self, "m", int(self.m))
            object.__setattr__(self, "n", int(self.n))
            if self.n < 2:
                raise ConstraintViolation("params", "DL needs m >= n >= 2")
        else:
            object.__setattr__(self, "m", float(self.m))
            object.__setattr__(self, "n", float(self.n))
            if not (math.isfinite(self.m) and math.isfinite(self.n)) or self.n <= 0:
                raise ConstraintViolation("params", "Sol needs m >= n > 0")
        if self.m < self.n:
            raise ConstraintViolation("params", "orientation convention requires m >= n")

    @classmethod
    def parse(cls, text: str) -> "ModelParams":
        """Parse ``dl:3,2`` or ``sol:1.5,1``."""
        try:
            head, rest = text.strip().split(":", 1)
            a, b = rest.split(",")
        except ValueError:
            raise ConstraintViolation("params", f"cannot parse space {text!r}") from None
        head = head.lower()
        if head == "dl":
            return cls(SpaceKind.DL, int(a), int(b))
        if head == "sol":
            return cls(SpaceKind.SOL, float(a), float(b))
        raise ConstraintViolation("params", f"unknown space kind {head!r}")

    @property
    def is_dl(self) -> bool:
        return self.kind is SpaceKind.DL

    def __str__(self) -> str:
        if self.is_dl:
            return f"dl:{self.m},{self.n}"
        return f"sol:{self.m:g},{self.n:g}"

    def mu_weight(self, h) -> Fraction | float:
        """Weight of a unit of counting/Lebesgue measure at height h."""
        if self.is_dl:
            return Fraction(self.m, self.n) ** int(h)
        return math.exp((self.m - self.n) * h)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "m": self.m, "n": self.n}


@dataclass(frozen=True)
class QiConstants:
    kappa: float = 1.0
    c_add: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 1:
            raise ConstraintViolation("kappa", "kappa must be >= 1")
        if not self.c_add >= 0:
            raise ConstraintViolation("c_add", "c_add must be >= 0")


@dataclass(frozen=True)
class LedgerConstants:
    """Every implied constant of the argument, named and overridable."""

    subdivision: float = 8.0          # gain >= eps r / (subdivision kappa^2)
    subdivision_n: float = 16.0       # N_sub >= subdivision_n kappa (kappa + C) / eps
    scales_sum: float = 16.0          # sum_s delta_s <= scales_sum kappa^3 / eps
    scale_count: float = 16.0         # S > scale_count kappa^3 / (eps delta^scale_count_exp)
    scale_count_exp: float = 4.0
    delta_root: float = 4.0           # delta^(1/delta_root) <= min(eps, theta/delta_theta_div)
    delta_theta_div: float = 256.0
    average_exp: float = 4.0          # family average at s* <= delta^average_exp
    goodbox_factor: float = 2.0       # per-tile average <= goodbox_factor delta^goodbox_exp
    goodbox_exp: float = 2.0
    tiling_error: float = 1.0         # tiling remainder term tiling_error R/L <= delta^2
    alignment: float = 4.0            # dominant fraction >= 1 - alignment delta
    uniform_u: float = 8.0            # mu(U) >= (1 - uniform_u sqrt(delta)) mu(box)
    height_preserving: float = 128.0  # mu(U1) >= (1 - height_preserving delta^(1/4)) mu(box)
    product_map: float = 256.0        # mu(U2) >= (1 - product_map delta^(1/4)) mu(box)
    fit_height: float = 1.0           # U1: |h(phi) - q| <= fit_height eps R
    a_const: float = 1.0              # ordering constant A for rho1, rho2
    r0_over_c: float = 1.0            # r0 >= r0_over_c C
    qi_budget: float = 2.0            # additive budget when sweeping kappa
    noflips_area: float = 1000.0      # exp((c rho2 - D rho1) R) >= noflips_area
    noflips_c: float = 1.0            # area growth exponent c = noflips_c log(m/n)
    noflips_d: float = 1.0
    noflips_path: float = 16.0        # pulled-back length bound noflips_path kappa^3 rho2 R
    noflips_radius: float = 0.0       # avoided neighbourhood radius noflips_radius rho1 R
    trap_fraction: float = 0.99
    area_fraction: float = 0.9
    shadow_const: float = 1.0         # good shadow: bad mass <= shadow_const sqrt(theta)
    plane_const: float = 1.0          # good plane: bad mass <= plane_const theta^(1/4)
    same_level: float = 2.0
    next_level: float = 12.0
    uj_step: float = 16.0
    telescoped: float = 32.0
    q_bilip: float = 1.0              # O(delta L) term in the bilipschitz check of q
    weak_eta: float = 12.0            # eta = weak_eta kappa^2 eta1
    weak_c1: float = 1.0              # C1 = weak_c1 eta1 R
    pairwise_c: float = 4.0           # final check |h(phi p1) - h(phi p2)| <= pairwise_c C1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float
    theta: float
    delta: float
    eta: float
    eta1: float
    beta: float
    nu: float
    rho1: float
    rho2: float
    N: int
    S: int
    r0: int
    A_uniform: float
    seed: int = 0
    ledger: LedgerConstants = field(default_factory=LedgerConstants)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ledger"}
        d["ledger"] = self.ledger.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        ledger = LedgerConstants(**data.pop("ledger", {}) or {})
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConstraintViolation("config", f"unknown keys {sorted(extra)}")
        return cls(ledger=ledger, **data)


_UNIT_FIELDS = ("epsilon", "theta", "delta", "eta", "eta1", "beta", "nu", "rho1", "rho2")

# Symbolic ladders beyond this many scales are not materialized.
LADDER_CAP = 64


@dataclass(frozen=True)
class ValidatedConfig:
    source: ModelParams
    target: ModelParams
    qi: QiConstants
    cfg: PipelineConfig
    ladder: tuple[int, ...] | None
    tiling_exponent: int
    L_ledger: int | None
    bounds: dict

    def r(self, s: int) -> int:
        return self.cfg.r0 * self.cfg.N ** s

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "qi": asdict(self.qi),
            "cfg": self.cfg.to_dict(),
            "ladder": list(self.ladder) if self.ladder is not None else None,
            "tiling_exponent": self.tiling_exponent,
            "L_ledger": self.L_ledger,
            "bounds": dict(self.bounds),
        }


def _check_fields(cfg: PipelineConfig) -> None:
    for name in _UNIT_FIELDS:
        v = getattr(cfg, name)
        if not (0 < v < 1):
            raise ConstraintViolation(name, f"{name}={v} must lie in (0,1)")
    if int(cfg.N) != cfg.N or cfg.N < 2:
        raise ConstraintViolation("N", "N must be an integer >= 2")
    if int(cfg.S) != cfg.S or cfg.S < 1:
        raise ConstraintViolation("S", "S must be an integer >= 1")
    if int(cfg.r0) != cfg.r0 or cfg.r0 < 1:
        raise ConstraintViolation("r0", "r0 must be a positive integer")
    if not cfg.A_uniform > 2:
        raise ConstraintViolation("A_uniform", "A_uniform must exceed 2")


def scales_bound(qi: QiConstants, cfg: PipelineConfig) -> float:
    led = cfg.ledger
    return led.scale_count * qi.kappa ** 3 / (cfg.epsilon * cfg.delta ** led.scale_count_exp)


def delta_bound(cfg: PipelineConfig) -> float:
    led = cfg.ledger
    return min(cfg.epsilon, cfg.theta / led.delta_theta_div) ** led.delta_root


def validate_config(source: ModelParams, target: ModelParams, qi: QiConstants,
                    cfg: PipelineConfig) -> ValidatedConfig:
    """Check the constants ledger in its fixed order and derive the scale ladder."""
    _check_fields(cfg)
    led = cfg.ledger
    A = led.a_const
    if not A * cfg.rho2 < 1:
        raise ConstraintViolation("rho2", f"A*rho2={A * cfg.rho2} must be < 1")
    if not (cfg.rho1 < cfg.rho2 and A * cfg.rho1 < cfg.rho2):
        raise ConstraintViolation("rho1<rho2", f"rho1={cfg.rho1}, rho2={cfg.rho2}, A={A}")
    if not (cfg.epsilon < cfg.rho1 and A * cfg.epsilon < cfg.rho1):
        raise ConstraintViolation("epsilon<rho1", f"epsilon={cfg.epsilon}, rho1={cfg.rho1}")
    if not A * cfg.theta ** 0.25 < cfg.rho1:
        raise ConstraintViolation("theta<rho1", f"A*theta^(1/4)={A * cfg.theta ** 0.25}")
    dmax = delta_bound(cfg)
    if cfg.delta > dmax * (1 + 1e-12):
        raise ConstraintViolation("delta", f"delta={cfg.delta} exceeds {dmax}")
    if abs(cfg.nu - math.sqrt(cfg.delta)) > 1e-12 * max(1.0, cfg.nu):
        raise ConstraintViolation("nu", f"nu={cfg.nu} must equal sqrt(delta)")
    sb = scales_bound(qi, cfg)
    if not cfg.S > sb:
        raise ConstraintViolation("S", f"S={cfg.S} must exceed {sb}")
    if not cfg.r0 >= led.r0_over_c * qi.c_add:
        raise ConstraintViolation("r0", f"r0={cfg.r0} below {led.r0_over_c * qi.c_add}")

    # Smallest p >= S with tiling_error * N^(S-p) <= delta^2.
    N, S = int(cfg.N), int(cfg.S)
    extra = 0
    target_err = cfg.delta ** 2
    if led.tiling_error > 0:
        extra = max(0, math.ceil(math.log(led.tiling_error / target_err) / math.log(N) - 1e-12))
        while led.tiling_error * float(N) ** (-extra) > target_err:
            extra += 1
    p = S + extra
    ladder = tuple(cfg.r0 * N ** s for s in range(S + 1)) if S <= LADDER_CAP else None
    L_ledger = cfg.r0 * N ** p if p <= LADDER_CAP else None
    bounds = {
        "delta_max": dmax,
        "delta_equality_gap": dmax - cfg.delta,
        "S_min_exclusive": sb,
        "scales_sum": led.scales_sum * qi.kappa ** 3 / cfg.epsilon,
        "tiling_error_at_L": led.tiling_error * float(N) ** (-extra),
        "subdivision_N": subdivision_n(qi, cfg),
    }
    return ValidatedConfig(source, target, qi, cfg, ladder, p, L_ledger, bounds)


def subdivision_n(qi: QiConstants, cfg: PipelineConfig) -> int:
    """Subdivision count at which the gain bound is guaranteed for discrete paths."""
    lam = qi.kappa + qi.c_add
    return max(2, math.ceil(cfg.ledger.subdivision_n * qi.kappa * lam / cfg.epsilon - 1e-12))


def paper_config(epsilon: float = 0.1, theta: float = 0.1, qi: QiConstants = QiConstants(),
                 seed: int = 0, ledger: LedgerConstants | None = None) -> PipelineConfig:
    """Constants chosen in the ledger order starting from (epsilon, theta)."""
    led = ledger or LedgerConstants()
    delta = min(epsilon, theta / led.delta_theta_div) ** led.delta_root
    nu = math.sqrt(delta)
    S = math.floor(scales_bound(qi, _stub(epsilon, theta, delta, led))) + 1
    lo = max(led.a_const * epsilon, led.a_const * theta ** 0.25)
    span = 1.0 / led.a_const
    rho1 = lo + (span - lo) / (3 * led.a_const)
    rho2 = (led.a_const * rho1 + 1 / led.a_const) / 2
    eta1 = delta
    cfg = PipelineConfig(
        epsilon=epsilon, theta=theta, delta=delta,
        eta=min(0.5, led.weak_eta * qi.kappa ** 2 * eta1), eta1=eta1,
        beta=min(0.5, 1 / qi.kappa ** 4), nu=nu, rho1=rho1, rho2=rho2,
        N=2, S=S, r0=max(1, math.ceil(led.r0_over_c * qi.c_add)),
        A_uniform=4 * (128 / delta) ** 4, seed=seed, ledger=led,
    )
    return replace(cfg, N=subdivision_n(qi, cfg))


def _stub(epsilon, theta, delta, led) -> PipelineConfig:
    return PipelineConfig(epsilon=epsilon, theta=theta, delta=delta, eta=0.5, eta1=0.5,
                          beta=0.5, nu=math.sqrt(delta), rho1=0.5, rho2=0.5, N=2, S=1,
                          r0=1, A_uniform=4, ledger=led)


# Desk profile: scaled constants so that every stage runs on boxes of a few
# thousand vertices.  DESK_SCALE records each override against its default.
DESK_LEDGER = LedgerConstants(
    scale_count=1e-3,
    scale_count_exp=1.0,
    delta_theta_div=0.5,
    average_exp=1.0,
    goodbox_exp=0.5,
    tiling_error=0.0,
    uniform_u=2.0,
    height_preserving=0.5,
    product_map=1.0,
    a_const=0.5,
    noflips_area=1.5,
    noflips_d=0.3,
    trap_fraction=0.75,
    area_fraction=0.5,
)


def desk_scale_factors() -> dict:
    base = LedgerConstants()
    out = {}
    for f in fields(LedgerConstants):
        a, b = getattr(base, f.name), getattr(DESK_LEDGER, f.name)
        if a != b:
            out[f.name] = {"default": a, "desk": b}
    return out


def desk_config(seed: int = 7, ledger: LedgerConstants | None = None) -> PipelineConfig:
    led = ledger or DESK_LEDGER
    delta = 1 / 81
    return PipelineConfig(
        epsilon=1 / 3, theta=0.3, delta=delta, eta=0.5, eta1=1 / 24, beta=0.5,
        nu=math.sqrt(delta), rho1=0.4, rho2=0.45, N=2, S=2, r0=2, A_uniform=4.0,
        seed=seed, ledger=led,
    )


def load_yaml(path: str) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConstraintViolation("config", "config file must hold a mapping")
    return data


def jsonable(obj: Any) -> Any:
    """Convert nested values into plain JSON types deterministically."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(jsonable(v) for v in obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Fraction):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return int(obj)
    if hasattr(obj, "item"):
        return jsonable(obj.item())
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    return str(obj)


REPORT_KEYS = ("params", "config", "scale_stats", "good_boxes", "orientation", "drift",
               "verdict", "provenance")


@dataclass
class Report:
    params: dict
    config: dict
    scale_stats: Any = None
    good_boxes: Any = None
    orientation: Any = None
    drift: Any = None
    verdict: Any = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: jsonable(getattr(self, k)) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        data = json.loads(text)
        return cls(**{k: data.get(k) for k in REPORT_KEYS})
