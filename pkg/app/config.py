from __future__ import annotations

from functools import lru_cache
from typing import TYPE_CHECKING, Any, Dict, Literal, Optional, Union

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from .errors import ParameterError

if TYPE_CHECKING:
    from .adal import AdalConfig
    from .controller import TldmConfig
    from .baselines import DcvConfig, DcvVariant


class Settings(BaseSettings):
    """Application configuration loaded from environment variables (prefix ``TLDM_``)."""

    app_name: str = Field(default="HVAC TLDM Controller")
    environment: str = Field(default="local")
    debug: bool = Field(default=False)

    # FastAPI / server
    host: str = Field(default="0.0.0.0")
    port: int = Field(default=10000)
    workspace_dir: str = Field(default="runs")

    # Logging
    log_level: str = Field(default="INFO")
    epoch_log: Optional[str] = Field(default=None)

    # QP solver
    qp_tol: float = Field(default=1e-8, gt=0)
    qp_max_iter: int = Field(default=5000, gt=0)

    # Upper-level (thermal) coordination
    ulc_rho: float = Field(default=1.0, gt=0)
    ulc_eps_in: float = Field(default=1e-3, gt=0)
    ulc_max_inner: int = Field(default=500, gt=0)

    # Lower-level (CO2) coordination
    llc_rho: float = Field(default=1.0, gt=0)
    llc_eps_in: float = Field(default=1e-3, gt=0)
    llc_eps_out: float = Field(default=1.0, gt=0)
    llc_max_inner: int = Field(default=500, gt=0)
    llc_max_outer: int = Field(default=20, gt=0)

    aggregation: Union[Literal["rows", "auto"], float] = Field(default="rows")
    multiplier_step: Literal["damped", "full"] = Field(default="damped")
    residual_balancing: bool = Field(default=False)
    workers: int = Field(default=1, ge=1)

    # Epoch loop
    dr_step: Optional[float] = Field(default=None, gt=0)
    max_dr_iters: int = Field(default=20, ge=0)
    temp_tolerance: float = Field(default=0.05, ge=0)
    co2_guard: float = Field(default=5.0, ge=0)
    ulc_warm_start: bool = Field(default=True)
    temp_box_slack: float = Field(default=3.0, ge=0)
    tie_break_weight: float = Field(default=1e-6, ge=0)

    # Baselines
    dcv_resolve: bool = Field(default=True)
    dcv_per_person_rate: Optional[float] = Field(default=None, ge=0)
    dcv_per_area_rate: Optional[float] = Field(default=None, ge=0)
    oracle_max_combinations: int = Field(default=50_000_000, gt=0)

    class Config:
        env_prefix = "TLDM_"
        env_file = ".env"
        env_file_encoding = "utf-8"

    def adal_config(self, level: Literal["ulc", "llc"]) -> "AdalConfig":
        """Coordination parameters for one level of the hierarchy."""

        from .adal import AdalConfig

        common = dict(
            aggregation=self.aggregation,
            multiplier_step=self.multiplier_step,
            residual_balancing=self.residual_balancing,
            workers=self.workers,
            qp_tol=self.qp_tol,
            qp_max_iter=self.qp_max_iter,
        )
        if level == "ulc":
            return AdalConfig(
                rho=self.ulc_rho,
                eps_in=self.ulc_eps_in,
                max_inner=self.ulc_max_inner,
                **common,
            )
        return AdalConfig(
            rho=self.llc_rho,
            eps_in=self.llc_eps_in,
            eps_out=self.llc_eps_out,
            max_inner=self.llc_max_inner,
            max_outer=self.llc_max_outer,
            **common,
        )

    def tldm_config(self) -> "TldmConfig":
        from .controller import TldmConfig

        return TldmConfig(
            ulc=self.adal_config("ulc"),
            llc=self.adal_config("llc"),
            dr_step=self.dr_step,
            max_dr_iters=self.max_dr_iters,
            temp_tolerance=self.temp_tolerance,
            co2_guard=self.co2_guard,
            ulc_warm_start=self.ulc_warm_start,
            temp_box_slack=self.temp_box_slack,
            tie_break_weight=self.tie_break_weight,
        )

    def dcv_config(self, variant: "DcvVariant", zones: int) -> "DcvConfig":
        """Published rates for the zone count unless overridden; variant I ignores the per-area rate."""

        from .baselines import DcvConfig, published_dcv_rates

        preset = published_dcv_rates(zones, variant)
        per_area = 0.0 if variant == "I" else (self.dcv_per_area_rate if self.dcv_per_area_rate is not None else preset.per_area_rate)
        return DcvConfig(
            per_person_rate=self.dcv_per_person_rate if self.dcv_per_person_rate is not None else preset.per_person_rate,
            per_area_rate=per_area,
            variant=variant,
            resolve=self.dcv_resolve,
        )


@lru_cache()
def get_settings() -> Settings:
    """Return cached application settings instance."""

    return Settings()


def settings_with_overrides(overrides: Dict[str, Any] | None = None) -> Settings:
    """Settings from the environment with explicit ``key=value`` overrides applied on top."""

    base = get_settings()
    if not overrides:
        return base
    unknown = sorted(set(overrides) - set(Settings.model_fields))
    if unknown:
        raise ParameterError(f"Unknown setting(s): {', '.join(unknown)}")
    merged = base.model_dump()
    merged.update(overrides)
    try:
        return Settings.model_validate(merged)
    except ValidationError as exc:
        raise ParameterError(f"Invalid setting override: {exc.errors()[0]['msg']}") from exc


def parse_overrides(pairs: list[str] | None) -> Dict[str, str]:
    """Parse repeated ``--set key=value`` arguments."""

    result: Dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ParameterError(f"Override '{pair}' must look like key=value")
        result[key.strip()] = value.strip()
    return result
