import os
from typing import List
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

# ENV selects the dotenv file (local or prod)
env = os.getenv("ENV", "local")

if env == "prod":
    env_file_path = ".env.prod"
else:
    env_file_path = ".env"

load_dotenv(dotenv_path=env_file_path)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="QTOMO_", env_file=".env", extra="ignore")

    # Runtime
    threads: int = Field(default=1, ge=1, description="Worker cap for sweeps (QTOMO_THREADS)")
    output_dir: str = Field(default="output", description="Default artifact directory")
    log_level: str = Field(default="INFO", description="Root logging level")
    default_seed: int = Field(default=20220131, description="Seed used when a run config gives none")

    # Time grid of simulated traces
    samples_per_period: int = Field(default=64, ge=8, description="Samples per Larmor period")
    larmor_periods: float = Field(default=8.0, gt=0, description="Trace duration in Larmor periods")

    # Reconstruction
    multistart_restarts: int = Field(
        default=8,
        ge=0,
        description="Random restarts on top of the maximally mixed starting point"
    )
    objective_tolerance: float = Field(
        default=1e-10,
        gt=0,
        description="Convergence tolerance on the objective decrease"
    )
    max_iterations: int = Field(default=2000, ge=1, description="Quasi-Newton iteration cap per start")
    channel_threshold: float = Field(
        default=1e-12,
        ge=0,
        description="Minimum |V_R|, |V_I| relative to |V| for an observable channel"
    )

    # Master-equation integration
    integrator_rtol: float = Field(default=1e-9, gt=0)
    integrator_atol: float = Field(default=1e-13, gt=0)
    integrator_methods: List[str] = Field(
        default=["DOP853", "Radau"],
        description="solve_ivp methods tried in order when an integration fails"
    )

    # Monte-Carlo
    desk_samples_per_point: int = Field(
        default=200,
        ge=30,
        description="Fidelity samples per sweep point at desk scale"
    )


settings = Settings()
