"""Built-in test families used by ``agebif validate`` and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, DiscretizationConfig, ModelConfig


@dataclass(frozen=True)
class Family:
    name: str
    model: ModelConfig
    discretization: DiscretizationConfig
    description: str = ""


def _fam(name, description, disc=(64, 200, "implicit-euler"), **model):
    n, M, scheme = disc
    return Family(name, ModelConfig(**model), DiscretizationConfig(n, M, scheme), description)


FAMILIES = {
    f.name: f
    for f in [
        _fam("neumann-constant", "b = 2, mu = 1, D = 1, Neumann", birth="2"),
        _fam(
            "dirichlet-constant",
            "b = 20, mu = 1, D = 1, Dirichlet",
            disc=(128, 400, "crank-nicolson"),
            birth="20",
            boundary="dirichlet",
        ),
        _fam("robin-constant", "b = 5, mu = 1, D = 1, Robin weight 1", birth="5", boundary="robin", robin_weight=(1.0, 1.0)),
        _fam("age-diffusion", "b = 3, mu = 1 + a, D = 0.1 (1 + a), Dirichlet", birth="3", mortality="1 + a",
             diffusion="0.1*(1 + a)", boundary="dirichlet"),
        _fam(
            "subcritical-neumann",
            "b = 2/(1+z), mu = 1+z, D = 1, Neumann",
            mortality="1 + z",
            birth="2/(1+z)",
            derivatives={"mortality": "1", "birth": "-2/(1+z)^2"},
        ),
        _fam(
            "subcritical-dirichlet",
            "b = 20/(1+z), mu = 1+z, D = 1, Dirichlet",
            disc=(32, 80, "implicit-euler"),
            mortality="1 + z",
            birth="20/(1+z)",
            boundary="dirichlet",
        ),
        _fam("holling-tanner", "b = 0.5, mu = 0, D = 1, Neumann, Holling-Tanner reaction", birth="0.5",
             mortality="0", mode="holling-tanner"),
        _fam("peclet-drift", "strong density-driven drift with weak diffusion", diffusion="0.01",
             drift="20*z", birth="2"),
    ]
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown test family {name!r}; choose from {sorted(FAMILIES)}") from None
