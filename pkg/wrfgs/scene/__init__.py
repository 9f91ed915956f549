"""可训练的场景模型：参数表、场景网络、辐射场管线与自适应密度控制。"""

from wrfgs.scene.density import DensityResult, DensityStats, densify_and_prune, should_densify
from wrfgs.scene.field import (
    AttributeGrads,
    CollapsedRender,
    FieldRender,
    GaussianAttributes,
    RadiationField,
    add_grads,
    init_random,
)
from wrfgs.scene.network import (
    ConditioningInput,
    ConditioningKind,
    DeformationNetwork,
    DeformationOutput,
    ScenarioNetwork,
)
from wrfgs.scene.store import ParamStore, nearest_neighbor_scale

__all__ = [
    "AttributeGrads",
    "CollapsedRender",
    "ConditioningInput",
    "ConditioningKind",
    "DeformationNetwork",
    "DeformationOutput",
    "DensityResult",
    "DensityStats",
    "FieldRender",
    "GaussianAttributes",
    "ParamStore",
    "RadiationField",
    "ScenarioNetwork",
    "add_grads",
    "densify_and_prune",
    "init_random",
    "nearest_neighbor_scale",
    "should_densify",
]
