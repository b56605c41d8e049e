from .build import LadderNet, ModuleTag, ShapeError, TaggedModel, TinyViT, build
from .receptive import (ConvGeom, ReceptiveFieldReport, analyze, backward_recursion,
                        input_interval, ladder_path, receptive_field)
from .spec import (STEP_CHANGES, STEP_NAMES, Activation, ArchSpec, BlockStyle, Family,
                   Norm, NormCount, SpecError, StemSpec, VitSpec, shrink, spec_diff,
                   spec_for_step, tiny_ladder_spec, tiny_vit_spec, vit_b_spec)

__all__ = [
    "Activation", "ArchSpec", "BlockStyle", "ConvGeom", "Family", "LadderNet", "ModuleTag",
    "Norm", "NormCount", "ReceptiveFieldReport", "STEP_CHANGES", "STEP_NAMES", "ShapeError",
    "SpecError", "StemSpec", "TaggedModel", "TinyViT", "VitSpec", "analyze",
    "backward_recursion", "build", "input_interval", "ladder_path", "receptive_field",
    "shrink", "spec_diff", "spec_for_step", "tiny_ladder_spec", "tiny_vit_spec", "vit_b_spec",
]
