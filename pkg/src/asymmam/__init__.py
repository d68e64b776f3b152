"""Bilateral-mammogram asymmetry toolkit.

Submodules:
    imgio    -- manifests, PNG I/O, preprocessing, augmentation
    synthlab -- tumor libraries, alpha blending, phantom generation
    asyc     -- shared-encoder transformer classifier with online CAM
    asyd     -- U-Net-style disentanglement decoder (x_n, x_ab)
    selfadv  -- losses, frozen-discriminator training engine, checkpoints
    evalkit  -- AUC/bootstrap, IoU/IoR/Dice, mean TIoU/TIoR, evaluation driver
    config   -- flat key=value run configuration
    cli      -- asymmam command-line entry point

Model-bearing submodules import torch; import them explicitly as needed.
"""

from . import errors

__version__ = "0.1.0"
__all__ = ["errors", "__version__"]
