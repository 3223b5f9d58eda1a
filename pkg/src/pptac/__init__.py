"""Tactile-feedback grasping pipeline for thin deformable sheets.

Subpackages cover the full loop: sensor calibration and depth
reconstruction, procedural terrain, grasp-motion dataset synthesis via
trajectory optimization, a diffusion policy over the 152-dim robot state,
and a quasi-static closed-loop grasp simulator.
"""

__version__ = "0.1.0"
