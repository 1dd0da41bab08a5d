"""ADA-SAM at desk scale: a self-prompting multitask segmentation model trained
on synthetic two-muscle thigh phantoms, with a blinded expert-rating protocol
(SegEx) for judging mask quality."""

__version__ = "0.1.0"
