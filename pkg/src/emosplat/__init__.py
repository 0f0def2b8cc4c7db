"""emosplat: layered deformable 3D Gaussian splatting for emotion-steerable
talking-head scenes."""

__version__ = "0.1.0"
