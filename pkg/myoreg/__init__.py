"""
myoreg

Coordinate-based deformable registration of the left-ventricle myocardium across
a cardiac cycle: a sinusoidal MLP represents the displacement field and is fitted
per frame pair against CT intensities and signed distance fields.
"""

__version__ = "0.1.0"
