"""Text-to-point-cloud localization without ground-truth instances.

Coarse stage: contrastive text/cell retrieval over a cell database.
Fine stage: regression of the 2D target position inside a retrieved cell.
"""

__version__ = "0.1.0"
