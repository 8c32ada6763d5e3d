"""Export detections, crop features and prompt embeddings for the scoring pipeline."""

from featx.errors import FeatxError
from featx.export import ExportJob, export

__version__ = "0.1.0"

__all__ = ["ExportJob", "export", "FeatxError", "__version__"]
