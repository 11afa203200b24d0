"""AMD diagnosis from retinographies with a multi-task (diagnosis + lesion) CNN."""

from amddx.datamodel import LESION_CLASSES, DatasetManifest, FoldPlan, PredictionRecord, Sample

__version__ = "0.1.0"

__all__ = ["LESION_CLASSES", "DatasetManifest", "FoldPlan", "PredictionRecord", "Sample", "__version__"]
