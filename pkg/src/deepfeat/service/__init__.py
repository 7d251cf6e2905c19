"""HTTP service wrapping the saliency pipeline.

The FastAPI app in :mod:`deepfeat.service.app` exposes the predictor and
the evaluation harness over JSON; :mod:`deepfeat.service.handlers` holds
the request handlers, which the command line client calls directly when
no server address is given.
"""

from deepfeat.service.app import app, create_app
from deepfeat.service.handlers import ServiceState

__all__ = ["ServiceState", "app", "create_app"]
