"""
Artifact writers for CLI runs

JSON goes through write_json (sorted keys); CSVs use a fixed float format so
identical runs produce byte-identical files.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from app import __version__
from app.core.dataset import ResponseDataset, to_csv, write_loadings_csv
from app.core.serializer_utils import safe_json_loads, write_json
from app.core.simulation import GroundTruth
from app.core.svi_engine import FittedModel, save_fitted
from app.models.ipgp_models import estimated_task_correlation
from app.schemas.ipgp_schemas import RunConfig, RunManifest

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
MANIFEST_FILE = "manifest.json"


class ArtifactWriter:
    """Writes one run's files into an output directory and remembers their names"""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def _track(self, path: Path) -> Path:
        self.written.append(path.relative_to(self.out_dir).as_posix())
        return path

    def path(self, name: str) -> Path:
        target = self.out_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def json(self, name: str, payload) -> Path:
        return self._track(write_json(self.path(name), payload))

    def csv(self, name: str, frame: pd.DataFrame, index: bool = False) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=index, float_format=FLOAT_FORMAT, na_rep="")
        return self._track(target)

    def dataset(self, name: str, dataset: ResponseDataset) -> Path:
        target = self.path(name)
        to_csv(dataset, target)
        return self._track(target)

    # ------------------------------------------------------------------------
    # model artifacts
    # ------------------------------------------------------------------------

    def fitted_model(self, fitted: FittedModel, prefix: str = "") -> None:
        """State, ELBO trace, loadings and per-unit correlations of one model"""
        state_dir = self.path(prefix or ".")
        for path in save_fitted(fitted, state_dir):
            self._track(path)

        trace = pd.DataFrame({"step": np.arange(len(fitted.elbo_trace)), "elbo": np.asarray(fitted.elbo_trace, dtype=float)})
        self.csv(f"{prefix}elbo_trace.csv", trace)

        item_ids = list(fitted.instance.item_ids)
        loadings = fitted.loadings()
        if loadings.w_pop is not None:
            labels = [f"factor_{k + 1}" for k in range(np.asarray(loadings.w_pop).shape[0])]
            self._track(write_loadings_csv(loadings.w_pop, labels, item_ids, self.path(f"{prefix}loadings_population.csv")))
        if loadings.w_ind is not None:
            self._track(write_loadings_csv(loadings.w_ind, fitted.instance.unit_ids, item_ids, self.path(f"{prefix}loadings_individual.csv")))

        for unit in fitted.instance.unit_ids:
            correlation = pd.DataFrame(estimated_task_correlation(fitted, unit), index=item_ids, columns=item_ids)
            self.csv(f"{prefix}correlation_unit_{_safe_name(unit)}.csv", correlation, index=True)

    def ground_truth(self, truth: GroundTruth) -> Path:
        return self.json("ground_truth.json", truth.to_dict())

    # ------------------------------------------------------------------------
    # manifest
    # ------------------------------------------------------------------------

    def manifest(self, command: str, run_config: RunConfig, name: str = MANIFEST_FILE) -> Path:
        """Written last; lists every artifact of the run"""
        manifest = RunManifest(
            command=command,
            code_version=__version__,
            seed=run_config.seed,
            config=run_config.model_dump(mode="json"),
            artifacts=sorted(self.written),
        )
        path = write_json(self.out_dir / name, manifest.model_dump(mode="json"))
        logger.info(f"📄 Wrote {len(self.written)} artifacts and the manifest to {self.out_dir}")
        return path


def _safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(label))


def split_prefix(name: str, num_splits: int) -> str:
    """Artifacts of multi-split runs go into one subdirectory per split"""
    return "" if num_splits == 1 else f"{_safe_name(name)}/"


def merge_metrics(path: Path, updates: Dict) -> Dict:
    """Existing metrics.json contents with `updates` merged in at the top level"""
    current = safe_json_loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    current.update(updates)
    return current


__all__ = ["ArtifactWriter", "FLOAT_FORMAT", "MANIFEST_FILE", "merge_metrics", "split_prefix"]
