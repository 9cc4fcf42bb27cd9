"""File formats and the feature-engineering pipeline.

Dataset CSV layout (comma separated, UTF-8, empty cell = missing)::

    # funnel-dataset v1; decision codes: 0=discharge, m=admit to stage m
    visit_id,decision_1,...,decision_{K-1},outcome,<feature columns>,<passthrough columns>

``decision_k`` is the decision taken at stage k and is empty when the
patient never reached stage k.  ``outcome`` is empty for censored patients.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .model import DISCHARGE, DataError, FunnelConfig, ModelParams, PatientRecord, PriorSpec, parameter_names

FORMAT_VERSION = 1
DATASET_TAG = "funnel-dataset v1"
KINDS = ("intercept", "numeric", "numeric_zscore", "numeric_zscore_squared", "one_hot")
FLOAT_FMT = "%.17g"


# -- feature dictionary ----------------------------------------------------------

@dataclass
class FeatureEntry:
    name: str
    kind: str
    stage: int = 1
    source: Optional[str] = None
    valid_range: Optional[tuple[Optional[float], Optional[float]]] = None
    category: Optional[str] = None
    description: str = ""

    @property
    def column(self) -> str:
        return self.source or self.name


@dataclass
class FeatureDictionary:
    entries: list[FeatureEntry]
    n_stages: int = 3

    def __post_init__(self):
        kinds = [e.kind for e in self.entries]
        bad = [k for k in kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown feature kinds {bad}")
        if kinds.count("intercept") != 1:
            raise ValueError("the dictionary needs exactly one intercept entry")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        zscored = {e.name for e in self.entries if e.kind == "numeric_zscore"}
        for e in self.entries:
            if not 1 <= e.stage <= self.n_stages:
                raise ValueError(f"{e.name}: stage {e.stage} outside [1, {self.n_stages}]")
            if e.kind == "numeric_zscore_squared" and e.source not in zscored:
                raise ValueError(f"{e.name}: squared feature must reference a z-scored feature")
            if e.kind == "one_hot" and (e.source is None or e.category is None):
                raise ValueError(f"{e.name}: one-hot entries need a source column and a category")

    @property
    def features(self) -> list[FeatureEntry]:
        """Model features in order (the intercept is carried by alpha)."""
        return [e for e in self.entries if e.kind != "intercept"]

    @property
    def feature_names(self) -> list[str]:
        return [e.name for e in self.features]

    def stage_masks(self) -> np.ndarray:
        stages = np.array([e.stage for e in self.features])
        return np.array([stages <= k for k in range(1, self.n_stages + 1)])

    def config(self, observation_stage: int = 2, priors: Optional[PriorSpec] = None) -> FunnelConfig:
        return FunnelConfig(self.n_stages, observation_stage, self.stage_masks(),
                            priors=priors or PriorSpec(), feature_names=self.feature_names)

    def to_json(self) -> str:
        out = {"format": "funnel-feature-dictionary", "version": FORMAT_VERSION, "n_stages": self.n_stages,
               "features": []}
        for e in self.entries:
            item = {"name": e.name, "kind": e.kind, "first_available_stage": e.stage}
            if e.source is not None:
                item["source"] = e.source
            if e.valid_range is not None:
                item["valid_range"] = list(e.valid_range)
            if e.category is not None:
                item["category"] = e.category
            if e.description:
                item["description"] = e.description
            out["features"].append(item)
        return json.dumps(out, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FeatureDictionary":
        doc = json.loads(text)
        _check_header(doc, "funnel-feature-dictionary")
        entries = []
        for item in doc["features"]:
            vr = item.get("valid_range")
            entries.append(FeatureEntry(item["name"], item["kind"], int(item.get("first_available_stage", 1)),
                                        item.get("source"), tuple(vr) if vr is not None else None,
                                        item.get("category"), item.get("description", "")))
        return cls(entries, int(doc.get("n_stages", 3)))

    @classmethod
    def load(cls, path) -> "FeatureDictionary":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def identity(cls, names: Sequence[str], stages: Sequence[int], n_stages: int) -> "FeatureDictionary":
        """Pass-through dictionary for already-transformed features."""
        entries = [FeatureEntry("intercept", "intercept", 1)]
        entries += [FeatureEntry(n, "numeric", int(s)) for n, s in zip(names, stages)]
        return cls(entries, n_stages)


_VITALS = [
    ("temperature", (None, 200.0), "Triage body temperature (F)."),
    ("heartrate", (0.0, None), "Heart rate (bpm)."),
    ("resprate", (0.0, None), "Respiratory rate (breaths/min)."),
    ("o2sat", (0.0, 100.0), "Pulse oximetry SpO2 (%)."),
    ("sbp", (0.0, None), "Systolic blood pressure (mmHg)."),
    ("dbp", (0.0, None), "Diastolic blood pressure (mmHg)."),
    ("pain", (0.0, 10.0), "Pain score (0-10)."),
]
_COMPLAINTS = ["chest_pain", "abdominal_pain", "headache", "shortness_of_breath", "back_pain", "cough",
               "nausea_vomiting", "fever_chills", "syncope", "dizziness"]


def mimic_feature_dictionary() -> FeatureDictionary:
    """The 25-predictor triage dictionary (ED vitals, squares, complaints, age)."""
    entries = [FeatureEntry("intercept", "intercept", 1, description="Constant 1.")]
    for name, rng, desc in _VITALS:
        entries.append(FeatureEntry(name, "numeric_zscore", 1, name, rng, description=desc))
    for name, _, _ in _VITALS:
        entries.append(FeatureEntry(f"{name}_sq", "numeric_zscore_squared", 1, name,
                                    description=f"Square of z-scored {name}."))
    for c in _COMPLAINTS:
        entries.append(FeatureEntry(f"chiefcom_{c}", "one_hot", 1, "chiefcomplaint", category=c,
                                    description=f"Chief complaint: {c.replace('_', ' ')}."))
    entries.append(FeatureEntry("age", "numeric_zscore", 2, "age", (0.0, 120.0), description="Age (years)."))
    return FeatureDictionary(entries, 3)


# -- dataset loading -----------------------------------------------------------

@dataclass
class LoadedDataset:
    records: list[PatientRecord]
    config: FunnelConfig
    stats: dict
    passthrough: pd.DataFrame = field(default_factory=pd.DataFrame)


def _decision_columns(n_stages: int) -> list[str]:
    return [f"decision_{k}" for k in range(1, n_stages)]


def _read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", dtype=str, keep_default_na=False, na_values=[])


def _parse_float(series: pd.Series, column: str) -> np.ndarray:
    out = np.full(len(series), np.nan)
    for i, v in enumerate(series.to_numpy()):
        v = v.strip()
        if v == "":
            continue
        try:
            out[i] = float(v)
        except ValueError:
            raise DataError(f"row {i + 1}: column {column!r} has unparseable value {v!r}") from None
    return out


def _parse_decisions(df: pd.DataFrame, n_stages: int):
    cols = _decision_columns(n_stages)
    missing = [c for c in cols + ["outcome"] if c not in df.columns]
    if missing:
        raise DataError(f"dataset is missing columns {missing}")
    paths = []
    for i, row in enumerate(df[cols].itertuples(index=False)):
        stage = 1
        path = []
        while True:
            cell = str(row[stage - 1]).strip()
            if cell == "":
                raise DataError(f"row {i + 1}: no decision recorded at visited stage {stage}")
            try:
                code = int(cell)
            except ValueError:
                raise DataError(f"row {i + 1}: unparseable decision {cell!r} at stage {stage}") from None
            if code != DISCHARGE and not stage < code <= n_stages:
                raise DataError(f"row {i + 1}: unknown disposition code {code} at stage {stage}")
            path.append(code)
            if code == DISCHARGE or code == n_stages:
                break
            stage = code
        visited = {1} | {c for c in path if c != DISCHARGE}
        for k in range(1, n_stages):
            if k not in visited and str(row[k - 1]).strip() != "":
                raise DataError(f"row {i + 1}: decision recorded at stage {k}, which was never reached")
        paths.append(tuple(path))
    return paths


def _deepest(path) -> int:
    stage = 1
    for c in path:
        if c == DISCHARGE:
            break
        stage = c
    return stage


def load_dataset(path, dictionary: FeatureDictionary, observation_stage: int = 2,
                 priors: Optional[PriorSpec] = None, passthrough: Sequence[str] = ()) -> LoadedDataset:
    """Read a dataset CSV and apply the feature pipeline.

    Per numeric source column, over the patients who reached the column's
    stage: out-of-range values are dropped, then all gaps are filled with the
    mean of the remaining values, then the column is z-scored (sample sd).
    Squared and one-hot columns are derived afterwards.
    """
    df = _read_csv(path)
    K = dictionary.n_stages
    config = dictionary.config(observation_stage, priors)
    paths = _parse_decisions(df, K)
    deepest = np.array([_deepest(p) for p in paths])
    n = len(df)

    outcomes = []
    for i, cell in enumerate(df["outcome"].to_numpy()):
        cell = cell.strip()
        if cell == "":
            outcomes.append(None)
        elif cell in ("0", "1"):
            outcomes.append(int(cell))
        else:
            raise DataError(f"row {i + 1}: outcome must be 0, 1 or empty, got {cell!r}")

    stats = {"zscore_ddof": 1, "columns": {}}
    base = {}  # source column -> z-scored (or passthrough) values
    numeric_sources = {}
    for e in dictionary.features:
        if e.kind in ("numeric", "numeric_zscore"):
            numeric_sources[e.column] = e
    for col, e in numeric_sources.items():
        if col not in df.columns:
            raise DataError(f"dataset is missing feature column {col!r}")
        raw = _parse_float(df[col], col)
        avail = deepest >= e.stage
        vals = raw.copy()
        vals[~avail] = np.nan
        n_out = 0
        if e.valid_range is not None:
            lo, hi = e.valid_range
            bad = np.zeros(n, dtype=bool)
            if lo is not None:
                bad |= vals < lo
            if hi is not None:
                bad |= vals > hi
            n_out = int(np.sum(bad))
            vals[bad] = np.nan
        good = avail & np.isfinite(vals)
        if not np.any(good):
            raise DataError(f"column {col!r} has no usable values")
        mean_raw = float(np.mean(vals[good]))
        n_missing = int(np.sum(avail & ~good))
        vals[avail & ~good] = mean_raw
        entry = {"imputed_mean": mean_raw, "n_out_of_range": n_out, "n_imputed": n_missing}
        if e.kind == "numeric_zscore":
            mu = float(np.mean(vals[avail]))
            sd = float(np.std(vals[avail], ddof=1)) if avail.sum() > 1 else 0.0
            if not sd > 0:
                raise DataError(f"column {col!r} has zero variance; cannot z-score")
            vals = (vals - mu) / sd
            entry.update(mean=mu, sd=sd)
        stats["columns"][col] = entry
        base[col] = vals

    X = np.full((n, len(dictionary.features)), np.nan)
    for j, e in enumerate(dictionary.features):
        avail = deepest >= e.stage
        if e.kind in ("numeric", "numeric_zscore"):
            X[:, j] = base[e.column]
        elif e.kind == "numeric_zscore_squared":
            X[:, j] = base[e.source] ** 2
        elif e.kind == "one_hot":
            if e.source not in df.columns:
                raise DataError(f"dataset is missing categorical column {e.source!r}")
            X[:, j] = (df[e.source].str.strip().to_numpy() == e.category).astype(float)
        X[~avail, j] = np.nan

    ids = df["visit_id"].to_numpy() if "visit_id" in df.columns else np.arange(n).astype(str)
    pt_cols = [c for c in passthrough if c in df.columns]
    pt = df[pt_cols].copy() if pt_cols else pd.DataFrame(index=df.index)
    records = []
    for i in range(n):
        extras = {c: pt[c].iat[i] for c in pt_cols}
        rec = PatientRecord(X[i], paths[i], outcomes[i], visit_id=str(ids[i]), extras=extras)
        try:
            rec.validate(config)
        except DataError as err:
            raise DataError(f"row {i + 1}: {err}") from None
        records.append(rec)
    return LoadedDataset(records, config, stats, pt)


def dataset_frame(records: Sequence[PatientRecord], config: FunnelConfig,
                  feature_values: Optional[np.ndarray] = None, extra_columns: Optional[dict] = None) -> pd.DataFrame:
    """Records as a dataset-CSV-shaped frame (features as floats, NaN = empty)."""
    K = config.n_stages
    cols = {"visit_id": [r.visit_id if r.visit_id is not None else str(i) for i, r in enumerate(records)]}
    dec = np.full((len(records), K - 1), "", dtype=object)
    for i, r in enumerate(records):
        stage = 1
        for code in r.decisions:
            dec[i, stage - 1] = str(code)
            if code == DISCHARGE:
                break
            stage = code
    for k in range(K - 1):
        cols[f"decision_{k + 1}"] = dec[:, k]
    cols["outcome"] = ["" if r.outcome is None else str(r.outcome) for r in records]
    X = np.array([r.features for r in records]) if feature_values is None else feature_values
    for j, name in enumerate(config.feature_names):
        cols[name] = X[:, j]
    for k, v in (extra_columns or {}).items():
        cols[k] = v
    return pd.DataFrame(cols)


def write_dataset(path, records: Sequence[PatientRecord], config: FunnelConfig,
                  extra_columns: Optional[dict] = None) -> None:
    df = dataset_frame(records, config, extra_columns=extra_columns)
    header = f"# {DATASET_TAG}; K={config.n_stages} S={config.observation_stage}; decision codes: 0=discharge, m=admit to stage m\n"
    _atomic_write(path, header + df.to_csv(index=False, float_format=FLOAT_FMT, lineterminator="\n"))


def read_frame(path) -> pd.DataFrame:
    return _read_csv(path)


# -- params / truth / samples ------------------------------------------------------

def _check_header(doc: dict, fmt: str):
    if doc.get("format") != fmt:
        raise ValueError(f"expected a {fmt!r} document, got {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {fmt} version {doc.get('version')!r} (expected {FORMAT_VERSION})")


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def params_to_dict(params: ModelParams, extra: Optional[dict] = None) -> dict:
    names = params.names()
    doc = {"format": "funnel-params", "version": FORMAT_VERSION, "n_features": int(params.beta.size),
           "n_stages": int(params.thresholds.size + 1),
           "values": {n: float(v) for n, v in zip(names, params.to_vector())}}
    if extra:
        doc.update(extra)
    return doc


def params_from_dict(doc: dict) -> ModelParams:
    _check_header(doc, "funnel-params")
    for key in ("n_features", "n_stages", "values"):
        if key not in doc:
            raise KeyError(f"params document is missing field {key!r}")
    names = parameter_names(int(doc["n_features"]), int(doc["n_stages"]))
    values = doc["values"]
    missing = [n for n in names if n not in values]
    if missing:
        raise KeyError(f"params document is missing parameters {missing}")
    return ModelParams.from_vector([values[n] for n in names], int(doc["n_features"]))


def save_params(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    _atomic_write(path, json.dumps(params_to_dict(params, extra), indent=2) + "\n")


def load_params(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))


def save_ground_truth(path, params: ModelParams, seed: int, extra: Optional[dict] = None) -> None:
    info = {"kind": "ground_truth", "seed": int(seed)}
    info.update(extra or {})
    save_params(path, params, info)


def save_samples(csv_path, json_path, samples) -> None:
    """Draws as CSV (chain, iteration, parameters) plus a diagnostics sidecar."""
    C, S, P = samples.draws.shape
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "iteration"] + samples.names)
    for c in range(C):
        for s in range(S):
            w.writerow([c, s] + [repr(float(v)) for v in samples.draws[c, s]])
    _atomic_write(csv_path, buf.getvalue())
    diag = {"format": "funnel-samples", "version": FORMAT_VERSION, "names": samples.names,
            "n_chains": C, "n_samples": S, "rhat": samples.rhat, "divergences": samples.divergences,
            "accept_rate": samples.accept_rate, "step_size": samples.step_size, "seeds": samples.seeds,
            "rhat_degenerate": samples.rhat_degenerate}
    _atomic_write(json_path, json.dumps(diag, indent=2) + "\n")


def load_samples(csv_path, json_path):
    from .inference import PosteriorSamples

    diag = json.loads(Path(json_path).read_text())
    _check_header(diag, "funnel-samples")
    for key in ("names", "n_chains", "n_samples", "rhat"):
        if key not in diag:
            raise KeyError(f"samples diagnostics missing field {key!r}")
    df = pd.read_csv(csv_path, float_precision="round_trip")
    names = diag["names"]
    if list(df.columns[2:]) != names:
        raise ValueError("sample CSV columns do not match the diagnostics names")
    C, S = int(diag["n_chains"]), int(diag["n_samples"])
    if len(df) != C * S:
        raise ValueError(f"expected {C * S} draws, found {len(df)}")
    draws = df[names].to_numpy(dtype=float).reshape(C, S, len(names))
    return PosteriorSamples(names, draws, {k: float(v) for k, v in diag["rhat"].items()},
                            list(diag.get("divergences", [])), list(diag.get("accept_rate", [])),
                            list(diag.get("step_size", [])), list(diag.get("seeds", [])),
                            list(diag.get("rhat_degenerate", [])))
