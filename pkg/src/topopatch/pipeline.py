"""Pipeline orchestration: configuration, content-hash stage ledger, cached
stages (preprocess, persistence, persistence images), per-fold training of
patch and image models, ensembling, and metric aggregation.

Every stage records a content hash of its inputs and outputs in the work
directory's stage ledger; re-running skips stages whose hashes still match,
so any subcommand is resumable. All randomness derives from the config
seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cubical, pimage, volume
from .ensemble import (
    fit_fusion,
    fit_lr_gridsearch,
    FusionConfig,
    normalize_center,
)
from .errors import ConfigError, DataError, TopoPatchError
from .evaluation import (
    FoldPlan,
    MetricsEntry,
    SubjectRecord,
    aggregate,
    compute_metrics,
    load_manifest,
    random_search,
    stratified_folds,
)
from .nn import (
    TrainConfig,
    default_image_spec,
    default_patch_spec,
    encode,
    predict_proba,
    save_model,
    train_with_early_stopping,
)


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: bool = True
    gaussian_sigma: float = 0.0
    downsample: int = 1
    crop: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class PhConfig:
    mode: str = "sublevel"
    dims: tuple[int, ...] = (0, 1, 2)
    low_persistence_eps: float = 0.0


@dataclass(frozen=True)
class PiConfig:
    resolution: tuple[int, int] = (50, 50)
    sigma: float = 0.05
    birth_range: tuple[float, float] = (0.0, 1.0)
    pers_range: tuple[float, float] = (0.0, 1.0)
    dim: int = 1
    resample: int = 1
    scale: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    filters: tuple[int, int] = (8, 16)
    dense_units: int = 64
    kernel: int = 3


@dataclass(frozen=True)
class EnsembleConfig:
    lr_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    lr_inner_folds: int = 3
    l1_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    fusion_holdout: float = 0.25
    best_patch: str | tuple[int, int, int] = "auto"


@dataclass(frozen=True)
class CvConfig:
    k: int = 4
    runs: int = 4
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str = "manifest.jsonl"
    work_dir: str = "work"
    input_dims: tuple[int, int, int] = (60, 72, 60)
    patch_dims: tuple[int, int, int] = (10, 12, 10)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    ph: PhConfig = field(default_factory=PhConfig)
    pi: PiConfig = field(default_factory=PiConfig)
    model3d: ModelConfig = field(default_factory=ModelConfig)
    model2d: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_pi: TrainConfig | None = None
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    patch_subset: str | tuple[tuple[int, int, int], ...] = "all"
    jobs: int = 1

    @property
    def working_dims(self) -> tuple[int, int, int]:
        dims = self.preprocess.crop or self.input_dims
        f = self.preprocess.downsample
        return tuple(math.ceil(d / f) for d in dims)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(w // p for w, p in zip(self.working_dims, self.patch_dims))

    def patch_indices(self) -> list[tuple[int, int, int]]:
        gx, gy, gz = self.grid_shape
        if self.patch_subset == "all":
            return [(i, j, k) for i in range(gx) for j in range(gy) for k in range(gz)]
        return [tuple(p) for p in self.patch_subset]

    def pi_train_config(self) -> TrainConfig:
        return self.train_pi if self.train_pi is not None else self.train


def _field(d: dict, key: str, default, caster, check=None, where: str = ""):
    raw = d.get(key, default)
    name = f"{where}.{key}" if where else key
    try:
        val = caster(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from exc
    if check is not None:
        msg = check(val)
        if msg:
            raise ConfigError(name, msg)
    return val


def _triple(v):
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"need 3 values, got {len(t)}")
    return t


def config_from_dict(d: dict) -> PipelineConfig:
    pre_d = d.get("preprocess", {})
    crop = pre_d.get("crop")
    pre = PreprocessConfig(
        normalize=_field(pre_d, "normalize", True, bool, where="preprocess"),
        gaussian_sigma=_field(pre_d, "gaussian_sigma", 0.0, float,
                              lambda v: None if v >= 0 else "must be >= 0", "preprocess"),
        downsample=_field(pre_d, "downsample", 1, int,
                          lambda v: None if v >= 1 else "must be >= 1", "preprocess"),
        crop=None if crop is None else _field(pre_d, "crop", None, _triple, where="preprocess"),
    )
    ph_d = d.get("ph", {})
    ph = PhConfig(
        mode=_field(ph_d, "mode", "sublevel", str,
                    lambda v: None if v in cubical.MODES else f"must be one of {cubical.MODES}", "ph"),
        dims=_field(ph_d, "dims", (0, 1, 2), lambda v: tuple(int(x) for x in v),
                    lambda v: None if v and set(v) <= {0, 1, 2} else "must be a non-empty subset of {0,1,2}", "ph"),
        low_persistence_eps=_field(ph_d, "low_persistence_eps", 0.0, float,
                                   lambda v: None if v >= 0 else "must be >= 0", "ph"),
    )
    pi_d = d.get("pi", {})
    pi = PiConfig(
        resolution=_field(pi_d, "resolution", (50, 50), lambda v: tuple(int(x) for x in v),
                          lambda v: None if len(v) == 2 and min(v) >= 1 else "need two positive ints", "pi"),
        sigma=_field(pi_d, "sigma", 0.05, float,
                     lambda v: None if v > 0 else "must be > 0", "pi"),
        birth_range=_field(pi_d, "birth_range", (0.0, 1.0), lambda v: tuple(float(x) for x in v), where="pi"),
        pers_range=_field(pi_d, "pers_range", (0.0, 1.0), lambda v: tuple(float(x) for x in v), where="pi"),
        dim=_field(pi_d, "dim", 1, int,
                   lambda v: None if v in (0, 1, 2) else "must be 0, 1, or 2", "pi"),
        resample=_field(pi_d, "resample", 1, int,
                        lambda v: None if v >= 1 else "must be >= 1", "pi"),
        scale=_field(pi_d, "scale", 1.0, float,
                     lambda v: None if v > 0 else "must be > 0", "pi"),
    )

    def model_cfg(key):
        m = d.get(key, {})
        return ModelConfig(
            filters=_field(m, "filters", (8, 16), lambda v: tuple(int(x) for x in v), where=key),
            dense_units=_field(m, "dense_units", 64, int,
                               lambda v: None if v >= 1 else "must be >= 1", key),
            kernel=_field(m, "kernel", 3, int,
                          lambda v: None if v >= 1 else "must be >= 1", key),
        )

    def train_cfg(key, default_seed=0):
        t = d.get(key)
        if t is None:
            if key == "train_pi":
                return None
            t = {}
        try:
            return TrainConfig(
                learning_rate=float(t.get("learning_rate", 1e-4)),
                adam_beta1=float(t.get("adam_beta1", 0.9)),
                adam_beta2=float(t.get("adam_beta2", 0.999)),
                adam_eps=float(t.get("adam_eps", 1e-8)),
                batch_size=int(t.get("batch_size", 16)),
                max_epochs=int(t.get("max_epochs", 2500)),
                patience=int(t.get("patience", 50)),
                seed=int(t.get("seed", default_seed)),
            )
        except TopoPatchError as exc:
            raise ConfigError(key, str(exc)) from exc

    ens_d = d.get("ensemble", {})
    best_patch = ens_d.get("best_patch", "auto")
    ens = EnsembleConfig(
        lr_grid=_field(ens_d, "lr_grid", (0.01, 0.1, 1.0, 10.0, 100.0),
                       lambda v: tuple(float(x) for x in v),
                       lambda v: None if v and all(x > 0 for x in v) else "must be positive", "ensemble"),
        lr_inner_folds=_field(ens_d, "lr_inner_folds", 3, int,
                              lambda v: None if v >= 2 else "must be >= 2", "ensemble"),
        l1_grid=_field(ens_d, "l1_grid", (1e-4, 1e-3, 1e-2, 1e-1),
                       lambda v: tuple(float(x) for x in v),
                       lambda v: None if v and all(x >= 0 for x in v) else "must be >= 0", "ensemble"),
        fusion_holdout=_field(ens_d, "fusion_holdout", 0.25, float,
                              lambda v: None if 0 < v < 1 else "must lie in (0,1)", "ensemble"),
        best_patch="auto" if best_patch == "auto" else _triple(best_patch),
    )
    cv_d = d.get("cv", {})
    cv = CvConfig(
        k=_field(cv_d, "k", 4, int, lambda v: None if v >= 2 else "must be >= 2", "cv"),
        runs=_field(cv_d, "runs", 4, int, lambda v: None if v >= 1 else "must be >= 1", "cv"),
        seed=_field(cv_d, "seed", 0, int, where="cv"),
    )
    subset = d.get("patch_subset", "all")
    if subset != "all":
        subset = tuple(_triple(p) for p in subset)

    cfg = PipelineConfig(
        manifest=str(d.get("manifest", "manifest.jsonl")),
        work_dir=str(d.get("work_dir", "work")),
        input_dims=_field(d, "input_dims", (60, 72, 60), _triple),
        patch_dims=_field(d, "patch_dims", (10, 12, 10), _triple),
        preprocess=pre,
        ph=ph,
        pi=pi,
        model3d=model_cfg("model3d"),
        model2d=model_cfg("model2d"),
        train=train_cfg("train"),
        train_pi=train_cfg("train_pi"),
        ensemble=ens,
        cv=cv,
        patch_subset=subset,
        jobs=_field(d, "jobs", 1, int, lambda v: None if v >= 1 else "must be >= 1"),
    )

    for axis, (w, p) in enumerate(zip(cfg.working_dims, cfg.patch_dims)):
        if w % p:
            raise ConfigError(
                "patch_dims",
                f"patch dim {p} does not divide working dim {w} on axis {'xyz'[axis]}")
    if cfg.preprocess.crop is not None:
        for axis, (c, s) in enumerate(zip(cfg.preprocess.crop, cfg.input_dims)):
            if c > s:
                raise ConfigError("preprocess.crop",
                                  f"crop {c} exceeds input dim {s} on axis {'xyz'[axis]}")
    if cfg.patch_subset != "all":
        gx, gy, gz = cfg.grid_shape
        for p in cfg.patch_subset:
            if not (0 <= p[0] < gx and 0 <= p[1] < gy and 0 <= p[2] < gz):
                raise ConfigError("patch_subset", f"patch {p} outside grid {cfg.grid_shape}")
    if cfg.ensemble.best_patch != "auto":
        gx, gy, gz = cfg.grid_shape
        bp = cfg.ensemble.best_patch
        if not (0 <= bp[0] < gx and 0 <= bp[1] < gy and 0 <= bp[2] < gz):
            raise ConfigError("ensemble.best_patch", f"patch {bp} outside grid {cfg.grid_shape}")
    return cfg


def validate_config(path, require_manifest: bool = False) -> PipelineConfig:
    """Parse + default + range-check a pipeline config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("path", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("path", f"invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("path", "config root must be a JSON object")
    cfg = config_from_dict(d)
    if require_manifest and not os.path.isfile(cfg.manifest):
        raise ConfigError("manifest", f"file does not exist: {cfg.manifest}")
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    return d


# -- stage ledger ------------------------------------------------------------------


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class StageLedger:
    """Append-only record of stage runs keyed by stage name, storing the
    input hash and the output files' content hashes."""

    def __init__(self, work_dir):
        self.work_dir = os.fspath(work_dir)
        os.makedirs(self.work_dir, exist_ok=True)
        self.path = os.path.join(self.work_dir, "stage_ledger.json")
        self.entries: dict[str, dict] = {}
        if os.path.isfile(self.path):
            with open(self.path, "r", encoding="utf-8") as fh:
                self.entries = json.load(fh)

    def _save(self):
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.entries, fh, indent=1)
        os.replace(tmp, self.path)

    def entry_hash(self, key: str) -> str:
        e = self.entries.get(key)
        if e is None:
            return "missing"
        return _sha256_text(e["input_hash"] + "|" + "|".join(e["output_hashes"]))

    def is_complete(self, key: str, input_hash: str) -> bool:
        e = self.entries.get(key)
        if e is None or e["input_hash"] != input_hash:
            return False
        for rel, recorded in zip(e["outputs"], e["output_hashes"]):
            path = os.path.join(self.work_dir, rel)
            if not os.path.isfile(path) or _sha256_file(path) != recorded:
                return False
        return True

    def record(self, key: str, input_hash: str, outputs: list[str]):
        rels = [os.path.relpath(p, self.work_dir) for p in outputs]
        hashes = [_sha256_file(os.path.join(self.work_dir, rel)) for rel in rels]
        self.entries[key] = {"input_hash": input_hash, "outputs": rels, "output_hashes": hashes}
        self._save()


def _slice_hash(*parts) -> str:
    return _sha256_text(json.dumps(parts, sort_keys=True, default=str))


# -- cached stages ------------------------------------------------------------------


def _image_key(rel_path: str) -> str:
    return rel_path.replace("/", "_").replace("\\", "_")


def preprocess_volume(cfg: PipelineConfig, v: volume.Volume3D) -> volume.Volume3D:
    if v.dims != tuple(cfg.input_dims):
        raise DataError(f"volume dims {v.dims} do not match declared input dims {cfg.input_dims}")
    if cfg.preprocess.crop is not None:
        v = volume.crop_center(v, cfg.preprocess.crop)
    if cfg.preprocess.downsample > 1:
        v = volume.downsample(v, cfg.preprocess.downsample)
    if cfg.preprocess.gaussian_sigma > 0:
        v = volume.gaussian_filter(v, cfg.preprocess.gaussian_sigma)
    if cfg.preprocess.normalize:
        v = volume.normalize_intensity(v)
    return v


def _manifest_dir(cfg) -> str:
    return os.path.dirname(os.path.abspath(cfg.manifest))


def _all_images(subjects: list[SubjectRecord]) -> list[str]:
    out = []
    for s in subjects:
        out.extend(s.images)
    return sorted(set(out))


def stage_preprocess(cfg: PipelineConfig, ledger: StageLedger,
                     subjects: list[SubjectRecord]) -> dict[str, str]:
    """Preprocess every manifest image once; returns image -> output path."""
    images = _all_images(subjects)
    src_dir = _manifest_dir(cfg)
    out_dir = os.path.join(cfg.work_dir, "pre")
    os.makedirs(out_dir, exist_ok=True)
    outputs = {img: os.path.join(out_dir, _image_key(img)) for img in images}
    input_hash = _slice_hash(
        "preprocess", asdict(cfg.preprocess), cfg.input_dims,
        [(img, _sha256_file(os.path.join(src_dir, img))) for img in images])
    if not ledger.is_complete("preprocess", input_hash):
        for img in images:
            v = volume.load_volume(os.path.join(src_dir, img))
            volume.save_volume(preprocess_volume(cfg, v), outputs[img])
        ledger.record("preprocess", input_hash, [outputs[i] for i in images])
    return outputs


def _ph_one(args):
    in_path, out_path, mode, dims, eps = args
    v = volume.load_volume(in_path)
    d = cubical.compute_persistence(v, mode=mode, dims=dims)
    if eps > 0:
        d = cubical.filter_low_persistence(d, eps)
    cubical.save_diagram_csv(d, out_path)
    return out_path


def stage_ph(cfg: PipelineConfig, ledger: StageLedger,
             subjects: list[SubjectRecord], pre: dict[str, str]) -> dict[str, str]:
    """Persistence diagram per preprocessed image (parallel across images)."""
    images = _all_images(subjects)
    out_dir = os.path.join(cfg.work_dir, "ph")
    os.makedirs(out_dir, exist_ok=True)
    outputs = {img: os.path.join(out_dir, _image_key(img) + ".csv") for img in images}
    input_hash = _slice_hash("ph", asdict(cfg.ph), ledger.entry_hash("preprocess"))
    if not ledger.is_complete("ph", input_hash):
        tasks = [(pre[img], outputs[img], cfg.ph.mode, cfg.ph.dims, cfg.ph.low_persistence_eps)
                 for img in images]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                list(pool.map(_ph_one, tasks))
        else:
            for t in tasks:
                _ph_one(t)
        ledger.record("ph", input_hash, [outputs[i] for i in images])
    return outputs


def _pi_params(cfg: PipelineConfig) -> pimage.PersistenceImageParams:
    return pimage.PersistenceImageParams(
        resolution=cfg.pi.resolution, birth_range=cfg.pi.birth_range,
        pers_range=cfg.pi.pers_range, sigma=cfg.pi.sigma)


def stage_pi(cfg: PipelineConfig, ledger: StageLedger,
             subjects: list[SubjectRecord], ph: dict[str, str]) -> dict[str, str]:
    """Persistence image per diagram, optionally resampled and scaled."""
    images = _all_images(subjects)
    out_dir = os.path.join(cfg.work_dir, "pi")
    os.makedirs(out_dir, exist_ok=True)
    outputs = {img: os.path.join(out_dir, _image_key(img)) for img in images}
    input_hash = _slice_hash("pi", asdict(cfg.pi), ledger.entry_hash("ph"))
    if not ledger.is_complete("pi", input_hash):
        params = _pi_params(cfg)
        for img in images:
            d = cubical.load_diagram_csv(ph[img], mode=cfg.ph.mode, source_dims=cfg.working_dims)
            pts = pimage.to_birth_persistence(d, cfg.pi.dim)
            im = pimage.render_persistence_image(pts, params, source_dim=cfg.pi.dim)
            if cfg.pi.resample > 1:
                im = pimage.resample_image(im, cfg.pi.resample)
            pixels = im.pixels * np.float32(cfg.pi.scale)
            im = pimage.PersistenceImage(params=im.params, pixels=pixels, source_dim=im.source_dim)
            volume.save_volume(pimage.image_to_volume(im), outputs[img])
        ledger.record("pi", input_hash, [outputs[i] for i in images])
    return outputs


# -- fold/run training ---------------------------------------------------------------


def _fr_seed(cv_seed: int, fold: int, run: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([cv_seed, fold, run, salt]).generate_state(1)[0])


def _fold_images(plan: FoldPlan, subjects: list[SubjectRecord], fold: int):
    """(train rows, val rows) of (subject_id, image); training subjects
    contribute all longitudinal images, validation subjects their selected
    one."""
    by_id = {s.subject_id: s for s in subjects}
    f = plan.folds[fold]
    train_rows = []
    for sid in sorted(f.train_subjects):
        for img in by_id[sid].images:
            train_rows.append((sid, img))
    val_rows = [(sid, plan.val_image[sid]) for sid in sorted(f.val_subjects)]
    return train_rows, val_rows


def _patch_block(data: np.ndarray, patch_dims, index) -> np.ndarray:
    px, py, pz = patch_dims
    i, j, k = index
    return data[i * px:(i + 1) * px, j * py:(j + 1) * py, k * pz:(k + 1) * pz]


def _tc_dict(tc: TrainConfig) -> dict:
    return {
        "learning_rate": tc.learning_rate, "adam_beta1": tc.adam_beta1,
        "adam_beta2": tc.adam_beta2, "adam_eps": tc.adam_eps,
        "batch_size": tc.batch_size, "max_epochs": tc.max_epochs,
        "patience": tc.patience, "seed": tc.seed,
    }


def _fold_labels(subjects, rows):
    by_id = {s.subject_id: s for s in subjects}
    return np.array([by_id[sid].label for sid, _ in rows], dtype=np.float32)


def _cell_dir(cfg: PipelineConfig, fold: int, run: int) -> str:
    d = os.path.join(cfg.work_dir, "models", f"fold{fold}_run{run}")
    os.makedirs(d, exist_ok=True)
    return d


def _patch_tag(index) -> str:
    return "patch_%d_%d_%d" % tuple(index)


def _train_one_patch(args):
    """Worker: train one patch model; returns the artifact payload."""
    (index, x_train, y_train, x_val, y_val, spec_dict, train_cfg_dict) = args
    from .nn.model import ModelSpec
    spec = ModelSpec.from_dict(spec_dict)
    tc = TrainConfig(**train_cfg_dict)
    model, history = train_with_early_stopping(spec, (x_train, y_train), (x_val, y_val), tc)
    return {
        "index": tuple(index),
        "train_probs": predict_proba(model, x_train),
        "val_probs": predict_proba(model, x_val),
        "train_enc": encode(model, x_train),
        "val_enc": encode(model, x_val),
        "epochs": history.stopped_epoch,
        "best_epoch": history.best_epoch,
    }


def stage_train_patches(cfg: PipelineConfig, ledger: StageLedger,
                        subjects: list[SubjectRecord], plan: FoldPlan,
                        pre: dict[str, str], fold: int, run: int,
                        indices=None) -> dict[tuple, str]:
    """Train the per-patch models of one (fold, run) cell; one npz artifact
    per patch with probabilities and preclassification encodings."""
    indices = cfg.patch_indices() if indices is None else [tuple(i) for i in indices]
    cell = _cell_dir(cfg, fold, run)
    train_rows, val_rows = _fold_images(plan, subjects, fold)
    y_train = _fold_labels(subjects, train_rows)
    y_val = _fold_labels(subjects, val_rows)
    seed = _fr_seed(cfg.cv.seed, fold, run)
    train_cfg = TrainConfig(**{**_tc_dict(cfg.train), "seed": seed})
    spec3 = default_patch_spec(cfg.patch_dims, cfg.model3d.filters,
                               cfg.model3d.dense_units, cfg.model3d.kernel)
    base_hash = _slice_hash("train-patch", fold, run, cfg.patch_dims,
                            asdict(cfg.model3d), _tc_dict(train_cfg),
                            asdict(cfg.cv), ledger.entry_hash("preprocess"))

    out_paths = {i: os.path.join(cell, _patch_tag(i) + ".npz") for i in indices}
    todo = [i for i in indices
            if not ledger.is_complete(f"f{fold}r{run}:{_patch_tag(i)}", base_hash)]
    if todo:
        pre_cache = {img: volume.load_volume(pre[img]).data
                     for img in sorted({img for _, img in train_rows + val_rows})}
        tasks = []
        for index in todo:
            x_tr = np.stack([_patch_block(pre_cache[img], cfg.patch_dims, index)[None]
                             for _, img in train_rows])
            x_va = np.stack([_patch_block(pre_cache[img], cfg.patch_dims, index)[None]
                             for _, img in val_rows])
            tasks.append((index, x_tr, y_train, x_va, y_val,
                          spec3.to_dict(), _tc_dict(train_cfg)))
        if cfg.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                results = list(pool.map(_train_one_patch, tasks))
        else:
            results = [_train_one_patch(t) for t in tasks]
        for r in results:
            path = out_paths[r["index"]]
            np.savez(path,
                     meta=json.dumps({"index": list(r["index"]), "epochs": r["epochs"],
                                      "best_epoch": r["best_epoch"], "seed": seed}),
                     train_probs=r["train_probs"], val_probs=r["val_probs"],
                     train_enc=r["train_enc"], val_enc=r["val_enc"],
                     y_train=y_train, y_val=y_val)
            ledger.record(f"f{fold}r{run}:{_patch_tag(r['index'])}", base_hash, [path])
    return out_paths


def stage_train_pi(cfg: PipelineConfig, ledger: StageLedger,
                   subjects: list[SubjectRecord], plan: FoldPlan,
                   pis: dict[str, str], fold: int, run: int) -> str:
    """Train the persistence-image model of one (fold, run) cell."""
    cell = _cell_dir(cfg, fold, run)
    out_path = os.path.join(cell, "pi.npz")
    seed = _fr_seed(cfg.cv.seed, fold, run, 1)
    pi_cfg = TrainConfig(**{**_tc_dict(cfg.pi_train_config()), "seed": seed})
    input_hash = _slice_hash("train-pi", fold, run, asdict(cfg.model2d),
                             _tc_dict(pi_cfg), asdict(cfg.cv), ledger.entry_hash("pi"))
    key = f"f{fold}r{run}:pi"
    if ledger.is_complete(key, input_hash):
        return out_path

    train_rows, val_rows = _fold_images(plan, subjects, fold)
    y_train = _fold_labels(subjects, train_rows)
    y_val = _fold_labels(subjects, val_rows)
    res = (tuple(cfg.pi.resolution) if cfg.pi.resample == 1
           else tuple(r // cfg.pi.resample for r in cfg.pi.resolution))
    spec2 = default_image_spec(res, cfg.model2d.filters,
                               cfg.model2d.dense_units, cfg.model2d.kernel)

    def pi_pixels(img):
        v = volume.load_volume(pis[img])
        return v.data[:, :, 0].T[None]  # (1, H, W)

    x_tr = np.stack([pi_pixels(img) for _, img in train_rows])
    x_va = np.stack([pi_pixels(img) for _, img in val_rows])
    model, hist = train_with_early_stopping(spec2, (x_tr, y_train), (x_va, y_val), pi_cfg)
    save_model(model, os.path.join(cell, "pi_model.json"))
    np.savez(out_path,
             meta=json.dumps({"epochs": hist.stopped_epoch, "best_epoch": hist.best_epoch,
                              "seed": seed}),
             train_probs=predict_proba(model, x_tr), val_probs=predict_proba(model, x_va),
             train_enc=encode(model, x_tr), val_enc=encode(model, x_va),
             y_train=y_train, y_val=y_val)
    ledger.record(key, input_hash, [out_path])
    return out_path


def stage_ensemble_lr(cfg: PipelineConfig, ledger: StageLedger,
                      subjects: list[SubjectRecord], plan: FoldPlan,
                      patch_paths: dict[tuple, str], fold: int, run: int) -> str:
    """Logistic regression over the centered per-patch probabilities."""
    cell = _cell_dir(cfg, fold, run)
    out_path = os.path.join(cell, "lr.npz")
    indices = sorted(patch_paths)
    patch_hashes = [ledger.entry_hash(f"f{fold}r{run}:{_patch_tag(i)}") for i in indices]
    input_hash = _slice_hash("ensemble-lr", fold, run, cfg.ensemble.lr_grid,
                             cfg.ensemble.lr_inner_folds, patch_hashes)
    key = f"f{fold}r{run}:lr"
    if ledger.is_complete(key, input_hash):
        return out_path

    train_probs, val_probs = [], []
    y_train = y_val = None
    for i in indices:
        with np.load(patch_paths[i], allow_pickle=False) as z:
            train_probs.append(z["train_probs"])
            val_probs.append(z["val_probs"])
            y_train, y_val = z["y_train"], z["y_val"]
    feat_train = normalize_center(np.stack(train_probs, axis=1))
    feat_val = normalize_center(np.stack(val_probs, axis=1))
    seed = _fr_seed(cfg.cv.seed, fold, run, 2)
    model, chosen = fit_lr_gridsearch(feat_train, y_train, grid=cfg.ensemble.lr_grid,
                                      folds=cfg.ensemble.lr_inner_folds, seed=seed)
    np.savez(out_path,
             meta=json.dumps({"inverse_reg": chosen, "seed": seed,
                              "patch_indices": [list(i) for i in indices]}),
             val_probs=model.predict_proba(feat_val),
             coef=model.coef, intercept=np.array([model.intercept]),
             y_val=y_val)
    ledger.record(key, input_hash, [out_path])
    return out_path


def _select_best_patch(cfg: PipelineConfig, patch_paths: dict[tuple, str]):
    """The configured best patch, or the trained patch with top validation
    average precision."""
    if cfg.ensemble.best_patch != "auto":
        index = tuple(cfg.ensemble.best_patch)
        if index not in patch_paths:
            raise DataError(f"best_patch {index} has no trained artifact")
        return index
    scores = {}
    for i, path in sorted(patch_paths.items()):
        with np.load(path, allow_pickle=False) as z:
            entry = compute_metrics(z["val_probs"], z["y_val"])
        scores[i] = entry.aps if entry.aps is not None else 0.0
    return max(sorted(scores), key=lambda i: scores[i])


def stage_ensemble_fusion(cfg: PipelineConfig, ledger: StageLedger,
                          subjects: list[SubjectRecord], plan: FoldPlan,
                          patch_paths: dict[tuple, str], pi_path: str,
                          fold: int, run: int) -> str:
    """Fused dense layer over the best patch and PI model encodings."""
    cell = _cell_dir(cfg, fold, run)
    out_path = os.path.join(cell, "fusion.npz")
    indices = sorted(patch_paths)
    patch_hashes = [ledger.entry_hash(f"f{fold}r{run}:{_patch_tag(i)}") for i in indices]
    input_hash = _slice_hash("ensemble-fusion", fold, run, cfg.ensemble.l1_grid,
                             cfg.ensemble.fusion_holdout, str(cfg.ensemble.best_patch),
                             patch_hashes, ledger.entry_hash(f"f{fold}r{run}:pi"))
    key = f"f{fold}r{run}:fusion"
    if ledger.is_complete(key, input_hash):
        return out_path

    best_index = _select_best_patch(cfg, patch_paths)
    with np.load(patch_paths[best_index], allow_pickle=False) as z:
        best_train_enc, best_val_enc = z["train_enc"], z["val_enc"]
        y_train, y_val = z["y_train"], z["y_val"]
    with np.load(pi_path, allow_pickle=False) as z:
        pi_train_enc, pi_val_enc = z["train_enc"], z["val_enc"]

    seed = _fr_seed(cfg.cv.seed, fold, run, 3)
    fusion_cfg = FusionConfig(l1_grid=cfg.ensemble.l1_grid,
                              train=TrainConfig(learning_rate=1e-2, max_epochs=2000,
                                                patience=100, batch_size=32, seed=seed),
                              holdout_fraction=cfg.ensemble.fusion_holdout)
    fusion = fit_fusion(best_train_enc, pi_train_enc, y_train, config=fusion_cfg)
    val_probs = fusion.predict_proba(np.hstack([best_val_enc, pi_val_enc]))
    np.savez(out_path,
             meta=json.dumps({"best_patch": list(best_index), "l1": fusion.l1_strength,
                              "seed": seed}),
             val_probs=val_probs, weights=fusion.weights,
             bias=np.array([fusion.bias]), y_val=y_val)
    ledger.record(key, input_hash, [out_path])
    return out_path


# -- evaluation driver -----------------------------------------------------------------


def model_names(cfg: PipelineConfig) -> list[str]:
    names = ["patch_%d_%d_%d" % tuple(p) for p in cfg.patch_indices()]
    return names + ["best_patch", "pi", "lr", "fusion"]


def run_experiment(cfg: PipelineConfig) -> dict:
    """The full protocol: stages, every (fold, run) cell, aggregation.

    Returns the results dict (also written to work_dir/results.json with a
    summary CSV alongside)."""
    subjects = load_manifest(cfg.manifest)
    ledger = StageLedger(cfg.work_dir)
    pre = stage_preprocess(cfg, ledger, subjects)
    ph = stage_ph(cfg, ledger, subjects, pre)
    pis = stage_pi(cfg, ledger, subjects, ph)
    plan = stratified_folds(subjects, k=cfg.cv.k, seed=cfg.cv.seed)

    per_model: dict[str, dict[tuple[int, int], MetricsEntry]] = {}
    best_patch_choice = {}
    for fold in range(cfg.cv.k):
        for run in range(cfg.cv.runs):
            patch_paths = stage_train_patches(cfg, ledger, subjects, plan, pre, fold, run)
            pi_path = stage_train_pi(cfg, ledger, subjects, plan, pis, fold, run)
            lr_path = stage_ensemble_lr(cfg, ledger, subjects, plan, patch_paths, fold, run)
            fusion_path = stage_ensemble_fusion(cfg, ledger, subjects, plan,
                                                patch_paths, pi_path, fold, run)
            for index, path in sorted(patch_paths.items()):
                with np.load(path, allow_pickle=False) as z:
                    entry = compute_metrics(z["val_probs"], z["y_val"])
                per_model.setdefault(_patch_tag(index), {})[(fold, run)] = entry
            best_index = _select_best_patch(cfg, patch_paths)
            with np.load(patch_paths[best_index], allow_pickle=False) as z:
                per_model.setdefault("best_patch", {})[(fold, run)] = compute_metrics(
                    z["val_probs"], z["y_val"])
            best_patch_choice[f"{fold},{run}"] = list(best_index)
            for name, path in (("pi", pi_path), ("lr", lr_path), ("fusion", fusion_path)):
                with np.load(path, allow_pickle=False) as z:
                    per_model.setdefault(name, {})[(fold, run)] = compute_metrics(
                        z["val_probs"], z["y_val"])

    results = {"models": {}, "best_patch_choice": best_patch_choice,
               "k": cfg.cv.k, "runs": cfg.cv.runs, "seed": cfg.cv.seed}
    for name, entries in per_model.items():
        report = aggregate(entries, runs_per_fold=cfg.cv.runs)
        results["models"][name] = {
            "per_run": {f"{f},{r}": e.as_dict() for (f, r), e in sorted(report.per_run.items())},
            "per_fold": {str(f): m for f, m in sorted(report.per_fold.items())},
            "mean": report.mean,
            "std": report.std,
        }

    results_path = os.path.join(cfg.work_dir, "results.json")
    with open(results_path + ".tmp", "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1, sort_keys=True)
    os.replace(results_path + ".tmp", results_path)
    write_summary_csv(results, os.path.join(cfg.work_dir, "summary.csv"))
    return results


def write_summary_csv(results: dict, path) -> None:
    """Metric rows x model columns, each cell mean±sd."""
    names = sorted(results["models"])
    lines = ["metric," + ",".join(names)]
    for metric in ("acc", "auc", "aps", "recall", "precision"):
        cells = []
        for name in names:
            m = results["models"][name]
            cells.append(f"{m['mean'][metric]:.4f}±{m['std'][metric]:.4f}")
        lines.append(metric + "," + ",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- random hyperparameter search -------------------------------------------------------


DEFAULT_SEARCH_SPACE = {
    "learning_rate": ("loguniform", 1e-4, 3e-2),
    "batch_size": ("choice", (8, 16, 32)),
    "filters": ("choice", ((4, 8), (8, 16))),
    "dense_units": ("choice", (32, 64)),
}


def run_search(cfg: PipelineConfig, budget: int, seed: int | None = None) -> dict:
    """Random hyperparameter search for the patch model on the designated
    patch (fold 0 of the plan), scored by validation average precision."""
    subjects = load_manifest(cfg.manifest)
    ledger = StageLedger(cfg.work_dir)
    pre = stage_preprocess(cfg, ledger, subjects)
    plan = stratified_folds(subjects, k=cfg.cv.k, seed=cfg.cv.seed)
    index = (cfg.ensemble.best_patch if cfg.ensemble.best_patch != "auto"
             else cfg.patch_indices()[0])

    by_id = {s.subject_id: s for s in subjects}
    train_rows, val_rows = _fold_images(plan, subjects, 0)
    y_tr = np.array([by_id[sid].label for sid, _ in train_rows], dtype=np.float32)
    y_va = np.array([by_id[sid].label for sid, _ in val_rows], dtype=np.float32)
    cache = {img: volume.load_volume(pre[img]).data
             for img in sorted({img for _, img in train_rows + val_rows})}
    x_tr = np.stack([_patch_block(cache[img], cfg.patch_dims, index)[None] for _, img in train_rows])
    x_va = np.stack([_patch_block(cache[img], cfg.patch_dims, index)[None] for _, img in val_rows])

    def objective(sample):
        spec = default_patch_spec(cfg.patch_dims, tuple(sample["filters"]),
                                  int(sample["dense_units"]), cfg.model3d.kernel)
        tc = TrainConfig(**{**_tc_dict(cfg.train),
                            "learning_rate": float(sample["learning_rate"]),
                            "batch_size": int(sample["batch_size"]),
                            "seed": _fr_seed(cfg.cv.seed, 0, 0)})
        model, _ = train_with_early_stopping(spec, (x_tr, y_tr), (x_va, y_va), tc)
        entry = compute_metrics(predict_proba(model, x_va), y_va)
        return entry.aps if entry.aps is not None else 0.0

    best, trace = random_search(DEFAULT_SEARCH_SPACE, budget, objective,
                                seed=cfg.cv.seed if seed is None else seed)
    out = {"best": best, "trace": trace, "patch_index": list(index)}
    path = os.path.join(cfg.work_dir, "search.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
    return out
