"""Subcommand implementations and the on-disk run layout.

Every run lives in ``<out>/runs/<run-id>/`` with ``checkpoints``, ``images``,
``reports`` and ``manifests`` subdirectories. Each subcommand leaves a
``manifests/<command>.json`` record with the config hash, hashes of its inputs
and the paths (relative to the run directory) of everything it wrote.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import jsonable
from .conditioning import MeasurementCodebook
from .config import RunConfig
from .data import (DatasetManifest, ToyDatasetSpec, generate_toy_dataset, ingest_dataset,
                   load_samples, split_dataset, write_image)
from .evaluation import (ConvClassifier, FrozenFeatureExtractor, compute_fid, downstream_augment_eval,
                         fid_confusion_matrix, inception_score, write_feature_table)
from .evaluation import reports
from .measurements import (N_FEATURES, MeasurementExtractor, MeasurementNormalizer, extract_measurements,
                           write_measurements)
from .tokenizer import LesionFocusedVQVAE
from .var import LesionSynthesizer, NextScaleVAR

logger = logging.getLogger(__name__)

SUBDIRS = ("checkpoints", "images", "reports", "manifests")

ABLATION_FLAGS = {
    "Baseline": {"LF": False, "FM": False, "AM": False},
    "Baseline + LF": {"LF": True, "FM": False, "AM": False},
    "Baseline + LF + FM": {"LF": True, "FM": True, "AM": False},
    "Baseline + LF + AM": {"LF": True, "FM": False, "AM": True},
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    inputs: dict = field(default_factory=dict)  # name -> sha256
    checkpoints: dict = field(default_factory=dict)  # name -> path relative to the run dir
    artifacts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).write_text(json.dumps(jsonable(asdict(self)), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class Workspace:
    """Paths of one run under ``out``."""

    def __init__(self, cfg: RunConfig, out="."):
        self.cfg = cfg
        self.out = Path(out)
        self.run_dir = self.out / "runs" / cfg.run_id

    def ensure(self):
        for d in SUBDIRS:
            (self.run_dir / d).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def data_dir(self):
        return self.out / self.cfg.data.root

    @property
    def dataset_manifest(self):
        return self.data_dir / "manifest.jsonl"

    def path(self, *parts):
        return self.run_dir.joinpath(*parts)

    @property
    def tokenizer_ckpt(self):
        return self.path("checkpoints", "tokenizer.pt")

    @property
    def var_ckpt(self):
        return self.path("checkpoints", "var.pt")

    @property
    def normalizer_path(self):
        return self.path("checkpoints", "normalizer.csv")

    @property
    def codebook_path(self):
        p = Path(self.cfg.measurements.codebook_path or "checkpoints/codebook.csv")
        return p if p.is_absolute() else self.run_dir / p

    def rel(self, p):
        return Path(p).resolve().relative_to(self.run_dir.resolve()).as_posix()

    def manifest(self, command, inputs=None, checkpoints=None, artifacts=None):
        m = RunManifest(self.cfg.run_id, command, self.cfg.hash(),
                        dict(inputs or {}),
                        {k: self.rel(v) for k, v in (checkpoints or {}).items()},
                        {k: self.rel(v) for k, v in (artifacts or {}).items()},
                        self.cfg.to_dict())
        m.save(self.path("manifests", f"{command}.json"))
        return m


# ---------------------------------------------------------------------- data


def _require(path, hint):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return Path(path)


def load_splits(ws):
    """Dataset manifest plus the deterministic train/test split; split manifests are written to the run."""
    manifest = DatasetManifest.load(_require(ws.dataset_manifest, "run make-toy or prepare-data first"))
    train, test = split_dataset(manifest, ws.cfg.data.train_fraction, ws.cfg.seed)
    ws.ensure()
    train.save(ws.path("manifests", "train.jsonl"))
    test.save(ws.path("manifests", "test.jsonl"))
    return manifest, train, test


def _data_inputs(ws):
    return {"dataset_manifest": sha256_file(ws.dataset_manifest)}


def make_toy(cfg, out="."):
    ws = Workspace(cfg, out).ensure()
    t = cfg.data.toy
    spec = ToyDatasetSpec(t.num_classes, t.samples_per_class, tuple(cfg.data.resolution), t.seed)
    manifest = generate_toy_dataset(spec, ws.data_dir)
    load_splits(ws)
    ws.manifest("make-toy", _data_inputs(ws),
                artifacts={"train_manifest": ws.path("manifests", "train.jsonl"),
                           "test_manifest": ws.path("manifests", "test.jsonl")})
    return manifest


def prepare_data(cfg, out="."):
    d = cfg.data
    if not (d.image_dir and d.mask_dir and d.label_table):
        raise ValueError("prepare-data needs data.image_dir, data.mask_dir and data.label_table")
    ws = Workspace(cfg, out).ensure()
    manifest, report = ingest_dataset(d.image_dir, d.mask_dir, d.label_table, tuple(d.resolution),
                                      ws.data_dir, mask_suffix=d.mask_suffix)
    shutil.copyfile(ws.data_dir / "ingest_report.json", ws.path("reports", "ingest_report.json"))
    load_splits(ws)
    ws.manifest("prepare-data", _data_inputs(ws),
                artifacts={"ingest_report": ws.path("reports", "ingest_report.json"),
                           "train_manifest": ws.path("manifests", "train.jsonl"),
                           "test_manifest": ws.path("manifests", "test.jsonl")})
    return manifest, report


# ----------------------------------------------------------------- training


def make_tokenizer(cfg):
    t = cfg.tokenizer
    return LesionFocusedVQVAE(
        scales=tuple(tuple(s) for s in t.scales), vocab_size=t.vocab_size, code_dim=t.code_dim,
        channels=t.channels, n_down=t.n_down, lambda_perceptual=t.lambda_perceptual,
        lambda_adversarial=t.lambda_adversarial, disc_start_epoch=t.disc_start_epoch,
        commitment_beta=t.commitment_beta, lesion_focus=cfg.ablation.LF,
        learning_rate=t.learning_rate, betas=tuple(t.betas), weight_decay=t.weight_decay,
        epochs=t.epochs, batch_size=t.batch_size, restart_dead_codes=t.restart_dead_codes,
        random_state=cfg.seed, verbose=1)


def make_var(cfg, tokenizer, n_classes):
    v = cfg.var
    return NextScaleVAR(
        tokenizer=tokenizer, n_classes=n_classes, depth=v.depth, heads=v.heads, width=v.width,
        mlp_ratio=v.mlp_ratio, measurement_mode=cfg.measurement_mode,
        scales=None if v.scales is None else tuple(tuple(s) for s in v.scales),
        learning_rate=v.learning_rate, betas=tuple(v.betas), weight_decay=v.weight_decay,
        epochs=v.epochs, batch_size=v.batch_size, grad_clip=v.grad_clip,
        temperature=v.sampler.temperature, top_k=v.sampler.top_k, top_p=v.sampler.top_p,
        random_state=cfg.seed, verbose=1)


def _write_history(path, history):
    if not history:
        return None
    keys = list(dict.fromkeys(k for h in history for k in h))
    rows = [[h.get(k) for k in keys] for h in history]
    return reports.write_csv(path, keys, rows)


def train_tokenizer(cfg, out="."):
    ws = Workspace(cfg, out)
    _, train, _ = load_splits(ws)
    X, M, _ = load_samples(train)
    tok = make_tokenizer(cfg).fit(X, masks=M, checkpoint_out=ws.tokenizer_ckpt)
    tok.save(ws.tokenizer_ckpt)
    hist = _write_history(ws.path("reports", "tokenizer_history.csv"), tok.history_)
    ws.manifest("train-vqvae", _data_inputs(ws), {"tokenizer": ws.tokenizer_ckpt},
                {"history": hist} if hist else {})
    return tok


def load_tokenizer(ws):
    return LesionFocusedVQVAE.load(_require(ws.tokenizer_ckpt, "run train-vqvae first"))


def load_var(ws, tokenizer):
    return NextScaleVAR.load(_require(ws.var_ckpt, "run train-var first"), tokenizer)


def measure(cfg, images, masks, sample_ids):
    """Raw (N, 14) measurements; a sample without lesion pixels is reported by id."""
    m = cfg.measurements
    out = np.empty((len(images), N_FEATURES))
    for i, (x, mk, sid) in enumerate(zip(images, masks, sample_ids)):
        try:
            out[i] = extract_measurements(x, mk, m.num_levels, m.hist_bins)
        except ValueError as exc:
            raise ValueError(f"{sid}: {exc}") from None
    return out


def train_var(cfg, out="."):
    if cfg.var.scales is not None and [list(s) for s in cfg.var.scales] != [list(s) for s in cfg.tokenizer.scales]:
        raise ValueError(f"VAR scales {cfg.var.scales} do not match tokenizer scales {cfg.tokenizer.scales}")
    ws = Workspace(cfg, out)
    manifest, train, _ = load_splits(ws)
    tok = load_tokenizer(ws)
    var = make_var(cfg, tok, len(manifest.class_names))
    var.check_tokenizer()  # scale compatibility before any expensive work
    X, M, y = load_samples(train)
    raw = measure(cfg, X, M, train.sample_ids)
    normalizer = MeasurementNormalizer().fit(raw)
    normalizer.save(ws.normalizer_path)
    write_measurements(ws.path("reports", "train_measurements.csv"), train.sample_ids, raw)
    cond = normalizer.transform(raw) if cfg.measurement_mode == "extracted" else None
    var.fit(X, y, cond)
    var.save(ws.var_ckpt)
    hist = _write_history(ws.path("reports", "var_history.csv"), var.history_)
    ws.manifest("train-var", {**_data_inputs(ws), "tokenizer": sha256_file(ws.tokenizer_ckpt)},
                {"tokenizer": ws.tokenizer_ckpt, "var": ws.var_ckpt, "normalizer": ws.normalizer_path},
                {"history": hist, "train_measurements": ws.path("reports", "train_measurements.csv")})
    return var


def build_codebook(cfg, out="."):
    """Class-average raw measurements over the training split."""
    ws = Workspace(cfg, out)
    manifest, train, _ = load_splits(ws)
    X, M, y = load_samples(train)
    raw = measure(cfg, X, M, train.sample_ids)
    cb = MeasurementCodebook(len(manifest.class_names), raw.shape[1], manifest.class_names).fit(raw, y)
    ws.codebook_path.parent.mkdir(parents=True, exist_ok=True)
    cb.save(ws.codebook_path)
    ws.manifest("build-codebook", _data_inputs(ws), {"codebook": ws.codebook_path})
    return cb


def load_codebook(ws, n_classes, class_names):
    """Stored codebook, or an empty one when none has been built."""
    if ws.codebook_path.exists():
        return MeasurementCodebook.load(ws.codebook_path)
    return MeasurementCodebook(n_classes, N_FEATURES, class_names)


# --------------------------------------------------------------- generation


def _sampler(cfg):
    s = cfg.var.sampler
    return {"temperature": s.temperature, "top_k": s.top_k, "top_p": s.top_p}


def _synthesizer(ws, manifest, need_codebook):
    cb = None
    if need_codebook:
        cb = load_codebook(ws, len(manifest.class_names), manifest.class_names)
    tok = load_tokenizer(ws)
    var = load_var(ws, tok)
    norm = MeasurementNormalizer.load(_require(ws.normalizer_path, "run train-var first")) \
        if var.measurement_mode == "extracted" else None
    m = ws.cfg.measurements
    return LesionSynthesizer(var, norm, cb, MeasurementExtractor(m.num_levels, m.hist_bins))


def _class_seed(cfg, c, i):
    return int(cfg.seed) * 1_000_003 + int(c) * 10_007 + int(i)


def synthesize(ws, synth, manifest, sources, mode, classes, n_per_class):
    """Images, labels and provenance records for ``n_per_class`` samples of each class."""
    cfg = ws.cfg
    images, labels, records = [], [], []
    by_class = {c: [e for e in sources.entries if e.label == c] for c in classes}
    if mode == "intra":
        X, M, _ = load_samples(sources)
        index = {sid: i for i, sid in enumerate(sources.sample_ids)}
    for c in classes:
        seeds = [_class_seed(cfg, c, i) for i in range(n_per_class)]
        if mode == "intra":
            pool = by_class[c]
            if not pool:
                raise ValueError(f"class {manifest.class_names[c]!r} has no source samples")
            src = [pool[i % len(pool)] for i in range(n_per_class)]
            rows = [index[e.sample_id] for e in src]
            out = synth.synthesize_intra(X[rows], M[rows], [c] * n_per_class, seeds, **_sampler(cfg))
            src_ids = [e.sample_id for e in src]
        else:
            out = synth.synthesize_inter([c] * n_per_class, seeds, **_sampler(cfg))
            src_ids = [None] * n_per_class
        images.append(out)
        labels += [c] * n_per_class
        records += [{"class": int(c), "class_name": manifest.class_names[c], "seed": s,
                     "source_sample_id": sid} for s, sid in zip(seeds, src_ids)]
    return np.concatenate(images), np.asarray(labels), records


def generate(cfg, out=".", mode="intra", class_id=None, n_per_class=None):
    if mode not in ("intra", "inter"):
        raise ValueError("mode must be 'intra' or 'inter'")
    ws = Workspace(cfg, out)
    manifest, _, test = load_splits(ws)
    classes = range(len(manifest.class_names)) if class_id is None else [int(class_id)]
    for c in classes:
        if not 0 <= c < len(manifest.class_names):
            raise ValueError(f"class {c} out of range [0, {len(manifest.class_names)})")
    n = n_per_class or cfg.evaluation.samples_per_class
    if mode == "inter" and cfg.measurement_mode == "extracted":
        # fail on missing statistics before any checkpoint is touched
        cb = load_codebook(ws, len(manifest.class_names), manifest.class_names)
        for c in classes:
            cb.query(c)
    synth = _synthesizer(ws, manifest, need_codebook=mode == "inter")
    images, _, records = synthesize(ws, synth, manifest, test, mode, classes, n)
    img_dir = ws.path("images", mode)
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for im, rec in zip(images, records):
        name = f"{mode}_c{rec['class']}_s{rec['seed']}.png"
        write_image(img_dir / name, im)
        lines.append(json.dumps({"file": name, **rec}))
    listing = img_dir / "generated.jsonl"
    listing.write_text("\n".join(lines) + "\n")
    ws.manifest(f"generate-{mode}", {**_data_inputs(ws), "var": sha256_file(ws.var_ckpt)},
                {"tokenizer": ws.tokenizer_ckpt, "var": ws.var_ckpt}, {"images": listing})
    return images, records


# --------------------------------------------------------------- evaluation


def _per_class(feats, labels, classes):
    return {c: feats[labels == c] for c in classes}


def evaluate(cfg, out="."):
    """FID and IS per class for intra-class synthesis, a noise reference FID,
    the inter-class FID matrix and, if enabled, the downstream recall report."""
    ws = Workspace(cfg, out)
    manifest, train, test = load_splits(ws)
    names = manifest.class_names
    classes = list(range(len(names)))
    ev = cfg.evaluation
    n = ev.samples_per_class
    synth = _synthesizer(ws, manifest, need_codebook=ev.inter_class)
    X_real, _, y_real = load_samples(manifest)
    extractor = FrozenFeatureExtractor(seed=ev.extractor_seed).fit()
    f_real = extractor.transform(X_real)

    sources = test if all(test.class_counts() > 0) else manifest
    X_syn, y_syn, records = synthesize(ws, synth, manifest, sources, "intra", classes, n)
    f_syn = extractor.transform(X_syn)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.random(X_syn.shape, dtype=np.float32)
    f_noise = extractor.transform(noise)

    X_tr, _, y_tr = load_samples(train)
    ref = ConvClassifier(n_classes=len(names), epochs=ev.classifier_epochs, random_state=cfg.seed).fit(X_tr, y_tr)
    probs = ref.predict_proba(X_syn)

    real_c, syn_c = _per_class(f_real, y_real, classes), _per_class(f_syn, y_syn, classes)
    results = {"extractor_id": extractor.extractor_id, "samples_per_class": n,
               "fid": {}, "is": {}, "measurement_mode": synth.var.measurement_mode}
    for c in classes:
        results["fid"][names[c]] = compute_fid(real_c[c], syn_c[c])
        results["is"][names[c]] = inception_score(probs[y_syn == c], ev.is_splits)
    results["fid_overall"] = compute_fid(f_real, f_syn)
    results["fid_noise"] = compute_fid(f_real, f_noise)
    results["is_overall"] = inception_score(probs, ev.is_splits)

    rows = [[names[c], int((y_real == c).sum()), int((y_syn == c).sum()), results["fid"][names[c]],
             results["is"][names[c]]] for c in classes]
    rows.append(["all", len(y_real), len(y_syn), results["fid_overall"], results["is_overall"]])
    rows.append(["uniform-noise", len(y_real), len(noise), results["fid_noise"], None])
    header = ["class", "n_real", "n_synth", "FID", "IS"]
    artifacts = dict(zip(("metrics_txt", "metrics_csv"), reports.emit(
        ws.path("reports", "metrics"), header, rows, f"extractor: {extractor.extractor_id}")))
    artifacts["real_features"] = write_feature_table(
        ws.path("reports", "features_real.csv"), manifest.sample_ids, [names[c] for c in y_real], f_real)
    artifacts["synth_features"] = write_feature_table(
        ws.path("reports", "features_synth.csv"),
        [f"intra_c{r['class']}_s{r['seed']}" for r in records], [names[c] for c in y_syn], f_syn)

    if ev.inter_class:
        X_int, y_int, _ = synthesize(ws, synth, manifest, sources, "inter", classes, n)
        f_int = extractor.transform(X_int)
        fm = fid_confusion_matrix(_per_class(f_int, y_int, classes), real_c, names)
        results["fid_matrix"] = {"values": fm.values, "absent": fm.absent,
                                 "col_mean": fm.col_mean, "col_std": fm.col_std}
        txt, csv_ = reports.emit(ws.path("reports", "fid_matrix"), reports.fid_matrix_header(fm),
                                 reports.fid_matrix_rows(fm), f"extractor: {extractor.extractor_id}")
        artifacts.update(fid_matrix_txt=txt, fid_matrix_csv=csv_)

    if ev.downstream.enabled:
        X_te, _, y_te = load_samples(test)
        rep = downstream_augment_eval(
            (X_tr, y_tr), (X_syn, y_syn), (X_te, y_te), names, ev.downstream.target_per_class,
            {"epochs": ev.downstream.epochs, "batch_size": ev.downstream.batch_size}, cfg.seed)
        results["recall"] = {c: {"per_class": rep.per_class[c], "mean": rep.mean[c]} for c in rep.mean}
        results["recall_excluded"] = list(rep.excluded)
        txt, csv_ = reports.emit(ws.path("reports", "recall"), reports.recall_header(rep),
                                 reports.recall_rows(rep))
        artifacts.update(recall_txt=txt, recall_csv=csv_)

    res_path = ws.path("reports", "evaluation.json")
    res_path.write_text(json.dumps(jsonable(results), indent=2, sort_keys=True) + "\n")
    artifacts["evaluation"] = res_path
    ws.manifest("evaluate", {**_data_inputs(ws), "var": sha256_file(ws.var_ckpt)},
                {"tokenizer": ws.tokenizer_ckpt, "var": ws.var_ckpt}, artifacts)
    return results


# ----------------------------------------------------------------- ablation


def setting_config(cfg, setting):
    """Copy of ``cfg`` with the ablation flags of ``setting``."""
    flags = ABLATION_FLAGS[setting]
    return cfg.with_overrides({f"ablation.{k}": v for k, v in flags.items()}).validate()


def ablate(cfg, out="."):
    """Train and evaluate the four settings; a failing setting is reported, not fatal.

    Settings that share the LF flag share one tokenizer, trained once.
    """
    base = Workspace(cfg, out).ensure()
    results, runs, tokenizers = {}, {}, {}
    names = None
    for setting in ABLATION_FLAGS:
        scfg = setting_config(cfg, setting)
        ws = Workspace(scfg, out).ensure()
        runs[setting] = {"run_id": scfg.run_id, "flags": asdict(scfg.ablation),
                         "measurement_mode": scfg.measurement_mode}
        try:
            lf = scfg.ablation.LF
            if lf in tokenizers:
                shutil.copyfile(tokenizers[lf], ws.tokenizer_ckpt)
                shutil.copyfile(tokenizers[lf].with_suffix(".json"), ws.tokenizer_ckpt.with_suffix(".json"))
            else:
                train_tokenizer(scfg, out)
                tokenizers[lf] = ws.tokenizer_ckpt
            train_var(scfg, out)
            if scfg.measurement_mode == "extracted":
                build_codebook(scfg, out)
            ecfg = scfg if scfg.measurement_mode == "extracted" else \
                scfg.with_overrides({"evaluation.inter_class": False})
            res = evaluate(ecfg, out)
            results[setting] = {"is": res["is"], "fid": res["fid"]}
            names = names or list(res["fid"])
        except Exception as exc:  # noqa: BLE001 - recorded in the report
            logger.exception("ablation setting %r failed", setting)
            results[setting] = {"failed": f"{type(exc).__name__}: {exc}"}
    if names is None:
        names = list(DatasetManifest.load(base.dataset_manifest).class_names) \
            if base.dataset_manifest.exists() else []
    rows = reports.ablation_rows(results, names)
    txt, csv_ = reports.emit(base.path("reports", "ablation"), reports.ablation_header(names), rows,
                             "extractor: " + FrozenFeatureExtractor(seed=cfg.evaluation.extractor_seed).extractor_id)
    summary = base.path("reports", "ablation.json")
    summary.write_text(json.dumps(jsonable({"settings": runs, "results": results}), indent=2,
                                  sort_keys=True) + "\n")
    ws_inputs = _data_inputs(base) if base.dataset_manifest.exists() else {}
    base.manifest("ablate", ws_inputs, artifacts={"ablation_txt": txt, "ablation_csv": csv_,
                                                  "ablation_json": summary})
    return results, runs
