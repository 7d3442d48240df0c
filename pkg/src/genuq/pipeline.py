"""Experiment orchestration: train, fit the posterior, score, filter,
evaluate, and plot, with per-stage caching keyed by input hashes.

Every stage records its input hash, outputs, and timing in
``manifest.json``. On rerun a stage is reused only when its input hash
matches and all of its outputs still exist; anything else recomputes.
All artifact paths in the manifest are relative to the output directory.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, file_hash, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, config_to_dict
from .dataset import make_mode_dataset, read_dataset_csv, write_dataset_csv
from .diffusion import (
    OBJECTIVE_FLOW,
    SAMPLER_DDIM,
    SAMPLER_DDPM,
    SAMPLER_FLOW,
    STREAM_BASELINE,
    STREAM_COND,
    STREAM_DATASET,
    NfeMeter,
    SamplerSpec,
    child_seed,
)
from .errors import ConfigError, GenUqError, HashMismatchError
from .metrics import (
    SCORE_DIRECTIONS,
    ModeSpec,
    build_manifold,
    combine_ranks,
    evaluate_subset,
    rarity_scores,
    read_report,
    realism_scores,
    select_best,
    write_report,
)
from .nn import MlpConfig
from .plots import correlation_heatmap, metric_curves, three_panel_scatter
from .posterior import (
    LAPLACE,
    PosteriorSpec,
    fit_laplace,
    load_ensemble_from_manifest,
    load_laplace,
    save_ensemble_manifest,
    save_laplace,
    train_ensemble,
)
from .rng import RngState
from .training import TrainConfig, train
from .uncertainty import (
    FeatureMap,
    read_records_csv,
    read_records_sidecar,
    score_batch,
    write_records_csv,
    write_records_sidecar,
)

MANIFEST_FORMAT = "genuq-manifest"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

STAGE_ORDER = ("dataset", "train", "posterior", "score", "filter", "eval", "plot")


def _hash_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


@dataclass
class Pipeline:
    cfg: ExperimentConfig
    out: Path = field(init=False)
    manifest: dict = field(init=False)

    def __post_init__(self):
        self.out = Path(self.cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "tool_version": __version__,
            "config_hash": config_hash(self.cfg),
            "config": config_to_dict(self.cfg),
            "stages": {},
            "nfe": {},
        }
        self._prev = self._load_previous_manifest()
        self._started = time.monotonic()

    # -- manifest plumbing ------------------------------------------------

    def _load_previous_manifest(self) -> dict:
        path = self.out / MANIFEST_NAME
        if not path.exists():
            return {}
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            return {}
        if doc.get("format") != MANIFEST_FORMAT:
            return {}
        return doc

    def _write_manifest(self) -> None:
        self.manifest["wall_clock_s"] = round(time.monotonic() - self._started, 3)
        (self.out / MANIFEST_NAME).write_text(
            json.dumps(self.manifest, sort_keys=True, indent=1)
        )

    def _stage(self, name: str, input_hash: str, outputs: list[str], builder) -> None:
        """Run or reuse one stage and record it."""
        prev = self._prev.get("stages", {}).get(name)
        reusable = (
            prev is not None
            and prev.get("input_hash") == input_hash
            and all((self.out / rel).exists() for rel in prev.get("outputs", []))
            and set(outputs) <= set(prev.get("outputs", []))
        )
        start = time.monotonic()
        if reusable:
            record = {
                "input_hash": input_hash,
                "outputs": prev["outputs"],
                "cached": True,
                "wall_time_s": 0.0,
            }
            if name == "score" and "nfe" in self._prev:
                self.manifest["nfe"] = self._prev["nfe"]
        else:
            produced = builder()
            record = {
                "input_hash": input_hash,
                "outputs": sorted(set(outputs) | set(produced or [])),
                "cached": False,
                "wall_time_s": round(time.monotonic() - start, 3),
            }
        self.manifest["stages"][name] = record
        self._write_manifest()

    def verify(self) -> None:
        """Every referenced artifact must exist under this manifest."""
        for name, record in self.manifest["stages"].items():
            for rel in record["outputs"]:
                if not (self.out / rel).exists():
                    raise HashMismatchError(f"stage {name} output missing: {rel}")

    # -- shared accessors --------------------------------------------------

    @property
    def modes(self) -> ModeSpec:
        d = self.cfg.dataset
        return ModeSpec.grid(d.grid_side, d.span, d.mode_std, d.hallucination_radius)

    def _mlp_config(self, condition_count: int) -> MlpConfig:
        t = self.cfg.train
        return MlpConfig(
            input_dim=self.modes.centers.shape[1],
            hidden_dims=t.hidden_dims,
            activation=t.activation,
            time_embed_dim=t.time_embed_dim,
            condition_count=condition_count,
        )

    def _train_config(self, seed: int, condition_count: int) -> TrainConfig:
        t = self.cfg.train
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            ema_decay=t.ema_decay,
            objective=t.objective,
            seed=seed,
            mlp=self._mlp_config(condition_count),
            schedule_kind=t.schedule_kind,
            schedule_steps=t.schedule_steps,
        )

    def _member_count(self) -> int:
        return self.cfg.posterior.members if self.cfg.posterior.kind == "ensemble" else 1

    def _member_path(self, i: int) -> Path:
        return self.out / "checkpoints" / f"member_{i:03d}.json"

    def _base_sampler(self) -> SamplerSpec:
        s = self.cfg.sampling
        if s.kind == SAMPLER_FLOW:
            return SamplerSpec.flow_euler(s.steps if s.steps is not None else 50)
        steps = s.steps if s.steps is not None else self.cfg.train.schedule_steps
        if s.kind == SAMPLER_DDPM:
            return SamplerSpec.ddpm(self.cfg.train.schedule_steps, steps)
        return SamplerSpec.ddim(self.cfg.train.schedule_steps, steps, s.eta)

    def _score_sampler(self) -> SamplerSpec:
        sc = self.cfg.scoring
        if sc.sampler == SAMPLER_FLOW:
            return SamplerSpec.flow_euler(sc.steps)
        if sc.sampler == SAMPLER_DDPM:
            return SamplerSpec.ddpm(self.cfg.train.schedule_steps, sc.steps)
        return SamplerSpec.ddim(self.cfg.train.schedule_steps, sc.steps, sc.eta)

    def _feature_map(self, dim: int) -> FeatureMap:
        sc = self.cfg.scoring
        if sc.feature_kind == "identity":
            return FeatureMap.identity(dim)
        if sc.feature_kind == "random-projection":
            out_dim = sc.feature_dim if sc.feature_dim is not None else dim
            return FeatureMap.random_projection(dim, out_dim, sc.feature_seed)
        return FeatureMap.from_embedding_csv(sc.embedding_path)

    def _load_dataset(self) -> tuple[np.ndarray, np.ndarray]:
        return read_dataset_csv(self.out / "dataset.csv")

    def _load_holdout(self) -> np.ndarray:
        x, _ = read_dataset_csv(self.out / "holdout.csv")
        return x

    # -- stages -------------------------------------------------------------

    def run_dataset(self) -> None:
        d = self.cfg.dataset
        input_hash = _hash_obj({"dataset": config_to_dict(self.cfg)["dataset"],
                                "seed": self.cfg.seed})
        outputs = ["dataset.csv", "holdout.csv"]

        def build():
            if d.kind == "csv":
                x, labels = read_dataset_csv(d.path)
            else:
                x, labels = make_mode_dataset(
                    self.modes, d.n_train, child_seed(self.cfg.seed, STREAM_DATASET, 0)
                )
            write_dataset_csv(self.out / "dataset.csv", x, labels)
            ho_x, ho_labels = make_mode_dataset(
                self.modes, d.n_holdout, child_seed(self.cfg.seed, STREAM_DATASET, 1)
            )
            write_dataset_csv(self.out / "holdout.csv", ho_x, ho_labels)

        self._stage("dataset", input_hash, outputs, build)

    def run_train(self) -> None:
        self.run_dataset()
        x, labels = self._load_dataset()
        condition_count = int(labels.max()) + 1 if self.cfg.train.conditional else 0
        members = self._member_count()
        input_hash = _hash_obj({
            "train": config_to_dict(self.cfg)["train"],
            "dataset_hash": file_hash(self.out / "dataset.csv"),
            "members": members,
            "base_seed": self.cfg.seed,
        })
        outputs = [f"checkpoints/member_{i:03d}.json" for i in range(members)]
        outputs += [f"checkpoints/loss_member_{i:03d}.csv" for i in range(members)]

        def build():
            (self.out / "checkpoints").mkdir(exist_ok=True)
            cond = labels if self.cfg.train.conditional else None
            for i in range(members):
                ckpt = train(
                    self._train_config(self.cfg.seed + i, condition_count),
                    x,
                    cond,
                    self.out / "checkpoints" / f"loss_member_{i:03d}.csv",
                )
                save_checkpoint(ckpt, self._member_path(i))

        self._stage("train", input_hash, outputs, build)

    def _load_members(self) -> list[Checkpoint]:
        return [load_checkpoint(self._member_path(i)) for i in range(self._member_count())]

    def run_posterior(self) -> None:
        self.run_train()
        p = self.cfg.posterior
        member_hashes = [file_hash(self._member_path(i)) for i in range(self._member_count())]
        input_hash = _hash_obj({
            "posterior": config_to_dict(self.cfg)["posterior"],
            "members": member_hashes,
            "dataset_hash": file_hash(self.out / "dataset.csv"),
            "seed": self.cfg.seed,
        })
        outputs = ["ensemble.json"] if p.kind == "ensemble" else ["laplace.json"]

        def build():
            if p.kind == "ensemble":
                save_ensemble_manifest(
                    [f"checkpoints/member_{i:03d}.json" for i in range(p.members)],
                    [self.cfg.seed + i for i in range(p.members)],
                    self.out / "ensemble.json",
                )
            else:
                x, labels = self._load_dataset()
                cond = labels if self.cfg.train.conditional else None
                ckpt = load_checkpoint(self._member_path(0))
                state = fit_laplace(
                    ckpt, x, cond,
                    fraction=p.fit_fraction,
                    prior_precision=p.prior_precision,
                    observation_noise=p.observation_noise,
                    seed=self.cfg.seed,
                )
                save_laplace(state, self.out / "laplace.json")

        self._stage("posterior", input_hash, outputs, build)

    def _load_posterior(self) -> tuple[PosteriorSpec, Checkpoint]:
        base = load_checkpoint(self._member_path(0))
        if self.cfg.posterior.kind == "ensemble":
            spec = load_ensemble_from_manifest(self.out / "ensemble.json")
            return spec, base
        state = load_laplace(self.out / "laplace.json", base)
        return PosteriorSpec(kind=LAPLACE, laplace=state, base=base), base

    def run_score(self) -> None:
        self.run_posterior()
        sc = self.cfg.scoring
        posterior_files = (
            ["ensemble.json"] if self.cfg.posterior.kind == "ensemble" else ["laplace.json"]
        )
        input_hash = _hash_obj({
            "scoring": config_to_dict(self.cfg)["scoring"],
            "sampling": config_to_dict(self.cfg)["sampling"],
            "posterior_hashes": [file_hash(self.out / f) for f in posterior_files],
            "seed": self.cfg.seed,
        })
        outputs = ["records.csv", "records.npz"]

        def build():
            posterior, ckpt = self._load_posterior()
            count = self.cfg.sampling.count
            seed_ids = np.arange(count, dtype=np.int64)
            conds = None
            if self.cfg.train.conditional:
                gen = RngState(child_seed(self.cfg.seed, STREAM_COND)).generator()
                conds = gen.integers(0, ckpt.mlp.condition_count, size=count)
            meter = NfeMeter()
            records = score_batch(
                seed_ids,
                ckpt,
                posterior,
                self._base_sampler(),
                self._score_sampler(),
                self._feature_map(ckpt.mlp.input_dim),
                sc.mc_samples,
                sc.sem_noise,
                self.cfg.seed,
                conds=conds,
                include_base=sc.include_base,
                threads=self.cfg.threads,
                meter=meter,
            )
            write_records_csv(records, self.out / "records.csv")
            write_records_sidecar(records, self.out / "records.npz")
            base_steps = self._base_sampler().steps
            score_steps = self._score_sampler().steps
            self.manifest["nfe"] = {
                "base": count * base_steps,
                "replicas": count * sc.mc_samples * score_steps,
                "per_seed_replica": sc.mc_samples * score_steps,
                "total": count * base_steps + count * sc.mc_samples * score_steps,
                "measured_total": meter.total,
            }

        self._stage("score", input_hash, outputs, build)

    def _resolve_score(self, name: str, base_scores: dict[str, np.ndarray],
                       seed_ids: np.ndarray) -> tuple[np.ndarray, str]:
        """Simple scores pass through; 'a+b' names are rank-sum combos."""
        parts = name.split("+")
        if len(parts) == 1:
            return base_scores[name], SCORE_DIRECTIONS[name]
        ordered = combine_ranks(
            {p: base_scores[p] for p in parts},
            {p: SCORE_DIRECTIONS[p] for p in parts},
            seed_ids,
        )
        # Convert the best-first ordering back to a per-seed rank value.
        rank_of = {int(sid): pos for pos, sid in enumerate(ordered)}
        values = np.array([rank_of[int(s)] for s in seed_ids], dtype=np.float64)
        return values, "asc"

    def run_filter(self) -> None:
        self.run_score()
        f = self.cfg.filtering
        input_hash = _hash_obj({
            "filtering": config_to_dict(self.cfg)["filtering"],
            "records_hash": file_hash(self.out / "records.csv"),
            "holdout_hash": file_hash(self.out / "holdout.csv"),
            "seed": self.cfg.seed,
        })
        outputs = ["scores/entropy.csv", "scores/realism.csv", "scores/rarity.csv"]
        for name in f.scores:
            for n in f.n_grid:
                outputs.append(f"filtered/{name}_n{n}_kept.csv")
                for b in range(f.baseline_count):
                    outputs.append(f"filtered/{name}_n{n}_random{b}.csv")

        def build():
            (self.out / "scores").mkdir(exist_ok=True)
            (self.out / "filtered").mkdir(exist_ok=True)
            seed_ids, _, entropy = read_records_csv(self.out / "records.csv")
            sidecar = read_records_sidecar(self.out / "records.npz")
            samples = sidecar["samples"]
            index = build_manifold(self._load_holdout())
            base_scores = {
                "entropy": entropy,
                "realism": realism_scores(samples, index),
                "rarity": rarity_scores(samples, index),
            }
            for sname, values in base_scores.items():
                _write_score_csv(self.out / "scores" / f"{sname}.csv", seed_ids, values)
            for name in f.scores:
                values, direction = self._resolve_score(name, base_scores, seed_ids)
                if "+" in name:
                    _write_score_csv(self.out / "scores" / f"{name}.csv", seed_ids, values)
                for n in f.n_grid:
                    kept = select_best(seed_ids, values, direction, n)
                    _write_id_csv(self.out / f"filtered/{name}_n{n}_kept.csv", kept)
                    for b in range(f.baseline_count):
                        gen = RngState(
                            child_seed(self.cfg.seed, STREAM_BASELINE, b)
                        ).generator()
                        chosen = gen.choice(seed_ids.size, size=n, replace=False)
                        _write_id_csv(
                            self.out / f"filtered/{name}_n{n}_random{b}.csv",
                            np.sort(seed_ids[chosen]),
                        )

        self._stage("filter", input_hash, outputs, build)

    def run_eval(self) -> None:
        self.run_filter()
        f = self.cfg.filtering
        subset_files = ["full"]
        for name in f.scores:
            for n in f.n_grid:
                subset_files.append(f"{name}_n{n}_kept")
                subset_files.extend(
                    f"{name}_n{n}_random{b}" for b in range(f.baseline_count)
                )
        filter_outputs = self.manifest["stages"]["filter"]["outputs"]
        input_hash = _hash_obj({
            "subsets": subset_files,
            "filter_hashes": [file_hash(self.out / rel) for rel in sorted(filter_outputs)],
            "records_hash": file_hash(self.out / "records.csv"),
        })
        outputs = [f"reports/{s}.txt" for s in subset_files]

        def build():
            (self.out / "reports").mkdir(exist_ok=True)
            seed_ids, _, entropy = read_records_csv(self.out / "records.csv")
            sidecar = read_records_sidecar(self.out / "records.npz")
            samples = sidecar["samples"]
            row_of = {int(s): i for i, s in enumerate(seed_ids)}
            reference = self._load_holdout()
            modes = self.modes
            for subset in subset_files:
                if subset == "full":
                    ids = seed_ids
                else:
                    ids = _read_id_csv(self.out / f"filtered/{subset}.csv")
                rows = np.array([row_of[int(s)] for s in ids])
                report = evaluate_subset(
                    samples[rows], ids, reference, modes,
                    scores={"entropy": entropy[rows]},
                )
                write_report(report, self.out / f"reports/{subset}.txt")

        self._stage("eval", input_hash, outputs, build)

    def run_plot(self) -> None:
        self.run_eval()
        eval_outputs = self.manifest["stages"]["eval"]["outputs"]
        input_hash = _hash_obj({
            "eval_hashes": [file_hash(self.out / rel) for rel in sorted(eval_outputs)],
            "records_hash": file_hash(self.out / "records.csv"),
        })
        f = self.cfg.filtering

        def build() -> list[str]:
            (self.out / "plots").mkdir(exist_ok=True)
            seed_ids, _, _ = read_records_csv(self.out / "records.csv")
            if seed_ids.size == 0:
                raise GenUqError("no records to plot")
            sidecar = read_records_sidecar(self.out / "records.npz")
            samples = sidecar["samples"]
            row_of = {int(s): i for i, s in enumerate(seed_ids)}
            data, _ = self._load_dataset()
            written = []

            if f.scores and f.n_grid:
                first = f"{f.scores[0]}_n{f.n_grid[0]}_kept"
                kept_ids = _read_id_csv(self.out / f"filtered/{first}.csv")
                kept = samples[[row_of[int(s)] for s in kept_ids]]
                written += three_panel_scatter(data, samples, kept, self.out / "plots")

                rows = []
                for name in f.scores:
                    for n in f.n_grid:
                        for subset in ["kept"] + [f"random{b}" for b in range(f.baseline_count)]:
                            rep = read_report(self.out / f"reports/{name}_n{n}_{subset}.txt")
                            rows.append({
                                "score": name, "n": n, "subset": subset,
                                "fid": rep.fid, "precision": rep.precision,
                                "recall": rep.recall,
                                "hallucination_rate": rep.hallucination_rate,
                            })
                written += metric_curves(rows, self.out / "plots")

            full = read_report(self.out / "reports/full.txt")
            written += correlation_heatmap(
                full.spearman_names, full.spearman_matrix, self.out / "plots"
            )
            return [str(p.relative_to(self.out)) for p in written]

        self._stage("plot", input_hash, [], build)

    def run_all(self) -> dict:
        self.run_plot()
        self.verify()
        self._write_manifest()
        return self.manifest


def _write_score_csv(path: Path, seed_ids: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("seed_id,score\n")
        for sid, v in zip(seed_ids, values):
            fh.write(f"{int(sid)},{repr(float(v))}\n")


def _write_id_csv(path: Path, ids: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("seed_id\n")
        for sid in ids:
            fh.write(f"{int(sid)}\n")


def _read_id_csv(path: Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "seed_id":
        raise ConfigError(f"unexpected id file header in {path}")
    return np.array([int(v) for v in lines[1:]], dtype=np.int64)
