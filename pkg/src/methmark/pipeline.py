"""End-to-end pipeline with a run manifest, stage caching and deterministic re-runs.

Thirteen stages run in a fixed order; each writes its artifacts plus a
content hash into ``manifest.json``. A stage is skipped when its recorded
input hashes match the current upstream outputs and its own outputs re-hash
cleanly; any stage that does run dirties everything downstream. Outputs are
formatted with shortest-round-trip floats and sorted JSON keys, so a fixed
config and seed give byte-identical artifacts for any worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import community as community_mod
from . import data as data_mod
from . import ebayes, interaction, markers as markers_mod, survival
from .errors import ConfigError, MethmarkError, StageError, ValidationError
from .validation import pair_block, pair_count

STAGES = (
    "ingest",
    "moments",
    "interactions",
    "waldfield",
    "nodeweights",
    "adjacency",
    "component",
    "blockcount",
    "partition",
    "train_scores",
    "test_scores",
    "validation",
    "concordance",
)

SUBCOMMAND_SLICES = {
    "ingest": ("ingest", "moments", "interactions"),
    "network": ("waldfield", "nodeweights", "adjacency"),
    "communities": ("component", "blockcount", "partition"),
    "score": ("train_scores", "test_scores"),
    "validate": ("validation",),
    "concordance": ("concordance",),
}

_MANIFEST_NAME = "manifest.json"

# Config keys that steer execution but not results; excluded from the
# manifest echo so byte-identical runs do not depend on them.
_EXECUTION_KEYS = ("workers", "chunk_size", "output_dir")


@dataclass
class RunConfig:
    methylation_healthy: str
    methylation_train: str
    methylation_test: str
    clinical: str
    output_dir: str
    expression: str | None = None
    detection_p_healthy: str | None = None
    detection_p_train: str | None = None
    detection_p_test: str | None = None
    laplace_scale: float = 0.5
    bandwidth_multiplier: float = 2.0
    k_override: int | None = None
    min_coverage: float = 0.95
    max_detection_p: float = 0.05
    knn_k: int = 5
    seed: int = 0
    workers: int = 1
    chunk_size: int = 1_000_000

    def __post_init__(self):
        if self.laplace_scale <= 0:
            raise ConfigError(f"laplace_scale must be positive, got {self.laplace_scale}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if not 0.0 < self.min_coverage <= 1.0:
            raise ConfigError("min_coverage must lie in (0, 1]")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        self.seed = int(self.seed)

    @classmethod
    def from_json(cls, path, **overrides) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        missing = {f for f in ("methylation_healthy", "methylation_train", "methylation_test", "clinical", "output_dir")} - set(raw)
        if missing:
            raise ConfigError(f"config missing required keys: {sorted(missing)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def manifest_echo(self) -> dict:
        echo = {k: v for k, v in self.__dict__.items() if k not in _EXECUTION_KEYS}
        return echo


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


@dataclass
class StageStatus:
    name: str
    cached: bool


class PipelineRunner:
    """Executes pipeline stages against an output directory and manifest."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.outdir = Path(config.output_dir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.outdir / _MANIFEST_NAME
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {"config": config.manifest_echo(), "stages": {}}
        self.manifest["config"] = config.manifest_echo()
        self.ctx: dict = {}

    # -- manifest helpers ----------------------------------------------------

    def _save_manifest(self) -> None:
        _write_json(self.manifest_path, self.manifest)

    def _outputs_ok(self, entry: dict) -> bool:
        for rel, digest in entry.get("outputs", {}).items():
            path = self.outdir / rel
            if not path.exists() or file_hash(path) != digest:
                return False
        return True

    def stage_clean(self, name: str, inputs: dict) -> bool:
        entry = self.manifest["stages"].get(name)
        return bool(entry) and entry.get("inputs") == inputs and self._outputs_ok(entry)

    def artifact(self, rel: str) -> Path:
        return self.outdir / rel

    def artifact_hash(self, rel: str) -> str:
        entry_path = self.outdir / rel
        if not entry_path.exists():
            raise StageError(rel, "artifact missing")
        return file_hash(entry_path)

    def require_stage(self, name: str) -> dict:
        entry = self.manifest["stages"].get(name)
        if not entry or not self._outputs_ok(entry):
            raise StageError(name, f"requires stage: {name}")
        return entry

    # -- execution -----------------------------------------------------------

    def run(self, stages: tuple[str, ...] = STAGES) -> list[StageStatus]:
        """Run the given stages in pipeline order with dirty propagation."""
        order = [s for s in STAGES if s in stages]
        if not order:
            raise ConfigError("no stages requested")
        statuses = []
        dirty = False
        for name in order:
            if name == "concordance" and self.config.expression is None:
                continue
            inputs = getattr(self, f"_inputs_{name}")()
            if not dirty and self.stage_clean(name, inputs):
                statuses.append(StageStatus(name, cached=True))
                continue
            dirty = True
            try:
                outputs, params = getattr(self, f"_run_{name}")()
            except MethmarkError as exc:
                self._save_manifest()
                raise StageError(name, str(exc)) from exc
            self.manifest["stages"][name] = {
                "inputs": inputs,
                "outputs": {rel: file_hash(self.outdir / rel) for rel in outputs},
                "params": params,
            }
            self._save_manifest()
            statuses.append(StageStatus(name, cached=False))
        return statuses

    # -- lazy context loading --------------------------------------------------

    def study(self) -> data_mod.AlignedStudy:
        if "study" not in self.ctx:
            self.require_stage("ingest")
            meth = _load_processed_methylation(
                self.artifact("processed_methylation.csv"), self.artifact("cohorts.csv")
            )
            clinical = data_mod.load_clinical(self.artifact("clinical.csv"))
            expression = None
            if self.config.expression is not None:
                expression = _load_processed_expression(
                    self.artifact("expression.csv"), self.artifact("cohorts.csv")
                )
            self.ctx["study"] = data_mod.align_cohorts(meth, clinical, expression)
        return self.ctx["study"]

    def reference(self) -> interaction.HealthyReference:
        if "reference" not in self.ctx:
            self.require_stage("moments")
            self.ctx["reference"] = interaction.load_reference(self.artifact("moments.bin"))
        return self.ctx["reference"]

    def field(self) -> ebayes.WaldField:
        if "field" not in self.ctx:
            self.require_stage("waldfield")
            self.ctx["field"] = _load_waldfield(self.artifact("waldfield.csv"), self.reference().genes_)
        return self.ctx["field"]

    def weights(self) -> list[ebayes.NodeWeight]:
        if "weights" not in self.ctx:
            self.require_stage("nodeweights")
            self.ctx["weights"] = _load_nodeweights(self.artifact("nodeweights.csv"), self.reference().genes_)
        return self.ctx["weights"]

    def network(self) -> ebayes.PrognosticNetwork:
        if "network" not in self.ctx:
            self.require_stage("adjacency")
            self.ctx["network"] = _load_network(self.artifact("edges.csv"), self.reference().genes_)
        return self.ctx["network"]

    def component(self) -> community_mod.SparseGraph:
        if "component" not in self.ctx:
            self.require_stage("component")
            self.ctx["component"] = _load_component(
                self.artifact("component_nodes.csv"), self.artifact("component_edges.csv")
            )
        return self.ctx["component"]

    def assignment(self) -> community_mod.CommunityAssignment | None:
        if "assignment" not in self.ctx:
            self.require_stage("partition")
            self.ctx["assignment"] = _load_assignment(self.artifact("assignment.csv"))
        return self.ctx["assignment"]

    def markers(self) -> list[markers_mod.MarkerModel]:
        if "markers" not in self.ctx:
            self.require_stage("train_scores")
            self.ctx["markers"] = _load_markers(self.artifact("markers.json"))
        return self.ctx["markers"]

    # -- stage inputs ----------------------------------------------------------

    def _inputs_ingest(self) -> dict:
        cfg = self.config
        sig = {
            "methylation_healthy": file_hash(cfg.methylation_healthy),
            "methylation_train": file_hash(cfg.methylation_train),
            "methylation_test": file_hash(cfg.methylation_test),
            "clinical": file_hash(cfg.clinical),
            "params": {
                "min_coverage": cfg.min_coverage,
                "max_detection_p": cfg.max_detection_p,
                "knn_k": cfg.knn_k,
            },
        }
        if cfg.expression is not None:
            sig["expression"] = file_hash(cfg.expression)
        for key in ("detection_p_healthy", "detection_p_train", "detection_p_test"):
            path = getattr(cfg, key)
            if path is not None:
                sig[key] = file_hash(path)
        return sig

    def _stage_output_hash(self, stage: str, rel: str) -> str:
        entry = self.require_stage(stage)
        digest = entry["outputs"].get(rel)
        if digest is None:
            raise StageError(stage, f"artifact {rel} not recorded")
        return digest

    def _inputs_moments(self) -> dict:
        return {
            "methylation": self._stage_output_hash("ingest", "processed_methylation.csv"),
            "cohorts": self._stage_output_hash("ingest", "cohorts.csv"),
        }

    def _inputs_interactions(self) -> dict:
        return {"moments": self._stage_output_hash("moments", "moments.bin")}

    def _inputs_waldfield(self) -> dict:
        return {
            "moments": self._stage_output_hash("moments", "moments.bin"),
            "interactions": self._stage_output_hash("interactions", "interactions_train.csv"),
            "clinical": self._stage_output_hash("ingest", "clinical.csv"),
        }

    def _inputs_nodeweights(self) -> dict:
        return {
            "waldfield": self._stage_output_hash("waldfield", "waldfield.csv"),
            "params": {"laplace_scale": self.config.laplace_scale},
        }

    def _inputs_adjacency(self) -> dict:
        return {
            "waldfield": self._stage_output_hash("waldfield", "waldfield.csv"),
            "nodeweights": self._stage_output_hash("nodeweights", "nodeweights.csv"),
            "params": {"laplace_scale": self.config.laplace_scale},
        }

    def _inputs_component(self) -> dict:
        return {"edges": self._stage_output_hash("adjacency", "edges.csv")}

    def _inputs_blockcount(self) -> dict:
        return {
            "component": self._stage_output_hash("component", "component_nodes.csv"),
            "params": {
                "bandwidth_multiplier": self.config.bandwidth_multiplier,
                "k_override": self.config.k_override,
            },
        }

    def _inputs_partition(self) -> dict:
        return {
            "component_edges": self._stage_output_hash("component", "component_edges.csv"),
            "blockcount": self._stage_output_hash("blockcount", "blockcount.json"),
            "params": {"seed": self.config.seed},
        }

    def _inputs_train_scores(self) -> dict:
        return {
            "edges": self._stage_output_hash("adjacency", "edges.csv"),
            "assignment": self._stage_output_hash("partition", "assignment.csv"),
            "moments": self._stage_output_hash("moments", "moments.bin"),
        }

    def _inputs_test_scores(self) -> dict:
        return {
            "markers": self._stage_output_hash("train_scores", "markers.json"),
            "moments": self._stage_output_hash("moments", "moments.bin"),
        }

    def _inputs_validation(self) -> dict:
        return {
            "markers": self._stage_output_hash("train_scores", "markers.json"),
            "test_scores": self._stage_output_hash("test_scores", "test_scores.csv"),
            "clinical": self._stage_output_hash("ingest", "clinical.csv"),
        }

    def _inputs_concordance(self) -> dict:
        return {
            "markers": self._stage_output_hash("train_scores", "markers.json"),
            "moments": self._stage_output_hash("moments", "moments.bin"),
            "expression": self._stage_output_hash("ingest", "expression.csv"),
        }

    # -- stage bodies ------------------------------------------------------------

    def _run_ingest(self):
        cfg = self.config
        parts = []
        for path, cohort, det_key in (
            (cfg.methylation_healthy, data_mod.HEALTHY, "detection_p_healthy"),
            (cfg.methylation_train, data_mod.TUMOUR_TRAIN, "detection_p_train"),
            (cfg.methylation_test, data_mod.TUMOUR_TEST, "detection_p_test"),
        ):
            d = data_mod.load_methylation(path, cohort)
            det_path = getattr(cfg, det_key)
            det = data_mod.load_methylation(det_path, cohort) if det_path else None
            parts.append((d, det))
        merged = data_mod.concat_samples([d for d, _ in parts])
        detection = None
        if any(det is not None for _, det in parts):
            detection = data_mod.concat_samples(
                [det if det is not None else _unit_detection(d) for d, det in parts]
            )
        filtered = data_mod.filter_probes(
            merged, cfg.min_coverage, cfg.max_detection_p, detection_p=detection
        )
        imputed = data_mod.knn_impute(filtered, cfg.knn_k)
        clinical = data_mod.load_clinical(cfg.clinical)

        expression = None
        if cfg.expression is not None:
            raw_expr = data_mod.load_expression(cfg.expression, data_mod.HEALTHY)
            expression = _relabel_expression(raw_expr, imputed)

        study = data_mod.align_cohorts(imputed, clinical, expression)
        self.ctx["study"] = study

        data_mod.write_methylation_csv(imputed, self.artifact("processed_methylation.csv"))
        _write_csv(
            self.artifact("cohorts.csv"),
            ["sample_id", "cohort"],
            [[s, c] for s, c in zip(imputed.sample_ids, imputed.cohort)],
        )
        data_mod.write_clinical_csv(clinical, self.artifact("clinical.csv"))
        outputs = ["processed_methylation.csv", "cohorts.csv", "clinical.csv"]
        if expression is not None:
            data_mod.write_expression_csv(expression, self.artifact("expression.csv"))
            outputs.append("expression.csv")
        summary = {
            "n_genes": imputed.n_genes,
            "n_probes": imputed.n_probes,
            "n_samples": imputed.n_samples,
            "cohort_sizes": {
                c: int(imputed.sample_mask(c).sum()) for c in data_mod.COHORTS
            },
            "incomplete_covariates": sorted(study.incomplete_covariates),
        }
        _write_json(self.artifact("ingest_summary.json"), summary)
        outputs.append("ingest_summary.json")
        return outputs, {}

    def _run_moments(self):
        study = self.study()
        ref = interaction.estimate_moments(study.methylation)
        self.ctx["reference"] = ref
        interaction.save_reference(ref, self.artifact("moments.bin"))
        return ["moments.bin"], {"n_healthy": ref.n_h_, "n_genes": len(ref.genes_)}

    def _run_interactions(self):
        study = self.study()
        ref = self.reference()
        genes = ref.genes_
        m = len(genes)
        train_idx = _sample_positions(study.methylation, study.train_ids)
        scores = ref.projection_scores(study.methylation, train_idx)
        n_pairs = pair_count(m)
        with open(self.artifact("interactions_train.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gene_i", "gene_j", "sample_id", "rho", "degenerate"])
            for start in range(0, n_pairs, self.config.chunk_size):
                ii, jj = pair_block(start, start + self.config.chunk_size, m)
                rho, degen = ref.rho_block(scores, ii, jj)
                for r in range(len(ii)):
                    gi, gj = genes[ii[r]], genes[jj[r]]
                    writer.writerows(
                        [gi, gj, sid, repr(float(rho[r, s])), int(degen[r, s])]
                        for s, sid in enumerate(study.train_ids)
                    )
        return ["interactions_train.csv"], {"n_pairs": n_pairs, "n_train": len(train_idx)}

    def _run_waldfield(self):
        study = self.study()
        ref = self.reference()
        field = compute_wald_field(
            ref,
            study,
            workers=self.config.workers,
            chunk_size=self.config.chunk_size,
        )
        self.ctx["field"] = field
        genes = ref.genes_
        m = len(genes)
        with open(self.artifact("waldfield.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gene_i", "gene_j", "z", "theta", "converged"])
            for start in range(0, pair_count(m), self.config.chunk_size):
                ii, jj = pair_block(start, start + self.config.chunk_size, m)
                sl = slice(start, start + len(ii))
                writer.writerows(
                    [
                        genes[i],
                        genes[j],
                        repr(float(z)),
                        repr(float(t)),
                        int(c),
                    ]
                    for i, j, z, t, c in zip(
                        ii, jj, field.z[sl], field.theta[sl], field.converged[sl]
                    )
                )
        n_flagged = int((~field.converged).sum())
        return ["waldfield.csv"], {"n_pairs": pair_count(m), "n_nonconverged": n_flagged}

    def _run_nodeweights(self):
        field = self.field()
        a = self.config.laplace_scale
        floor = ebayes.universal_weight_floor(pair_count(field.m), a)
        weights = ebayes.estimate_all_node_weights(field, a=a, w_min=floor)
        self.ctx["weights"] = weights
        genes = self.reference().genes_
        _write_csv(
            self.artifact("nodeweights.csv"),
            ["gene", "w", "loglik", "w_min"],
            [
                [genes[nw.node], repr(nw.w), repr(nw.loglik), repr(nw.w_min)]
                for nw in weights
            ],
        )
        return ["nodeweights.csv"], {"w_min": floor, "laplace_scale": a}

    def _run_adjacency(self):
        field = self.field()
        weights = self.weights()
        net = ebayes.build_adjacency(field, weights, a=self.config.laplace_scale)
        self.ctx["network"] = net
        genes = self.reference().genes_
        _write_csv(
            self.artifact("edges.csv"),
            ["gene_i", "gene_j", "z", "theta", "mu_ij", "mu_ji"],
            [
                [
                    genes[i],
                    genes[j],
                    repr(float(z)),
                    repr(float(t)),
                    repr(float(mi)),
                    repr(float(mj)),
                ]
                for (i, j), z, t, mi, mj in zip(net.edges, net.z, net.theta, net.mu_ij, net.mu_ji)
            ],
        )
        _write_json(
            self.artifact("network.json"),
            {"m": net.m, "n_edges": net.n_edges, "density": net.density},
        )
        return ["edges.csv", "network.json"], {"n_edges": net.n_edges}

    def _run_component(self):
        net = self.network()
        genes = self.reference().genes_
        deg = net.degree()
        nodes = np.flatnonzero(deg > 0)
        remap = -np.ones(net.m, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        graph = community_mod.SparseGraph(
            n=int(nodes.size),
            edges=remap[net.edges] if net.n_edges else np.empty((0, 2), dtype=np.int64),
            node_ids=[genes[v] for v in nodes],
        )
        comp = community_mod.largest_component(graph)
        self.ctx["component"] = comp
        _write_csv(
            self.artifact("component_nodes.csv"),
            ["gene"],
            [[g] for g in (comp.node_ids or [])],
        )
        _write_csv(
            self.artifact("component_edges.csv"),
            ["gene_i", "gene_j"],
            [[comp.node_ids[i], comp.node_ids[j]] for i, j in comp.edges],
        )
        return ["component_nodes.csv", "component_edges.csv"], {
            "n_nodes": comp.n,
            "n_edges": comp.n_edges,
        }

    def _run_blockcount(self):
        comp = self.component()
        if comp.n < 2:
            bc = community_mod.BlockCount(comp.n, 0, 0, self.config.bandwidth_multiplier, False)
        else:
            bc = community_mod.select_block_count(
                comp, self.config.bandwidth_multiplier, self.config.k_override
            )
        self.ctx["blockcount"] = bc
        payload = {
            "n": bc.n,
            "bandwidth": bc.bandwidth,
            "n_blocks": bc.n_blocks,
            "multiplier": bc.multiplier,
            "overridden": bc.overridden,
        }
        _write_json(self.artifact("blockcount.json"), payload)
        return ["blockcount.json"], payload

    def _run_partition(self):
        comp = self.component()
        bc = self.ctx.get("blockcount") or _load_blockcount(self.artifact("blockcount.json"))
        if comp.n < 2 or bc.n_blocks < 1:
            assignment = community_mod.CommunityAssignment(
                labels=np.ones(comp.n, dtype=np.int64) if comp.n else np.empty(0, dtype=np.int64),
                n_blocks=1 if comp.n else 0,
                bandwidth=bc.bandwidth,
                node_ids=comp.node_ids or [],
            )
            tau = 0.0
        else:
            model = community_mod.RegularizedSpectralClustering(
                n_blocks=bc.n_blocks, seed=self.config.seed
            ).fit(comp)
            labels = community_mod.canonical_labels(model.labels_) + 1
            assignment = community_mod.CommunityAssignment(
                labels=labels,
                n_blocks=bc.n_blocks,
                bandwidth=bc.bandwidth,
                node_ids=comp.node_ids,
            )
            tau = model.tau_
        self.ctx["assignment"] = assignment
        _write_csv(
            self.artifact("assignment.csv"),
            ["gene", "block"],
            [[g, int(b)] for g, b in zip(assignment.node_ids or [], assignment.labels)],
        )
        params = {
            "bandwidth": bc.bandwidth,
            "n_blocks": int(assignment.n_blocks),
            "tau": tau,
            "seed": self.config.seed,
        }
        return ["assignment.csv"], params

    def _run_train_scores(self):
        study = self.study()
        ref = self.reference()
        assignment = self.assignment()
        net = self.network()
        models = (
            markers_mod.build_marker_models(net, assignment)
            if assignment is not None and assignment.n_blocks
            else []
        )
        rows = []
        for model in models:
            scores = markers_mod.marker_scores(model, ref, study, study.train_ids)
            markers_mod.train_threshold(model, scores)
            for sid, score in zip(study.train_ids, scores):
                rows.append(
                    [sid, model.community, repr(float(score)), markers_mod.classify(model, score)]
                )
        self.ctx["markers"] = models
        _write_json(self.artifact("markers.json"), _markers_payload(models))
        _write_csv(
            self.artifact("train_scores.csv"),
            ["sample_id", "community", "score", "group"],
            rows,
        )
        return ["markers.json", "train_scores.csv"], {"n_markers": len(models)}

    def _run_test_scores(self):
        study = self.study()
        ref = self.reference()
        models = self.markers()
        rows = []
        for model in models:
            scores = markers_mod.marker_scores(model, ref, study, study.test_ids)
            for sid, score in zip(study.test_ids, scores):
                rows.append(
                    [sid, model.community, repr(float(score)), markers_mod.classify(model, score)]
                )
        _write_csv(
            self.artifact("test_scores.csv"),
            ["sample_id", "community", "score", "group"],
            rows,
        )
        return ["test_scores.csv"], {"n_markers": len(models)}

    def _run_validation(self):
        study = self.study()
        ref = self.reference()
        models = self.markers()
        km_dir = self.outdir / "km"
        km_dir.mkdir(exist_ok=True)
        outputs = []
        payload = []
        test_ps = {}
        for model in models:
            entry = {"community": model.community, "n_train": len(study.train_ids), "n_test": len(study.test_ids)}
            for cohort, label in ((data_mod.TUMOUR_TRAIN, "train"), (data_mod.TUMOUR_TEST, "test")):
                rep = markers_mod.validate_marker(model, study, ref, cohort)
                entry[label] = _report_payload(rep)
                if label == "test" and rep.evaluable and rep.univariate:
                    test_ps[model.community] = rep.univariate.p
                if rep.evaluable:
                    rel = f"km/km_{label}_c{model.community:03d}.csv"
                    survival.write_km_csv(
                        self.outdir / rel,
                        [(g, rep.km_curves[g]) for g in (markers_mod.BETTER, markers_mod.WORSE)],
                    )
                    outputs.append(rel)
            payload.append(entry)
        ranking = sorted(test_ps, key=lambda c: (test_ps[c], c))
        ranking += [m.community for m in models if m.community not in test_ps]
        _write_json(self.artifact("reports.json"), {"markers": payload, "ranking": ranking})
        outputs.insert(0, "reports.json")
        return outputs, {"n_markers": len(models)}

    def _run_concordance(self):
        study = self.study()
        ref = self.reference()
        models = self.markers()
        if study.expression is None:
            raise ValidationError("concordance requires expression data")
        expr_ref = markers_mod.ExpressionReference().fit(study.expression)
        rows = []
        shared = [
            s
            for s in (study.train_ids + study.test_ids)
            if study.expression.sample_index(s) is not None
        ]
        meth_pos = _sample_positions(study.methylation, shared)
        scores = ref.projection_scores(study.methylation, meth_pos)
        for model in models:
            for gx, gy in model.edges:
                rho, _deg = ref.rho_block(
                    scores,
                    np.array([ref.gene_index(gx)]),
                    np.array([ref.gene_index(gy)]),
                )
                expr_vals = []
                keep = []
                for s_pos, sid in enumerate(shared):
                    col = study.expression.sample_index(sid)
                    xi = study.expression.values[study.expression.gene_index(gx), col]
                    yi = study.expression.values[study.expression.gene_index(gy), col]
                    if np.isnan(xi) or np.isnan(yi):
                        continue
                    sx, dx = expr_ref.standardize(gx, xi)
                    sy, dy = expr_ref.standardize(gy, yi)
                    expr_vals.append(0.0 if (dx or dy) else sx * sy)
                    keep.append(s_pos)
                try:
                    entry = markers_mod.concordance_test(
                        (gx, gy), rho[0][keep], np.array(expr_vals)
                    )
                except ValidationError:
                    rows.append([gx, gy, "", "", "", ""])
                    continue
                if entry.evaluable:
                    rows.append(
                        [
                            gx,
                            gy,
                            repr(entry.pearson_r),
                            repr(entry.pearson_p),
                            repr(entry.spearman_r),
                            repr(entry.spearman_p),
                        ]
                    )
                else:
                    rows.append([gx, gy, "", "", "", ""])
        _write_csv(
            self.artifact("concordance.csv"),
            ["gene_i", "gene_j", "pearson_r", "pearson_p", "spearman_r", "spearman_p"],
            rows,
        )
        return ["concordance.csv"], {"n_edges": len(rows)}


def run_pipeline(config: RunConfig) -> list[StageStatus]:
    """Execute all stages; aborts with the failing stage's name on error."""
    return PipelineRunner(config).run()


# ---------------------------------------------------------------------------
# Wald-field computation (chunked, optionally multi-process).

_WALD_CTX: dict = {}


def _wald_span(args) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    start, stop = args
    ref: interaction.HealthyReference = _WALD_CTX["reference"]
    scores = _WALD_CTX["scores"]
    time = _WALD_CTX["time"]
    event = _WALD_CTX["event"]
    clin = _WALD_CTX["clinical"]
    m = len(ref.genes_)
    ii, jj = pair_block(start, stop, m)
    rho, _ = ref.rho_block(scores, ii, jj)
    z = np.zeros(len(ii))
    theta = np.zeros(len(ii))
    converged = np.zeros(len(ii), dtype=bool)
    for r in range(len(ii)):
        x = np.column_stack([rho[r], clin]) if clin.shape[1] else rho[r][:, None]
        try:
            fit = survival.cox_fit(survival.SurvivalData(time, event, x))
        except (ValidationError, np.linalg.LinAlgError):
            continue
        if fit.converged:
            z[r] = fit.z[0]
            theta[r] = fit.beta[0]
            converged[r] = True
    return z, theta, converged


def compute_wald_field(
    reference: interaction.HealthyReference,
    study: data_mod.AlignedStudy,
    workers: int = 1,
    chunk_size: int = 1_000_000,
) -> ebayes.WaldField:
    """Per-pair multivariate Cox fits on the training cohort.

    The predictor of interest (the pair interaction value) comes first;
    clinical covariates that are constant over the fitted samples are dropped
    from the adjustment set once, up front. Samples flagged with incomplete
    covariates are excluded (multivariate fits only). Pairs whose fit fails
    or separates enter the field as z = 0, theta = 0, converged = False.
    """
    complete = [s for s in study.train_ids if s not in study.incomplete_covariates]
    if len(complete) < 2:
        raise ValidationError("not enough training samples with complete covariates")
    time, event, covs = study.survival_arrays(complete)
    keep_cols = [j for j in range(covs.shape[1]) if np.ptp(covs[:, j]) > 0]
    clin = covs[:, keep_cols]

    sample_idx = _sample_positions(study.methylation, complete)
    scores = reference.projection_scores(study.methylation, sample_idx)
    m = len(reference.genes_)
    n_pairs = pair_count(m)

    _WALD_CTX.update(
        reference=reference, scores=scores, time=time, event=event, clinical=clin
    )
    spans = [(s, min(s + chunk_size, n_pairs)) for s in range(0, n_pairs, chunk_size)]
    try:
        if workers > 1 and len(spans) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
                results = list(ex.map(_wald_span, spans))
        else:
            results = [_wald_span(s) for s in spans]
    finally:
        _WALD_CTX.clear()

    z = np.concatenate([r[0] for r in results]) if results else np.empty(0)
    theta = np.concatenate([r[1] for r in results]) if results else np.empty(0)
    conv = np.concatenate([r[2] for r in results]) if results else np.empty(0, dtype=bool)
    return ebayes.WaldField(m=m, z=z, theta=theta, converged=conv, genes=list(reference.genes_))


# ---------------------------------------------------------------------------
# Artifact loaders (used by stage slices when context is not in memory).


def _unit_detection(d: data_mod.MethylationDataset) -> data_mod.MethylationDataset:
    """All-zero detection p stand-in for cohorts without a detection matrix."""
    return data_mod.MethylationDataset(
        genes=list(d.genes),
        loci=[list(l) for l in d.loci],
        values=[np.zeros_like(b) for b in d.values],
        sample_ids=list(d.sample_ids),
        cohort=list(d.cohort),
    )


def _relabel_expression(
    expr: data_mod.ExpressionMatrix, meth: data_mod.MethylationDataset
) -> data_mod.ExpressionMatrix:
    """Restrict expression to samples known to the methylation roster and
    inherit their cohort labels."""
    label = {s: c for s, c in zip(meth.sample_ids, meth.cohort)}
    keep = [i for i, s in enumerate(expr.sample_ids) if s in label]
    return data_mod.ExpressionMatrix(
        genes=list(expr.genes),
        sample_ids=[expr.sample_ids[i] for i in keep],
        values=expr.values[:, keep].copy(),
        cohort=[label[expr.sample_ids[i]] for i in keep],
    )


def _sample_positions(d: data_mod.MethylationDataset, sample_ids: list[str]) -> np.ndarray:
    pos = {s: i for i, s in enumerate(d.sample_ids)}
    return np.array([pos[s] for s in sample_ids], dtype=int)


def _load_processed_methylation(meth_path, cohorts_path) -> data_mod.MethylationDataset:
    d = data_mod.load_methylation(meth_path, data_mod.HEALTHY)
    labels = _load_cohort_map(cohorts_path)
    return data_mod.MethylationDataset(
        genes=d.genes,
        loci=d.loci,
        values=[b.copy() for b in d.values],
        sample_ids=d.sample_ids,
        cohort=[labels[s] for s in d.sample_ids],
    )


def _load_processed_expression(expr_path, cohorts_path) -> data_mod.ExpressionMatrix:
    e = data_mod.load_expression(expr_path, data_mod.HEALTHY)
    labels = _load_cohort_map(cohorts_path)
    return data_mod.ExpressionMatrix(
        genes=e.genes,
        sample_ids=e.sample_ids,
        values=e.values.copy(),
        cohort=[labels[s] for s in e.sample_ids],
    )


def _load_cohort_map(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {row[0]: row[1] for row in reader}


def _load_waldfield(path, genes: list[str]) -> ebayes.WaldField:
    index = {g: i for i, g in enumerate(genes)}
    m = len(genes)
    n = pair_count(m)
    z = np.zeros(n)
    theta = np.zeros(n)
    conv = np.zeros(n, dtype=bool)
    from .validation import pair_to_index

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, j = index[row[0]], index[row[1]]
            k = pair_to_index(min(i, j), max(i, j), m)
            z[k] = float(row[2])
            theta[k] = float(row[3])
            conv[k] = row[4] == "1"
    return ebayes.WaldField(m=m, z=z, theta=theta, converged=conv, genes=list(genes))


def _load_nodeweights(path, genes: list[str]) -> list[ebayes.NodeWeight]:
    index = {g: i for i, g in enumerate(genes)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append(
                ebayes.NodeWeight(
                    node=index[row[0]], w=float(row[1]), loglik=float(row[2]), w_min=float(row[3])
                )
            )
    return sorted(out, key=lambda nw: nw.node)


def _load_network(path, genes: list[str]) -> ebayes.PrognosticNetwork:
    index = {g: i for i, g in enumerate(genes)}
    edges, z, theta, mu_ij, mu_ji = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, j = index[row[0]], index[row[1]]
            edges.append((min(i, j), max(i, j)))
            z.append(float(row[2]))
            theta.append(float(row[3]))
            mu_ij.append(float(row[4]))
            mu_ji.append(float(row[5]))
    return ebayes.PrognosticNetwork(
        m=len(genes),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        theta=np.array(theta),
        z=np.array(z),
        mu_ij=np.array(mu_ij),
        mu_ji=np.array(mu_ji),
        genes=list(genes),
    )


def _load_component(nodes_path, edges_path) -> community_mod.SparseGraph:
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        node_ids = [row[0] for row in reader]
    index = {g: i for i, g in enumerate(node_ids)}
    edges = []
    with open(edges_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            edges.append((index[row[0]], index[row[1]]))
    return community_mod.SparseGraph(
        n=len(node_ids),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        node_ids=node_ids,
    )


def _load_blockcount(path) -> community_mod.BlockCount:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return community_mod.BlockCount(
        n=d["n"],
        bandwidth=d["bandwidth"],
        n_blocks=d["n_blocks"],
        multiplier=d["multiplier"],
        overridden=d["overridden"],
    )


def _load_assignment(path) -> community_mod.CommunityAssignment:
    genes, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            genes.append(row[0])
            labels.append(int(row[1]))
    n_blocks = max(labels) if labels else 0
    return community_mod.CommunityAssignment(
        labels=np.array(labels, dtype=np.int64),
        n_blocks=n_blocks,
        node_ids=genes,
    )


def _markers_payload(models: list[markers_mod.MarkerModel]) -> dict:
    return {
        "markers": [
            {
                "community": mm.community,
                "genes": mm.genes,
                "threshold": mm.threshold,
                "n_train": mm.n_train,
                "edges": [
                    {"gene_i": gi, "gene_j": gj, "theta": float(th)}
                    for (gi, gj), th in zip(mm.edges, mm.theta)
                ],
            }
            for mm in models
        ]
    }


def _load_markers(path) -> list[markers_mod.MarkerModel]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    models = []
    for entry in payload["markers"]:
        edges = [(e["gene_i"], e["gene_j"]) for e in entry["edges"]]
        theta = np.array([e["theta"] for e in entry["edges"]])
        models.append(
            markers_mod.MarkerModel(
                community=entry["community"],
                edges=edges,
                theta=theta,
                genes=entry["genes"],
                threshold=entry["threshold"],
                n_train=entry["n_train"],
            )
        )
    return models


def _report_payload(rep: markers_mod.MarkerValidation) -> dict:
    def term(t):
        return {"term": t.term, "hr": t.hr, "ci_lo": t.ci_lo, "ci_hi": t.ci_hi, "p": t.p}

    out = {
        "cohort": rep.cohort,
        "n": rep.n,
        "evaluable": rep.evaluable,
        "reason": rep.reason,
        "univariate": term(rep.univariate) if rep.univariate else None,
        "multivariate": [term(t) for t in rep.multivariate],
        "n_multivariate": rep.n_multivariate,
        "logrank_p": rep.logrank_p,
    }
    return out
