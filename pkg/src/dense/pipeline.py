"""Config, run manifest and resumable stages of the end-to-end pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable

import yaml

from . import __version__
from .chunker import Chunk, chunk_visit
from .corpus import (
    ClassifiedNote,
    PatientTimeline,
    build_timelines,
    filter_cohort,
    pivot_notes,
    read_jsonl,
    read_notes_csv,
    write_jsonl,
    write_rejects_csv,
)
from .embedding import PROFILE_DIMENSIONS, embed_texts, make_embedder
from .evaluation import (
    NotePairScores,
    PatientTemporal,
    TemporalReport,
    TextEmbeddings,
    aggregate_report,
    pairs_to_csv,
    score_pair,
    temporal_alignment,
)
from .generation import GeneratedNote, MockProvider, RemoteGenerator, ResponseCache, run_patient
from .index import VectorIndex
from .preprocess import CleaningStats, CleanNote, HeaderCatalog, preprocess_note
from .retrieval import LOCAL_QUERIES, QueryEncoder, RetrievalParams, default_queries, write_bundles_jsonl
from .taxonomy import CanonicalNoteType, RawNoteRecord, classify_note, load_rules

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A config field is missing or out of range; the message names the field."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class EndpointConfig:
    url: str | None = None
    offline: bool = True


@dataclass
class GenerateConfig(EndpointConfig):
    max_prompt_chars: int = 24000
    max_tokens: int = 1024
    temperature: float = 0.0


@dataclass
class PipelineConfig:
    input_csv: Path
    workdir: Path
    taxonomy_rules: Path | None = None
    header_catalog: Path | None = None
    queries_file: Path | None = None
    window_size: int = 3000
    overlap: int = 300
    k_global: int = 4
    k_local: int = 2
    recency_horizon: int = 3
    near_duplicate_cosine: float | None = None
    embed_retrieval: EndpointConfig = field(default_factory=EndpointConfig)
    embed_eval: EndpointConfig = field(default_factory=EndpointConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    min_visits: int = 1
    require_type: CanonicalNoteType | None = None
    seed: int = 1
    api_key: str | None = field(default=None, repr=False)

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.window_size >= 1, "chunking.window_size", "must be >= 1")
        need(0 <= self.overlap < self.window_size, "chunking.overlap", "must satisfy 0 <= overlap < window_size")
        need(self.k_global >= 1, "retrieval.k_global", "must be >= 1")
        need(self.k_local >= 1, "retrieval.k_local", "must be >= 1")
        need(self.recency_horizon >= 0, "retrieval.recency_horizon", "must be >= 0")
        if self.near_duplicate_cosine is not None:
            need(-1.0 <= self.near_duplicate_cosine <= 1.0, "retrieval.near_duplicate_cosine", "must lie in [-1, 1]")
        need(self.min_visits >= 1, "cohort.min_visits", "must be >= 1")
        need(self.generate.max_prompt_chars >= 1000, "providers.generate.max_prompt_chars", "must be >= 1000")
        need(self.generate.max_tokens >= 1, "providers.generate.max_tokens", "must be >= 1")
        need(self.generate.temperature >= 0, "providers.generate.temperature", "must be >= 0")
        for name in ("embed_retrieval", "embed_eval", "generate"):
            ep = getattr(self, name)
            need(ep.offline or bool(ep.url), f"providers.{name}.url", "required when offline is false")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a mapping")
    return value


def _take(section: dict, prefix: str, key: str, kind, default):
    if key not in section or section[key] is None:
        return default
    value = section[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{prefix}.{key}: expected {kind.__name__}, got {value!r}") from None


def _endpoint(raw: dict, name: str, cls):
    sec = _section(_section(raw, "providers"), name)
    known = {f.name for f in fields(cls)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"providers.{name}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        kind = {"url": str, "offline": bool, "max_prompt_chars": int, "max_tokens": int, "temperature": float}[f.name]
        kwargs[f.name] = _take(sec, f"providers.{name}", f.name, kind, f.default)
    return cls(**kwargs)


def load_config(
    path: str | Path,
    *,
    offline: bool | None = None,
    env: dict[str, str] | None = None,
) -> PipelineConfig:
    """Read the YAML config, resolve relative paths against its folder, then apply env overrides."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw, base=path.parent, offline=offline, env=env)


def config_from_dict(
    raw: dict,
    base: Path = Path("."),
    *,
    offline: bool | None = None,
    env: dict[str, str] | None = None,
) -> PipelineConfig:
    env = dict(os.environ) if env is None else env
    paths = _section(raw, "paths")

    def resolve(p) -> Path | None:
        if p is None:
            return None
        p = Path(str(p))
        return p if p.is_absolute() else (base / p)

    if "input_csv" not in paths:
        raise ConfigError("paths.input_csv: required")
    chunking = _section(raw, "chunking")
    retrieval = _section(raw, "retrieval")
    cohort = _section(raw, "cohort")
    require = cohort.get("require_type")
    try:
        require_type = None if require in (None, "") else CanonicalNoteType(require)
    except ValueError:
        raise ConfigError(f"cohort.require_type: unknown note type {require!r}") from None
    cfg = PipelineConfig(
        input_csv=resolve(paths["input_csv"]),
        workdir=resolve(paths.get("workdir", "work")),
        taxonomy_rules=resolve(raw.get("taxonomy_rules")),
        header_catalog=resolve(raw.get("header_catalog")),
        queries_file=resolve(raw.get("queries_file")),
        window_size=_take(chunking, "chunking", "window_size", int, 3000),
        overlap=_take(chunking, "chunking", "overlap", int, 300),
        k_global=_take(retrieval, "retrieval", "k_global", int, 4),
        k_local=_take(retrieval, "retrieval", "k_local", int, 2),
        recency_horizon=_take(retrieval, "retrieval", "recency_horizon", int, 3),
        near_duplicate_cosine=_take(retrieval, "retrieval", "near_duplicate_cosine", float, None),
        embed_retrieval=_endpoint(raw, "embed_retrieval", EndpointConfig),
        embed_eval=_endpoint(raw, "embed_eval", EndpointConfig),
        generate=_endpoint(raw, "generate", GenerateConfig),
        min_visits=_take(cohort, "cohort", "min_visits", int, 1),
        require_type=require_type,
        seed=_take(raw, "", "seed", int, 1),
    )
    if env.get("DENSE_EMBED_URL"):
        cfg.embed_retrieval.url = env["DENSE_EMBED_URL"]
        cfg.embed_eval.url = env["DENSE_EMBED_URL"]
    if env.get("DENSE_GEN_URL"):
        cfg.generate.url = env["DENSE_GEN_URL"]
    cfg.api_key = env.get("DENSE_API_KEY") or None
    if offline:
        for ep in (cfg.embed_retrieval, cfg.embed_eval, cfg.generate):
            ep.offline = True
    cfg.validate()
    return cfg


def file_digest(path: Path) -> str | None:
    """sha256 of a file, or of a directory's files in sorted relative-path order."""
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(child.relative_to(path)).encode("utf-8") + b"\0")
            h.update((file_digest(child) or "").encode("ascii"))
        return h.hexdigest()
    if not path.exists():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass
class Stage:
    name: str
    upstream: tuple[str, ...]
    outputs: tuple[str, ...]
    params: Callable[[PipelineConfig], dict]
    run: Callable[[PipelineContext], None]


class PipelineContext:
    def __init__(self, config: PipelineConfig, jobs: int = 1):
        self.config = config
        self.jobs = max(1, jobs)
        self.workdir = Path(config.workdir)

    def path(self, rel: str) -> Path:
        return self.workdir / rel

    def retrieval_embedder(self):
        ep = self.config.embed_retrieval
        return make_embedder("retrieval", ep.url, offline=ep.offline, api_key=self.config.api_key)

    def eval_embedder(self):
        ep = self.config.embed_eval
        return make_embedder("evaluation", ep.url, offline=ep.offline, api_key=self.config.api_key)

    def generator(self):
        g = self.config.generate
        if g.offline or not g.url:
            return MockProvider(max_prompt_chars=g.max_prompt_chars)
        return RemoteGenerator(g.url, self.config.api_key, g.max_tokens, g.temperature, g.max_prompt_chars)

    def catalog(self) -> HeaderCatalog:
        return HeaderCatalog.load(self.config.header_catalog)


# --- record (de)serialization -------------------------------------------------


def _record_to_dict(r: RawNoteRecord) -> dict:
    return {
        "row_id": r.row_id,
        "subject_id": r.subject_id,
        "hadm_id": r.hadm_id,
        "chartdate": r.chartdate.isoformat(),
        "charttime": None if r.charttime is None else r.charttime.isoformat(),
        "category": r.category,
        "description": r.description,
        "text": r.text,
    }


def _record_from_dict(d: dict) -> RawNoteRecord:
    return RawNoteRecord(
        row_id=d["row_id"],
        subject_id=d["subject_id"],
        hadm_id=d["hadm_id"],
        chartdate=date.fromisoformat(d["chartdate"]),
        charttime=None if d["charttime"] is None else datetime.fromisoformat(d["charttime"]),
        category=d["category"],
        description=d["description"],
        text=d["text"],
    )


def load_timelines(ctx: PipelineContext) -> list[PatientTimeline]:
    return [PatientTimeline.from_dict(d) for d in read_jsonl(ctx.path("timelines.jsonl"))]


def load_clean_notes(ctx: PipelineContext) -> list[dict]:
    return list(read_jsonl(ctx.path("clean_notes.jsonl")))


# --- stage bodies ---------------------------------------------------------------


def _stage_ingest(ctx: PipelineContext) -> None:
    records = read_notes_csv(ctx.config.input_csv)
    write_jsonl((_record_to_dict(r) for r in records), ctx.path("notes.jsonl"))
    logger.info("ingested %d notes", len(records))


def _stage_classify(ctx: PipelineContext) -> None:
    rules = load_rules(ctx.config.taxonomy_rules)
    notes = (_record_from_dict(d) for d in read_jsonl(ctx.path("notes.jsonl")))
    write_jsonl((ClassifiedNote(r, classify_note(r, rules)).to_dict() for r in notes), ctx.path("classified.jsonl"))


def _stage_pivot(ctx: PipelineContext) -> None:
    notes = [ClassifiedNote.from_dict(d) for d in read_jsonl(ctx.path("classified.jsonl"))]
    result = pivot_notes(notes)
    write_jsonl((v.to_dict() for v in result.visits), ctx.path("visits.jsonl"))
    write_rejects_csv(result.rejects, ctx.path("rejects.csv"))
    timelines = filter_cohort(build_timelines(result.visits), ctx.config.min_visits, ctx.config.require_type)
    write_jsonl((t.to_dict() for t in timelines), ctx.path("timelines.jsonl"))
    logger.info("pivoted %d visits; cohort keeps %d patients", len(result.visits), len(timelines))


def _stage_preprocess(ctx: PipelineContext) -> None:
    catalog = ctx.catalog()
    stats = CleaningStats()
    rows = []
    for tl in load_timelines(ctx):
        for v in tl.visits:
            for t in v.present_types():
                note = preprocess_note(v.notes[t], t, catalog, (v.subject_id, v.hadm_id), stats)
                ts = v.first_charttimes.get(t)
                rows.append(
                    {
                        "chartdate": v.chartdate.isoformat(),
                        "first_charttime": None if ts is None else ts.isoformat(),
                        "note": note.to_dict(),
                    }
                )
    write_jsonl(rows, ctx.path("clean_notes.jsonl"))
    summary = {
        "notes": len(rows),
        "placeholders": dict(sorted(stats.placeholders.items())),
        "unterminated_spans": stats.unterminated_spans,
    }
    ctx.path("cleaning_stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _stage_chunk(ctx: PipelineContext) -> None:
    by_visit: dict[tuple[int, int], list[dict]] = defaultdict(list)
    for row in load_clean_notes(ctx):
        by_visit[(row["note"]["subject_id"], row["note"]["hadm_id"])].append(row)
    chunks: list[Chunk] = []
    for key in sorted(by_visit):
        rows = by_visit[key]
        notes = [CleanNote.from_dict(r["note"]) for r in rows]
        times = {
            CanonicalNoteType(r["note"]["note_type"]): (None if r["first_charttime"] is None else datetime.fromisoformat(r["first_charttime"]))
            for r in rows
        }
        chunks.extend(
            chunk_visit(notes, date.fromisoformat(rows[0]["chartdate"]), times, ctx.config.window_size, ctx.config.overlap)
        )
    write_jsonl((c.to_dict() for c in chunks), ctx.path("chunks.jsonl"))
    logger.info("wrote %d chunks", len(chunks))


def _stage_index(ctx: PipelineContext) -> None:
    chunks = [Chunk.from_dict(d) for d in read_jsonl(ctx.path("chunks.jsonl"))]
    embedder = ctx.retrieval_embedder()
    vectors = embed_texts(embedder, [c.text for c in chunks], max_workers=ctx.jobs)
    index = VectorIndex(embedder.dimension, embedder.provider_id).add(chunks, vectors)
    index.save(ctx.path("index"))


def _stage_generate(ctx: PipelineContext) -> None:
    cfg = ctx.config
    index = VectorIndex.load(ctx.path("index"))
    embedder = ctx.retrieval_embedder()
    if embedder.provider_id != index.provider_id:
        raise StageError("generate", f"index was built with {index.provider_id}, retrieval profile is {embedder.provider_id}")
    params = RetrievalParams(cfg.k_global, cfg.k_local, cfg.recency_horizon, cfg.near_duplicate_cosine)
    queries = default_queries(cfg.queries_file, k=cfg.k_global)
    encoder = QueryEncoder(embedder)
    encoder.warm([q.query_text for q in queries] + [text for _, text in LOCAL_QUERIES.values()])
    provider = ctx.generator()
    cache = ResponseCache(ctx.path("cache/responses"))
    timelines = load_timelines(ctx)

    def one(tl: PatientTimeline):
        return run_patient(provider, index, tl, encoder, params, queries, cache, keep_bundles=True)

    if ctx.jobs > 1:
        with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
            runs = list(pool.map(one, timelines))
    else:
        runs = [one(tl) for tl in timelines]
    write_jsonl((n.to_dict() for r in runs for n in r.notes), ctx.path("generated.jsonl"))
    write_jsonl((asdict(f) for r in runs for f in r.failures), ctx.path("failures.jsonl"))
    write_bundles_jsonl((b for r in runs for b in r.bundles), ctx.path("bundles.jsonl"))
    n_fail = sum(len(r.failures) for r in runs)
    if n_fail:
        logger.warning("%d visits failed generation; see failures.jsonl", n_fail)


def gold_notes(ctx: PipelineContext) -> dict[tuple[int, int], str]:
    """Rendered, cleaned progress-note text per visit key."""
    gold = {}
    for row in load_clean_notes(ctx):
        note = CleanNote.from_dict(row["note"])
        if note.note_type is CanonicalNoteType.PROGRESS_NOTES:
            gold[note.provenance] = note.render()
    return gold


def evaluate_notes(
    notes: list[GeneratedNote], gold: dict[tuple[int, int], str], embeddings: TextEmbeddings
) -> tuple[list[NotePairScores], TemporalReport]:
    paired = [n for n in notes if gold.get(n.key)]
    embeddings.prefetch([n.render() for n in paired] + [gold[n.key] for n in paired])
    pairs = [score_pair(embeddings, n, gold[n.key]) for n in paired]
    gen_seq: dict[int, list[str]] = defaultdict(list)
    gold_seq: dict[int, list[str]] = defaultdict(list)
    for n in sorted(paired, key=lambda n: (n.subject_id, n.visit_index)):
        gen_seq[n.subject_id].append(n.render())
        gold_seq[n.subject_id].append(gold[n.key])
    for n in notes:
        gen_seq.setdefault(n.subject_id, [])
        gold_seq.setdefault(n.subject_id, [])
    return pairs, temporal_alignment(embeddings, gen_seq, gold_seq)


def _stage_evaluate(ctx: PipelineContext) -> None:
    notes = [GeneratedNote.from_dict(d) for d in read_jsonl(ctx.path("generated.jsonl"))]
    embeddings = TextEmbeddings(ctx.eval_embedder(), max_workers=ctx.jobs)
    pairs, temporal = evaluate_notes(notes, gold_notes(ctx), embeddings)
    write_jsonl((asdict(p) for p in pairs), ctx.path("pair_scores.jsonl"))
    ctx.path("pair_scores.csv").write_text(pairs_to_csv(pairs), encoding="utf-8")
    ctx.path("temporal.json").write_text(json.dumps(temporal.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _temporal_from_dict(d: dict) -> TemporalReport:
    return TemporalReport(
        patients=[PatientTemporal(**p) for p in d["patients"]],
        excluded=[(e["subject_id"], e["reason"]) for e in d["excluded"]],
        mean_consistency_generated=d["mean_consistency_generated"],
        mean_consistency_gold=d["mean_consistency_gold"],
        mean_alignment_ratio=d["mean_alignment_ratio"],
        undefined_ratios=d["undefined_ratios"],
    )


def _stage_report(ctx: PipelineContext) -> None:
    pairs = [NotePairScores(**d) for d in read_jsonl(ctx.path("pair_scores.jsonl"))]
    if not pairs:
        raise StageError("report", "no generated note has a gold progress note to score against")
    temporal = _temporal_from_dict(json.loads(ctx.path("temporal.json").read_text(encoding="utf-8")))
    report = aggregate_report(pairs, temporal)
    failures = sum(1 for _ in read_jsonl(ctx.path("failures.jsonl")))
    generated = sum(1 for _ in read_jsonl(ctx.path("generated.jsonl")))
    report.extra = {"generated_notes": generated, "failed_visits": failures}
    ctx.path("report.json").write_text(report.to_json(), encoding="utf-8")
    ctx.path("report.txt").write_text(report.to_table(), encoding="utf-8")


def _endpoint_identity(ep: EndpointConfig) -> dict:
    return {"offline": ep.offline, "url": None if ep.offline else ep.url}


STAGES: tuple[Stage, ...] = (
    Stage("ingest", (), ("notes.jsonl",), lambda c: {"input_csv": file_digest(c.input_csv)}, _stage_ingest),
    Stage("classify", ("ingest",), ("classified.jsonl",), lambda c: {"rules": None if c.taxonomy_rules is None else file_digest(c.taxonomy_rules)}, _stage_classify),
    Stage(
        "pivot",
        ("classify",),
        ("visits.jsonl", "timelines.jsonl", "rejects.csv"),
        lambda c: {"min_visits": c.min_visits, "require_type": None if c.require_type is None else c.require_type.value},
        _stage_pivot,
    ),
    Stage(
        "preprocess",
        ("pivot",),
        ("clean_notes.jsonl", "cleaning_stats.json"),
        lambda c: {"catalog": None if c.header_catalog is None else file_digest(c.header_catalog)},
        _stage_preprocess,
    ),
    Stage("chunk", ("preprocess",), ("chunks.jsonl",), lambda c: {"window_size": c.window_size, "overlap": c.overlap}, _stage_chunk),
    Stage(
        "index",
        ("chunk",),
        ("index",),
        lambda c: {"embed": _endpoint_identity(c.embed_retrieval), "dimension": PROFILE_DIMENSIONS["retrieval"]},
        _stage_index,
    ),
    Stage(
        "generate",
        ("pivot", "index"),
        ("generated.jsonl", "failures.jsonl", "bundles.jsonl"),
        lambda c: {
            "retrieval": [c.k_global, c.k_local, c.recency_horizon, c.near_duplicate_cosine],
            "queries": None if c.queries_file is None else file_digest(c.queries_file),
            "embed": _endpoint_identity(c.embed_retrieval),
            "generate": dict(asdict(c.generate), url=None if c.generate.offline else c.generate.url),
        },
        _stage_generate,
    ),
    Stage(
        "evaluate",
        ("preprocess", "generate"),
        ("pair_scores.jsonl", "pair_scores.csv", "temporal.json"),
        lambda c: {"embed": _endpoint_identity(c.embed_eval), "dimension": PROFILE_DIMENSIONS["evaluation"]},
        _stage_evaluate,
    ),
    Stage("report", ("evaluate", "generate"), ("report.json", "report.txt"), lambda c: {}, _stage_report),
)
STAGE_NAMES = tuple(s.name for s in STAGES)
_BY_NAME = {s.name: s for s in STAGES}


class RunManifest:
    """Per-stage input digest and output digests, persisted as ``manifest.json``."""

    def __init__(self, path: Path):
        self.path = path
        self.data = {"version": __version__, "config_digest": None, "stages": {}}
        if path.exists():
            loaded = json.loads(path.read_text(encoding="utf-8"))
            self.data.update(loaded)

    def entry(self, stage: str) -> dict | None:
        return self.data["stages"].get(stage)

    def record(self, stage: str, input_digest: str, outputs: dict[str, str | None]) -> None:
        self.data["stages"][stage] = {
            "input_digest": input_digest,
            "outputs": outputs,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)


@dataclass
class StageOutcome:
    stage: str
    ran: bool
    reason: str


class Pipeline:
    def __init__(self, config: PipelineConfig, jobs: int = 1):
        self.ctx = PipelineContext(config, jobs)
        self.ctx.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.ctx.path("manifest.json"))
        self.manifest.data["config_digest"] = _canonical_digest(
            {f.name: getattr(config, f.name) for f in fields(config) if f.name != "api_key"}
        )

    def _outputs(self, stage: Stage) -> dict[str, str | None]:
        return {rel: file_digest(self.ctx.path(rel)) for rel in stage.outputs}

    def input_digest(self, stage: Stage) -> str:
        upstream = {}
        for name in stage.upstream:
            entry = self.manifest.entry(name)
            if entry is None or not self._outputs_intact(_BY_NAME[name], entry):
                raise StageError(stage.name, f"needs the outputs of stage '{name}'; run `dense {name}` first")
            upstream[name] = entry["outputs"]
        return _canonical_digest({"version": __version__, "params": stage.params(self.ctx.config), "upstream": upstream})

    def _outputs_intact(self, stage: Stage, entry: dict) -> bool:
        current = self._outputs(stage)
        return all(v is not None for v in current.values()) and current == entry.get("outputs")

    def run_stage(self, name: str, force: bool = False) -> StageOutcome:
        stage = _BY_NAME[name]
        digest = self.input_digest(stage)
        entry = self.manifest.entry(name)
        if force:
            reason = "forced"
        elif entry is None:
            reason = "never run"
        elif entry.get("input_digest") != digest:
            reason = "inputs changed"
        elif not self._outputs_intact(stage, entry):
            reason = "outputs missing or modified"
        else:
            logger.info("stage %s: up to date", name)
            return StageOutcome(name, False, "up to date")
        logger.info("stage %s: running (%s)", name, reason)
        stage.run(self.ctx)
        self.manifest.record(name, digest, self._outputs(stage))
        self.manifest.save()
        return StageOutcome(name, True, reason)

    def run(self, stages: tuple[str, ...] = STAGE_NAMES, force: bool = False) -> list[StageOutcome]:
        return [self.run_stage(s, force) for s in stages]


def write_error(workdir: Path, stage: str | None, exc: BaseException) -> Path:
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / "error.json"
    payload = {"stage": stage, "error_type": type(exc).__name__, "message": str(exc)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def clear_error(workdir: Path) -> None:
    (workdir / "error.json").unlink(missing_ok=True)


def default_config_dict(input_csv: str = "notes.csv", workdir: str = "work") -> dict:
    return {
        "paths": {"input_csv": input_csv, "workdir": workdir},
        "taxonomy_rules": None,
        "header_catalog": None,
        "queries_file": None,
        "chunking": {"window_size": 3000, "overlap": 300},
        "retrieval": {"k_global": 4, "k_local": 2, "recency_horizon": 3, "near_duplicate_cosine": None},
        "providers": {
            "embed_retrieval": {"url": None, "offline": True},
            "embed_eval": {"url": None, "offline": True},
            "generate": {"url": None, "offline": True, "max_prompt_chars": 24000, "max_tokens": 1024, "temperature": 0.0},
        },
        "cohort": {"min_visits": 1, "require_type": None},
        "seed": 1,
    }


__all__ = [
    "ConfigError",
    "Pipeline",
    "PipelineConfig",
    "RunManifest",
    "STAGE_NAMES",
    "StageError",
    "config_from_dict",
    "default_config_dict",
    "evaluate_notes",
    "load_config",
    "write_error",
]
