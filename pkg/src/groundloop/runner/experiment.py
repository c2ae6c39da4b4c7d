"""Running a configured experiment over a split and persisting its logs."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from groundloop import promptkit
from groundloop.backends.base import Backend, CountingBackend, SamplingParams
from groundloop.backends.http import HTTPBackend
from groundloop.backends.scripted import ScriptedBackend
from groundloop.dataset import Scene, Vocabulary, load_panoptic_dataset, load_preset, make_synthetic_scenes
from groundloop.dialogue import Dialogue, SceneFailed
from groundloop.labelmap import CachedEmbeddingProvider, HTTPEmbeddingProvider, LabelMapper
from groundloop.metrics import RunSummary, mean_summary, summarize_traces
from groundloop.runner.config import BackendConfig, ExperimentConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RUN_LOG = "run_log.jsonl"
FAILURE_THRESHOLD = 0.10
TIMING_FIELD = "timings"  # the only nondeterministic part of a record


def deterministic_lines(path: Path | str) -> list[str]:
    """Run-log lines with the timing field dropped, for reproducibility checks."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        rec.pop(TIMING_FIELD, None)
        out.append(json.dumps(rec, sort_keys=True))
    return out


def load_scenes(cfg: ExperimentConfig) -> tuple[list[Scene], Vocabulary]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return make_synthetic_scenes(ds.scenes, ds.regions_per_scene, ds.classes, seed=ds.seed)
    if ds.kind in ("ade20k", "coco"):
        return load_preset(ds.kind, ds.root)
    return load_panoptic_dataset(ds.annotation_file, ds.mask_dir, ds.image_dir, ds.subset_manifest, workers=4)


def _sampling(bc: BackendConfig) -> SamplingParams:
    return SamplingParams(bc.temperature, bc.top_p, bc.max_new_tokens)


def build_backends(cfg: ExperimentConfig, scenes, vocabulary, seed: int) -> tuple[Backend, Backend]:
    if cfg.scripted is not None:
        sim = ScriptedBackend.from_scenes(cfg.scripted, scenes, vocabulary, sampling=_sampling(cfg.agent),
                                          system_prompt=cfg.agent.system_prompt).with_seed(seed)
        return sim, sim
    agent = HTTPBackend(cfg.agent.endpoint, cfg.agent.model, _sampling(cfg.agent), cfg.agent.system_prompt,
                        timeout=cfg.agent.timeout, send_tags=cfg.agent.send_tags)
    vc = cfg.verifier_config
    if vc is cfg.agent:
        return agent, agent
    verifier = HTTPBackend(vc.endpoint or cfg.agent.endpoint, vc.model, _sampling(vc), vc.system_prompt,
                           timeout=vc.timeout, send_tags=vc.send_tags)
    return agent, verifier


def build_mapper(cfg: ExperimentConfig, vocabulary: Vocabulary) -> LabelMapper:
    provider = None
    if cfg.embedding.url or cfg.embedding.cache:
        inner = HTTPEmbeddingProvider(cfg.embedding.url) if cfg.embedding.url else None
        provider = CachedEmbeddingProvider(inner, cfg.embedding.cache)
    return LabelMapper(vocabulary, provider)


class _OrderedWriter(threading.Thread):
    """Sole owner of the JSONL file. Workers put ``(index, record)`` on the
    queue; lines are written in index order so reruns produce the same file."""

    def __init__(self, path: Path):
        super().__init__(daemon=True)
        self.path = path
        self.queue: queue.Queue = queue.Queue()
        self.error: Optional[BaseException] = None

    def run(self):
        pending: dict[int, dict] = {}
        nxt = 0
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                while True:
                    item = self.queue.get()
                    if item is None:
                        break
                    idx, record = item
                    pending[idx] = record
                    while nxt in pending:
                        fh.write(json.dumps(pending.pop(nxt), sort_keys=True) + "\n")
                        fh.flush()
                        nxt += 1
                for idx in sorted(pending):
                    fh.write(json.dumps(pending[idx], sort_keys=True) + "\n")
        except BaseException as exc:  # surfaced by close()
            self.error = exc

    def close(self):
        self.queue.put(None)
        self.join()
        if self.error is not None:
            raise self.error


@dataclass
class ExperimentResult:
    summaries: list[RunSummary]
    aggregate: dict
    run_log: Path
    out_dir: Path
    n_scenes: int
    n_failed: int

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_scenes if self.n_scenes else 0.0

    @property
    def ok(self) -> bool:
        return self.failure_rate <= FAILURE_THRESHOLD


def run_scene(scene: Scene, seed: int, cfg: ExperimentConfig, agent: Backend, verifier: Backend,
              mapper: LabelMapper, templates: promptkit.TemplateSet, config_hash: str,
              dump_dir: Optional[Path] = None) -> dict:
    counted_agent = CountingBackend(agent)
    counted_verifier = counted_agent if verifier is agent else CountingBackend(verifier)
    def sink(label: str, data: bytes):
        (dump_dir / f"{label}.png").write_bytes(data)
    record = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash,
        "scene_id": scene.source_id,
        "seed": seed,
        "max_rounds": cfg.loop.max_rounds,
        "feedback_source": cfg.loop.feedback_source,
    }
    start = time.perf_counter()
    rounds: list[float] = []
    try:
        dialogue = Dialogue(scene, counted_agent, counted_verifier, cfg.loop, mapper, templates,
                            sink if dump_dir is not None else None)
        trace = dialogue.run()
        rounds = trace.round_seconds
        record.update(status="ok", error=None, trace=trace.to_dict())
    except SceneFailed as exc:
        logger.warning("%s", exc)
        record.update(status="failed", error=exc.reason, trace=None)
    record[TIMING_FIELD] = {"round_seconds": rounds, "total_seconds": time.perf_counter() - start}
    record["call_counts"] = {
        "agent": {"calls": counted_agent.calls, "samples": counted_agent.samples},
        "verifier": {"calls": counted_verifier.calls, "samples": counted_verifier.samples},
    }
    return record


def run_experiment(cfg: ExperimentConfig, scenes: Optional[list[Scene]] = None,
                   vocabulary: Optional[Vocabulary] = None,
                   backend_factory=None) -> ExperimentResult:
    """Run every seed x scene and write ``run_log.jsonl`` plus summary tables
    to ``cfg.out``.

    ``scenes``/``vocabulary`` bypass dataset loading; ``backend_factory(seed)``
    returning ``(agent, verifier)`` bypasses backend construction.
    """
    from groundloop.runner.report import render_report, write_summary_files

    if scenes is None:
        cfg.validate()
        scenes, vocabulary = load_scenes(cfg)
    elif vocabulary is None:
        raise ValueError("vocabulary is required with explicit scenes")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / RUN_LOG
    log_path.unlink(missing_ok=True)
    templates = promptkit.TemplateSet.from_dir(cfg.templates_dir) if cfg.templates_dir else promptkit.DEFAULT
    mapper = build_mapper(cfg, vocabulary)
    config_hash = cfg.config_hash()

    writer = _OrderedWriter(log_path)
    writer.start()
    summaries = []
    n_failed = 0
    index = 0
    try:
        for seed in cfg.seeds:
            if backend_factory is not None:
                agent, verifier = backend_factory(seed)
            else:
                agent, verifier = build_backends(cfg, scenes, vocabulary, seed)
            dump_dir = None
            if cfg.dump_visual_prompts:
                dump_dir = out / "visual_prompts" / f"seed{seed}"
                dump_dir.mkdir(parents=True, exist_ok=True)

            def work(item, seed=seed, agent=agent, verifier=verifier, dump_dir=dump_dir):
                k, scene = item
                rec = run_scene(scene, seed, cfg, agent, verifier, mapper, templates, config_hash, dump_dir)
                writer.queue.put((k, rec))
                return rec

            items = [(index + k, s) for k, s in enumerate(scenes)]
            index += len(scenes)
            if cfg.scene_parallelism > 1:
                with ThreadPoolExecutor(cfg.scene_parallelism) as pool:
                    records = list(pool.map(work, items))
            else:
                records = [work(it) for it in items]
            traces = [r["trace"] for r in records if r["status"] == "ok"]
            failed = sum(r["status"] != "ok" for r in records)
            n_failed += failed
            if traces:
                summaries.append(summarize_traces(traces, cfg.loop.max_rounds, seed=seed, n_failed=failed))
    finally:
        writer.close()

    aggregate = mean_summary(summaries) if summaries else {}
    report = render_report(log_path)
    write_summary_files(out, summaries, aggregate, report)
    n_scenes = len(scenes) * len(cfg.seeds)
    result = ExperimentResult(summaries, aggregate, log_path, out, n_scenes, n_failed)
    if not result.ok:
        logger.error("%d of %d scene runs failed", n_failed, n_scenes)
    return result
