"""Command-line pipeline: ingest, curate, split, train, eval, recommend, explain-types, explain, analyze.

Every stage reads and writes a single output directory. Settings come from a
TOML file; ``--seed``, ``--out`` and ``--llm`` override it. Exit codes: 0 ok,
2 configuration, 3 data, 4 transport.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import requests

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import bssmf, data, explain, recommend, stats
from .errors import ConfigError, DataError, MfExplainError, PartialResult, TransportError

log = logging.getLogger("mfexplain")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Paths:
    ratings: str | None = None
    catalog: str | None = None
    links: str | None = None
    extra_ratings: str | None = None
    extra_format: str = "movielens-csv"
    user_offset: int | None = None
    responses: str | None = None


@dataclasses.dataclass
class CurateSettings:
    size: int = 100
    decay: float = 0.05
    ref_year: int = 2023


@dataclasses.dataclass
class SplitSettings:
    per_user: int = 5
    min_ratings: int = 10


@dataclasses.dataclass
class FitSettings:
    ranks: list = dataclasses.field(default_factory=lambda: [3, 5, 10])
    max_outer: int = 500
    rel_tol: float = 1e-5
    shrink: float = 0.5
    decrease: float = 1e-4
    inner_iters: int = 1
    lo: float = 1.0
    hi: float = 5.0


@dataclasses.dataclass
class RecSettings:
    rank: int = 5
    threshold: float = 4.0
    pool_cap: int = 20
    slate_size: int = 3
    users: list = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class EnrichSettings:
    base_url: str = data.TMDB_BASE_URL
    language: str = "fr-FR"
    api_key_env: str = "TMDB_API_KEY"
    max_inflight: int = 4


@dataclasses.dataclass
class StatsSettings:
    alpha: float = 0.05


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "out"
    paths: Paths = dataclasses.field(default_factory=Paths)
    curate: CurateSettings = dataclasses.field(default_factory=CurateSettings)
    split: SplitSettings = dataclasses.field(default_factory=SplitSettings)
    fit: FitSettings = dataclasses.field(default_factory=FitSettings)
    rec: RecSettings = dataclasses.field(default_factory=RecSettings)
    llm: dict = dataclasses.field(default_factory=dict)
    enrich: EnrichSettings = dataclasses.field(default_factory=EnrichSettings)
    stats: StatsSettings = dataclasses.field(default_factory=StatsSettings)

    def llm_config(self) -> explain.LlmConfig:
        try:
            return explain.LlmConfig(**self.llm)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[llm] {exc}") from None

    def fit_config(self, r: int) -> bssmf.FitConfig:
        f = self.fit
        try:
            return bssmf.FitConfig(r=r, max_outer=f.max_outer, rel_tol=f.rel_tol, seed=self.seed, shrink=f.shrink,
                                   decrease=f.decrease, lo=f.lo, hi=f.hi, inner_iters=f.inner_iters)
        except ValueError as exc:
            raise ConfigError(f"[fit] {exc}") from None

    def rec_config(self) -> recommend.RecConfig:
        r = self.rec
        try:
            return recommend.RecConfig(r.threshold, r.pool_cap, r.slate_size, self.seed)
        except ValueError as exc:
            raise ConfigError(f"[rec] {exc}") from None

    def fingerprint(self) -> str:
        """Hash of every setting except the output directory."""
        doc = dataclasses.asdict(self)
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _section(cls, values: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**values)


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    base = p.resolve().parent
    sections = {"paths": Paths, "curate": CurateSettings, "split": SplitSettings, "fit": FitSettings,
                "rec": RecSettings, "enrich": EnrichSettings, "stats": StatsSettings}
    kwargs = {}
    for key, value in doc.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            kwargs[key] = _section(sections[key], value, key)
        elif key == "llm":
            kwargs[key] = dict(value)
        elif key in ("seed", "out"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    cfg = PipelineConfig(**kwargs)
    # relative paths are resolved against the config file's directory
    for f in ("ratings", "catalog", "links", "extra_ratings", "responses"):
        v = getattr(cfg.paths, f)
        if v is not None and not Path(v).is_absolute():
            setattr(cfg.paths, f, str(base / v))
    if not Path(cfg.out).is_absolute():
        cfg.out = str(base / cfg.out)
    llm = cfg.llm.get("endpoint", "")
    if llm.startswith("stub:") and not Path(llm[5:]).is_absolute():
        cfg.llm["endpoint"] = "stub:" + str(base / llm[5:])
    return cfg


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """One command invocation against an output directory.

    Holds the directory lock, refuses to overwrite outputs without ``force``
    and writes the manifest atomically on success.
    """

    def __init__(self, command: str, cfg: PipelineConfig, force: bool):
        self.command = command
        self.cfg = cfg
        self.force = force
        self.out = Path(cfg.out)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = _now()
        self._lock = self.out / ".lock"

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.out} is locked by another run (remove {self._lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._write_manifest()
        finally:
            self._lock.unlink(missing_ok=True)
        return False

    def input(self, path: str | Path | None, what: str) -> Path:
        """A configured input file; missing ones are configuration errors."""
        if path is None:
            raise ConfigError(f"no {what} path configured")
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{what} file {p} does not exist")
        self.inputs.append(p)
        return p

    def artifact(self, name: str, what: str | None = None) -> Path:
        """An artifact produced by an earlier stage; missing ones are data errors."""
        p = self.out / name
        if not p.exists():
            raise DataError(f"{what or name} not found at {p}; run the producing stage first")
        self.inputs.append(p)
        return p

    def output(self, name: str) -> Path:
        p = self.out / name
        if p.exists() and not self.force:
            raise ConfigError(f"{p} exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def _rel(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(p.resolve())

    def _write_manifest(self):
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.fingerprint(),
            "seed": self.cfg.seed,
            "inputs": [{"path": self._rel(p), "sha256": _sha256(p)} for p in self.inputs],
            "outputs": [{"path": self._rel(p), "sha256": _sha256(p)} for p in self.outputs if p.exists()],
            "started": self.started,
            "finished": _now(),
        }
        target = self.out / "manifests" / f"{self.command}.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
        os.replace(tmp, target)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _working_dataset(run: Run) -> data.RatingDataset:
    ds = data.parse_ratings(run.artifact("dataset.csv", "ingested dataset"), "canonical-csv")
    curated = run.out / "curated_items.json"
    if curated.exists():
        run.inputs.append(curated)
        ds = ds.restrict_items(json.loads(curated.read_text())["items"])
    return ds


def _catalog(run: Run) -> data.ItemCatalog:
    return data.parse_catalog(run.artifact("catalog.csv", "ingested catalog"))


def _load_model(run: Run, r: int) -> bssmf.FactorModel:
    p = run.artifact(f"model_r{r}.json", f"rank-{r} model")
    try:
        return bssmf.FactorModel.load(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load {p}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(run: Run, args) -> int:
    cfg = run.cfg
    ds = data.parse_ratings(run.input(cfg.paths.ratings, "ratings"))
    dropped_dups = ds.dropped_duplicates
    if cfg.paths.extra_ratings:
        extra = data.parse_ratings(run.input(cfg.paths.extra_ratings, "extra ratings"), cfg.paths.extra_format)
        dropped_dups += extra.dropped_duplicates
        offset = cfg.paths.user_offset if cfg.paths.user_offset is not None else int(ds.users.max())
        ds = data.merge_datasets(ds, extra, offset)
    catalog = data.parse_catalog(run.input(cfg.paths.catalog, "catalog"))
    known = np.isin(ds.items, np.asarray(catalog.item_ids, dtype=np.int64))
    dropped_unknown = int((~known).sum())
    ds = data.RatingDataset(ds.users[known], ds.items[known], ds.ratings[known])
    unmatched = []
    if args.enrich:
        key = os.environ.get(cfg.enrich.api_key_env, "")
        links = data.parse_links(run.input(cfg.paths.links, "links"))
        catalog, unmatched = data.enrich_metadata(
            catalog, requests.Session(), key, links, cfg.enrich.base_url, cfg.enrich.language,
            max_inflight=cfg.enrich.max_inflight)
    data.write_dataset(ds, run.output("dataset.csv"))
    data.write_catalog(catalog, run.output("catalog.csv"))
    _write_json(run.output("ingest_report.json"), {
        "n_ratings": len(ds), "n_users": ds.n_users, "n_items": ds.n_items,
        "catalog_size": len(catalog), "dropped_duplicates": dropped_dups,
        "dropped_unknown_items": dropped_unknown, "unmatched_metadata": unmatched,
    })
    log.info("ingested %d ratings (%d users, %d items); %d duplicates dropped",
             len(ds), ds.n_users, ds.n_items, dropped_dups)
    return 0


def cmd_curate(run: Run, args) -> int:
    c = run.cfg.curate
    ds = data.parse_ratings(run.artifact("dataset.csv", "ingested dataset"), "canonical-csv")
    items = data.curate_catalog(ds, _catalog(run), c.size, c.decay, c.ref_year)
    _write_json(run.output("curated_items.json"),
                {"size": c.size, "decay": c.decay, "ref_year": c.ref_year, "items": items})
    return 0


def cmd_split(run: Run, args) -> int:
    s = run.cfg.split
    split = data.split_holdout(_working_dataset(run), s.per_user, s.min_ratings, run.cfg.seed)
    data.write_dataset(split.train, run.output("train.csv"))
    data.write_split(split, run.output("split.json"))
    log.info("split: %d train, %d test triples", len(split.train), len(split.test))
    return 0


def cmd_train(run: Run, args) -> int:
    ds = _working_dataset(run)
    train_path = run.out / "train.csv"
    if train_path.exists():
        run.inputs.append(train_path)
        train = data.parse_ratings(train_path, "canonical-csv")
    else:
        train = ds
    for r in run.cfg.fit.ranks:
        model, report = bssmf.fit(train, run.cfg.fit_config(int(r)), item_ids=ds.item_ids, user_ids=train.user_ids)
        model.check_invariants()
        model.save(run.output(f"model_r{r}.json"))
        _write_json(run.output(f"fit_report_r{r}.json"), report.to_json())
        log.info("r=%d: %d iterations (%s), train RMSE %.4f", r, report.iterations, report.stop_reason,
                 report.train_rmse)
    return 0


def cmd_eval(run: Run, args) -> int:
    test = data.read_split_test(run.artifact("split.json", "holdout split"))
    train = data.parse_ratings(run.artifact("train.csv", "training set"), "canonical-csv")
    rows = []
    for r in run.cfg.fit.ranks:
        model = _load_model(run, int(r))
        known = [t for t in test if t[0] in model._user_pos and t[1] in model._item_pos]
        if len(known) < len(test):
            log.warning("r=%d: %d test triples reference items or users unknown to the model",
                        r, len(test) - len(known))
        test_rmse = bssmf.rmse(model, known) if known else float("nan")
        rows.append([r, repr(bssmf.rmse(model, train.triples())), repr(test_rmse)])
    with run.output("rmse.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "train_rmse", "test_rmse"])
        w.writerows(rows)
    return 0


def cmd_recommend(run: Run, args) -> int:
    cfg = run.cfg
    rec_cfg = cfg.rec_config()
    model = _load_model(run, cfg.rec.rank)
    ds = _working_dataset(run)
    scores = bssmf.predict_all(model)
    users = cfg.rec.users or model.user_ids.tolist()
    sampled, top = [], []
    for user_id in users:
        u = model.user_index(user_id)
        try:
            pool = recommend.build_pool(scores[:, u], ds.user_ratings(user_id), rec_cfg, user_id, model.item_ids)
        except recommend.NoUnratedItems:
            log.warning("user %d has no unrated items; skipped", user_id)
            continue
        sampled.append(recommend.sample_slate(pool, rec_cfg, recommend.user_rng(cfg.seed, user_id)))
        top.append(recommend.top_slate(pool, rec_cfg))
    recommend.write_slates_csv(sampled, run.output("slates_sampled.csv"))
    recommend.write_slates_csv(top, run.output("slates_top.csv"))
    _write_json(run.output("slates.json"),
                {"sampled": recommend.slates_json(sampled), "top": recommend.slates_json(top)})
    cover = [recommend.coverage_record("sampled", sampled, model.n_items),
             recommend.coverage_record("top", top, model.n_items)]
    _write_json(run.output("coverage.json"), cover)
    log.info("coverage: sampled %d, top %d of %d items", cover[0]["distinct_items"], cover[1]["distinct_items"],
             model.n_items)
    return 0


def cmd_explain_types(run: Run, args) -> int:
    cfg = run.cfg
    llm = cfg.llm_config()
    model = _load_model(run, cfg.rec.rank)
    catalog = _catalog(run)
    store = explain.ProfileStore(run.out / "profile_cache")
    digest = model.digest()
    try:
        profiles = explain.interpret_user_types(model, catalog, llm, store)
        failure = None
    except PartialResult as exc:
        profiles, failure = exc.profiles, exc
    _write_jsonl(run.output("profiles.jsonl"),
                 [{"type_index": p.type_index, "description": p.description, "model_digest": digest}
                  for p in profiles])
    if failure is not None:
        _write_jsonl(run.output("profiles_errors.jsonl"), [{"completed": failure.completed,
                                                            "error": str(failure.cause)}])
        log.error("%s", failure)
        return 0 if profiles else TransportError.exit_code
    return 0


def cmd_explain(run: Run, args) -> int:
    cfg = run.cfg
    llm = cfg.llm_config()
    strategy = explain.Strategy(args.strategy)
    model = _load_model(run, cfg.rec.rank)
    catalog = _catalog(run)
    profiles = None
    if strategy.needs_profiles:
        prof_path = run.out / "profiles.jsonl"
        if not prof_path.exists():
            raise ConfigError(f"{strategy.value} explanations need {prof_path}; run explain-types first")
        run.inputs.append(prof_path)
        profiles = explain.read_profiles(prof_path)
        if len(profiles) != model.r:
            raise ConfigError(f"{len(profiles)} profiles for a rank-{model.r} model")
    ds = _working_dataset(run)
    slates = recommend.read_slates_csv(run.artifact("slates_sampled.csv", "sampled slates"))

    records, errors = [], []
    for slate in slates:
        ctx = explain.ExplainContext(model, catalog, ds.user_ratings(slate.user), profiles)
        try:
            results = explain.explain_slate(slate, strategy, ctx, llm)
        except explain.EmptyHistory as exc:
            errors += [{"user_id": slate.user, "item_id": i, "strategy": strategy.value, "error": str(exc)}
                       for i in slate.items]
            continue
        for res in results:
            if res.ok:
                records.append(explain.explanation_record(slate.user, res, strategy, llm.model))
            else:
                errors.append({"user_id": slate.user, "item_id": res.item_id, "strategy": strategy.value,
                               "error": res.error})
    _write_jsonl(run.output(f"explanations_{strategy.value}.jsonl"), records)
    _write_jsonl(run.output(f"explain_errors_{strategy.value}.jsonl"), errors)
    if errors:
        log.warning("%d of %d explanations failed", len(errors), len(errors) + len(records))
    if not records and errors:
        return TransportError.exit_code
    return 0


def cmd_analyze(run: Run, args) -> int:
    cfg = run.cfg
    table = stats.parse_responses(run.input(cfg.paths.responses, "responses"))
    report = stats.analyze_study(table, cfg.stats.alpha)
    for name in ("kruskal_wallis.csv", "dunn.csv", "effects.csv", "levene.csv", "summary.csv"):
        run.output(f"report/{name}")
    stats.write_report(report, run.out / "report")
    sig = report.significant_questions()
    log.info("significant questions at alpha=%g: %s", cfg.stats.alpha, ", ".join(sig) or "none")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "curate": cmd_curate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "explain-types": cmd_explain_types,
    "explain": cmd_explain,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every randomized stage")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite existing outputs")
    common.add_argument("--llm", default=argparse.SUPPRESS,
                        help="LLM endpoint URL, or stub:<fixture dir> for offline runs")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mfexplain", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "ingest":
            sp.add_argument("--enrich", action="store_true", help="fill missing metadata from the TMDB API")
        if name == "explain":
            sp.add_argument("--strategy", required=True,
                            choices=[s.value for s in explain.Strategy if s is not explain.Strategy.USER_TYPES])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        if hasattr(args, "seed"):
            cfg.seed = args.seed
        if hasattr(args, "out"):
            cfg.out = args.out
        if hasattr(args, "llm"):
            cfg.llm["endpoint"] = args.llm
        # one manifest per strategy so explain runs do not overwrite each other
        name = f"explain-{args.strategy}" if args.command == "explain" else args.command
        with Run(name, cfg, getattr(args, "force", False)) as run:
            code = COMMANDS[args.command](run, args)
            if code:
                return code
        return 0
    except MfExplainError as exc:
        print(f"mfexplain {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
