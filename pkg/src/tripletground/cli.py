"""Command-line entry points: parse, ground, eval, overlay, serve-mock.

Flags may be preloaded from a flat ``key = value`` config file given with
--config; explicit flags always win over file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from typing import List, Optional

from .gateway import EmbeddingCache, HttpBackend, MockBackend
from .harness import (
    LINKS_SCHEMA,
    REC_SCHEMA,
    RunConfig,
    load_links_dataset,
    load_predictions,
    load_rec_dataset,
    render_overlay,
    run_grounding,
    score_predictions,
    sniff_schema,
)
from .matching import ARGMAX, IMAGE_TO_TEXT, TEXT_TO_IMAGE, THRESHOLD, MatchConfig
from .mockserve import ProtocolServer
from .pairing import load_rules
from .parsing import LiveLlmClient, ReplayStore, load_template, parse_caption

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_RECORD_FAILURES = 2


def read_config_file(path: str) -> dict:
    """Parse a flat `key = value` file (strings, numbers, booleans, # comments)."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ValueError(f"config line is not `key = value`: {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if value.startswith(("'", '"')) and value.endswith(value[0]) and len(value) >= 2:
                values[key] = value[1:-1]
            elif value.lower() in ("true", "false"):
                values[key] = value.lower() == "true"
            else:
                try:
                    values[key] = int(value)
                except ValueError:
                    try:
                        values[key] = float(value)
                    except ValueError:
                        values[key] = value
    return values


def _template_for(name: str, schema: str):
    if name == "auto":
        name = "rec" if schema == REC_SCHEMA else "links"
    if name in ("rec", "links"):
        with resources.as_file(
            resources.files("tripletground.data").joinpath(f"prompt_{name}.txt")
        ) as path:
            return load_template(str(path))
    return load_template(name)


def _backend_from(args) -> MockBackend | HttpBackend:
    if args.backend == "mock":
        return MockBackend(seed=args.seed, dimension=args.dim)
    return HttpBackend(args.backend)


def _llm_from(args):
    if args.fixtures:
        return ReplayStore.from_jsonl(args.fixtures)
    if args.llm_url:
        return LiveLlmClient(args.llm_url, model=args.llm_model)
    raise SystemExit("either --fixtures or --llm-url is required")


def _selection_config(args) -> MatchConfig:
    direction = TEXT_TO_IMAGE if args.direction == "text2image" else IMAGE_TO_TEXT
    if args.selection.startswith("threshold:"):
        return MatchConfig(
            direction=direction,
            selection=THRESHOLD,
            threshold=float(args.selection.split(":", 1)[1]),
        )
    if args.selection != ARGMAX:
        raise SystemExit(f"unknown selection mode: {args.selection}")
    return MatchConfig(direction=direction)


def _load_dataset(path: str):
    schema = sniff_schema(path)
    records = load_rec_dataset(path) if schema == REC_SCHEMA else load_links_dataset(path)
    return schema, records


def cmd_parse(args) -> int:
    llm = _llm_from(args)
    template = _template_for(args.template, REC_SCHEMA)
    mode = args.mode
    parsed = parse_caption(args.caption, llm, template, mode=mode)
    print(
        json.dumps(
            {
                "caption": parsed.caption,
                "entities": [
                    {"id": e.id, "surface": e.surface, "verbatim": e.verbatim}
                    for e in parsed.entities
                ],
                "triplets": [
                    {
                        "subject_id": t.subject_id,
                        "object_id": t.object_id,
                        "subject": t.subject_text,
                        "predicate": t.predicate_text,
                        "object": t.object_text,
                        "filled": sorted(t.filled_slots),
                        "predicate_phrase": t.predicate_phrase,
                    }
                    for t in parsed.triplets
                ],
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_ground(args) -> int:
    schema, records = _load_dataset(args.dataset)
    llm = _llm_from(args)
    template = _template_for(args.template, schema)
    backend = _backend_from(args)
    rules = load_rules(args.rules)
    cache = EmbeddingCache(args.cache) if args.cache else EmbeddingCache()
    if args.direction == "auto":
        args.direction = "text2image" if schema == REC_SCHEMA else "image2text"
    compose = "full-sentence" if schema == REC_SCHEMA else "person-template"
    config = RunConfig(
        match=_selection_config(args),
        tta=tuple(args.tta.split(",")) if args.tta else ("crop",),
        size_prior=args.size_prior,
        subject_text_source=args.subject_text,
        compose_mode=compose,
        seed=args.seed,
        workers=args.workers,
    )
    _, failures = run_grounding(
        records, llm, template, backend, rules, config, cache=cache, out_path=args.out
    )
    print(f"wrote {len(records)} predictions to {args.out} ({failures} record failures)")
    return EXIT_RECORD_FAILURES if failures else EXIT_OK


def cmd_eval(args) -> int:
    schema, records = _load_dataset(args.dataset)
    predictions = load_predictions(args.preds)
    report = score_predictions(predictions, records, args.metric)
    report.config = {
        "metric": args.metric,
        "preds": args.preds,
        "dataset": args.dataset,
        "schema": schema,
    }
    payload = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    print(f"{report.metric}: {report.correct}/{report.total} = {report.accuracy:.4f}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    schema, records = _load_dataset(args.dataset)
    predictions = {p["record_id"]: p for p in load_predictions(args.preds)}
    record = next((r for r in records if r.record_id == args.record_id), None)
    if record is None:
        print(f"record {args.record_id!r} not found", file=sys.stderr)
        return EXIT_FATAL
    prediction = predictions.get(args.record_id)
    if prediction is None:
        print(f"no prediction for {args.record_id!r}", file=sys.stderr)
        return EXIT_FATAL
    svg = render_overlay(record, prediction)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    backend = MockBackend(seed=args.seed, dimension=args.dim)
    server = ProtocolServer(backend, host=args.host, port=args.port)
    print(f"serving mock backend (seed={args.seed}, dim={args.dim}) on {server.url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripletground")
    parser.add_argument("--config", help="flat key = value config file; flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="decompose one caption into triplets")
    p.add_argument("--caption", required=True)
    p.add_argument("--fixtures", help="replay fixture JSONL")
    p.add_argument("--llm-url")
    p.add_argument("--llm-model", default="gpt-3.5-turbo")
    p.add_argument("--template", default="rec")
    p.add_argument("--mode", default="full-sentence", choices=["full-sentence", "person-template"])
    p.set_defaults(func=cmd_parse)

    g = sub.add_parser("ground", help="run grounding over a dataset")
    g.add_argument("--dataset", required=True)
    g.add_argument("--fixtures")
    g.add_argument("--llm-url")
    g.add_argument("--llm-model", default="gpt-3.5-turbo")
    g.add_argument("--backend", default="mock", help="http://host:port or 'mock'")
    g.add_argument("--direction", default="auto", choices=["auto", "text2image", "image2text"])
    g.add_argument("--tta", default="crop", help="comma-separated render modes")
    g.add_argument("--size-prior", type=float, default=None)
    g.add_argument("--selection", default="argmax", help="argmax or threshold:T")
    g.add_argument("--subject-text", default="entity", choices=["entity", "whole-caption"])
    g.add_argument("--template", default="auto")
    g.add_argument("--rules", default=None, help="spatial rule table JSON")
    g.add_argument("--cache", default=None, help="embedding cache path")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dim", type=int, default=32, help="mock backend dimension")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_ground)

    e = sub.add_parser("eval", help="score a predictions file")
    e.add_argument("--preds", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--metric", default="rec@0.5", help="rec@T or links")
    e.add_argument("--report", help="write a JSON report here")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("overlay", help="render an SVG overlay for one record")
    o.add_argument("--dataset", required=True)
    o.add_argument("--preds", required=True)
    o.add_argument("--record-id", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_overlay)

    s = sub.add_parser("serve-mock", help="serve the mock backend over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8331)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dim", type=int, default=32)
    s.set_defaults(func=cmd_serve_mock)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        try:
            # Defaults land in the namespace before the subparser runs, so
            # explicit flags always win over file values.
            parser.set_defaults(**read_config_file(known.config))
        except (OSError, ValueError) as exc:
            print(f"fatal: {exc}", file=sys.stderr)
            return EXIT_FATAL
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
