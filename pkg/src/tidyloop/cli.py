"""Command-line interface: a thin client over the session layer."""

from __future__ import annotations

import os
import sys
import tempfile
from dataclasses import replace

import click

from .bench import ActivityType, default_spec, run_benchmark
from .config import EngineConfig, load_config
from .errors import LoopBudgetExhausted, NoProgress, TidyloopError
from .scene import GroupDag, canonical_dumps, load_scene
from .session import SessionManager, Transcript, replay_transcript, run_loop, surface_for
from .synthesis import synthesize_scene


def _fail(error: str, detail: str) -> None:
    click.echo(canonical_dumps({"error": error, "detail": detail}), err=True)
    sys.exit(1)


@click.group()
@click.option("--seed", type=int, default=None, help="Override the master random seed.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Engine config file (JSON).")
@click.option("--backend", type=click.Choice(["remote", "mock"]), default=None,
              help="Planner backend selection.")
@click.pass_context
def main(ctx: click.Context, seed: int | None, config_path: str | None, backend: str | None):
    """Preference-aware rearrangement planning engine."""
    config = load_config(config_path)
    ctx.obj = config.with_overrides(seed=seed, backend=backend)


@main.command()
@click.argument("scene_file", type=click.Path(exists=True))
@click.argument("instruction")
@click.option("--out-dir", type=click.Path(), default="out", show_default=True)
@click.pass_obj
def plan(config: EngineConfig, scene_file: str, instruction: str, out_dir: str):
    """Run the full loop on a scene and write plan, poses, and report."""
    os.makedirs(out_dir, exist_ok=True)
    config = replace(config, sessions_dir=os.path.join(out_dir, "sessions"))
    manager = SessionManager(config)
    try:
        scene = load_scene(scene_file)
        session = manager.create(scene, instruction, seed=config.synthesis.seed)
        try:
            run_loop(session, manager.backend(), config)
        finally:
            manager.save(session)
            session.transcript.write(os.path.join(out_dir, "transcript.jsonl"))
            if session.plan is not None:
                with open(os.path.join(out_dir, "plan.json"), "w", encoding="utf-8") as fh:
                    fh.write(canonical_dumps(session.plan.to_dict()) + "\n")
            if session.solution is not None:
                with open(os.path.join(out_dir, "poses.json"), "w", encoding="utf-8") as fh:
                    fh.write(canonical_dumps(session.solution.to_dict()) + "\n")
            report = {
                "status": session.status.value,
                "loop_iteration": session.loop_iteration,
                "outcome": session.outcome.to_dict() if session.outcome else None,
                "failure_reason": session.failure_reason,
            }
            with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
                fh.write(canonical_dumps(report) + "\n")
    except (NoProgress, LoopBudgetExhausted) as exc:
        _fail(type(exc).__name__, str(exc))
    except TidyloopError as exc:
        _fail(type(exc).__name__, str(exc))
    click.echo(canonical_dumps({"status": session.status.value, "out_dir": out_dir}))


@main.command()
@click.argument("scene_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Write poses here instead of stdout.")
@click.pass_obj
def synthesize(config: EngineConfig, scene_file: str, out: str | None):
    """Pose synthesis only: group the scene's objects by category and place them."""
    try:
        scene = load_scene(scene_file)
        if not scene.groups:
            by_category: dict[str, list[str]] = {}
            for node_id in scene.movable_ids():
                node = scene.nodes[node_id]
                by_category.setdefault(node.category or node.label, []).append(node_id)
            scene.groups = [
                GroupDag(
                    category=category,
                    member_ids=sorted(members),
                    intra_edges=[
                        e for e in scene.edges
                        if e.parent in members and e.child in members
                    ],
                )
                for category, members in sorted(by_category.items())
            ]
        surface = surface_for(scene)
        solution = synthesize_scene(scene, surface, config.synthesis)
    except TidyloopError as exc:
        _fail(type(exc).__name__, str(exc))
    text = canonical_dumps(solution.to_dict())
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@main.command()
@click.argument("activity", type=click.Choice([a.value for a in ActivityType]))
@click.option("--runs", type=int, default=20, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--non-semantic", is_flag=True, help="Box/cylinder variant with the mix/separate rule.")
@click.pass_obj
def bench(config: EngineConfig, activity: str, runs: int, out: str | None, non_semantic: bool):
    """Run a benchmark batch and emit its metric report."""
    from .backends import make_backend

    try:
        spec = default_spec(activity, seed=config.synthesis.seed, semantic=not non_semantic)
        backend = make_backend(config.backend_kind, config.backend_settings)
        report = run_benchmark(spec, runs, config.synthesis, backend)
    except TidyloopError as exc:
        _fail(type(exc).__name__, str(exc))
    text = canonical_dumps(report)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        click.echo(canonical_dumps({"written": out, "runs": runs}))
    else:
        click.echo(text)


@main.command()
@click.argument("transcript_file", type=click.Path(exists=True))
def replay(transcript_file: str):
    """Re-run a recorded session and verify the transcript is reproduced
    byte-for-byte."""
    original = Transcript.read(transcript_file)
    with tempfile.TemporaryDirectory() as tmp:
        try:
            reproduced = replay_transcript(original.entries, sessions_dir=tmp)
        except TidyloopError as exc:
            _fail(type(exc).__name__, str(exc))
    original_text = original.to_text()
    replayed_text = reproduced.to_text()
    if original_text != replayed_text:
        original_lines = original_text.splitlines()
        replayed_lines = replayed_text.splitlines()
        divergence = next(
            (
                i
                for i, (a, b) in enumerate(zip(original_lines, replayed_lines))
                if a != b
            ),
            min(len(original_lines), len(replayed_lines)),
        )
        _fail(
            "ReplayMismatch",
            f"transcripts diverge at line {divergence} "
            f"(original {len(original_lines)} lines, replay {len(replayed_lines)})",
        )
    click.echo(canonical_dumps({"status": "identical", "entries": len(original.entries)}))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=None, help="Defaults to the configured port.")
@click.pass_obj
def serve(config: EngineConfig, host: str, port: int | None):
    """Serve the HTTP session API (and the UI when built)."""
    import uvicorn

    from .service import create_app

    app = create_app(config)
    uvicorn.run(app, host=host, port=port if port is not None else config.port, log_level="warning")


if __name__ == "__main__":
    main()
