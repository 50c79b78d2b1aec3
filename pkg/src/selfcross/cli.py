"""Command-line entry points: generate, analyze, score, gradcheck.

Exit codes are stable: 0 on success, 1 on runtime failure, 2 on usage
errors. Flags override config-file values, which override built-in defaults;
the effective configuration of every generate run is echoed into its
manifest. Commands never mutate their input files.
"""

from __future__ import annotations

import configparser
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import click

from . import __version__
from .denoiser import DenoiserParams
from .errors import SelfCrossError
from .faithfulness import (
    EndpointConfig,
    load_prompt_set,
    score_batch,
    seed_prompt_path,
)
from .gradcheck import run_gradcheck
from .guidance import SubjectSet
from .sampler import RunTrace, SamplerConfig, run_pipeline
from .traceio import TraceMetadata, analyze_trace, read_trace, write_trace


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise click.UsageError(f"expected comma-separated integers, got {text!r}")


def _load_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise click.UsageError(f"config file {path} not found")
    if not parser.has_section("selfcross"):
        raise click.UsageError(f"config file {path} needs a [selfcross] section")
    return dict(parser["selfcross"])


def _resolve(flag, config: dict[str, str], key: str, default, cast):
    """Precedence: explicit flag > config file > built-in default."""
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return default


@click.group()
@click.version_option(version=__version__)
def main():
    """Attention-guided toy sampling, trace analysis, and VQA scoring."""


@main.command("generate")
@click.option("--prompt", required=True, help="Whitespace-tokenized prompt.")
@click.option("--subjects", required=True, help="Comma-separated subject token indices.")
@click.option("--seed", type=int, default=None, help="Single run seed.")
@click.option("--seeds", default=None, help="Comma-separated run seeds.")
@click.option("--steps", type=int, default=None, help="Total scheduler steps.")
@click.option("--guidance-steps", type=int, default=None, help="Guided window length.")
@click.option("--refine-at", default=None, help="Comma-separated refinement step indices.")
@click.option("--tau-cross", type=float, default=None, help="Response-score threshold.")
@click.option("--tau-self-cross", type=float, default=None, help="Overlap threshold.")
@click.option("--max-iter", type=int, default=None, help="Refinement iteration cap.")
@click.option("--lambda", "lam", type=float, default=None, help="Response-score weight.")
@click.option("--step-size", type=float, default=None, help="Latent gradient step size.")
@click.option("--cfg-scale", type=float, default=None, help="Classifier-free guidance scale.")
@click.option("--pool-size", type=int, default=None, help="Initial-noise pool size.")
@click.option("--pool-rounds", type=int, default=None, help="Noise optimization rounds.")
@click.option("--model-seed", type=int, default=None, help="Toy denoiser weight seed.")
@click.option("--config", "config_path", default=None, help="INI config file, [selfcross] section.")
@click.option("--jobs", type=int, default=1, help="Parallel seeds.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def cmd_generate(
    prompt, subjects, seed, seeds, steps, guidance_steps, refine_at, tau_cross,
    tau_self_cross, max_iter, lam, step_size, cfg_scale, pool_size, pool_rounds,
    model_seed, config_path, jobs, out,
):
    """Run the guided toy pipeline and write one SCAT trace per seed."""
    cfg_file = _load_config_file(config_path)
    if seed is not None and seeds is not None:
        raise click.UsageError("give either --seed or --seeds, not both")
    seed_list = _parse_int_list(seeds) if seeds is not None else (
        (seed,) if seed is not None else (int(cfg_file.get("seed", 0)),)
    )
    subject_indices = _parse_int_list(subjects)
    tokens = tuple(prompt.split())
    defaults = SamplerConfig()

    def build_config(run_seed: int) -> SamplerConfig:
        return SamplerConfig(
            total_steps=_resolve(steps, cfg_file, "steps", defaults.total_steps, int),
            guidance_steps=_resolve(
                guidance_steps, cfg_file, "guidance-steps", defaults.guidance_steps, int
            ),
            refinement_steps=(
                _parse_int_list(refine_at)
                if refine_at is not None
                else _parse_int_list(cfg_file["refine-at"])
                if "refine-at" in cfg_file
                else defaults.refinement_steps
            ),
            tau_cross=_resolve(tau_cross, cfg_file, "tau-cross", defaults.tau_cross, float),
            tau_self_cross=_resolve(
                tau_self_cross, cfg_file, "tau-self-cross", defaults.tau_self_cross, float
            ),
            tau_max_iter=_resolve(max_iter, cfg_file, "max-iter", defaults.tau_max_iter, int),
            lam=_resolve(lam, cfg_file, "lambda", defaults.lam, float),
            step_size=_resolve(step_size, cfg_file, "step-size", defaults.step_size, float),
            cfg_scale=_resolve(cfg_scale, cfg_file, "cfg-scale", defaults.cfg_scale, float),
            noise_pool_size=_resolve(
                pool_size, cfg_file, "pool-size", defaults.noise_pool_size, int
            ),
            noise_opt_rounds=_resolve(
                pool_rounds, cfg_file, "pool-rounds", defaults.noise_opt_rounds, int
            ),
            seed=run_seed,
        )

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weight_seed = _resolve(model_seed, cfg_file, "model-seed", 0, int)

    try:
        params = DenoiserParams.create(weight_seed, tokens)
        subject_set = SubjectSet(subject_indices)

        def run_one(run_seed: int) -> dict:
            config = build_config(run_seed)
            _, trace = run_pipeline(tokens, subject_set, config, params)
            trace_path = out_dir / f"trace_seed{run_seed}.scat"
            if trace.records:
                metadata = TraceMetadata.for_records(
                    trace.records,
                    prompt=prompt,
                    subject_indices=subject_indices,
                    model_id=f"toy-denoiser-seed{weight_seed}",
                )
                trace_path.write_bytes(write_trace(trace.records, metadata))
            return {
                "seed": run_seed,
                "trace": trace_path.name if trace.records else None,
                "evaluations": len(trace.entries),
                "refinement_iterations": trace.refinement_iterations,
                "noise_pool_totals": list(trace.noise_pool_totals),
                "selected_candidate": trace.selected_candidate,
                "final_losses": _last_losses(trace),
                "config": _config_dict(config),
            }

        if jobs > 1 and len(seed_list) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                runs = list(pool.map(run_one, seed_list))
        else:
            runs = [run_one(s) for s in seed_list]
    except SelfCrossError as exc:
        _fail(str(exc))

    manifest = {
        "tool": "selfcross",
        "version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "prompt": prompt,
        "subjects": list(subject_indices),
        "model_seed": weight_seed,
        "seeds": list(seed_list),
        "runs": runs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    click.echo(f"wrote {len(seed_list)} run(s) to {out_dir}")


def _last_losses(trace: RunTrace) -> dict | None:
    if not trace.entries:
        return None
    last = trace.entries[-1].losses
    return {
        "s_cross_attn": last.s_cross_attn,
        "s_self_cross": last.s_self_cross,
        "total": last.total,
    }


def _config_dict(config: SamplerConfig) -> dict:
    raw = asdict(config)
    raw["refinement_steps"] = list(config.refinement_steps)
    raw["tau_max_alter_step"] = config.tau_max_alter_step
    return raw


@main.command("analyze")
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--subjects", default=None, help="Subject indices; default from trace metadata.")
@click.option("--lambda", "lam", type=float, default=1.0, help="Response-score weight.")
@click.option("--layers", default=None, help="Layer-id allowlist.")
@click.option("--group-layers", is_flag=True, help="Average blocks sharing a timestep.")
@click.option("--summaries", is_flag=True, help="Include per-subject map summaries.")
@click.option("--format", "output_format", type=click.Choice(["table", "json"]), default="table")
@click.option("--output", default=None, type=click.Path(dir_okay=False), help="Write to file.")
def cmd_analyze(trace_path, subjects, lam, layers, group_layers, summaries, output_format, output):
    """Recompute guidance losses for every record in a SCAT trace."""
    try:
        metadata, records = read_trace(Path(trace_path).read_bytes())
        indices = (
            _parse_int_list(subjects) if subjects is not None else metadata.subject_indices
        )
        if not indices:
            raise click.UsageError("trace metadata has no subjects; pass --subjects")
        layer_filter = set(_parse_int_list(layers)) if layers is not None else None
        rows = analyze_trace(
            records,
            SubjectSet(tuple(indices)),
            lam=lam,
            layer_filter=layer_filter,
            group_layers=group_layers,
        )
    except SelfCrossError as exc:
        _fail(str(exc))

    if output_format == "json":
        payload = {
            "trace": str(trace_path),
            "prompt": metadata.prompt,
            "subjects": list(indices),
            "lambda": lam,
            "rows": [_row_dict(row, summaries) for row in rows],
        }
        text = json.dumps(payload, indent=2)
    else:
        lines = [
            f"{'idx':>4} {'step':>5} {'layer':>5} {'S_cross':>10} {'S_selfcross':>12} {'total':>10}"
        ]
        for row in rows:
            if row.losses is None:
                lines.append(f"{row.index:>4} {row.timestep:>5} {row.layer_id:>5} error: {row.error}")
                continue
            lines.append(
                f"{row.index:>4} {row.timestep:>5} {row.layer_id:>5} "
                f"{row.losses.s_cross_attn:>10.6f} {row.losses.s_self_cross:>12.6f} "
                f"{row.losses.total:>10.6f}"
            )
            if summaries:
                for s in row.subject_summaries:
                    lines.append(
                        f"{'':>4} token {s.token_index}: max={s.max_value:.6f} "
                        f"otsu={s.otsu_threshold:.6f} mask={s.mask_size}"
                    )
        text = "\n".join(lines)

    if output:
        Path(output).write_text(text + "\n", encoding="utf-8")
        click.echo(f"wrote {output}")
    else:
        click.echo(text)


def _row_dict(row, include_summaries: bool) -> dict:
    out = {
        "index": row.index,
        "timestep": row.timestep,
        "layer_id": row.layer_id,
        "error": row.error,
        "s_cross_attn": None if row.losses is None else row.losses.s_cross_attn,
        "s_self_cross": None if row.losses is None else row.losses.s_self_cross,
        "total": None if row.losses is None else row.losses.total,
        "pairwise": None
        if row.losses is None
        else {f"{i},{j}": v for (i, j), v in row.losses.pairwise.items()},
    }
    if include_summaries:
        out["summaries"] = [
            {
                "token_index": s.token_index,
                "max_value": s.max_value,
                "otsu_threshold": s.otsu_threshold,
                "mask_size": s.mask_size,
            }
            for s in row.subject_summaries
        ]
    return out


@main.command("score")
@click.option("--images", "images_dir", type=click.Path(file_okay=False), default=None)
@click.option("--prompts", "prompts_path", default=None, help="Prompt-set file; bundled seeds by default.")
@click.option("--endpoint-url", default=None, help="Chat-completions endpoint URL.")
@click.option("--model", default=None, help="VLM model identifier.")
@click.option("--offline-fixtures", default=None, type=click.Path(file_okay=False))
@click.option("--transcripts", "transcript_dir", default="transcripts", type=click.Path(file_okay=False))
@click.option("--relation-question", default=None, help="Optional spatial-relation question.")
@click.option("--output", default=None, type=click.Path(dir_okay=False), help="Machine-readable report.")
def cmd_score(
    images_dir, prompts_path, endpoint_url, model, offline_fixtures,
    transcript_dir, relation_question, output,
):
    """Score generated images for subject existence, recognizability, and mixing."""
    if offline_fixtures is None and (endpoint_url is None or model is None):
        raise click.UsageError("need --offline-fixtures, or --endpoint-url with --model")
    if offline_fixtures is None and images_dir is None:
        raise click.UsageError("--images is required for endpoint scoring")
    try:
        cases = load_prompt_set(prompts_path if prompts_path else seed_prompt_path())
        endpoint = (
            EndpointConfig(url=endpoint_url, model=model) if endpoint_url else None
        )
        report = score_batch(
            images_dir or ".",
            cases,
            endpoint=endpoint,
            offline_fixtures=offline_fixtures,
            transcript_dir=transcript_dir,
            relation_question=relation_question,
        )
    except SelfCrossError as exc:
        _fail(str(exc))

    header = f"{'':<24}{'Ext':>8} {'Rec':>8} {'w/o M':>8}" + (
        f" {'Rel':>8}" if report.rel_pct is not None else ""
    )
    lines = [header]
    overall = f"{'overall':<24}{report.ext_pct:>8.2f} {report.rec_pct:>8.2f} {report.wom_pct:>8.2f}"
    if report.rel_pct is not None:
        overall += f" {report.rel_pct:>8.2f}"
    lines.append(overall)
    for case in report.per_case:
        row = f"{case.case_id:<24}{case.ext_pct:>8.2f} {case.rec_pct:>8.2f} {case.wom_pct:>8.2f}"
        if report.rel_pct is not None and case.rel_pct is not None:
            row += f" {case.rel_pct:>8.2f}"
        lines.append(row)
    lines.append(
        f"transcripts: {report.total} total, {report.parseable} parseable, "
        f"{report.unparseable} unparseable"
    )
    for note in report.notes:
        lines.append(f"note: {note}")
    click.echo("\n".join(lines))

    if output:
        payload = {
            "ext_pct": report.ext_pct,
            "rec_pct": report.rec_pct,
            "wom_pct": report.wom_pct,
            "rel_pct": report.rel_pct,
            "total": report.total,
            "parseable": report.parseable,
            "unparseable": report.unparseable,
            "per_case": [asdict(c) for c in report.per_case],
            "notes": list(report.notes),
        }
        Path(output).write_text(json.dumps(payload, indent=2), encoding="utf-8")
        click.echo(f"wrote {output}")


@main.command("gradcheck")
@click.option("--trials", type=int, default=20)
@click.option("--coords", type=int, default=10, help="Coordinates probed per trial.")
@click.option("--tolerance", type=float, default=1e-3, help="Relative tolerance.")
@click.option("--atol", type=float, default=1e-5, help="Absolute tolerance floor.")
@click.option("--step", type=float, default=1e-3, help="Finite-difference half-step.")
@click.option("--seed", type=int, default=0)
@click.option("--inject-sign-flip", is_flag=True, hidden=True)
def cmd_gradcheck(trials, coords, tolerance, atol, step, seed, inject_sign_flip):
    """Compare the analytic guidance gradient against central differences."""
    if trials == 0:
        click.echo("warning: --trials 0 checks nothing; vacuous pass")
        sys.exit(0)
    try:
        report = run_gradcheck(
            trials=trials,
            coords_per_trial=coords,
            step=step,
            rtol=tolerance,
            atol=atol,
            base_seed=seed,
            corrupt_gradient=inject_sign_flip,
        )
    except SelfCrossError as exc:
        _fail(str(exc))
    click.echo(
        f"{len(report.checks)} coordinate checks over {trials} configurations "
        f"({report.resampled} resampled for kinks)"
    )
    for failure in report.failures:
        click.echo(
            f"FAIL seed={failure.seed} coord={failure.coordinate} "
            f"analytic={failure.analytic:.8f} numeric={failure.numeric:.8f}",
            err=True,
        )
    if not report.passed:
        sys.exit(1)
    click.echo("gradient check passed")


if __name__ == "__main__":
    main()
