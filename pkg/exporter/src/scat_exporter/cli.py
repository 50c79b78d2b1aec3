"""Command-line exporter mirroring the export configuration."""

from __future__ import annotations

import sys

import click

from .config import ExportConfig, ExportError
from .exporter import export_run


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise click.UsageError(f"resolution must look like 16x16, got {text!r}")


@click.command()
@click.option("--model", "model_id", required=True,
              help="Model identifier, or mock-unet / mock-mmdit.")
@click.option("--prompt", required=True)
@click.option("--subjects", required=True, help="Comma-separated subject token indices.")
@click.option("--resolution", default="16x16", help="Attention-map grid to export.")
@click.option("--steps", type=int, default=50)
@click.option("--stride", type=int, default=1, help="Keep every n-th timestep.")
@click.option("--layers", default=None, help="Comma-separated layer-id allowlist.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def main(model_id, prompt, subjects, resolution, steps, stride, layers, seed, out):
    """Capture attention maps from a diffusion run into a SCAT trace."""
    try:
        subject_indices = tuple(int(s) for s in subjects.split(",") if s.strip())
        layer_tuple = (
            tuple(int(s) for s in layers.split(",") if s.strip()) if layers else None
        )
    except ValueError:
        raise click.UsageError("indices must be comma-separated integers")
    config = ExportConfig(
        model_id=model_id,
        prompt=prompt,
        subject_indices=subject_indices,
        output_path=out,
        resolution=_resolution(resolution),
        steps=steps,
        timestep_stride=stride,
        layers=layer_tuple,
        seed=seed,
    )
    try:
        path = export_run(config)
    except ExportError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
