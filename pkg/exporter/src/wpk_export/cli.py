"""CLI: ``wpk-export export --model <id> --images <dir> --out <file>``.

Prints the export manifest as JSON to stdout on success.  Exit codes:
0 ok, 1 export failure (bad model, bad folder, or >5% undecodable images),
4 I/O failure while writing.
"""

from __future__ import annotations

import logging
import sys

import click

from .extract import ExportError, export_features


@click.group()
def cli():
    """Feature/weight exporter for the k-shot container format."""


@cli.command()
@click.option("--model", required=True, help="Checkpoint path or torchvision architecture name.")
@click.option(
    "--images",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Image root with one subdirectory per class.",
)
@click.option("--out", "out_file", required=True, help="Output container path.")
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--image-size", type=int, default=32, show_default=True)
@click.option("--mean", type=float, default=0.5, show_default=True)
@click.option("--std", type=float, default=0.5, show_default=True)
def export(model, images, out_file, batch, image_size, mean, std):
    """Extract features + final-layer weights into a container file."""
    manifest = export_features(
        model,
        images,
        out_file,
        batch=batch,
        image_size=image_size,
        mean=mean,
        std=std,
    )
    click.echo(manifest.to_json())


def main():
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except ExportError as exc:
        click.echo(f"export error: {exc}", err=True)
        sys.exit(1)
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)


if __name__ == "__main__":
    main()
