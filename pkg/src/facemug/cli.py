"""Command line for the face-editing stack.

Exit codes: 0 success, 1 runtime failure with a diagnostic, 2 usage error.
Every run writes a JSON snapshot of its effective settings next to its
output. Images move as PNG: RGB for photos, 1-bit for masks, 8-bit indexed
with the 19-label palette for semantic maps. FACEMUG_CACHE points the
content-addressed cache somewhere other than ~/.cache/facemug.
"""

from __future__ import annotations

import functools
import json
import os

import click

from .config import Config
from .errors import FacemugError


def _guard(fn):
    """Map runtime failures to exit 1 with a one-line diagnostic."""
    @functools.wraps(fn)
    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FacemugError, OSError, ValueError) as exc:
            raise click.ClickException(str(exc)) from exc
    return inner


def _snapshot(target: str, command: str, payload: dict) -> str:
    """Record the effective settings next to the output they produced."""
    if os.path.isdir(target):
        path = os.path.join(target, f"{command}.config.json")
    else:
        path = f"{target}.config.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _load_config(config_path: str | None, **overrides) -> Config:
    cfg = Config.load(config_path) if config_path else Config()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.with_overrides(**overrides) if overrides else cfg


@click.group()
@click.version_option(package_name="facemug", prog_name="facemug")
def main():
    """Multimodal local face editing, desk scale."""


# ------------------------------------------------------------- synth-data

@main.command("synth-data")
@click.option("--n", type=int, required=True, help="number of faces")
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="output directory for manifest.jsonl")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--identities", type=int, default=None,
              help="distinct identities [default: n // 32]")
@click.option("--resolution", type=int, default=64, show_default=True)
@_guard
def synth_data(n, out, seed, identities, resolution):
    """Generate a synthetic face corpus with analytic pose ground truth."""
    from .data import make_corpus

    if n < 1:
        raise click.UsageError("--n must be positive")
    identities = identities if identities is not None else max(1, n // 32)
    make_corpus(n, identities, seed, resolution, out_dir=out)
    _snapshot(out, "synth-data", {"n": n, "identities": identities,
                                  "seed": seed, "resolution": resolution})
    click.echo(f"wrote {n} specs to {os.path.join(out, 'manifest.jsonl')}")


# ------------------------------------------------------------------ train

@main.command()
@click.argument("stage", type=click.Choice(["bank", "encoder", "warp", "main"]))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON config; flags override file values")
@click.option("--data", "data_path", type=click.Path(exists=True),
              help="corpus manifest.jsonl [default: synthesized from config]")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="checkpoint output path")
@click.option("--log", "log_path", type=click.Path(dir_okay=False),
              help="line-JSON loss log [default: OUT.log.jsonl]")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False),
              help="checkpoint to continue from")
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False),
              help="frozen bank checkpoint (encoder/warp stages)")
@click.option("--encoder", "encoder_path", type=click.Path(exists=True, dir_okay=False),
              help="frozen encoder checkpoint (warp/main stages)")
@click.option("--warp", "warp_path", type=click.Path(exists=True, dir_okay=False),
              help="frozen warp checkpoint (main stage)")
@click.option("--steps", type=int, help="override the stage's step count")
@click.option("--seed", type=int, help="override config.seed")
@click.option("--resolution", type=int)
@click.option("--batch-size", type=int)
@_guard
def train(stage, config_path, data_path, out, log_path, resume_path,
          bank_path, encoder_path, warp_path, steps, seed, resolution,
          batch_size):
    """Run one training stage; stage order is bank, encoder, then warp and
    main (which freeze the earlier stages' weights)."""
    from . import training
    from .checkpoint import load_checkpoint
    from .data import load_corpus, make_corpus

    cfg = _load_config(config_path, seed=seed, resolution=resolution,
                       batch_size=batch_size)
    if data_path:
        manifest = (os.path.join(data_path, "manifest.jsonl")
                    if os.path.isdir(data_path) else data_path)
        corpus = load_corpus(manifest, cfg.resolution)
    else:
        corpus = make_corpus(cfg.n_faces, cfg.n_identities, cfg.data_seed,
                             cfg.resolution)
    data = training.TrainingData(corpus)

    def need(path, flag):
        if path is None:
            raise click.UsageError(f"stage {stage!r} requires {flag}")
        return load_checkpoint(path, expected_config=cfg)

    log_path = log_path or f"{out}.log.jsonl"
    kwargs = dict(steps=steps, out_path=out, log_path=log_path,
                  resume_from=resume_path)
    if stage == "bank":
        training.pretrain_feature_bank(data, cfg, **kwargs)
    elif stage == "encoder":
        training.train_style_encoder(data, need(bank_path, "--bank"), cfg, **kwargs)
    elif stage == "warp":
        bank = load_checkpoint(bank_path, expected_config=cfg) if bank_path else None
        training.train_warp(data, need(encoder_path, "--encoder"), cfg,
                            bank_ckpt=bank, **kwargs)
    else:
        frozen = [need(encoder_path, "--encoder")]
        if warp_path:
            frozen.append(load_checkpoint(warp_path, expected_config=cfg))
        training.train_main(data, frozen, cfg, **kwargs)

    _snapshot(out, f"train-{stage}", {
        "stage": stage, "config": json.loads(cfg.to_json()),
        "data": data_path, "steps": steps, "resume": resume_path,
        "upstream": {"bank": bank_path, "encoder": encoder_path,
                     "warp": warp_path}})
    click.echo(f"wrote {out} (log: {log_path})")


# ------------------------------------------------------------------- edit

def _parse_attr(value: str):
    name, sep, eps = value.partition(":")
    if not sep or not name:
        raise click.UsageError(f"--attr takes name:epsilon, got {value!r}")
    try:
        return name, float(eps)
    except ValueError:
        raise click.UsageError(f"--attr epsilon must be a number, got {eps!r}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="input photo (PNG)")
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="edit region (1-bit PNG)")
@click.option("--sketch", "sketch_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--semantic", "semantic_path", type=click.Path(exists=True, dir_okay=False),
              help="8-bit indexed PNG, 19-label palette")
@click.option("--color", "color_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--exemplar", "exemplar_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--text", default=None, help="text directive, e.g. \"dark hair\"")
@click.option("--attr", "attrs", multiple=True, metavar="NAME:EPS",
              help="attribute direction step; repeatable, applied in order")
@click.option("--directions", "directions_path", type=click.Path(exists=True, dir_okay=False),
              help="direction registry [default: CKPT base + .directions.json]")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guard
def edit(ckpt, image_path, mask_path, sketch_path, semantic_path, color_path,
         exemplar_path, text, attrs, directions_path, seed, out):
    """Apply one edit step; with only --mask this is pure inpainting.

    Feeding the output back in as --image performs incremental editing;
    pixels outside each step's mask never change beyond PNG quantization.
    """
    from .checkpoint import load_checkpoint
    from .data import (load_image, load_mask, load_semantic, save_image)
    from .editing import DirectionRegistry
    from .editor import EditRequest, Editor, default_registry_path

    parsed_attrs = [_parse_attr(a) for a in attrs]
    checkpoint = load_checkpoint(ckpt)
    res = checkpoint.config.resolution
    registry_file = directions_path or default_registry_path(ckpt)
    registry = (DirectionRegistry.load(registry_file)
                if os.path.exists(registry_file) else DirectionRegistry())

    request = EditRequest(
        image=load_image(image_path, res),
        mask=load_mask(mask_path, res),
        sketch=_load_sketch(sketch_path, res),
        semantic=load_semantic(semantic_path, res) if semantic_path else None,
        color=load_image(color_path, res) if color_path else None,
        exemplar=load_image(exemplar_path, res) if exemplar_path else None,
        text=text, attrs=parsed_attrs, seed=seed)
    result = Editor(checkpoint, registry=registry).edit(request)

    save_image(result.image, out)
    _snapshot(out, "edit", {
        "ckpt": ckpt, "image": image_path, "mask": mask_path,
        "sketch": sketch_path, "semantic": semantic_path, "color": color_path,
        "exemplar": exemplar_path, "text": text,
        "attrs": [f"{n}:{e}" for n, e in parsed_attrs], "seed": seed,
        "bg_max_dev": result.bg_max_dev,
        "timings_ms": result.timings,
        "text_trajectory": result.text_trajectory})
    click.echo(f"wrote {out} (background deviation {result.bg_max_dev:.6f})")


def _load_sketch(path, resolution):
    if path is None:
        return None
    from .data import load_image
    img = load_image(path, resolution)
    # sketches are 1-channel in [0,1]; accept grayscale PNGs saved as RGB
    return ((img.mean(dim=0, keepdim=True) + 1.0) / 2.0).clamp(0, 1)


# ------------------------------------------------------------------- eval

@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(exists=True), required=True,
              help="corpus manifest.jsonl (or its directory)")
@click.option("--report", type=click.Path(dir_okay=False), required=True,
              help="where to write the JSON report")
@click.option("--n-eval", type=int, default=64, show_default=True)
@click.option("--n-pose", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--uids", is_flag=True, help="include the linear-separability score")
@_guard
def eval_cmd(ckpt, dataset, report, n_eval, n_pose, seed, uids):
    """Metric battery: masked-region proxy-FID, proxy-LPIPS, identity
    cosine, pose-transfer accuracy, background audit."""
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .evaluation import evaluate_checkpoint, file_digest

    manifest = (os.path.join(dataset, "manifest.jsonl")
                if os.path.isdir(dataset) else dataset)
    checkpoint = load_checkpoint(ckpt)
    corpus = load_corpus(manifest, checkpoint.config.resolution)
    result = evaluate_checkpoint(checkpoint, corpus, seed=seed, n_eval=n_eval,
                                 n_pose=n_pose, ckpt_hash=file_digest(ckpt),
                                 include_uids=uids)
    with open(report, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _snapshot(report, "eval", {"ckpt": ckpt, "dataset": dataset,
                               "n_eval": n_eval, "n_pose": n_pose,
                               "seed": seed})
    click.echo(json.dumps(result, indent=2, sort_keys=True))


# ------------------------------------------------------------------ serve

@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--state-dir", type=click.Path(file_okay=False),
              help="session persistence root [default: CACHE/sessions]")
@_guard
def serve(ckpt, port, host, state_dir):
    """Serve the /v1 HTTP editing API."""
    import uvicorn

    from .service import build_app

    app = build_app(ckpt, state_dir=state_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


# ------------------------------------------------------------- directions

@main.group()
def directions():
    """Manage the attribute-direction registry used by --attr and /edit."""


def _registry_target(registry, ckpt):
    from .editor import default_registry_path

    if registry:
        return registry
    if ckpt:
        return default_registry_path(ckpt)
    raise click.UsageError("pass --registry or --ckpt to locate the registry")


@directions.command("list")
@click.option("--registry", type=click.Path(dir_okay=False))
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False))
@_guard
def directions_list(registry, ckpt):
    """Print available directions and their default epsilon."""
    from .editing import DirectionRegistry

    path = _registry_target(registry, ckpt)
    if not os.path.exists(path):
        click.echo("(no registry)")
        return
    reg = DirectionRegistry.load(path)
    for name in reg.names():
        click.echo(f"{name}\tdefault_epsilon={reg.get(name).default_epsilon:.4f}")
    if not len(reg):
        click.echo("(empty registry)")


@directions.command("add")
@click.option("--registry", type=click.Path(dir_okay=False))
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True,
              help="checkpoint whose bank the direction is mined on")
@click.option("--name", required=True,
              help="oracle to mine against (yaw, brightness)")
@click.option("--samples", type=int, default=64, show_default=True)
@click.option("--mine-seed", type=int, default=77, show_default=True)
@click.option("--scale", type=float, default=1.0, show_default=True,
              help="default_epsilon multiplier")
@_guard
def directions_add(registry, ckpt, name, samples, mine_seed, scale):
    """Mine one attribute direction from bank samples and save it."""
    from .checkpoint import load_checkpoint
    from .editing import DirectionRegistry
    from .editor import mine_default_directions
    from .evaluation import model_from_checkpoint

    path = _registry_target(registry, ckpt)
    reg = (DirectionRegistry.load(path) if os.path.exists(path)
           else DirectionRegistry())
    model = model_from_checkpoint(load_checkpoint(ckpt))
    mined = mine_default_directions(model, names=[name], n_samples=samples,
                                    seed=mine_seed, epsilon_scale=scale)
    reg.add(mined.get(name))
    reg.save(path)
    click.echo(f"added {name!r} to {path}")


@directions.command("remove")
@click.option("--registry", type=click.Path(dir_okay=False))
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", required=True)
@_guard
def directions_remove(registry, ckpt, name):
    """Delete a direction from the registry."""
    from .editing import DirectionRegistry

    path = _registry_target(registry, ckpt)
    if not os.path.exists(path):
        raise click.ClickException(f"no registry at {path}")
    reg = DirectionRegistry.load(path)
    reg.remove(name)
    reg.save(path)
    click.echo(f"removed {name!r} from {path}")


if __name__ == "__main__":
    main()
