"""Command-line entry point: ``stalab <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Exit codes: 0 success, 1 numeric or acceptance failure, 2 usage or config error.
"""

import argparse
import copy
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from stalab import attack as atk
from stalab import evaluation as ev
from stalab import gradcheck as gc
from stalab.renderer import Scene, TextureMap, default_object, default_scene, noise_texture, render_sequence, save_png
from stalab.siamese import VictimConfig, build_victim, load_checkpoint, save_checkpoint
from stalab.tracker import read_track_csv, write_track_csv

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "scene": {"path": None, "occluders": True, "n_frames": 60, "speed": 3.0},
    "victim": {"checkpoint": None, "head": "symmetric"},
    "attack": {"victims": [], "eot": {}},
    "track": {"texture": None, "penalty": 0.3},
    "eval": {"track": None, "baseline": None, "tau": 0.1},
    "transfer": {"victims": [{"head": "rpn", "seed": 0}, {"head": "symmetric", "seed": 0}],
                 "textures": {}, "combined": True},
    "gradcheck": {"coords": 100},
}

# sections whose extra keys are validated against a dataclass instead of DEFAULTS
_OPEN_SECTIONS = {"victim": VictimConfig, "attack": atk.AttackConfig}


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        here = f"{path}{k}"
        section = path.rstrip(".")
        if k not in out:
            cls = _OPEN_SECTIONS.get(section)
            if cls is None or k not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown config key {here!r}")
            out[k] = v
        elif isinstance(out[k], dict) and k not in ("eot", "textures"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {here!r} must be an object")
            out[k] = _merge(out[k], v, here + ".")
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(cfg, item):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = item.split("=", 1)
    parts = key.split(".")
    patch = _parse_value(value)
    for p in reversed(parts):
        patch = {p: patch}
    return _merge(cfg, patch)


def _check_paths(cfg):
    paths = [cfg["scene"]["path"], cfg["victim"]["checkpoint"], cfg["track"]["texture"],
             cfg["eval"]["track"], cfg["eval"]["baseline"]]
    paths += [p for p in cfg["transfer"]["textures"].values() if p not in ("clean", "random")]
    for p in paths:
        if p is not None and p not in ("clean", "random") and not os.path.exists(p):
            raise ConfigError(f"referenced file does not exist: {p}")


def load_config(path=None, seed=None, out=None, sets=()):
    """Defaults <- JSON file <- ``--set`` overrides <- ``--seed``/``--out``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    for item in sets:
        cfg = _apply_set(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    _check_paths(cfg)
    return cfg


# ---------------------------------------------------------------- builders

def _scene(cfg):
    sc = cfg["scene"]
    if sc["path"]:
        return Scene.load(sc["path"])
    return default_scene(occluders=bool(sc["occluders"]), n_frames=int(sc["n_frames"]), speed=float(sc["speed"]))


def _victim_config(spec, seed):
    spec = dict(spec)
    spec.pop("checkpoint", None)
    spec.setdefault("seed", seed)
    return VictimConfig.from_dict(spec)


def _victim(cfg):
    if cfg["victim"]["checkpoint"]:
        return load_checkpoint(cfg["victim"]["checkpoint"])
    return build_victim(_victim_config(cfg["victim"], cfg["seed"]))


def _attack_config(cfg, head):
    d = {k: v for k, v in cfg["attack"].items() if k not in ("victims", "eot")}
    d.setdefault("seed", cfg["seed"])
    d["head"] = head
    return atk.AttackConfig.from_dict(d)


def _texture(spec, seed, shape):
    if spec is None or spec == "clean":
        return None
    if spec == "random":
        return noise_texture(shape[0], shape[1], seed)
    if str(spec).endswith(".npy"):
        return TextureMap.load_sidecar(spec)
    return TextureMap.load_png(spec)


def _object(scene, texture=None):
    return default_object(texture, size=tuple(scene.object_size))


def _outdir(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _write_texture(out, stem, tex):
    tex.save_png(os.path.join(out, stem + ".png"))
    tex.save_sidecar(os.path.join(out, stem + ".npy"))


# ---------------------------------------------------------------- commands

def cmd_scene(cfg):
    out = _outdir(cfg)
    scene = _scene(cfg)
    scene.save(os.path.join(out, "scene.json"))
    frames, boxes = render_sequence(scene, _object(scene))
    with open(os.path.join(out, "ground_truth.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cx", "cy", "w", "h"])
        for t, b in enumerate(boxes):
            w.writerow([t] + [repr(float(v)) for v in b.as_tuple()])
    fdir = os.path.join(out, "frames")
    os.makedirs(fdir, exist_ok=True)
    for t, f in enumerate(frames):
        save_png(os.path.join(fdir, f"frame_{t:03d}.png"), np.transpose(f, (1, 2, 0)))
    print(f"scene: {len(boxes)} frames, {len(scene.occluders)} occluders -> {out}")
    return EXIT_OK


def cmd_calibrate(cfg):
    out = _outdir(cfg)
    victim = _victim(cfg)
    scene = _scene(cfg)
    save_checkpoint(victim, os.path.join(out, "victim.bin"))
    rep = ev.calibrate_tracker(victim, scene, _object(scene), penalty=cfg["track"]["penalty"])
    _dump(os.path.join(out, "calibration.json"), dataclasses.asdict(rep))
    print(f"calibration {victim.name}: mean IOU {rep.mean_iou:.3f} ({'pass' if rep.passed else 'FAIL'})")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_attack(cfg):
    out = _outdir(cfg)
    scene = _scene(cfg)
    obj = _object(scene)
    dist = atk.EotDistribution.from_dict(cfg["attack"]["eot"])
    specs = cfg["attack"]["victims"]
    if specs:
        victims = [build_victim(_victim_config(s, cfg["seed"])) for s in specs]
        config = _attack_config(cfg, victims[0].head_kind)
        result = atk.run_combined(victims, obj, config, dist=dist)
    else:
        victims = [_victim(cfg)]
        config = _attack_config(cfg, victims[0].head_kind)
        result = atk.run_sta(victims[0], obj, config, dist=dist)
    atk.save_config(os.path.join(out, "attack_config.json"), config)
    atk.write_loss_csv(os.path.join(out, "loss.csv"), result.loss_trace)
    _write_texture(out, "texture", result.texture)
    views = atk.evaluation_views(seed=cfg["seed"] + 1000, dist=dist)
    summary = {"l2": result.l2, "iterations": len(result.loss_trace), "victims": {}}
    for v in victims:
        clean = float(atk.target_scores(v, obj, obj.texture, views).mean())
        raw = float(atk.target_scores(v, obj, result.texture, views).mean())
        quant = float(atk.target_scores(v, obj, result.texture.quantized(), views).mean())
        summary["victims"][v.name] = {"clean": clean, "adversarial": raw, "adversarial_png": quant,
                                      "ratio": raw / clean, "ratio_png": quant / clean}
        print(f"attack {v.name}: target score {clean:.4f} -> {raw:.4f} (png {quant:.4f})")
    _dump(os.path.join(out, "summary.json"), summary)
    return EXIT_OK


def _track(cfg, victim, scene, texture):
    return ev.run_video(victim, scene, _object(scene), texture, cfg["track"]["penalty"])


def cmd_track(cfg):
    out = _outdir(cfg)
    scene = _scene(cfg)
    victim = _victim(cfg)
    tex = _texture(cfg["track"]["texture"], cfg["seed"], _object(scene).texture.data.shape)
    steps, boxes = _track(cfg, victim, scene, tex)
    write_track_csv(os.path.join(out, "track.csv"), steps)
    rep = ev.evaluate(steps, boxes, tau=cfg["eval"]["tau"])
    rep.save_json(os.path.join(out, "report.json"))
    rep.save_curves(os.path.join(out, "curves.csv"))
    print(f"track {victim.name}: mean IOU {rep.mean_iou:.3f}, drift frame {rep.drift_frame}")
    return EXIT_OK


def cmd_eval(cfg):
    out = _outdir(cfg)
    if not cfg["eval"]["track"]:
        raise ConfigError("eval needs eval.track (a tracking CSV)")
    scene = _scene(cfg)
    _, boxes = render_sequence(scene, _object(scene))
    steps = read_track_csv(cfg["eval"]["track"])
    base = read_track_csv(cfg["eval"]["baseline"]) if cfg["eval"]["baseline"] else None
    rep = ev.evaluate(steps, boxes, base, tau=cfg["eval"]["tau"])
    rep.save_json(os.path.join(out, "report.json"))
    rep.save_curves(os.path.join(out, "curves.csv"))
    drop = "n/a" if rep.score_drop is None else f"{rep.score_drop:.4f}"
    print(f"eval: mean IOU {rep.mean_iou:.3f}, drift frame {rep.drift_frame}, score drop {drop}")
    return EXIT_OK


def transfer_study(cfg, log=print):
    """Per-victim STA textures, optionally the combined texture, clean and
    uniform noise, each tracked by every victim.  Returns (matrix, textures)."""
    scene = _scene(cfg)
    obj = _object(scene)
    dist = atk.EotDistribution.from_dict(cfg["attack"]["eot"])
    victims = {}
    for spec in cfg["transfer"]["victims"]:
        v = build_victim(_victim_config(spec, cfg["seed"]))
        victims[v.name] = v
    textures = {}
    given = cfg["transfer"]["textures"]
    if given:
        for name, path in given.items():
            textures[name] = _texture(path, cfg["seed"], obj.texture.data.shape)
    else:
        for name, v in victims.items():
            log(f"transfer: attacking {name}")
            textures[name] = atk.run_sta(v, obj, _attack_config(cfg, v.head_kind), dist=dist).texture
        if cfg["transfer"]["combined"] and len(victims) > 1:
            log("transfer: combined attack")
            first = next(iter(victims.values()))
            textures["combined"] = atk.run_combined(list(victims.values()), obj,
                                                    _attack_config(cfg, first.head_kind), dist=dist).texture
        textures["clean"] = None
        textures["random"] = noise_texture(obj.texture.height, obj.texture.width, cfg["seed"])
    return ev.transfer_matrix(victims, textures, scene, obj, cfg["track"]["penalty"]), textures


def cmd_transfer(cfg):
    out = _outdir(cfg)
    matrix, textures = transfer_study(cfg)
    for name, tex in textures.items():
        if tex is not None:
            _write_texture(out, "texture_" + name, tex)
    matrix.save_csv(os.path.join(out, "transfer.csv"))
    matrix.save_json(os.path.join(out, "transfer.json"))
    width = max(len(r) for r in matrix.rows)
    print(" " * width + "".join(f"{c:>12}" for c in matrix.columns))
    for r, row in zip(matrix.rows, matrix.cells):
        print(f"{r:<{width}}" + "".join(f"{v:12.2f}" for v in row))
    return EXIT_OK


def cmd_gradcheck(cfg):
    out = _outdir(cfg)
    results = gc.run_all(cfg["seed"], int(cfg["gradcheck"]["coords"]))
    rep = gc.report(results)
    _dump(os.path.join(out, "gradcheck.json"), rep)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} coords={r.coords:4d} max rel err={r.max_rel_error:.2e}")
    return EXIT_OK if rep["passed"] else EXIT_NUMERIC


COMMANDS = {
    "scene": cmd_scene,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "track": cmd_track,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stalab", description="Texture attacks on Siamese trackers.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (victim, attack and noise textures)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. attack.iterations=50 or scene.occluders=false")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.set)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, KeyError, TypeError) as e:
        print(f"stalab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (atk.GradientError, FloatingPointError) as e:
        print(f"stalab: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"stalab: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
