"""Command-line pipeline: data generation, training, mask export, retrieval
evaluation and visualization.

Exit codes: 0 success, 1 for validation problems (bad arguments, files,
config), 2 for internal invariant violations.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, vision
from .autograd import NonFiniteError, ShapeError
from .config import ConfigError, RunConfig, load_config, load_synthetic_spec
from .panet import (InsufficientPartsError, PanetModel, PanetTrainConfig,
                    infer_evidence, sample_mask_set, train_panet)
from .pmnet import PmnetModel, extract_bundles
from .synthetic import gen_synthetic_dataset, load_split, stack_split
from .training import HulState, occlusion_augment, train_global_only, train_pmnet


class InvariantError(RuntimeError):
    """Internal state violated an invariant."""


# ---------------------------------------------------------------------------
# checkpoint helpers (models plus the meta needed to rebuild them)

def save_panet(path, model: PanetModel, cfg):
    state = {f"model/{k}": v for k, v in model.state_dict().items()}
    state["__meta__/num_ids"] = np.array([model.num_ids], dtype=np.float32)
    state["__meta__/image_size"] = np.array([model.image_size], dtype=np.float32)
    state["__meta__/widths"] = np.array(cfg.panet.widths, dtype=np.float32)
    state["__meta__/decoder_widths"] = np.array(cfg.panet.decoder_widths,
                                                dtype=np.float32)
    checkpoint.save(path, state)


def load_panet(path) -> PanetModel:
    state = checkpoint.load(path)
    try:
        num_ids = int(state["__meta__/num_ids"][0])
        image_size = int(state["__meta__/image_size"][0])
        widths = tuple(int(v) for v in state["__meta__/widths"])
        dec = tuple(int(v) for v in state["__meta__/decoder_widths"])
    except KeyError as e:
        raise checkpoint.CheckpointError(f"not a PANet checkpoint: missing {e}")
    model = PanetModel(num_ids, np.random.default_rng(0), widths=widths,
                       image_size=image_size, decoder_widths=dec)
    model.load_state_dict(
        {k[len("model/"):]: v for k, v in state.items() if k.startswith("model/")})
    return model


def save_pmnet(path, model: PmnetModel, hul: HulState, cfg):
    state = {f"model/{k}": v for k, v in model.state_dict().items()}
    state.update({f"hul/{k}": v for k, v in hul.state_dict().items()})
    meta = {
        "num_ids": [model.num_ids], "image_size": [model.image_size],
        "k": [model.k], "widths": cfg.panet.widths,
        "stream_width": [cfg.pmnet.stream_width],
        "stream_dim": [cfg.pmnet.stream_dim],
        "global_width": [cfg.pmnet.global_width],
        "global_dim": [cfg.pmnet.global_dim],
        "mam_reduction": [cfg.pmnet.mam_reduction],
    }
    for k, v in meta.items():
        state[f"__meta__/{k}"] = np.array(v, dtype=np.float32)
    checkpoint.save(path, state)


def load_pmnet(path) -> tuple[PmnetModel, HulState]:
    state = checkpoint.load(path)

    def meta(name):
        try:
            return state[f"__meta__/{name}"]
        except KeyError:
            raise checkpoint.CheckpointError(
                f"not a PMNet checkpoint: missing __meta__/{name}")

    model = PmnetModel(
        num_ids=int(meta("num_ids")[0]), rng=np.random.default_rng(0),
        k=int(meta("k")[0]), widths=tuple(int(v) for v in meta("widths")),
        image_size=int(meta("image_size")[0]),
        global_width=int(meta("global_width")[0]),
        global_dim=int(meta("global_dim")[0]),
        stream_width=int(meta("stream_width")[0]),
        stream_dim=int(meta("stream_dim")[0]),
        mam_reduction=int(meta("mam_reduction")[0]))
    model.load_state_dict(
        {k[len("model/"):]: v for k, v in state.items() if k.startswith("model/")})
    hul = HulState()
    hul_state = {k[len("hul/"):]: v for k, v in state.items() if k.startswith("hul/")}
    if hul_state:
        hul.load_state_dict(hul_state)
    return model, hul


# ---------------------------------------------------------------------------
# pseudo-label cache

def pseudo_masks_for(images, ids, cache_dir: Path, cfg) -> np.ndarray:
    """GrabCut-style pseudo labels, cached as PNG masks keyed by image id."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    masks = []
    pc = cfg.panet
    for img, image_id in zip(images, ids):
        path = cache_dir / f"{image_id}.png"
        if path.exists():
            masks.append(vision.read_mask_png(path))
            continue
        h, w = img.shape[:2]
        rect = vision.default_rect(w, h, pc.grabcut_margin)
        mask = vision.grabcut_lite(img, rect, iters=pc.grabcut_iters,
                                   seed=pc.seed,
                                   n_components=pc.grabcut_components,
                                   lam=pc.grabcut_lambda)
        vision.write_mask_png(path, mask)
        masks.append(mask)
    return np.stack(masks)


# ---------------------------------------------------------------------------
# eval helpers

def eval_lambdas(cfg, hul: HulState, mode: str):
    lam = cfg.eval.lambda_values()
    if lam is None:
        lam = hul.lambdas()
    if mode == "pmnet-only":
        lam = (lam[0], lam[1], 0.0)
    return lam


def bundles_for_split(pmnet, panet, samples, cfg, mode: str,
                      occlude_seed: int | None = None):
    images, identities, cameras, ids = stack_split(samples)
    if occlude_seed is not None:
        rng = np.random.default_rng(occlude_seed)
        images = np.stack([occlusion_augment(im, 1.0, rng) for im in images])
    mask_sets = None
    if mode == "full":
        if panet is None:
            raise ConfigError("--mode full needs --panet for part masks")
        mask_sets = []
        for img, image_id in zip(images, ids):
            ev = infer_evidence(panet, img, pmnet.k, cfg.panet.rel_threshold,
                                cfg.panet.refine_threshold, image_id=image_id)
            mask_sets.append(sample_mask_set(ev, seed=None))
    bundles = extract_bundles(pmnet, images, ids, mask_sets)
    return bundles, identities, cameras


def run_eval(args, occluded: bool) -> int:
    cfg = load_config(args.config)
    pmnet, hul = load_pmnet(args.pmnet)
    panet = load_panet(args.panet) if args.panet else None
    if args.mode == "full" and pmnet.k == 0:
        raise ConfigError("this checkpoint has no part streams; use pmnet-only")
    query = load_split(args.data, "query")
    gallery = load_split(args.data, "gallery")
    occ_seed = cfg.eval.seed if occluded else None
    qb, q_ids, q_cams = bundles_for_split(pmnet, panet, query, cfg, args.mode,
                                          occlude_seed=occ_seed)
    gb, g_ids, g_cams = bundles_for_split(pmnet, panet, gallery, cfg, args.mode)
    lam = eval_lambdas(cfg, hul, args.mode)
    report = evaluation.evaluate(qb, q_ids, gb, g_ids, lam,
                                 query_cams=q_cams, gallery_cams=g_cams,
                                 protocol=cfg.eval.protocol,
                                 rounds=cfg.eval.rounds, seed=cfg.eval.seed)
    report.write_csv(args.report)
    for metric, value in report.rows():
        print(f"{metric},{value}")
    return 0


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = load_synthetic_spec(args.spec)
    counts = gen_synthetic_dataset(spec, args.out, force=args.force)
    print(f"wrote {counts['total']} images to {args.out} "
          f"(train {counts['train']} / query {counts['query']} / "
          f"gallery {counts['gallery']})")
    return 0


def cmd_train_panet(args) -> int:
    cfg = load_config(args.config)
    train = load_split(args.data, "train")
    images, identities, _, ids = stack_split(train)
    cache = Path(args.data) / "pseudo_masks"
    masks = pseudo_masks_for(images, ids, cache, cfg)
    num_ids = len(np.unique(identities))
    model = PanetModel(num_ids, np.random.default_rng(cfg.panet.seed),
                       widths=cfg.panet.widths,
                       image_size=cfg.data.image_size,
                       decoder_widths=cfg.panet.decoder_widths)
    tc = PanetTrainConfig(epochs=cfg.panet.epochs,
                          batch_size=cfg.panet.batch_size, lr=cfg.panet.lr,
                          seed=cfg.panet.seed,
                          pcr_end_to_end=cfg.panet.pcr_end_to_end)
    trace = train_panet(model, images, identities, masks, tc)
    save_panet(args.out, model, cfg)
    print(f"trained {cfg.panet.epochs} epochs, "
          f"final loss {trace[-1]:.4f}, saved {args.out}")
    return 0


def cmd_gen_masks(args) -> int:
    cfg = load_config(args.config)
    panet = load_panet(args.panet)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_split(args.data, "train")
    k = cfg.pmnet.k
    for s in samples:
        ev = infer_evidence(panet, s.image, k, cfg.panet.rel_threshold,
                            cfg.panet.refine_threshold, image_id=s.image_id)
        ms = sample_mask_set(ev, seed=None)
        lines = [f"image_id {s.image_id}", f"k {ms.k}"]
        for j in range(ms.k):
            vision.write_mask_png(out / f"{s.image_id}_part{j}.png", ms.masks[j])
            x0, y0, x1, y1 = ms.image_bboxes()[j]
            cy, cx = ms.centroids[j]
            lines.append(f"part {j} bbox {x0} {y0} {x1} {y1} "
                         f"centroid {cy:.3f} {cx:.3f}")
        (out / f"{s.image_id}.txt").write_text("".join(l + "\n" for l in lines))
    print(f"wrote part masks for {len(samples)} images to {out}")
    return 0


def cmd_train_pmnet(args) -> int:
    cfg = load_config(args.config)
    panet = load_panet(args.panet)
    train = load_split(args.data, "train")
    images, identities, _, ids = stack_split(train)
    num_ids = len(np.unique(identities))
    pmnet = PmnetModel(num_ids, np.random.default_rng(cfg.pmnet.seed),
                       k=cfg.pmnet.k, widths=cfg.panet.widths,
                       image_size=cfg.data.image_size,
                       global_width=cfg.pmnet.global_width,
                       global_dim=cfg.pmnet.global_dim,
                       stream_width=cfg.pmnet.stream_width,
                       stream_dim=cfg.pmnet.stream_dim,
                       mam_reduction=cfg.pmnet.mam_reduction)
    log_path = str(args.out) + ".log.csv"
    hul = train_pmnet(pmnet, panet, images, identities, cfg.training,
                      log_path=log_path,
                      rel_threshold=cfg.panet.rel_threshold,
                      refine_threshold=cfg.panet.refine_threshold)
    save_pmnet(args.out, pmnet, hul, cfg)
    ss = hul.sigma_sq()
    lam = hul.lambdas()
    print(f"trained {cfg.training.epochs} epochs; "
          f"sigma^2=({ss['g']:.3f},{ss['s']:.3f},{ss['t']:.3f}) "
          f"lambda=({lam[0]:.2f},{lam[1]:.2f},{lam[2]:.2f}); saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    return run_eval(args, occluded=False)


def cmd_eval_occluded(args) -> int:
    return run_eval(args, occluded=True)


def cmd_visualize(args) -> int:
    from .viz import visualize_streams

    pmnet, _ = load_pmnet(args.pmnet)
    if pmnet.k == 0:
        raise ConfigError("checkpoint has no part streams to visualize")
    image = vision.read_png(args.image)
    if image.shape[0] != pmnet.image_size or image.shape[1] != pmnet.image_size:
        raise ConfigError(f"image must be {pmnet.image_size}x"
                          f"{pmnet.image_size}, got {image.shape[:2]}")
    written = visualize_streams(pmnet, image, args.out)
    print(f"wrote {len(written)} attention maps to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="partreid",
        description="Part-localizing vehicle re-identification pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-panet", help="train the part-attention network")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_panet)

    p = sub.add_parser("gen-masks", help="export part masks and sidecars")
    p.add_argument("--panet", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_masks)

    p = sub.add_parser("train-pmnet", help="train the part-mentored network")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--panet", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_pmnet)

    for name, fn in (("eval", cmd_eval), ("eval-occluded", cmd_eval_occluded)):
        p = sub.add_parser(name, help=f"retrieval evaluation"
                           f"{' with occluded queries' if 'occ' in name else ''}")
        p.add_argument("--pmnet", required=True)
        p.add_argument("--panet", default=None)
        p.add_argument("--data", required=True)
        p.add_argument("--mode", choices=("full", "pmnet-only"), default="full")
        p.add_argument("--report", required=True)
        p.add_argument("--config", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("visualize", help="export per-stream attention heat maps")
    p.add_argument("--pmnet", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("selftest", help="run gradient checks and oracles")
    p.set_defaults(fn=cmd_selftest)
    return ap


VALIDATION_ERRORS = (ConfigError, FileNotFoundError, FileExistsError,
                     checkpoint.CheckpointError, ValueError, OSError,
                     InsufficientPartsError)
INVARIANT_ERRORS = (InvariantError, NonFiniteError, ShapeError, AssertionError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except INVARIANT_ERRORS as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
