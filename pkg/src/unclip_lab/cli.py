"""Command line entry points for the full encoder-inversion workflow."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import evals as EV
from . import finetune as FT
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .clip import ClipError, ClipModel, retrieval_at_1, train_clip
from .config import ConfigError, load_config, write_default_config
from .corpus import (CorpusError, SHAPES, caption_detokenize, caption_render, load_corpus,
                     generate_corpus, mine_blind_pairs, caption_tokenize)
from .diffusion import Denoiser, DiffusionError, make_schedule, sample, train_unclip
from .evals import EvalError
from .finetune import FinetuneError
from .optim import OptimError
from .ppm import PpmError, export_ppm
from .rng import RngStream
from .tensor import AutogradError

ENV_ROOT = "UNCLIP_LAB_ROOT"

_ERRORS = (AutogradError, CheckpointError, ClipError, ConfigError, CorpusError,
           DiffusionError, EvalError, FinetuneError, OptimError, PpmError,
           FileNotFoundError)


class _Workspace:
    """Paths and lazily loaded artifacts under one run directory."""

    def __init__(self, root, config_path=None):
        self.root = root
        os.makedirs(root, exist_ok=True)
        os.makedirs(os.path.join(root, "metrics"), exist_ok=True)
        cfg = config_path or self.path("config.ini")
        if not os.path.exists(cfg):
            write_default_config(cfg)
        self.config = load_config(cfg)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def schedule(self):
        d = self.config["diffusion"]
        return make_schedule(d["timesteps"], d["beta_min"], d["beta_max"])

    def corpus(self):
        return load_corpus(self.path("corpus.bin"))

    def corpus_digest(self):
        with open(self.path("corpus.bin"), "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()[:16]

    def load_encoder(self, name="clip.ckpt"):
        arrays, meta = load_checkpoint(self.path(name), expected_kind="clip")
        model = ClipModel(seed=0)
        model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("proj.")})
        return model, meta

    def load_denoiser(self):
        arrays, meta = load_checkpoint(self.path("unclip.ckpt"), expected_kind="unclip")
        den = Denoiser(seed=0)
        den.load_state_dict(arrays)
        return den, meta

    def save_encoder(self, name, model, seed, epoch=0, extra=None):
        arrays = model.state_dict()
        if extra:
            arrays.update(extra)
        save_checkpoint(self.path(name), "clip", arrays, epoch=epoch,
                        config_hash=self.config.digest(), rng_state=f"seed={seed}")

    def write_metrics(self, name, rows):
        payload = {"corpus_digest": self.corpus_digest(),
                   "config_hash": self.config.digest(), "rows": rows}
        tmp = self.path("metrics", f"{name}.json.tmp")
        with open(tmp, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=1)
        os.replace(tmp, self.path("metrics", f"{name}.json"))


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(ws, args):
    cfg = ws.config.corpus_config()
    generate_corpus(cfg, args.seed, path=ws.path("corpus.bin"))
    corpus = ws.corpus()
    print(f"wrote {ws.path('corpus.bin')}: {len(corpus.scenes)} scenes "
          f"({len(corpus.split('train'))} train / {len(corpus.split('val'))} val / "
          f"{len(corpus.split('test'))} test)")


def cmd_inspect(ws, args):
    corpus = ws.corpus()
    if args.scene not in corpus.by_id:
        raise CorpusError(f"no scene with id {args.scene}")
    s = corpus.by_id[args.scene]
    print(f"scene {s.scene_id} [{s.split}]")
    print(f"  caption: {caption_detokenize(s.caption)}")
    print(f"  attrs: {s.attrs}")
    print(f"  mask classes: {sorted(int(c) for c in np.unique(s.mask))}")
    if args.dump_ppm:
        export_ppm(args.dump_ppm, s.image)
        print(f"  image written to {args.dump_ppm}")


def cmd_train_clip(ws, args):
    corpus = ws.corpus()
    model, curve = train_clip(corpus, ws.config.clip_config(), args.seed)
    ws.save_encoder("clip.ckpt", model, args.seed, epoch=ws.config["clip"]["steps"])
    _write_text(ws.path("clip_curve.csv"),
                "step,loss\n" + "".join(f"{s},{l:.6f}\n" for s, l in enumerate(curve, 1)))
    r1 = retrieval_at_1(model, corpus.split("val"))
    print(f"wrote {ws.path('clip.ckpt')} (val retrieval@1 {100 * r1:.1f})")


def cmd_train_unclip(ws, args):
    corpus = ws.corpus()
    encoder, _ = ws.load_encoder()
    den, curve = train_unclip(encoder, corpus, ws.schedule(),
                              ws.config.unclip_config(), args.seed)
    save_checkpoint(ws.path("unclip.ckpt"), "unclip", den.state_dict(),
                    epoch=ws.config["diffusion"]["steps"],
                    config_hash=ws.config.digest(), rng_state=f"seed={args.seed}")
    _write_text(ws.path("unclip_curve.csv"),
                "step,loss\n" + "".join(f"{s},{l:.6f}\n" for s, l in enumerate(curve, 1)))
    print(f"wrote {ws.path('unclip.ckpt')} (final loss {curve[-1]:.4f})")


def cmd_finetune(ws, args):
    corpus = ws.corpus()
    encoder, _ = ws.load_encoder()
    den, _ = ws.load_denoiser()
    mode = FT.FinetuneMode.create(args.mode or ws.config["finetune"]["mode"], seed=args.seed)
    epochs = args.epochs if args.epochs is not None else ws.config["finetune"]["epochs"]
    records = FT.finetune(encoder, den, corpus, ws.schedule(), mode, epochs,
                          ws.config.finetune_config(), seed=args.seed)
    final = ClipModel(seed=0)
    final.load_state_dict(records[-1].encoder_state)
    extra = {}
    if mode.has_projector:
        extra = {"proj.w": mode.projector_w.data, "proj.b": mode.projector_b.data}
    ws.save_encoder("finetuned.ckpt", final, args.seed, epoch=records[-1].epoch, extra=extra)
    lines = ["epoch,train_loss,diagnostic_loss,drift_distance,drift_delta"]
    for r in records:
        tl = "" if r.train_loss is None else f"{r.train_loss:.6f}"
        lines.append(f"{r.epoch},{tl},{r.diagnostic:.6f},"
                     f"{r.drift.finetuned_distance:.6f},{r.drift.delta:.6f}")
    _write_text(ws.path("finetune_curve.csv"), "\n".join(lines) + "\n")
    print(f"wrote {ws.path('finetuned.ckpt')} "
          f"(diagnostic {records[0].diagnostic:.4f} -> {records[-1].diagnostic:.4f}, "
          f"generator checksum {records[-1].generator_checksum[:12]} unchanged="
          f"{records[0].generator_checksum == records[-1].generator_checksum})")


def _both_encoders(ws):
    out = [("original", ws.load_encoder("clip.ckpt")[0])]
    if os.path.exists(ws.path("finetuned.ckpt")):
        out.append(("finetuned", ws.load_encoder("finetuned.ckpt")[0]))
    return out


def cmd_diagnose(ws, args):
    corpus = ws.corpus()
    den, _ = ws.load_denoiser()
    schedule = ws.schedule()
    test = corpus.split("test")
    bank = FT.make_noise_bank(test, schedule, ws.config["finetune"]["bank_seed"])
    rows = []
    for label, enc in _both_encoders(ws):
        loss = FT.diagnostic_loss(enc, den, test, bank, schedule)
        rows.append({"schema_version": EV.REPORT_SCHEMA_VERSION, "label": label,
                     "diagnostic_loss": loss})
        print(f"{label}: diagnostic loss {loss:.4f}")
    ws.write_metrics("diagnose", rows)


def cmd_sample(ws, args):
    corpus = ws.corpus()
    den, _ = ws.load_denoiser()
    name = "finetuned.ckpt" if args.encoder == "finetuned" else "clip.ckpt"
    enc, _ = ws.load_encoder(name)
    test = corpus.split("test")
    scene = corpus.by_id[args.scene] if args.scene is not None else test[0]
    cond = enc.encode_images(scene.image[None])
    img = sample(den, cond, ws.schedule(), args.seed, mode=args.mode)
    out = args.output or ws.path(f"sample_{scene.scene_id}.ppm")
    export_ppm(out, img)
    print(f"wrote {out} (conditioned on scene {scene.scene_id}: "
          f"{caption_detokenize(scene.caption)})")


def cmd_eval_blind(ws, args):
    corpus = ws.corpus()
    encoders = _both_encoders(ws)
    miner = encoders[0][1]
    pairs, warnings = mine_blind_pairs(corpus.split("test"), miner,
                                       threshold=ws.config["eval"]["blind_threshold"],
                                       per_family=ws.config["eval"]["per_family_cap"])
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    rows = []
    for label, enc in encoders:
        res = EV.blind_pair_accuracy(enc, pairs, corpus)
        row = {"schema_version": EV.REPORT_SCHEMA_VERSION, "label": label,
               "blind_pair_avg": res.average}
        for fam in sorted(res.per_family):
            c, t = res.per_family[fam]
            row[f"blind_{fam}"] = c / t if t else None
        rows.append(row)
        print(f"{label}: blind pair average {100 * res.average:.1f} over {len(pairs)} pairs")
    ws.write_metrics("blind", rows)


def cmd_eval_dense(ws, args):
    corpus = ws.corpus()
    test = corpus.split("test")
    bg = ws.config["eval"]["background_threshold"]
    rows = []
    for label, enc in _both_encoders(ws):
        row = {"schema_version": EV.REPORT_SCHEMA_VERSION, "label": label}
        for variant in ("vanilla", "value_extract", "correlative_attn", "residual_free"):
            scores = [EV.miou(EV.segment_mask(enc, s, variant=variant,
                                              background_threshold=bg), s.mask)[0]
                      for s in test]
            row[f"miou_{variant}"] = float(np.mean(scores))
            print(f"{label}/{variant}: miou {100 * row[f'miou_{variant}']:.1f}")
        rows.append(row)
    ws.write_metrics("dense", rows)


def cmd_eval_zeroshot(ws, args):
    corpus = ws.corpus()
    test = corpus.split("test")
    prompts = [caption_tokenize(f"a {s}") for s in SHAPES]
    labels = [SHAPES.index(s.attrs.shape_class) for s in test]
    k = ws.config["eval"]["retrieval_k"]
    rows = []
    for label, enc in _both_encoders(ws):
        acc, _ = EV.zeroshot_classify(enc, [s.image for s in test], labels, prompts)
        rk = EV.retrieval_at_k(enc, test, k)
        rows.append({"schema_version": EV.REPORT_SCHEMA_VERSION, "label": label,
                     "zeroshot_shape": acc, f"retrieval_at_{k}": rk})
        print(f"{label}: zero-shot shape {100 * acc:.1f}, retrieval@{k} {100 * rk:.1f}")
    ws.write_metrics("zeroshot", rows)


def cmd_report(ws, args):
    digest = ws.corpus_digest()
    merged = {}
    names = ("diagnose", "blind", "dense", "zeroshot")
    for name in names:
        path = ws.path("metrics", f"{name}.json")
        if not os.path.exists(path):
            continue
        with open(path) as f:
            payload = json.load(f)
        if payload["corpus_digest"] != digest:
            raise EvalError(f"metrics/{name}.json was computed on a different corpus "
                            f"({payload['corpus_digest']} vs {digest})")
        for row in payload["rows"]:
            merged.setdefault(row["label"], {"schema_version": row["schema_version"],
                                             "label": row["label"]})
            merged[row["label"]].update({k: v for k, v in row.items()
                                         if k not in ("schema_version", "label")})
    rows = [merged[k] for k in ("original", "finetuned") if k in merged]
    rows += [v for k, v in sorted(merged.items()) if k not in ("original", "finetuned")]
    text = EV.render_report(rows)
    _write_text(ws.path("report.txt"), text)
    _write_text(ws.path("metrics.csv"), EV.render_csv(rows))
    print(text, end="")


def cmd_pipeline(ws, args):
    for fn in (cmd_gen_data, cmd_train_clip, cmd_train_unclip, cmd_finetune,
               cmd_diagnose, cmd_eval_blind, cmd_eval_dense, cmd_eval_zeroshot,
               cmd_report):
        fn(ws, args)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="unclip-lab",
                                description="finetune a contrastive image encoder "
                                            "through a frozen diffusion decoder")
    p.add_argument("--out", default=None,
                   help=f"run directory (default ${ENV_ROOT} or ./runs)")
    p.add_argument("--config", default=None, help="path to the run config file")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    add("gen-data", cmd_gen_data, help="generate the synthetic captioned-shapes corpus")
    sp = add("inspect", cmd_inspect, help="print one scene from the corpus")
    sp.add_argument("--scene", type=int, required=True)
    sp.add_argument("--dump-ppm", default=None)
    add("train-clip", cmd_train_clip, help="train the contrastive encoder")
    add("train-unclip", cmd_train_unclip, help="train the conditioned diffusion decoder")
    sp = add("finetune", cmd_finetune, help="finetune the encoder through the frozen decoder")
    sp.add_argument("--mode", choices=FT.VARIANTS, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    add("diagnose", cmd_diagnose, help="banked diagnostic loss for each encoder")
    sp = add("sample", cmd_sample, help="draw an image from the decoder")
    sp.add_argument("--scene", type=int, default=None)
    sp.add_argument("--mode", choices=("ancestral", "deterministic"), default="ancestral")
    sp.add_argument("--encoder", choices=("original", "finetuned"), default="original")
    sp.add_argument("--output", default=None)
    add("eval-blind", cmd_eval_blind, help="blind pair accuracy")
    add("eval-dense", cmd_eval_dense, help="dense segmentation miou")
    add("eval-zeroshot", cmd_eval_zeroshot, help="zero-shot classification and retrieval")
    add("report", cmd_report, help="merge metrics into a report")
    sp = add("pipeline", cmd_pipeline, help="run the whole workflow end to end")
    sp.add_argument("--mode", choices=FT.VARIANTS, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    root = args.out or os.environ.get(ENV_ROOT) or "runs"
    try:
        ws = _Workspace(root, config_path=args.config)
        args.fn(ws, args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
