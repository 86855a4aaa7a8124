"""Evaluation battery: blind pairs, dense segmentation, zero-shot, reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import caption_tokenize

REPORT_SCHEMA_VERSION = 1


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# blind pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlindPairResult:
    """Per-family (correct, total) counts over blind pairs."""
    per_family: dict

    def accuracy(self, family):
        correct, total = self.per_family[family]
        if total == 0:
            raise EvalError(f"no pairs for family {family!r}")
        return correct / total

    @property
    def average(self):
        """Unweighted mean over families that have at least one pair."""
        fracs = [c / t for c, t in self.per_family.values() if t > 0]
        if not fracs:
            raise EvalError("no blind pairs to score")
        return float(np.mean(fracs))


def blind_pair_accuracy(model, pairs, corpus):
    """Score each pair on the 2x2 image-caption grid; both matches must win.

    A tie on either side counts as incorrect, so a degenerate encoder
    that maps everything to one point scores zero.
    """
    if not pairs:
        raise EvalError("no blind pairs to score")
    ids = sorted({p.scene_a for p in pairs} | {p.scene_b for p in pairs})
    missing = [i for i in ids if i not in corpus.by_id]
    if missing:
        raise EvalError(f"pairs reference unknown scenes {missing[:5]}")
    scenes = {i: corpus.by_id[i] for i in ids}
    img = model.encode_images(np.stack([scenes[i].image for i in ids]))
    txt = model.encode_texts([scenes[i].caption for i in ids])
    row = {i: k for k, i in enumerate(ids)}

    counts = {}
    for p in pairs:
        a, b = row[p.scene_a], row[p.scene_b]
        saa = float(img[a] @ txt[a])
        sab = float(img[a] @ txt[b])
        sba = float(img[b] @ txt[a])
        sbb = float(img[b] @ txt[b])
        correct = saa > sab and sbb > sba
        c, t = counts.get(p.differing_family, (0, 0))
        counts[p.differing_family] = (c + int(correct), t + 1)
    return BlindPairResult(per_family=counts)


# ---------------------------------------------------------------------------
# dense segmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegPrediction:
    labels: np.ndarray            # (32, 32) int, indices into the prompt list
    variant: str
    background: np.ndarray | None  # bool mask where max similarity fell below threshold


def dense_segment(model, image, class_tokens, variant="vanilla", background_threshold=None):
    """Label every pixel by its nearest class prompt in patch-embedding space.

    Patch tokens are compared per-variant, argmax breaks ties toward the
    lower prompt index, and the 8x8 patch grid is nearest-neighbor
    upsampled to pixels.
    """
    if not class_tokens:
        raise EvalError("need at least one class prompt")
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (32, 32, 3):
        raise EvalError(f"expected one (32, 32, 3) image, got {image.shape}")
    _, patches, _ = model.image_forward(image[None], variant=variant)
    feats = patches.data[0]
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-8)
    txt = model.encode_texts(class_tokens)
    sims = feats @ txt.T                       # (64, n_classes)
    patch_labels = np.argmax(sims, axis=1).reshape(8, 8)
    labels = np.repeat(np.repeat(patch_labels, 4, axis=0), 4, axis=1)
    bg = None
    if background_threshold is not None:
        below = (sims.max(axis=1) < background_threshold).reshape(8, 8)
        bg = np.repeat(np.repeat(below, 4, axis=0), 4, axis=1)
    return SegPrediction(labels=labels.astype(np.int64), variant=variant, background=bg)


def segment_mask(model, scene, variant="vanilla", background_threshold=None):
    """Predict a mask in the corpus class-id space (0 background, 1..3 shapes)."""
    prompts = [caption_tokenize(f"a {shape}") for shape in ("circle", "square", "triangle")]
    pred = dense_segment(model, scene.image, prompts, variant=variant,
                         background_threshold=background_threshold)
    mask = pred.labels + 1
    if pred.background is not None:
        mask = np.where(pred.background, 0, mask)
    return mask


def miou(pred, gt):
    """Mean IoU over every class present in either map; exact integer counts."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvalError(f"shape mismatch {pred.shape} vs {gt.shape}")
    classes = sorted(set(np.unique(pred)) | set(np.unique(gt)))
    ious = {}
    for c in classes:
        inter = int(np.sum((pred == c) & (gt == c)))
        union = int(np.sum((pred == c) | (gt == c)))
        ious[int(c)] = inter / union
    return float(np.mean(list(ious.values()))), ious


# ---------------------------------------------------------------------------
# zero-shot probes
# ---------------------------------------------------------------------------

def zeroshot_classify(model, images, labels, class_tokens):
    """Nearest class prompt per image; ties go to the lower class index."""
    labels = np.asarray(labels)
    if len(images) == 0:
        raise EvalError("no images to classify")
    if labels.min() < 0 or labels.max() >= len(class_tokens):
        raise EvalError("label out of range of the prompt list")
    img = model.encode_images(np.stack([np.asarray(x) for x in images]))
    txt = model.encode_texts(class_tokens)
    preds = np.argmax(img @ txt.T, axis=1)
    return float(np.mean(preds == labels)), preds


def retrieval_at_k(model, scenes, k):
    """Fraction of images whose own caption ranks in the top k candidates.

    Similarity ties are broken toward the lower candidate index.
    """
    n = len(scenes)
    if n == 0:
        raise EvalError("no scenes for retrieval")
    if not 1 <= k <= n:
        raise EvalError(f"k must be in [1, {n}], got {k}")
    img = model.encode_images(np.stack([s.image for s in scenes]))
    txt = model.encode_texts([s.caption for s in scenes])
    sims = img @ txt.T
    hits = 0
    for i in range(n):
        order = np.lexsort((np.arange(n), -sims[i]))
        hits += int(i in order[:k])
    return hits / n


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _format_cell(column, value):
    if value is None:
        return ""
    if column.endswith("loss"):
        return f"{value:.4f}"
    return f"{100.0 * value:.1f}"


def _check_rows(rows):
    for r in rows:
        if r.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema {r.get('schema_version')!r}")
        if "label" not in r:
            raise EvalError("report row missing a label")
    if rows:
        cols = [k for k in rows[0] if k not in ("schema_version", "label")]
        for r in rows[1:]:
            if [k for k in r if k not in ("schema_version", "label")] != cols:
                raise EvalError("report rows disagree on columns")
        return cols
    return []


def render_csv(rows):
    """Metric rows as CSV text; identical rows give identical bytes."""
    cols = _check_rows(rows)
    lines = [",".join(["schema_version", "label"] + cols)]
    for r in rows:
        cells = [str(REPORT_SCHEMA_VERSION), str(r["label"])]
        cells += [_format_cell(c, r[c]) for c in cols]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def render_report(rows):
    """Human-readable table; flags a row that wins on both loss and accuracy.

    Losses print with 4 decimals, accuracies as percentages with 1.
    """
    cols = _check_rows(rows)
    header = ["label"] + cols
    body = [[str(r["label"])] + [_format_cell(c, r[c]) for c in cols] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = [f"report (schema v{REPORT_SCHEMA_VERSION})",
             "  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)))

    loss_cols = [c for c in cols if c.endswith("loss")]
    acc_cols = [c for c in cols if not c.endswith("loss")]
    if len(rows) >= 2:
        for lc in loss_cols:
            if any(r[lc] is None for r in rows):
                continue
            best = min(range(len(rows)), key=lambda i: rows[i][lc])
            for ac in acc_cols:
                if any(r[ac] is None for r in rows):
                    continue
                top = max(range(len(rows)), key=lambda i: rows[i][ac])
                if best == top and \
                        sum(rows[i][lc] == rows[best][lc] for i in range(len(rows))) == 1 and \
                        sum(rows[i][ac] == rows[top][ac] for i in range(len(rows))) == 1:
                    lines.append(f"note: {rows[best]['label']} has both the lowest "
                                 f"{lc} and the highest {ac}")
    return "\n".join(lines) + "\n"
