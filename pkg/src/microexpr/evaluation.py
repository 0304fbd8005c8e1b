"""Evaluation: confusion matrices, per-class and macro metrics, MAE over
class indices, and the two inference modes (averaged multi-crop softmax and
nearest neighbor in feature space).

Multiclass reduction is one-vs-rest per class.  0/0 ratios are defined as 0.
Two accuracies are reported side by side: plain trace accuracy and the
one-vs-rest macro average of (TP+TN)/total, which differ by construction.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .dataset import GrayImage, Manifest, ManifestError
from .features import FeatureConfig, crop_regions, handcrafted_descriptor
from .network import ModelState, forward, model_dtype, softmax
from .training import prepare_image

MULTICROP_SOURCE = 48
MULTICROP_WINDOW = 42


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[t][p] = samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f_measure: float
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassMetrics, ...]
    macro: dict[str, float]
    accuracy_trace: float
    accuracy_ovr_macro: float
    mae: float | None = None


def confusion(true: np.ndarray, pred: np.ndarray, classes: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError("true/pred must be equal-length 1-D label vectors")
    for name, vec in (("true", true), ("pred", pred)):
        if vec.size and (vec.min() < 0 or vec.max() >= classes):
            raise ValueError(f"{name} label out of range [0,{classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics(cm: ConfusionMatrix, class_names: tuple[str, ...] | None = None) -> MetricsReport:
    """One-vs-rest TP/FP/FN/TN per class, then precision, recall, F-measure,
    sensitivity and specificity applied literally; 0/0 is defined as 0."""
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    classes = counts.shape[0]
    if class_names is None:
        class_names = tuple(f"class_{k}" for k in range(classes))
    if len(class_names) != classes:
        raise ValueError("class_names length mismatch")

    per_class: list[ClassMetrics] = []
    ovr_accuracies: list[float] = []
    for k in range(classes):
        tp = float(counts[k, k])
        fp = float(counts[:, k].sum() - counts[k, k])
        fn = float(counts[k, :].sum() - counts[k, k])
        tn = float(total - tp - fp - fn)
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f_measure = _ratio(2.0 * precision * recall, precision + recall)
        sensitivity = _ratio(tp, tp + fn)
        specificity = _ratio(tn, fp + tn)
        per_class.append(
            ClassMetrics(class_names[k], precision, recall, f_measure, sensitivity, specificity)
        )
        ovr_accuracies.append((tp + tn) / total)

    macro = {
        "precision": float(np.mean([m.precision for m in per_class])),
        "recall": float(np.mean([m.recall for m in per_class])),
        "f_measure": float(np.mean([m.f_measure for m in per_class])),
        "sensitivity": float(np.mean([m.sensitivity for m in per_class])),
        "specificity": float(np.mean([m.specificity for m in per_class])),
    }
    return MetricsReport(
        per_class=tuple(per_class),
        macro=macro,
        accuracy_trace=float(np.trace(counts) / total),
        accuracy_ovr_macro=float(np.mean(ovr_accuracies)),
    )


def mae(true, pred) -> float:
    """Mean absolute difference of class indices under the canonical order."""
    true = np.asarray(true, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if true.shape != pred.shape or true.size == 0:
        raise ValueError("need equal-length nonempty label vectors")
    return float(np.abs(true - pred).mean())


# ---------------------------------------------------------------------------
# Inference


def _prepared_pixels(model: ModelState, img: GrayImage) -> np.ndarray:
    return prepare_image(img, model).pixels


def multicrop_batch(px: np.ndarray) -> np.ndarray:
    """The ten 42x42 test views of a 48x48 image: four corners plus center,
    then the same five mirrored; shape (10, 42, 42)."""
    if px.shape != (MULTICROP_SOURCE, MULTICROP_SOURCE):
        raise ValueError(f"expected {MULTICROP_SOURCE}x{MULTICROP_SOURCE} image")
    margin = MULTICROP_SOURCE - MULTICROP_WINDOW
    center = margin // 2
    offsets = ((0, 0), (0, margin), (margin, 0), (margin, margin), (center, center))
    crops = [px[y : y + MULTICROP_WINDOW, x : x + MULTICROP_WINDOW] for y, x in offsets]
    crops += [c[:, ::-1] for c in crops]
    return np.stack(crops)


def multicrop_predict(model: ModelState, img: GrayImage) -> tuple[int, np.ndarray]:
    """Average the softmax over the ten crop views; ties break to the lowest
    class index.  Defined for the fusion architecture."""
    if model.arch.kind != "fusion":
        raise ValueError("multicrop prediction requires the fusion architecture")
    views = multicrop_batch(_prepared_pixels(model, img)).astype(model_dtype(model))
    logits, _, _ = forward(model, views, "eval")
    probs = softmax(logits).mean(axis=0)
    return int(np.argmax(probs)), probs


def extract_features(model: ModelState, img: GrayImage) -> np.ndarray:
    """Feature vector of the center crop in eval mode (the representation the
    nearest-feature rule compares)."""
    px = _prepared_pixels(model, img)
    if model.arch.kind == "fusion":
        if px.shape != (MULTICROP_SOURCE, MULTICROP_SOURCE):
            raise ValueError(f"expected {MULTICROP_SOURCE}x{MULTICROP_SOURCE} image")
        center = (MULTICROP_SOURCE - MULTICROP_WINDOW) // 2
        crop = px[center : center + MULTICROP_WINDOW, center : center + MULTICROP_WINDOW]
        batch = crop[None, :, :]
    else:
        desc = handcrafted_descriptor(crop_regions(GrayImage(px)), FeatureConfig())
        batch = desc.values[None, :]
    _, features, _ = forward(model, batch.astype(model_dtype(model)), "eval")
    return features[0]


def nearest_feature_predict(
    model: ModelState, img: GrayImage, gallery: list[tuple[np.ndarray, int]]
) -> tuple[int, float]:
    """Label of the gallery entry whose feature vector is L2-closest to the
    input's; ties break to the lowest gallery index."""
    if not gallery:
        raise ValueError("empty gallery")
    feat = extract_features(model, img)
    best_label = -1
    best_dist = float("inf")
    for gallery_feat, label in gallery:
        if gallery_feat.shape != feat.shape:
            raise ValueError("gallery feature dimension mismatch")
        dist = float(np.linalg.norm(feat - gallery_feat))
        if dist < best_dist:
            best_dist = dist
            best_label = label
    return best_label, best_dist


def single_predict(model: ModelState, img: GrayImage) -> tuple[int, np.ndarray]:
    """Plain eval-mode softmax prediction (descriptor models have no crop
    geometry, so this is their softmax inference)."""
    if model.arch.kind == "fusion":
        return multicrop_predict(model, img)
    px = _prepared_pixels(model, img)
    desc = handcrafted_descriptor(crop_regions(GrayImage(px)), FeatureConfig())
    logits, _, _ = forward(model, desc.values[None, :].astype(model_dtype(model)), "eval")
    probs = softmax(logits)[0]
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# Reports


def build_report(
    true, pred, class_names: tuple[str, ...]
) -> tuple[MetricsReport, ConfusionMatrix]:
    cm = confusion(true, pred, len(class_names))
    report = metrics(cm, class_names)
    report = MetricsReport(
        per_class=report.per_class,
        macro=report.macro,
        accuracy_trace=report.accuracy_trace,
        accuracy_ovr_macro=report.accuracy_ovr_macro,
        mae=mae(true, pred),
    )
    return report, cm


def report_to_json(report: MetricsReport, protocol: dict[str, object]) -> str:
    payload = {
        "accuracy_trace": report.accuracy_trace,
        "accuracy_ovr_macro": report.accuracy_ovr_macro,
        "mae": report.mae,
        "per_class": [
            {
                "name": m.name,
                "precision": m.precision,
                "recall": m.recall,
                "f_measure": m.f_measure,
                "sensitivity": m.sensitivity,
                "specificity": m.specificity,
            }
            for m in report.per_class
        ],
        "macro": report.macro,
        "protocol": protocol,
    }
    return json.dumps(payload, indent=2) + "\n"


def confusion_to_csv(cm: ConfusionMatrix, class_names: tuple[str, ...]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["true"] + list(class_names))
    for k, name in enumerate(class_names):
        writer.writerow([name] + [int(v) for v in cm.counts[k]])
    return out.getvalue()


def evaluate_external_predictions(
    manifest: Manifest, predictions: dict[str, str]
) -> tuple[np.ndarray, np.ndarray]:
    """Match a {path: predicted label name} table against a manifest; returns
    (true, pred) index vectors in manifest order."""
    true: list[int] = []
    pred: list[int] = []
    for path, label, _ in manifest.entries:
        if path not in predictions:
            raise ManifestError(f"no prediction for {path!r}")
        name = predictions[path]
        if name not in manifest.class_names:
            raise ManifestError(f"predicted label {name!r} not in manifest classes")
        true.append(manifest.label_index(label))
        pred.append(manifest.label_index(name))
    return np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)
