"""Condition fidelity, Frechet feature distance and the per-run metrics report."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .conditions import cond_channels, extract

REPORT_COLUMNS = (
    "axis", "value", "seed", "fidelity", "frechet", "accuracy", "seconds_per_sample", "guided_steps",
)
MIN_FRECHET_SAMPLES = 64


def per_sample_fidelity(samples: np.ndarray, c_ext: np.ndarray, kind: str,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Squared distance (mean over pixels) between re-extracted conditions and targets.

    ``samples`` are (N, C, H, W) in [-1, 1]; ``c_ext`` is (N | 1, Cc, H, W).
    """
    samples = np.asarray(samples)
    c_ext = np.asarray(c_ext)
    if c_ext.ndim == 3:
        c_ext = c_ext[None]
    want = cond_channels(kind, samples.shape[1])
    if c_ext.shape[1] != want:
        raise ValueError(f"{kind} targets have {want} channels, got {c_ext.shape[1]}")
    if c_ext.shape[0] not in (1, len(samples)):
        raise ValueError("target batch does not match the sample batch")
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        unit = np.clip((s + 1.0) * 0.5, 0.0, 1.0)
        got = extract(kind, unit, rng)
        target = c_ext[i if c_ext.shape[0] > 1 else 0]
        out[i] = float(((got - target) ** 2).mean())
    return out


def fidelity_metric(samples: np.ndarray, c_ext: np.ndarray, kind: str) -> float:
    return float(per_sample_fidelity(samples, c_ext, kind).mean())


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) * 0.5)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^(1/2))`` via symmetric eigendecompositions.

    ``tr((AB)^(1/2)) = tr((A^(1/2) B A^(1/2))^(1/2))``; negative eigenvalues
    from round-off are clamped to zero.
    """
    ra = _sym_sqrt(cov_a)
    m = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((m + m.T) * 0.5)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6,
                     min_samples: int = MIN_FRECHET_SAMPLES) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if len(a) < min_samples or len(b) < min_samples:
        raise ValueError(f"need at least {min_samples} samples per set, got {len(a)} and {len(b)}")
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + jitter * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + jitter * np.eye(d)
    return gaussian_frechet(a.mean(0), cov_a, b.mean(0), cov_b)


def frechet_feature_distance(set_a: np.ndarray, set_b: np.ndarray, classifier) -> float:
    from .training import predict

    _, fa = predict(classifier, set_a)
    _, fb = predict(classifier, set_b)
    return frechet_distance(fa, fb)


def class_accuracy(samples: np.ndarray, shape_labels: np.ndarray, classifier) -> float:
    from .training import predict

    logits, _ = predict(classifier, samples)
    return float((logits.argmax(1) == np.asarray(shape_labels)).mean())


@dataclass
class MetricsReport:
    fidelity: float
    frechet: float | None  # None when the set is too small for a covariance fit
    accuracy: float
    seconds_per_sample: float
    guided_steps: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")
        if self.frechet is not None and self.frechet < 0:
            raise ValueError("Frechet distance must be non-negative")

    def row(self, axis: str, value, seed: int) -> dict:
        out = {"axis": axis, "value": value, "seed": seed}
        out.update(asdict(self))
        if out["frechet"] is None:
            out["frechet"] = ""
        return out
