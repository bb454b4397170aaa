""" Oracle concept detector: nearest centroid, accepted only inside radius_multiplier * sigma """
from typing import List, Optional, Sequence

import numpy as np

from schema.records import DetectorSpec


def train_detector(dataset, radius_multiplier: float = 3.0, min_samples: int = 10) -> DetectorSpec:
    """ Per-concept sample mean and isotropic std (root of the mean per-coordinate variance) """
    points = np.asarray(dataset.points, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    concepts, centroids, sigmas = [], [], []
    for concept in dataset.concepts:
        members = points[labels == concept]
        if len(members) < min_samples:
            raise ValueError(f"concept {concept!r} has {len(members)} samples; need at least {min_samples}")
        concepts.append(concept)
        centroids.append(members.mean(axis=0).tolist())
        sigmas.append(float(np.sqrt(members.var(axis=0, ddof=1).mean())))
    return DetectorSpec(concepts=concepts, centroids=centroids, sigmas=sigmas,
                        radius_multiplier=radius_multiplier)


def centroid_distances(detector: DetectorSpec, samples) -> np.ndarray:
    """ (N, K) Euclidean distances from samples to every centroid """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    c = np.asarray(detector.centroids, dtype=np.float64)
    return np.sqrt(((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1))


def detect_batch(detector: DetectorSpec, samples) -> List[Optional[str]]:
    dists = centroid_distances(detector, samples)
    # argmin keeps the first minimum: ties go to the lower-indexed concept
    nearest = dists.argmin(axis=1)
    radii = detector.radius_multiplier * np.asarray(detector.sigmas)
    verdicts = []
    for row, k in enumerate(nearest):
        verdicts.append(detector.concepts[k] if dists[row, k] <= radii[k] else None)
    return verdicts


def detect(detector: DetectorSpec, sample) -> Optional[str]:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 1 or not np.isfinite(sample).all():
        raise ValueError("detect expects one finite D-vector")
    return detect_batch(detector, sample[None, :])[0]


def distance_to_concept(detector: DetectorSpec, samples, concept: str) -> np.ndarray:
    """ Distance in units of the concept radius; values <= 1 are accepted if nearest """
    k = detector.concepts.index(concept)
    radius = max(detector.radius_multiplier * detector.sigmas[k], 1e-12)
    return centroid_distances(detector, samples)[:, k] / radius


def centroid_of(detector: DetectorSpec, concept: str) -> np.ndarray:
    return np.asarray(detector.centroids[detector.concepts.index(concept)], dtype=np.float64)


def success_rate(verdicts: Sequence[Optional[str]], concept: str) -> float:
    if len(verdicts) == 0:
        raise ValueError("no verdicts to aggregate")
    return sum(v == concept for v in verdicts) / len(verdicts)
