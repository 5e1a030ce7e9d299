"""Digital evaluation and the simulated end-to-end recognition stream.

Digital runs score masked probes against enrolled embeddings.  The stream
simulator replays frames through detect -> embed -> verify and feeds the
recognition-rate and persistence metrics.
"""

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FACE_SIZE, iter_image_files, load_image
from .embedding import embed_faces, normalize
from .errors import (AdvMaskError, BackendUnavailable, EmptyProbeSet, InputError, InvalidConfig,
                     MissingIdentity, NoDetections, NoFaceFound)
from .masks import STANDARD_COLORS, random_mask, standard_mask
from .renderer import (IDENTITY, detect_landmarks, draw_params, face_uv,
                       render_many, unwrap_texture)

CONDITIONS = ("clean", "blue", "black", "white", "random", "male_face", "female_face", "adv")


# ------------------------------------------------------ similarity reports

@dataclass(frozen=True)
class SimilarityRecord:
    key: str
    identity: str
    condition: str
    model: str
    cosine: float


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(v, [25, 50, 75])
    return {"count": int(v.size), "mean": float(v.mean()), "median": float(median),
            "q1": float(q1), "q3": float(q3), "min": float(v.min()), "max": float(v.max())}


@dataclass
class SimilarityReport:
    records: list = field(default_factory=list)

    def __add__(self, other):
        return SimilarityReport(self.records + other.records)

    def cosines(self, condition=None, model=None):
        return np.array([r.cosine for r in self.records
                         if (condition is None or r.condition == condition) and (model is None or r.model == model)])

    def mean(self, condition=None, model=None):
        values = self.cosines(condition, model)
        return float(values.mean()) if values.size else math.nan

    def conditions(self):
        return list(dict.fromkeys(r.condition for r in self.records))

    def aggregates(self):
        """Per (condition, model) statistics, recomputed from the records."""
        out = {}
        for cond in self.conditions():
            for model in dict.fromkeys(r.model for r in self.records if r.condition == cond):
                out[f"{cond}@{model}"] = summarize(self.cosines(cond, model))
        return out

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "identity", "condition", "model", "cosine"])
            for r in self.records:
                writer.writerow([r.key, r.identity, r.condition, r.model, repr(r.cosine)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return cls([SimilarityRecord(row["key"], row["identity"], row["condition"], row["model"],
                                         float(row["cosine"])) for row in csv.DictReader(fh)])


def control_face(faces, gender):
    """First face of ``gender`` (from ``attributes['gender']``) in ``faces``."""
    for face in faces:
        if face.attributes.get("gender") == gender:
            return face
    raise InputError(f"no {gender} face available to build a control mask")


def condition_texture(condition, rng=None, texture=None, control_faces=None):
    """Texture worn under ``condition``; None for clean probes.

    ``texture`` is the adversarial mask for ``adv``.  Face controls are cut
    from ``control_faces``; ``texture`` stands in only when none are given.
    """
    if condition == "clean":
        return None
    if condition in STANDARD_COLORS:
        return standard_mask(condition)
    if condition == "random":
        return random_mask(np.random.default_rng(0) if rng is None else rng)
    if condition in ("male_face", "female_face"):
        if control_faces:
            return unwrap_texture(control_face(control_faces, condition.split("_")[0]))
        if texture is not None:
            return texture
        raise InputError(f"{condition} needs control faces or an explicit texture")
    if texture is None:
        raise InputError(f"condition {condition!r} needs a texture")
    return texture


def masked_probe_images(texture, faces, rng=None, augmentation=None, backend="ellipsoid"):
    """(N, 112, 112, 3) tensor of probes wearing ``texture`` (None = unmasked)."""
    if texture is None:
        return torch.as_tensor(np.stack([f.image for f in faces]))
    if augmentation is None:
        params = [IDENTITY] * len(faces)
    else:
        params = draw_params(faces, np.random.default_rng(0) if rng is None else rng, augmentation)
    with torch.no_grad():
        return render_many(texture, faces, [face_uv(f, backend) for f in faces], params)


def eval_similarity(condition, dataset, model, gallery, rng=None, texture=None, augmentation=None,
                    control_faces=None, label=None, backend="ellipsoid", batch_size=64):
    """Cosine of every probe in ``dataset`` against its identity's enrolled vector.

    ``condition`` is one of CONDITIONS; ``label`` renames it in the records
    (e.g. ``adv_universal``).  Probes are rendered without augmentation
    unless an AugmentationConfig is given.
    """
    if condition not in CONDITIONS:
        raise InputError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    faces = list(dataset)
    for f in faces:
        if f.identity not in gallery:
            raise MissingIdentity(f"identity {f.identity!r} not enrolled for {gallery.model_name!r}")
    tex = condition_texture(condition, rng, texture, control_faces)
    records = []
    for i in range(0, len(faces), batch_size):
        chunk = faces[i:i + batch_size]
        images = masked_probe_images(tex, chunk, rng, augmentation, backend)
        with torch.no_grad():
            emb = normalize(model(images)).numpy()
        targets = np.stack([gallery[f.identity] for f in chunk])
        for f, c in zip(chunk, np.sum(emb * targets, axis=1)):
            records.append(SimilarityRecord(f.key, f.identity, label or condition, model.name, float(c)))
    return SimilarityReport(records)


# ------------------------------------------------------ transferability

@dataclass
class TransferMatrix:
    rows: list
    columns: list
    values: np.ndarray
    groups: dict = field(default_factory=dict)

    def cell(self, row, column):
        return float(self.values[self.rows.index(row), self.columns.index(column)])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mask", "group"] + list(self.columns))
            for name, row in zip(self.rows, self.values):
                writer.writerow([name, self.groups.get(name, "")] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows, groups, values = [], {}, []
            for line in reader:
                rows.append(line[0])
                groups[line[0]] = line[1]
                values.append([float(v) for v in line[2:]])
        return cls(rows, header[2:], np.array(values), groups)


def _cell_rng(seed, row, column):
    return np.random.default_rng([int(seed), zlib.crc32(row.encode()), zlib.crc32(column.encode())])


def transferability_matrix(masks, models, dataset, galleries, rng=None, augmentation=None,
                           control_faces=None, backend="ellipsoid"):
    """Mean probe cosine for every (mask, model) pair.

    ``masks`` maps row name -> (group, condition, texture-or-None), groups
    being ``control``, ``single`` or ``ensemble``.  ``galleries`` maps model
    name -> gallery built on ``dataset``'s identities.
    """
    seed = 0 if rng is None else (rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**31)))
    rows, groups, values = [], {}, []
    for name, (group, condition, texture) in masks.items():
        if texture is None and condition != "clean":
            texture = condition_texture(condition, _cell_rng(seed, name, ""), None, control_faces)
        row = []
        for model in models:
            report = eval_similarity(condition, dataset, model, galleries[model.name],
                                     _cell_rng(seed, name, model.name), texture, augmentation,
                                     control_faces, label=name, backend=backend)
            row.append(report.mean())
        rows.append(name)
        groups[name] = group
        values.append(row)
    return TransferMatrix(rows, [m.name for m in models], np.array(values), groups)


# ------------------------------------------------------------ calibration

def far_at(scores, threshold):
    """Fraction of impostor scores accepted (score >= threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.mean(scores >= threshold))


def threshold_at_far(scores, far_target):
    """Smallest candidate threshold whose FAR does not exceed ``far_target``.

    Candidates are the observed scores plus the next float above the maximum,
    so ties resolve toward the stricter threshold.
    """
    if not 0 < far_target < 1:
        raise InvalidConfig(f"far_target must lie in (0, 1), got {far_target}")
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise EmptyProbeSet("no impostor scores to calibrate on")
    n = scores.size
    allowed = _max_accepted(n, far_target)
    candidates = np.unique(scores)
    accepted = n - np.searchsorted(scores, candidates, side="left")
    feasible = candidates[accepted <= allowed]
    if feasible.size:
        return float(feasible[0])
    return float(np.nextafter(scores[-1], np.inf))


def _max_accepted(n, far_target):
    """Largest k with k / n <= far_target, judged by the same float division far_at uses."""
    k = min(n, math.floor(far_target * n))
    while k + 1 <= n and (k + 1) / n <= far_target:
        k += 1
    while k > 0 and k / n > far_target:
        k -= 1
    return k


def impostor_scores(model, gallery, probes):
    """Cosines of each probe against every enrolled identity other than its own."""
    probes = list(probes)
    if not probes:
        raise EmptyProbeSet("impostor probe set is empty")
    ids, matrix = gallery.matrix()
    sims = embed_faces(model, probes) @ matrix.T
    own = np.array([[pid == gid for gid in ids] for pid in (p.identity for p in probes)])
    scores = sims[~own]
    if scores.size == 0:
        raise EmptyProbeSet("no impostor pairs: every probe matches the only enrolled identity")
    return scores


def calibrate_threshold(model, gallery, impostor_probe_set, far_target=0.01):
    return threshold_at_far(impostor_scores(model, gallery, impostor_probe_set), far_target)


def calibration_probes(faces, masks, rng, backend="ellipsoid"):
    """Each face wearing one texture drawn uniformly from ``masks`` (name -> texture)."""
    from .data import FaceSample

    names = sorted(masks)
    out = []
    for face in faces:
        name = names[int(rng.integers(len(names)))]
        with torch.no_grad():
            image = render_many(masks[name], [face], [face_uv(face, backend)], [IDENTITY])[0].numpy()
        out.append(FaceSample(image, face.landmarks, face.identity, key=f"{face.key}#{name}",
                              attributes=dict(face.attributes)))
    return out


# ----------------------------------------------------------------- stream

@dataclass(frozen=True)
class VerificationEvent:
    frame_index: int
    detected: bool
    candidate_identity: str = None
    similarity: float = None
    recognized: bool = False
    true_similarity: float = None

    def __post_init__(self):
        if self.recognized and not self.detected:
            raise ValueError("a frame cannot be recognized without a detection")
        if self.detected != (self.similarity is not None):
            raise ValueError("similarity is present exactly when a face was detected")


@dataclass(frozen=True)
class PersistenceConfig:
    window: int = 10
    hits_required: int = 7

    def __post_init__(self):
        if self.window < 1 or self.hits_required < 1 or self.hits_required > self.window:
            raise InvalidConfig(f"need 1 <= hits_required <= window, got {self.hits_required}/{self.window}")


class PassThroughDetector:
    """Frames are already aligned crops; a frame without a face is a miss."""

    name = "passthrough"

    def __init__(self, landmark_backend="synthetic"):
        self.landmark_backend = landmark_backend

    def __call__(self, frame):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (FACE_SIZE, FACE_SIZE, 3):
            raise NoFaceFound(f"frame of shape {frame.shape} is not an aligned crop")
        detect_landmarks(frame, self.landmark_backend)
        return frame


class TorchScriptFaceDetector:
    """Pretrained detector+aligner (e.g. an exported MTCNN) returning a 112x112 crop or nothing."""

    name = "mtcnn"

    def __init__(self, path="mtcnn_align.pt", checksum=None):
        self.path = path
        self.checksum = checksum
        self._model = None

    def __call__(self, frame):
        if self._model is None:
            from .assets import verified_path
            try:
                self._model = torch.jit.load(str(verified_path(self.path, self.checksum)), map_location="cpu").eval()
            except AdvMaskError as exc:
                raise BackendUnavailable(f"face detector unavailable: {exc}") from exc
        x = torch.as_tensor(np.asarray(frame), dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            crop = self._model(x)
        if crop.numel() == 0:
            raise NoFaceFound("detector found no face")
        return crop.reshape(3, FACE_SIZE, FACE_SIZE).permute(1, 2, 0).double().numpy()


DETECTORS = {"passthrough": PassThroughDetector, "mtcnn": TorchScriptFaceDetector}


def simulate_stream(frames, detector, model, gallery, threshold, identity, require_argmax=True):
    """One VerificationEvent per frame for a subject whose true identity is ``identity``.

    The candidate is the enrolled identity with the highest cosine.  With
    ``require_argmax`` a frame counts as recognized only when that candidate
    is the subject and clears ``threshold``; otherwise clearing the threshold
    against the subject's own entry suffices.  Detector failures mark the
    frame undetected.
    """
    if isinstance(detector, str):
        detector = DETECTORS[detector]()
    ids, matrix = gallery.matrix()
    if identity not in gallery:
        raise MissingIdentity(f"subject {identity!r} is not enrolled")
    own = ids.index(identity)
    events = []
    for i, frame in enumerate(frames):
        try:
            crop = detector(frame)
        except NoFaceFound:
            events.append(VerificationEvent(i, False))
            continue
        with torch.no_grad():
            emb = normalize(model(torch.as_tensor(crop)[None])).numpy()[0]
        sims = matrix @ emb
        best = int(np.argmax(sims))
        true_sim = float(sims[own])
        if require_argmax:
            recognized = best == own and sims[best] >= threshold
        else:
            recognized = true_sim >= threshold
        events.append(VerificationEvent(i, True, ids[best], float(sims[best]), bool(recognized), true_sim))
    return events


def recognition_rate(events):
    """Recognized frames over detected frames."""
    detected = sum(e.detected for e in events)
    if detected == 0:
        raise NoDetections("no frame had a detected face")
    return sum(e.recognized for e in events) / detected


def persistence_detection(events, config=PersistenceConfig()):
    """True when some window of ``config.window`` consecutive detected frames
    holds at least ``config.hits_required`` recognitions.

    Undetected frames are skipped rather than counted as misses; a stream
    shorter than the window is judged as one window.
    """
    hits = np.array([e.recognized for e in events if e.detected], dtype=np.int64)
    if hits.size == 0:
        return False
    if hits.size <= config.window:
        return int(hits.sum()) >= config.hits_required
    sums = np.convolve(hits, np.ones(config.window, dtype=np.int64), mode="valid")
    return bool((sums >= config.hits_required).any())


def load_frames(folder):
    """Numbered frame images from a directory, in file-name order."""
    folder = Path(folder)
    if not folder.is_dir():
        raise InputError(f"frame directory not found: {folder}", path=folder)
    return [load_image(p) for p in iter_image_files(folder)]


def events_to_csv(path, events):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "detected", "candidate_identity", "similarity", "recognized", "true_similarity"])
        for e in events:
            writer.writerow([e.frame_index, int(e.detected), e.candidate_identity or "",
                             "" if e.similarity is None else repr(e.similarity), int(e.recognized),
                             "" if e.true_similarity is None else repr(e.true_similarity)])


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
