"""1:1 verification accuracy with 10-fold threshold selection, AVG and Gap-to-Real."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from app import __version__
from errors import ValidationError
from identity_embedder import embed
from imaging import load_png

logger = logging.getLogger(__name__)

N_FOLDS = 10


@dataclass
class PairList:
    pairs: list
    name: str = "pairs"

    def validate(self, check_files=True):
        if not self.pairs:
            raise ValidationError(f"pair list '{self.name}' is empty")
        if check_files:
            missing = [p for a, b, _ in self.pairs for p in (a, b) if not os.path.exists(p)]
            if missing:
                raise ValidationError(f"pair list '{self.name}' references missing files, e.g. {missing[0]}")
        return self

    @property
    def labels(self):
        return np.array([bool(same) for _, _, same in self.pairs])


def read_pair_list(path, name=None):
    """Read ``<path_a>\\t<path_b>\\t<0|1>`` lines; relative paths resolve against the file's directory."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValidationError(f"{path}:{line_no}: expected '<path_a>\\t<path_b>\\t<0|1>'")
            a, b = (p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p)) for p in parts[:2])
            pairs.append((a, b, parts[2] == "1"))
    return PairList(pairs=pairs, name=name or os.path.splitext(os.path.basename(path))[0])


def pair_list_names(paths):
    """File stems as set names, qualified by the parent directory where stems collide."""
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    names = []
    for path, stem in zip(paths, stems):
        if stems.count(stem) > 1:
            parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
            stem = f"{parent}/{stem}"
        names.append(stem)
    return names


def write_pair_list(pair_list, path):
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for a, b, same in pair_list.pairs:
            f.write(f"{os.path.relpath(a, base)}\t{os.path.relpath(b, base)}\t{int(bool(same))}\n")
    return path


def make_toy_pairs(manifest, n_pairs, seed, name="toy"):
    """Alternating same/different pairs drawn from a held-out manifest."""
    rng = np.random.default_rng(seed)
    groups = {sid: [manifest.abspath(r) for r in recs] for sid, recs in manifest.by_subject().items()}
    multi = [sid for sid, paths in groups.items() if len(paths) >= 2]
    subjects = list(groups)
    if not multi or len(subjects) < 2:
        raise ValidationError("toy pairs need a subject with two images and at least two subjects")
    pairs = []
    for k in range(n_pairs):
        if k % 2 == 0:
            paths = groups[multi[rng.integers(len(multi))]]
            i, j = rng.choice(len(paths), size=2, replace=False)
            pairs.append((paths[i], paths[j], True))
        else:
            s1, s2 = rng.choice(len(subjects), size=2, replace=False)
            a = groups[subjects[s1]][rng.integers(len(groups[subjects[s1]]))]
            b = groups[subjects[s2]][rng.integers(len(groups[subjects[s2]]))]
            pairs.append((a, b, False))
    return PairList(pairs=pairs, name=name)


def fold_indices(n, n_folds=N_FOLDS):
    """Contiguous folds in pair order; sizes differ by at most one."""
    return np.array_split(np.arange(n), n_folds)


def threshold_candidates(sims):
    """-inf, midpoints of adjacent distinct sorted similarities, +inf (ascending)."""
    u = np.unique(sims)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def best_threshold(sims, labels):
    """Threshold maximising accuracy of ``sim > threshold``; ties go to the lower threshold."""
    candidates = threshold_candidates(sims)
    same = np.sort(sims[labels])
    diff = np.sort(sims[~labels])
    true_pos = len(same) - np.searchsorted(same, candidates, side="right")
    true_neg = np.searchsorted(diff, candidates, side="right")
    accuracy = (true_pos + true_neg) / len(sims)
    k = int(np.argmax(accuracy))
    return float(candidates[k]), float(accuracy[k])


def tenfold_accuracy_from_scores(sims, labels, n_folds=N_FOLDS):
    """Mean held-out accuracy; returns (mean, per-fold accuracies, per-fold thresholds)."""
    sims = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if len(sims) < n_folds:
        raise ValidationError(f"need at least {n_folds} pairs, got {len(sims)}")
    fold_acc, thresholds = [], []
    for test in fold_indices(len(sims), n_folds):
        train = np.ones(len(sims), dtype=bool)
        train[test] = False
        threshold, _ = best_threshold(sims[train], labels[train])
        thresholds.append(threshold)
        fold_acc.append(float(np.mean((sims[test] > threshold) == labels[test])))
    return float(np.mean(fold_acc)), fold_acc, thresholds


def pair_similarities(pairs, encoder, batch_size=256):
    cfg = encoder.config
    paths = list(dict.fromkeys(p for a, b, _ in pairs.pairs for p in (a, b)))
    index = {p: i for i, p in enumerate(paths)}
    chunks = []
    for start in range(0, len(paths), batch_size):
        images = torch.stack([load_png(p, resolution=cfg.resolution, channels=cfg.channels)
                              for p in paths[start:start + batch_size]])
        chunks.append(embed(images, encoder))
    embeddings = torch.cat(chunks)
    a = embeddings[[index[p] for p, _, _ in pairs.pairs]]
    b = embeddings[[index[p] for _, p, _ in pairs.pairs]]
    return (a * b).sum(dim=-1).clamp(-1.0, 1.0).double().numpy()


def tenfold_accuracy(pairs, encoder):
    pairs.validate()
    if len(pairs.pairs) < N_FOLDS:
        raise ValidationError(f"need at least {N_FOLDS} pairs, got {len(pairs.pairs)}")
    accuracy, fold_acc, _ = tenfold_accuracy_from_scores(pair_similarities(pairs, encoder), pairs.labels)
    logger.info(f"{pairs.name}: accuracy {accuracy:.4f} (folds {min(fold_acc):.3f}..{max(fold_acc):.3f})")
    return accuracy


@dataclass
class EvalReport:
    per_set: dict = field(default_factory=dict)
    avg: float = 0.0
    baseline_avg: float = 0.0
    gap_to_real: float = 0.0

    def to_dict(self):
        return asdict(self)

    def write_json(self, path, **meta):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tool_version": __version__, **meta, **self.to_dict()}, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def read_json(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(**{k: data[k] for k in ("per_set", "avg", "baseline_avg", "gap_to_real")})


def gap_to_real(baseline_avg, avg):
    """Baseline AVG minus synthetic AVG, rounded off float noise."""
    return round(baseline_avg - avg, 10)


def report_from_accuracies(per_set, baseline_avg):
    if not per_set:
        raise ValidationError("evaluation needs at least one pair list")
    avg = float(np.mean(list(per_set.values())))
    return EvalReport(per_set=dict(per_set), avg=avg, baseline_avg=baseline_avg,
                      gap_to_real=gap_to_real(baseline_avg, avg))


def evaluate_suite(pair_lists, encoder, baseline_avg):
    """Per-set accuracy in percent, their mean (AVG) and the gap to the real-data baseline."""
    if not pair_lists:
        raise ValidationError("evaluation needs at least one pair list")
    names = [pl.name for pl in pair_lists]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValidationError(f"pair lists must have distinct names, repeated: {duplicates}")
    per_set = {pl.name: 100.0 * tenfold_accuracy(pl, encoder) for pl in pair_lists}
    report = report_from_accuracies(per_set, baseline_avg)
    logger.info(f"AVG {report.avg:.2f}, Gap-to-Real {report.gap_to_real:.2f}")
    return report
