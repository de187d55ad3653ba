"""
Street Height Estimation - Embedding network
LeNet-style patch embedding trained with the triplet relative loss and
probabilistic hard-negative selection, plus the open-set classifier head
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.special import softmax
from sklearn.metrics import accuracy_score, precision_recall_fscore_support
from sklearn.model_selection import StratifiedKFold, train_test_split
from sklearn.svm import LinearSVC
from torch import nn

from .config import TrainingConfig
from .errors import (
    DegenerateDenominatorError,
    EmptyInputError,
    InsufficientDataError,
    ModelFormatError,
    UntrainedHeadError,
)
from .logging_config import RunContext, get_logger

logger = get_logger(__name__)

PATCH_SIZE = 28
EMBEDDING_DIM = 128
DENOMINATOR_TOLERANCE = 1e-12
REJECT = "reject"

MAGIC = b"SHEN"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")


class EmbeddingNet(nn.Module):
    """conv(1->6, 5x5) -> pool -> conv(6->16, 5x5) -> pool -> 120 -> 84 -> embedding, ReLU throughout"""

    def __init__(self, embedding_dim: int = EMBEDDING_DIM):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.conv1 = nn.Conv2d(1, 6, kernel_size=5)
        self.conv2 = nn.Conv2d(6, 16, kernel_size=5)
        self.fc1 = nn.Linear(16 * 4 * 4, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, embedding_dim)
        self.double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return F.normalize(self.fc3(x), dim=1, eps=1e-12)


def scale_patches(patches: np.ndarray) -> np.ndarray:
    """0..255 intensities to [0, 1]"""
    return np.asarray(patches, dtype=np.float64) / 255.0


def _as_batch(patches: np.ndarray) -> torch.Tensor:
    array = np.asarray(patches, dtype=np.float64)
    if array.ndim == 2:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array)).unsqueeze(1)


def embed_batch(net: EmbeddingNet, patches: np.ndarray) -> np.ndarray:
    """(N, 28, 28) patches in [0, 1] to (N, d) unit embeddings"""
    if len(patches) == 0:
        return np.zeros((0, net.embedding_dim))
    net.eval()
    with torch.no_grad():
        return net(_as_batch(patches)).numpy()


def embed(net: EmbeddingNet, patch: np.ndarray) -> np.ndarray:
    return embed_batch(net, np.asarray(patch)[None])[0]


def _triplet_tensors(e_t: Any, e_p: Any, e_n: Any) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return tuple(torch.atleast_2d(torch.as_tensor(e, dtype=torch.float64)) for e in (e_t, e_p, e_n))


def relative_loss_terms(e_t: torch.Tensor, e_p: torch.Tensor, e_n: torch.Tensor,
                        alpha: float) -> torch.Tensor:
    """Per-triplet alpha*|t-p|^2 + (1-alpha)*|t-p|^2/|t-n|^2.

    Raises:
        DegenerateDenominatorError: a target coincides with its negative.
    """
    intra = ((e_t - e_p) ** 2).sum(dim=1)
    inter = ((e_t - e_n) ** 2).sum(dim=1)
    if bool((inter < DENOMINATOR_TOLERANCE).any()):
        raise DegenerateDenominatorError("target and negative embeddings coincide")
    return alpha * intra + (1.0 - alpha) * intra / inter


def margin_loss_terms(e_t: torch.Tensor, e_p: torch.Tensor, e_n: torch.Tensor,
                      margin: float) -> torch.Tensor:
    intra = ((e_t - e_p) ** 2).sum(dim=1)
    inter = ((e_t - e_n) ** 2).sum(dim=1)
    return torch.clamp(intra - inter + margin, min=0.0)


def triplet_relative_loss(e_t: Any, e_p: Any, e_n: Any, alpha: float) -> float:
    """Sum of the relative loss over one triplet or a batch of triplets"""
    t, p, n = _triplet_tensors(e_t, e_p, e_n)
    return float(relative_loss_terms(t, p, n, alpha).sum())


def triplet_margin_loss(e_t: Any, e_p: Any, e_n: Any, margin: float) -> float:
    t, p, n = _triplet_tensors(e_t, e_p, e_n)
    return float(margin_loss_terms(t, p, n, margin).sum())


def negative_logits(d_negative: np.ndarray, d_positive: np.ndarray, preference: str = "far") -> np.ndarray:
    """Selection logits over negatives, per row.

    "far" favours negatives far from the target, "near" favours
    near ones. Both are shifted by the row's minimum margin.
    """
    d_negative = np.atleast_2d(d_negative)
    d_positive = np.reshape(d_positive, (-1, 1))
    shift = np.min(d_negative - d_positive, axis=1, keepdims=True)
    if preference == "near":
        return -(d_negative - d_positive - shift)
    return d_negative - shift


def hard_triplet_probabilities(e_t: np.ndarray, e_p: np.ndarray, negatives: Sequence[np.ndarray],
                               preference: str = "far") -> np.ndarray:
    """Probability of drawing each negative for the triplet (e_t, e_p, .)"""
    if len(negatives) == 0:
        raise EmptyInputError("hard triplet selection needs at least one negative")
    e_t = np.asarray(e_t, dtype=float)
    d_negative = np.sum((np.asarray(negatives, dtype=float) - e_t) ** 2, axis=1)
    d_positive = float(np.sum((np.asarray(e_p, dtype=float) - e_t) ** 2))
    return softmax(negative_logits(d_negative[None], np.array([d_positive]), preference), axis=1)[0]


def sample_rows(rng: np.random.Generator, probabilities: np.ndarray) -> np.ndarray:
    """One index per row of a row-stochastic matrix"""
    cumulative = np.cumsum(probabilities, axis=1)
    draws = rng.random((probabilities.shape[0], 1)) * cumulative[:, -1:]
    return np.minimum((cumulative < draws).sum(axis=1), probabilities.shape[1] - 1)


@dataclass
class TrainingResult:
    net: EmbeddingNet
    losses: List[float]
    classes: List[str]

    def moving_average(self, window: int = 100) -> np.ndarray:
        losses = np.asarray(self.losses, dtype=float)
        if len(losses) < window:
            return np.array([losses.mean()]) if len(losses) else losses
        return np.convolve(losses, np.ones(window) / window, mode="valid")


def _class_indices(labels: Sequence[str]) -> Dict[str, np.ndarray]:
    labels = np.asarray(labels)
    return {c: np.flatnonzero(labels == c) for c in sorted(set(labels.tolist()))}


def train(config: TrainingConfig, patches: np.ndarray, labels: Sequence[str],
          unlabeled: Optional[np.ndarray] = None, init_net: Optional[EmbeddingNet] = None,
          context: Optional[RunContext] = None) -> TrainingResult:
    """Train an embedding net with mini-batch SGD on triplets.

    Each iteration draws batch_size patches per class and embeds them
    together with batch_size unlabeled patches in one forward pass. Every
    labeled patch serves as a target with a random same-class positive; its
    negative is drawn from the other classes and the unlabeled pool with
    the hard-selection probabilities. Unlabeled patches are never targets.
    The batch loss is the sum of the per-triplet terms.

    Args:
        config: Training settings.
        patches: (N, 28, 28) patches scaled to [0, 1].
        labels: Class label per patch.
        unlabeled: Optional patches of no known class.
        init_net: Start from these weights instead of a fresh initialization.
        context: Run context for progress logging.

    Raises:
        InsufficientDataError: fewer than two classes or a class with one sample.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if len(patches) != len(labels):
        raise InsufficientDataError("one label per patch required")
    by_class = _class_indices(labels)
    if len(by_class) < 2 or any(len(ix) < 2 for ix in by_class.values()):
        raise InsufficientDataError(
            f"need at least 2 classes with 2 samples each, got {{{', '.join(f'{c}: {len(ix)}' for c, ix in by_class.items())}}}"
        )
    pool = np.asarray(unlabeled, dtype=np.float64) if unlabeled is not None and len(unlabeled) else None

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = init_net if init_net is not None else EmbeddingNet(config.embedding_dim)
    optimizer = torch.optim.SGD(net.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.decay_every, gamma=config.decay)
    classes = list(by_class)
    k = config.batch_size
    losses: List[float] = []
    net.train()

    for iteration in range(config.iterations):
        chosen = [rng.choice(by_class[c], size=k, replace=len(by_class[c]) < k) for c in classes]
        batch = [patches[ix] for ix in chosen]
        owner = np.repeat(np.arange(len(classes)), k)
        if pool is not None:
            batch.append(pool[rng.choice(len(pool), size=k, replace=len(pool) < k)])
            owner = np.concatenate([owner, np.full(k, -1)])
        embeddings = net(_as_batch(np.concatenate(batch)))

        n_labeled = len(classes) * k
        within = rng.integers(0, k - 1, size=n_labeled)
        slot = np.tile(np.arange(k), len(classes))
        positive = np.repeat(np.arange(len(classes)) * k, k) + within + (within >= slot)

        with torch.no_grad():
            distances = torch.cdist(embeddings[:n_labeled], embeddings).pow(2).numpy()
        d_positive = distances[np.arange(n_labeled), positive]
        allowed = owner[None, :] != owner[:n_labeled, None]
        logits = negative_logits(np.where(allowed, distances, np.inf), d_positive, config.negative_preference)
        logits = np.where(allowed, logits, -np.inf)
        negative = sample_rows(rng, softmax(logits, axis=1))

        e_t = embeddings[:n_labeled]
        e_p = embeddings[positive]
        e_n = embeddings[negative]
        keep = distances[np.arange(n_labeled), negative] >= DENOMINATOR_TOLERANCE
        if not keep.any():
            losses.append(losses[-1] if losses else 0.0)
            continue
        keep_t = torch.from_numpy(keep)
        if config.loss == "margin":
            terms = margin_loss_terms(e_t[keep_t], e_p[keep_t], e_n[keep_t], config.margin)
        else:
            terms = relative_loss_terms(e_t[keep_t], e_p[keep_t], e_n[keep_t], config.alpha)
        loss = terms.sum()

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        losses.append(float(loss.item()))
        if context is not None and (iteration + 1) % config.log_every == 0:
            context.log_info("training progress", iteration=iteration + 1, loss=round(losses[-1], 6),
                             learning_rate=scheduler.get_last_lr()[0])

    net.eval()
    logger.debug("training finished", iterations=config.iterations, final_loss=losses[-1] if losses else None)
    return TrainingResult(net=net, losses=losses, classes=classes)


def _loss_on(net: EmbeddingNet, triplets: torch.Tensor, alpha: float) -> torch.Tensor:
    embeddings = net(triplets)
    e_t, e_p, e_n = embeddings[0::3], embeddings[1::3], embeddings[2::3]
    return relative_loss_terms(e_t, e_p, e_n, alpha).sum()


def gradient_check(net: EmbeddingNet, patches: np.ndarray, alpha: float = 0.5, probes: int = 100,
                   epsilon: float = 1e-6, seed: int = 0, floor: float = 1e-4) -> float:
    """Worst relative error between autograd and central differences.

    Patches are consumed as consecutive (target, positive, negative)
    triples. Each probe perturbs one randomly chosen scalar parameter.
    """
    usable = (len(patches) // 3) * 3
    if usable == 0:
        raise EmptyInputError("gradient check needs at least one triplet of patches")
    triplets = _as_batch(np.asarray(patches[:usable], dtype=np.float64))
    net.eval()
    net.zero_grad()
    _loss_on(net, triplets, alpha).backward()
    params = [p for p in net.parameters()]
    analytic = [p.grad.detach().clone() for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            which = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = params[which].view(-1)
            index = int(rng.integers(flat.numel()))
            original = float(flat[index])
            flat[index] = original + epsilon
            upper = float(_loss_on(net, triplets, alpha))
            flat[index] = original - epsilon
            lower = float(_loss_on(net, triplets, alpha))
            flat[index] = original
            numeric = (upper - lower) / (2 * epsilon)
            exact = float(analytic[which].view(-1)[index])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst


def save_net(net: EmbeddingNet, path: Union[str, Path]) -> None:
    """Little-endian flat binary: 16-byte header, then ndim, shape and float32 data per tensor"""
    tensors = list(net.state_dict().values())
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors), net.embedding_dim))
        for tensor in tensors:
            array = tensor.detach().cpu().numpy()
            f.write(np.array([array.ndim, *array.shape], dtype="<u4").tobytes())
            f.write(array.astype("<f4").tobytes())


def load_net(path: Union[str, Path]) -> EmbeddingNet:
    """
    Raises:
        ModelFormatError: bad magic, unsupported version or shapes that do
            not match the network.
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise ModelFormatError(f"{path}: truncated header")
    magic, version, count, embedding_dim = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not an embedding model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    net = EmbeddingNet(embedding_dim)
    state = net.state_dict()
    if count != len(state):
        raise ModelFormatError(f"{path}: expected {len(state)} tensors, found {count}")

    offset = HEADER.size
    loaded = {}
    try:
        for name, reference in state.items():
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = tuple(int(s) for s in np.frombuffer(data, dtype="<u4", count=ndim, offset=offset))
            offset += 4 * ndim
            if shape != tuple(reference.shape):
                raise ModelFormatError(f"{path}: tensor {name} has shape {shape}, expected {tuple(reference.shape)}")
            size = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
            offset += 4 * size
            loaded[name] = torch.from_numpy(values.astype(np.float64))
    except (struct.error, ValueError) as e:
        raise ModelFormatError(f"{path}: truncated tensor data") from e
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes")
    net.load_state_dict(loaded)
    net.eval()
    return net


@dataclass
class OpenSetHead:
    """Linear one-vs-rest max-margin classifier with two rejection gates.

    An embedding is rejected when its winning decision score falls below
    margin_threshold or its distance to the winning class centroid exceeds
    distance_threshold; both thresholds are validation-split quantiles.
    """
    reject_quantile: float = 0.01
    validation_fraction: float = 0.2
    seed: int = 0
    classes: List[str] = field(default_factory=list)
    coef: Optional[np.ndarray] = None
    intercept: Optional[np.ndarray] = None
    centroids: Optional[np.ndarray] = None
    margin_threshold: float = 0.0
    distance_threshold: float = 0.0

    @property
    def fitted(self) -> bool:
        return self.coef is not None

    def fit(self, embeddings: np.ndarray, labels: Sequence[str]) -> "OpenSetHead":
        embeddings = np.asarray(embeddings, dtype=float)
        labels = np.asarray(labels)
        self.classes = sorted(set(labels.tolist()))
        if len(self.classes) < 2:
            raise InsufficientDataError("open-set head needs at least 2 classes")
        counts = pd.Series(labels).value_counts()
        if counts.min() >= 2 and len(labels) * self.validation_fraction >= len(self.classes):
            fit_x, val_x, fit_y, val_y = train_test_split(
                embeddings, labels, test_size=self.validation_fraction,
                stratify=labels, random_state=self.seed,
            )
        else:
            fit_x, val_x, fit_y, val_y = embeddings, embeddings, labels, labels

        svc = LinearSVC(dual=False, random_state=self.seed)
        svc.fit(fit_x, fit_y)
        order = [list(svc.classes_).index(c) for c in self.classes]
        if len(self.classes) == 2:
            coef = np.vstack([-svc.coef_[0], svc.coef_[0]])
            intercept = np.array([-svc.intercept_[0], svc.intercept_[0]])
        else:
            coef, intercept = svc.coef_, svc.intercept_
        self.coef = coef[order]
        self.intercept = intercept[order]
        self.centroids = np.stack([embeddings[labels == c].mean(axis=0) for c in self.classes])

        _, margins, distances = self.decide(val_x)
        self.margin_threshold = float(np.quantile(margins, self.reject_quantile))
        self.distance_threshold = float(np.quantile(distances, 1.0 - self.reject_quantile))
        return self

    def decide(self, embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(winning class index, winning score, distance to that centroid) per row"""
        if not self.fitted:
            raise UntrainedHeadError("open-set head has not been fitted")
        x = np.atleast_2d(np.asarray(embeddings, dtype=float))
        scores = x @ self.coef.T + self.intercept
        winner = np.argmax(scores, axis=1)
        margins = scores[np.arange(len(x)), winner]
        distances = np.linalg.norm(x - self.centroids[winner], axis=1)
        return winner, margins, distances

    def predict(self, embeddings: np.ndarray) -> List[str]:
        winner, margins, distances = self.decide(embeddings)
        rejected = (margins < self.margin_threshold) | (distances > self.distance_threshold)
        return [REJECT if r else self.classes[w] for w, r in zip(winner, rejected)]

    def to_dict(self) -> Dict[str, Any]:
        if not self.fitted:
            raise UntrainedHeadError("cannot serialize an unfitted head")
        return {
            "classes": self.classes,
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "centroids": self.centroids.tolist(),
            "margin_threshold": self.margin_threshold,
            "distance_threshold": self.distance_threshold,
            "reject_quantile": self.reject_quantile,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "OpenSetHead":
        try:
            return cls(
                reject_quantile=float(document.get("reject_quantile", 0.01)),
                classes=list(document["classes"]),
                coef=np.asarray(document["coef"], dtype=float),
                intercept=np.asarray(document["intercept"], dtype=float),
                centroids=np.asarray(document["centroids"], dtype=float),
                margin_threshold=float(document["margin_threshold"]),
                distance_threshold=float(document["distance_threshold"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"malformed classifier head: {e}") from e

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "OpenSetHead":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: invalid JSON: {e.msg}") from e


def fit_head(embeddings: np.ndarray, labels: Sequence[str], reject_quantile: float = 0.01,
             validation_fraction: float = 0.2, seed: int = 0) -> OpenSetHead:
    return OpenSetHead(reject_quantile, validation_fraction, seed).fit(embeddings, labels)


def classify_open_set(head: OpenSetHead, embedding: np.ndarray) -> str:
    return head.predict(np.asarray(embedding)[None])[0]


@dataclass
class ClassifierModel:
    """Embedding net and open-set head for one patch family"""
    net: EmbeddingNet
    head: OpenSetHead

    def classify(self, patches: np.ndarray) -> List[str]:
        """Labels for (N, 28, 28) patches in 0..255"""
        if len(patches) == 0:
            return []
        return self.head.predict(embed_batch(self.net, scale_patches(patches)))


@dataclass
class ModelBundle:
    corner: ClassifierModel
    roofline: ClassifierModel

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, model in (("corner", self.corner), ("roofline", self.roofline)):
            save_net(model.net, directory / f"{name}.net")
            model.head.save(directory / f"{name}.head.json")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ModelBundle":
        directory = Path(directory)
        models = {}
        for name in ("corner", "roofline"):
            net_path = directory / f"{name}.net"
            head_path = directory / f"{name}.head.json"
            if not net_path.exists() or not head_path.exists():
                raise ModelFormatError(f"{directory}: missing {name} model files")
            models[name] = ClassifierModel(load_net(net_path), OpenSetHead.load(head_path))
        return cls(corner=models["corner"], roofline=models["roofline"])


def open_set_metrics(truth: Sequence[str], predicted: Sequence[str], known: Sequence[str]) -> Dict[str, float]:
    """Accuracy and macro precision/recall/F1 in percent; unknown truths count as REJECT"""
    known_set = set(known)
    y_true = [t if t in known_set else REJECT for t in truth]
    labels = sorted(known_set) + [REJECT]
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, list(predicted), labels=labels, average="macro", zero_division=0,
    )
    return {
        "accuracy": 100.0 * accuracy_score(y_true, list(predicted)),
        "precision": 100.0 * float(precision),
        "recall": 100.0 * float(recall),
        "f1": 100.0 * float(f1),
    }


def cross_validate_head(embeddings: np.ndarray, labels: Sequence[str], known: Sequence[str],
                        folds: int = 5, reject_quantile: float = 0.01, seed: int = 0) -> pd.DataFrame:
    """Stratified k-fold metrics of a head refit per fold; one row per fold"""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    known_mask = np.isin(labels, list(known))
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    rows = []
    for fold, (fit_ix, test_ix) in enumerate(splitter.split(embeddings, labels)):
        fit_ix = fit_ix[known_mask[fit_ix]]
        head = fit_head(embeddings[fit_ix], labels[fit_ix], reject_quantile, seed=seed)
        metrics = open_set_metrics(labels[test_ix], head.predict(embeddings[test_ix]), known)
        rows.append({"fold": fold, **metrics})
    return pd.DataFrame(rows)
