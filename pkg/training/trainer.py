import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tape, backward
from checkpoint import Checkpoint, CheckpointError, load_checkpoint
from cohort.augment import augment
from cohort.synth import PatientCase, split_cases, stitch_composite, truth_labels
from metrics import EvalReport, MetricError, build_report, roc_auc
from networks.backbones import import_weights
from networks.wega import ModelBatch, ModelFactory, WeGAModel
from settings import TrainConfig

from .losses import BatchBags, compute_losses
from .optimizer import Adam, clip_grad_norm

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 0.01

# TrainConfig overrides per ablation row
ABLATION_VARIANTS = {
    'full': {},
    'no_ral': {'use_ral': False},
    'local_only': {'use_gae': False},
    'no_pretrained': {'pretrained_global': None},
}


class TrainingError(RuntimeError):
    """Raised when training cannot start or diverges"""
    pass


@dataclass
class EpochRecord:
    epoch: int
    mil: float
    llp: float
    ral: float
    total: float
    val_auc: Optional[float]


@dataclass
class TrainResult:
    model: WeGAModel
    checkpoint: Checkpoint
    history: List[EpochRecord]
    best_epoch: int
    train_cases: List[PatientCase] = field(default_factory=list)
    val_cases: List[PatientCase] = field(default_factory=list)
    test_cases: List[PatientCase] = field(default_factory=list)


def collate(cases: Sequence[PatientCase], rng: Optional[np.random.Generator] = None) -> ModelBatch:
    """
    Flatten patients into one node batch. With ``rng`` every node patch is
    augmented and the composite is re-stitched from the augmented patches.
    """
    composites, patches, radiomics, owner, slices = [], [], [], [], []
    start = 0
    for row, case in enumerate(cases):
        nodes = [augment(node, rng) for node in case.nodes] if rng is not None else case.nodes
        composites.append(stitch_composite(nodes) if rng is not None else case.composite)
        patches.extend(node.image[None] for node in nodes)
        radiomics.append(case.radiomics_matrix())
        owner.extend([row] * case.M)
        slices.append(slice(start, start + case.M))
        start += case.M
    return ModelBatch(composites=np.stack(composites), patches=np.stack(patches),
                      radiomics=np.concatenate(radiomics), node_owner=np.asarray(owner, dtype=np.int64),
                      bag_slices=slices)


def predict_cases(model: WeGAModel, cases: Sequence[PatientCase], batch_size: int = 8) -> List[np.ndarray]:
    """Node probabilities per patient, no augmentation"""
    out = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        batch = collate(chunk)
        probs = model(batch).p.values
        out.extend(probs[sl].copy() for sl in batch.bag_slices)
    return out


def predict_patient(model: WeGAModel, case: PatientCase) -> Tuple[float, np.ndarray]:
    """Patient score is the highest node probability"""
    probs = predict_cases(model, [case], batch_size=1)[0]
    return float(probs.max()), probs


def patient_scores(model: WeGAModel, cases: Sequence[PatientCase], batch_size: int = 8) -> np.ndarray:
    return np.array([probs.max() for probs in predict_cases(model, cases, batch_size)])


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.model = ModelFactory.from_config(config)
        self.optimizer = Adam(self.model.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps)

    def _load_pretrained(self) -> None:
        path = self.config.pretrained_global
        if self.model.global_encoder is None:
            logger.warning("⚠️ pretrained_global ignored: model has no global branch")
            return
        names = load_checkpoint(path).tensors
        prefix = 'global_encoder.' if any(n.startswith('global_encoder.') for n in names) else ''
        import_weights(self.model.global_encoder, path, prefix=prefix)

    def train_step(self, cases: Sequence[PatientCase], rng: Optional[np.random.Generator]) -> Dict[str, float]:
        batch = collate(cases, rng)
        with Tape():
            prediction = self.model(batch)
            bags = BatchBags(
                probs=prediction.p,
                bag_slices=batch.bag_slices,
                labels=np.array([case.y for case in cases]),
                positives=np.array([case.m for case in cases]),
                class_maps=prediction.class_map,
                # the patient label stands in for every node map
                map_labels=np.repeat([case.y for case in cases], [case.M for case in cases]),
            )
            losses = compute_losses(bags, self.config.loss_weights, use_ral=self.config.use_ral)
            values = losses.as_floats()
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingError(f"non-finite loss on patients {[c.id for c in cases]}: {values}")
            backward(losses.total)
        clip_grad_norm(self.optimizer.params, self.config.grad_clip)
        self.optimizer.step()
        self.optimizer.zero_grad()
        return values

    def validation_auc(self, cases: Sequence[PatientCase]) -> Optional[float]:
        if not cases:
            return None
        try:
            return roc_auc(patient_scores(self.model, cases, self.config.batch_size), [c.y for c in cases])
        except MetricError:
            return None

    def fit(self, train_cases: Sequence[PatientCase], val_cases: Sequence[PatientCase]) -> TrainResult:
        """
        Train with early stopping on validation AUC and restore the best epoch.

        Raises:
            TrainingError: single-class training split or a non-finite loss
        """
        cfg = self.config
        if len({case.y for case in train_cases}) < 2:
            raise TrainingError("training split must contain both patient classes")
        self.model.fit_radiomics(np.concatenate([case.radiomics_matrix() for case in train_cases]))
        if cfg.pretrained_global:
            self._load_pretrained()

        if len({case.y for case in val_cases}) < 2:
            logger.warning("⚠️ Validation split is single-class; early stopping uses training loss")

        history: List[EpochRecord] = []
        best_score, best_epoch, stale = -np.inf, 0, 0
        best_state = self.model.state_dict()
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train_cases))
            sums = {"mil": 0.0, "llp": 0.0, "ral": 0.0, "total": 0.0}
            steps = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_cases[i] for i in order[start:start + cfg.batch_size]]
                values = self.train_step(batch, rng if cfg.augment else None)
                for key in sums:
                    sums[key] += values[key]
                steps += 1

            means = {key: total / steps for key, total in sums.items()}
            val_auc = self.validation_auc(val_cases)
            record = EpochRecord(epoch=epoch, val_auc=val_auc, **means)
            history.append(record)
            score = val_auc if val_auc is not None else -record.total
            logger.info(f"Epoch {epoch}: total={record.total:.4f} mil={record.mil:.4f} "
                        f"llp={record.llp:.4f} ral={record.ral:.4f} val_auc={val_auc}")

            if score > best_score:
                best_score, best_epoch, stale = score, epoch, 0
                best_state = self.model.state_dict()
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.info(f"Early stopping after epoch {epoch}; best epoch {best_epoch}")
                    break

        self.model.load_state_dict(best_state)
        checkpoint = Checkpoint(tensors=self.model.state_dict(), config=cfg.to_dict(), seed=cfg.seed,
                                extra={"best_epoch": best_epoch})
        logger.info(f"✅ Training finished; best epoch {best_epoch}")
        return TrainResult(model=self.model, checkpoint=checkpoint, history=history, best_epoch=best_epoch,
                           train_cases=list(train_cases), val_cases=list(val_cases))


def train(config: TrainConfig, cases: Sequence[PatientCase]) -> TrainResult:
    """Split ``cases`` by the config's seed and fractions, then fit"""
    train_cases, val_cases, test_cases = split_cases(cases, config.split, config.seed)
    logger.info(f"Split {len(cases)} patients into {len(train_cases)}/{len(val_cases)}/{len(test_cases)}")
    result = Trainer(config).fit(train_cases, val_cases)
    result.test_cases = test_cases
    return result


def load_model(path: str) -> Tuple[WeGAModel, TrainConfig]:
    checkpoint = load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(checkpoint.config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} carries an unusable config: {e}") from e
    model = ModelFactory.from_config(config)
    try:
        model.load_state_dict(checkpoint.tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} does not match its config: {e}") from e
    return model, config


def evaluate(model: WeGAModel, cases: Sequence[PatientCase], node_level: bool = False, threshold: float = 0.5,
             n_resamples: int = 1000, seed: int = 0, batch_size: int = 8) -> EvalReport:
    """Patient-level report on max node probability, or node-level against planted truth"""
    node_probs = predict_cases(model, cases, batch_size)
    if node_level:
        scores = np.concatenate(node_probs)
        labels = np.concatenate([truth_labels(case) for case in cases])
        level = "node"
    else:
        scores = np.array([probs.max() for probs in node_probs])
        labels = np.array([case.y for case in cases])
        level = "patient"
    return build_report(scores, labels, level=level, threshold=threshold, n_resamples=n_resamples, seed=seed)


def run_ablation(config: TrainConfig, cases: Sequence[PatientCase], seeds: Sequence[int] = (0, 1, 2),
                 variants: Sequence[str] = ('no_ral',)) -> Dict:
    """
    Train the full configuration and each ablated variant on the same splits per seed.

    Args:
        variants: names from ABLATION_VARIANTS; 'full' is always trained as the reference

    Returns:
        JSON-ready summary with per-variant test AUCs, their means, and a
        comparison of every variant against 'full'. The 'no_ral' comparison is
        also reported at the top level as 'tie' / 'full_at_least_as_good'.
    """
    unknown = [name for name in variants if name not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"Unknown ablation variants {unknown}; available: {sorted(ABLATION_VARIANTS)}")
    names = ['full'] + [name for name in dict.fromkeys(variants) if name != 'full']
    if 'no_pretrained' in names and config.pretrained_global is None:
        logger.warning("⚠️ no_pretrained equals full: the config names no pretrained_global checkpoint")

    aucs: Dict[str, List[float]] = {name: [] for name in names}
    for seed in seeds:
        for name in names:
            result = train(replace(config, seed=seed, **ABLATION_VARIANTS[name]), cases)
            test = result.test_cases
            auc = roc_auc(patient_scores(result.model, test, config.batch_size), [c.y for c in test])
            logger.info(f"Seed {seed} {name}: test AUC {auc:.4f}")
            aucs[name].append(auc)

    means = {name: float(np.mean(values)) for name, values in aucs.items()}
    summary: Dict = {"seeds": list(seeds), "variants": names}
    for name in names:
        summary[f"{name}_auc"] = aucs[name]
        summary[f"mean_{name}_auc"] = means[name]
    comparisons = {}
    for name in names[1:]:
        tie = abs(means['full'] - means[name]) <= TIE_TOLERANCE
        if means['full'] < means[name] and not tie:
            logger.warning(f"⚠️ {name} beat the full model: {means[name]:.4f} > {means['full']:.4f}")
        comparisons[name] = {"tie": tie, "full_at_least_as_good": means['full'] >= means[name] or tie}
    summary["comparisons"] = comparisons
    if 'no_ral' in comparisons:
        summary.update(comparisons['no_ral'])
    return summary
