"""Training loop, validation, and end-to-end evaluation over a dataset."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camseg
from .autodiff import EvaluationError
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, parse_config, serialize_config
from .geometry import supervoxel_partition
from .model import Model
from .optim import AdamW
from .scenes import DatasetError, Scene, read_dataset, render_view


@dataclass
class EvalRow:
    scene_id: str
    per_class_iou: np.ndarray
    miou: float
    map_score: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    per_class_iou: np.ndarray
    miou: float
    map_score: float

    def summary_line(self) -> str:
        return f"mIoU={self.miou:.6f}"


def evaluate_scenes(model: Model, scenes: list[Scene],
                    partitions: list | None = None) -> EvalReport:
    """Pseudo-label quality over a scene list.

    Per-class IoU aggregates one confusion matrix across all scenes
    (points the model leaves IGNORE are excluded); mAP scores per-view tag
    prediction against visibility derived by re-rendering each view.
    """
    cfg = model.cfg
    total_conf = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
    rows = []
    ap_scores, ap_tags = [], []
    for idx, scene in enumerate(scenes):
        partition = partitions[idx] if partitions is not None else None
        labels, _, fwd, _ = model.infer_scene(scene, partition)
        conf = camseg.confusion_matrix(labels.labels, scene.cloud.labels,
                                       cfg.n_classes)
        total_conf += conf
        per_class, miou = camseg.iou_from_confusion(conf)
        map_score = float("nan")
        if fwd.cam_2d is not None:
            n_views = fwd.cam_2d.shape[0]
            tags = np.zeros((n_views, cfg.n_classes), dtype=np.int64)
            for t in range(n_views):
                view = scene.views[t]
                if view.pose is None or view.intrinsics is None:
                    tags[t] = scene.tags
                    continue
                _, _, pidx = render_view(scene.cloud, view.pose, view.intrinsics,
                                         view.image.shape[:2])
                visible = pidx[pidx >= 0]
                if visible.size:
                    tags[t, np.unique(scene.cloud.labels[visible])] = 1
            _, map_score = camseg.compute_map(fwd.cam_2d.data, tags)
            ap_scores.append(fwd.cam_2d.data)
            ap_tags.append(tags)
        rows.append(EvalRow(scene_id=scene.scene_id, per_class_iou=per_class,
                            miou=miou, map_score=map_score))
    per_class, miou = camseg.iou_from_confusion(total_conf)
    overall_map = float("nan")
    if ap_scores:
        _, overall_map = camseg.compute_map(np.concatenate(ap_scores),
                                            np.concatenate(ap_tags))
    return EvalReport(rows=rows, per_class_iou=per_class, miou=miou,
                      map_score=overall_map)


def majority_baseline_miou(train_scenes: list[Scene],
                           eval_scenes: list[Scene], n_classes: int) -> float:
    """mIoU of always predicting the most frequent training-label class."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for scene in train_scenes:
        counts += np.bincount(scene.cloud.labels, minlength=n_classes)
    majority = int(counts.argmax())
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for scene in eval_scenes:
        pred = np.full(scene.cloud.labels.shape, majority, dtype=np.int64)
        conf += camseg.confusion_matrix(pred, scene.cloud.labels, n_classes)
    return camseg.iou_from_confusion(conf)[1]


def write_report(report: EvalReport, path, class_names: list[str] | None = None):
    """TSV per-scene table plus the machine-readable summary line."""
    n_classes = report.per_class_iou.size
    names = class_names or [f"class{c}" for c in range(n_classes)]
    lines = ["scene\t" + "\t".join(f"iou_{n}" for n in names) + "\tmiou\tmap"]
    for row in report.rows:
        cells = "\t".join(f"{x:.6f}" for x in row.per_class_iou)
        lines.append(f"{row.scene_id}\t{cells}\t{row.miou:.6f}\t{row.map_score:.6f}")
    cells = "\t".join(f"{x:.6f}" for x in report.per_class_iou)
    lines.append(f"ALL\t{cells}\t{report.miou:.6f}\t{report.map_score:.6f}")
    lines.append(report.summary_line())
    Path(path).write_text("\n".join(lines) + "\n")


class Trainer:
    """Deterministic AdamW training over a scene dataset.

    One generator (seeded from the config) drives scene order and per-scene
    view sampling; its state rides along in checkpoints so a resumed run
    replays the exact step sequence of an uninterrupted one.
    """

    def __init__(self, cfg: Config, train_scenes: list[Scene],
                 val_scenes: list[Scene] | None = None):
        cfg.validate()
        if not train_scenes:
            raise DatasetError("empty training dataset")
        for scene in train_scenes:
            if scene.tags.size != cfg.n_classes:
                raise DatasetError(
                    f"{scene.scene_id}: {scene.tags.size} tags, config says "
                    f"{cfg.n_classes} classes")
        self.cfg = cfg
        self.scenes = train_scenes
        self.val_scenes = val_scenes or []
        self.model = Model(cfg)
        self.optimizer = AdamW(self.model.parameters(), lr=cfg.lr,
                               weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.epoch = 0
        self.loss_history: list[float] = []
        self.val_history: list[tuple] = []   # (epoch, miou)
        self.partitions = [supervoxel_partition(s.cloud, cfg.cell_size)
                           for s in train_scenes]
        self.val_partitions = [supervoxel_partition(s.cloud, cfg.cell_size)
                               for s in self.val_scenes]

    def _train_step(self, batch_indices) -> float:
        self.optimizer.zero_grad()
        batch_loss = 0.0
        inv = 1.0 / len(batch_indices)
        for i in batch_indices:
            scene = self.scenes[i]
            n_avail = len(scene.views)
            n_views = min(self.cfg.views, n_avail)
            view_idx = self.rng.choice(n_avail, size=n_views, replace=False)
            fwd = self.model.forward_scene(scene, view_idx, self.partitions[i])
            value = float(fwd.loss.data)
            if not np.isfinite(value):
                raise EvaluationError(
                    f"non-finite loss on scene {scene.scene_id} "
                    f"(epoch {self.epoch}, views {view_idx.tolist()})")
            (fwd.loss * inv).backward()
            batch_loss += value * inv
        self.optimizer.step()
        return batch_loss

    def train_epochs(self, n_epochs: int, log=None):
        bs = self.cfg.batch_size
        for _ in range(n_epochs):
            order = self.rng.permutation(len(self.scenes))
            epoch_losses = []
            for start in range(0, len(order), bs):
                epoch_losses.append(self._train_step(order[start:start + bs]))
            self.epoch += 1
            mean_loss = float(np.mean(epoch_losses))
            self.loss_history.append(mean_loss)
            if self.cfg.eval_every and self.val_scenes \
                    and self.epoch % self.cfg.eval_every == 0:
                report = evaluate_scenes(self.model, self.val_scenes,
                                         self.val_partitions)
                self.val_history.append((self.epoch, report.miou))
                if log:
                    log(f"epoch {self.epoch}: loss {mean_loss:.4f} "
                        f"val mIoU {report.miou:.4f}")
            elif log:
                log(f"epoch {self.epoch}: loss {mean_loss:.4f}")

    # -- persistence -----------------------------------------------------

    def save(self, path):
        save_checkpoint(path,
                        config_text=serialize_config(self.cfg),
                        epoch=self.epoch,
                        step_count=self.optimizer.step_count,
                        params=self.model.parameters(three_d_only=False),
                        opt_tensors=self.optimizer.state_tensors(),
                        rng_state=self.rng.bit_generator.state)

    def restore(self, path):
        state = load_checkpoint(path)
        restore_model_params(self.model, state["params"])
        opt_names = set(self.optimizer.params)
        opt_tensors = {k: v for k, v in state["opt_tensors"].items()
                       if k.split(".", 1)[1] in opt_names}
        self.optimizer.load_state(state["step_count"], opt_tensors)
        self.rng.bit_generator.state = state["rng_state"]
        self.epoch = state["epoch"]


def restore_model_params(model: Model, tensors: dict):
    params = model.parameters(three_d_only=False)
    for name, p in params.items():
        if name not in tensors:
            raise DatasetError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise DatasetError(f"checkpoint parameter {name} has shape "
                               f"{tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].copy()


def model_from_checkpoint(path) -> tuple[Model, Config]:
    state = load_checkpoint(path)
    cfg = parse_config(state["config_text"])
    model = Model(cfg)
    restore_model_params(model, state["params"])
    return model, cfg


def load_scene_dirs(cfg: Config):
    train_scenes, class_names = read_dataset(cfg.data_dir)
    if not train_scenes:
        raise DatasetError(f"{cfg.data_dir}: dataset holds no scenes")
    val_scenes = []
    if cfg.val_dir:
        val_scenes, _ = read_dataset(cfg.val_dir)
    return train_scenes, val_scenes, class_names
