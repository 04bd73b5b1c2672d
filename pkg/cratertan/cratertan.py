"""
Main CraterTAN class - High-level API
"""

import csv
import json
import logging
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from cratertan.config import ComponentToggles, ConfigError, ExperimentConfig, save_config
from cratertan.core.data_domains import (
    DatasetError,
    DatasetSplit,
    LabelGuard,
    LabeledImage,
    generate_synthetic_domain,
    letterbox_box,
    letterbox_params,
    load_box_dataset,
    save_box_dataset,
    split_dataset,
)
from cratertan.core.metrics import MetricsError, MetricsReport, save_metrics_report
from cratertan.model.detector import (
    CheckpointError,
    CraterDetector,
    DetectorError,
    anchors_from_boxes,
    build_model,
    freeze_layers,
    load_checkpoint,
    model_summary,
)
from cratertan.training.spf import (
    SPFError,
    compute_h,
    finetune,
    generate_pseudo_labels,
    save_manifest,
    sort_and_select,
)
from cratertan.training.trainer import (
    Trainer,
    TrainingError,
    TrainResult,
    evaluate_model,
    seed_everything,
)
from cratertan.utils.logger import setup_logger

# (asaf, shem, bot), baseline first and the full method last
ABLATION_GRID: List[Tuple[bool, bool, bool]] = [
    (False, False, False),
    (False, True, False),
    (False, False, True),
    (True, False, False),
    (True, False, True),
    (False, True, True),
    (True, True, False),
    (True, True, True),
]

# name -> (augmentation, spf), with ASAF and SHEM off
BOT_GRID: List[Tuple[str, bool, bool]] = [
    ("none", False, False),
    ("augmentation", True, False),
    ("spf", False, True),
    ("augmentation+spf", True, True),
]

ABLATION_COLUMNS = [
    "row", "asaf", "shem", "bot", "runs",
    "recall_mean", "recall_std", "map5095_mean", "map5095_std", "map50_mean", "map50_std",
]


def _mean_std(values: List[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return float(array.mean()), std


class CraterTAN:
    """
    Main class for CraterTAN - two-stage crater detection across domains

    This class provides a high-level interface to:
    - Generate or load the labelled source and unlabelled target domains
    - Train the stage-one detector (ASAF, SHEM, weak/strong augmentation)
    - Pseudo-label, select and fine-tune on the target domain
    - Evaluate checkpoints and run the component ablation
    """

    def __init__(
        self,
        config: ExperimentConfig,
        log_level: int = logging.INFO,
        logger: Optional[logging.Logger] = None,
    ):
        """
        Initialize CraterTAN

        Args:
            config: Validated experiment configuration
            log_level: Logging level
            logger: Existing logger to reuse (nested runs); a fresh one writes run.log
        """
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        if logger is None:
            logger = setup_logger("cratertan", level=log_level, log_file=str(self.output_dir / "run.log"))
        self.logger = logger

        save_config(config, self.output_dir / "config.yaml")
        self.logger.info(
            f"Initializing CraterTAN ({config.direction.value}) in {self.output_dir}: "
            f"asaf={config.asaf_enabled}, shem={config.shem_enabled}, bot={config.bot_enabled}, "
            f"seed={config.seed}"
        )

        self._source_split: Optional[DatasetSplit] = None
        self._target: Optional[Tuple[List[LabeledImage], List[LabeledImage]]] = None
        self.label_guard = LabelGuard()

    # -- data -----------------------------------------------------------------

    def _synthetic(self, which: str) -> List[LabeledImage]:
        source = getattr(self.config.data, which)
        offset = 0 if which == "source" else 1
        return generate_synthetic_domain(
            source.resolve_profile(),
            self.config.data.images_per_domain,
            self.config.data.image_size,
            self.config.seed + offset,
        )

    def generate_data(self) -> Dict[str, Path]:
        """
        Render the synthetic domains into <output_dir>/data/{source,target}

        Returns:
            Mapping of domain name to written directory
        """
        written: Dict[str, Path] = {}
        for which in ("source", "target"):
            source = getattr(self.config.data, which)
            if not source.is_synthetic:
                self.logger.info(f"{which} domain is a directory ({source.path}), nothing to generate")
                continue
            images = self._synthetic(which)
            out_dir = self.output_dir / "data" / which
            save_box_dataset(images, out_dir, source.resolve_profile(), self.config.seed)
            self.logger.info(f"Wrote {len(images)} {which} images to {out_dir}")
            written[which] = out_dir
        return written

    def load_source(self) -> DatasetSplit:
        """
        Labelled source domain split into train and validation

        Returns:
            DatasetSplit
        """
        if self._source_split is None:
            source = self.config.data.source
            images = (
                self._synthetic("source") if source.is_synthetic
                else load_box_dataset(source.path, guard=self.label_guard)
            )
            if not images:
                raise DatasetError("Source dataset is empty")
            self._source_split = split_dataset(images, self.config.data.split_ratio, self.config.seed)
            self.logger.info(
                f"Source ready: {len(self._source_split.train)} train / "
                f"{len(self._source_split.val)} val images"
            )
        return self._source_split

    def load_target(self) -> Tuple[List[LabeledImage], List[LabeledImage]]:
        """
        Target domain as (unlabelled pool, labelled hold-out)

        A directory target is used whole as the pool and is read without labels
        under a label-access guard; its hold-out is empty.

        Returns:
            (pool, holdout)
        """
        if self._target is None:
            target = self.config.data.target
            if target.is_synthetic:
                split = split_dataset(
                    self._synthetic("target"), self.config.data.target_split_ratio, self.config.seed
                )
                pool = [image.without_labels() for image in split.train]
                holdout = split.val
            else:
                with self.label_guard.protect(target.path):
                    pool = load_box_dataset(target.path, read_labels=False, guard=self.label_guard)
                holdout = []
            if not pool:
                raise DatasetError("Target dataset is empty")
            self._target = (pool, holdout)
            self.logger.info(f"Target ready: {len(pool)} unlabelled / {len(holdout)} hold-out images")
        return self._target

    # -- stage one ------------------------------------------------------------

    def build_detector(self, train_images: List[LabeledImage]) -> CraterDetector:
        """
        Detector for the configured components, anchors from k-means when enabled

        Args:
            train_images: Source training images (their boxes seed the anchors)

        Returns:
            Freshly initialised CraterDetector
        """
        detector_cfg = self.config.detector_config()
        anchors = None
        if self.config.anchors_from_data and detector_cfg.anchors is None:
            size = detector_cfg.input_size
            boxes = []
            for image in train_images:
                params = letterbox_params(image.height, image.width, size)
                boxes.extend(letterbox_box(box, params) for box in image.boxes)
            anchors = anchors_from_boxes(boxes, size, detector_cfg.num_scales, seed=self.config.seed)
        return build_model(self.config.detector_config(anchors))

    def train_stage_one(self) -> TrainResult:
        """
        Train M1 on the labelled source domain

        Returns:
            TrainResult; checkpoints under <output_dir>/stage_one
        """
        cfg = self.config
        seed_everything(cfg.seed, cfg.train.deterministic)
        try:
            split = self.load_source()
            model = self.build_detector(split.train)
            policy = cfg.aug_policy()
            self.logger.info(
                f"Stage one: {model.config.num_scales} scales, objectness={cfg.objectness_mode.value}, "
                f"augmentation={policy.kind.value if policy else 'none'}"
            )
            trainer = Trainer(
                model, cfg.train, cfg.optimizer, cfg.shem, cfg.objectness_mode, logger=self.logger
            )
            result = trainer.fit(
                split.train,
                split.val,
                cfg.train.epochs,
                self.output_dir / "stage_one",
                policy=policy,
                seed=cfg.seed,
                checkpoint_meta={
                    "stage": "stage_one",
                    "direction": cfg.direction.value,
                    "num_train": len(split.train),
                    "components": {"asaf": cfg.asaf_enabled, "shem": cfg.shem_enabled,
                                   "bot": cfg.bot_enabled},
                },
            )
        except (DatasetError, DetectorError, TrainingError) as e:
            self.logger.error(f"Stage-one training failed: {str(e)}")
            raise

        self.logger.info(
            f"Stage one done: best epoch {result.best_epoch + 1}, "
            f"val mAP@.5={result.best_metrics.get('map50', 0.0):.4f}, checkpoint {result.best_checkpoint}"
        )
        return result

    def _stage_one_checkpoint(self) -> Path:
        for name in ("best.ckpt", "last.ckpt"):
            path = self.output_dir / "stage_one" / name
            if path.is_file():
                return path
        raise CheckpointError(
            f"No stage-one checkpoint under {self.output_dir / 'stage_one'}; run training first"
        )

    # -- stage two ------------------------------------------------------------

    def run_spf(self, checkpoint: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        """
        Pseudo-label the target pool, select the richest images and fine-tune M1 into M2

        Args:
            checkpoint: Stage-one checkpoint; defaults to <output_dir>/stage_one/best.ckpt

        Returns:
            Dictionary with h, selection counts, manifest and M2 paths
        """
        cfg = self.config
        checkpoint = Path(checkpoint) if checkpoint else self._stage_one_checkpoint()
        seed_everything(cfg.seed, cfg.train.deterministic)
        spf_dir = self.output_dir / "spf"

        try:
            model, meta = load_checkpoint(checkpoint)
            pool, _ = self.load_target()
            n1 = meta.get("num_train") or len(self.load_source().train)
            target = cfg.data.target
            guard = nullcontext() if target.is_synthetic else self.label_guard.protect(target.path)

            with guard:
                pseudo = generate_pseudo_labels(
                    model, pool, cfg.spf, source_model_id=str(checkpoint), batch_size=cfg.train.batch_size
                )
                h = compute_h(n1, len(pool), cfg.spf.alpha, cfg.spf.h_max)
                selected = sort_and_select(pseudo, h)
                manifest = save_manifest(selected, spf_dir / "pseudo_labels.jsonl")
                self.logger.info(
                    f"Selected {len(selected)}/{len(pool)} target images (h={h:.4f}, N1={n1}), "
                    f"{sum(selected.counts().values())} pseudo-boxes"
                )
                model, result = finetune(
                    model, selected, pool, cfg.spf, cfg.train, cfg.optimizer, cfg.shem,
                    spf_dir, policy=cfg.aug_policy(), seed=cfg.seed,
                )
        except (CheckpointError, DatasetError, SPFError, TrainingError) as e:
            self.logger.error(f"SPF failed: {str(e)}")
            raise

        self.logger.info(f"SPF done: M2 written to {result.last_checkpoint}")
        return {
            "h": h,
            "num_target": len(pool),
            "num_selected": len(selected),
            "num_pseudo_boxes": sum(selected.counts().values()),
            "manifest": manifest,
            "checkpoint": result.last_checkpoint,
            "source_checkpoint": checkpoint,
        }

    # -- evaluation -----------------------------------------------------------

    def _default_checkpoint(self) -> Path:
        m2 = self.output_dir / "spf" / "m2.ckpt"
        return m2 if m2.is_file() else self._stage_one_checkpoint()

    def _eval_images(self, dataset: str) -> List[LabeledImage]:
        if dataset == "source-val":
            return self.load_source().val
        if dataset == "target":
            target = self.config.data.target
            if target.is_synthetic:
                return self.load_target()[1]
            return load_box_dataset(target.path, guard=self.label_guard)
        return load_box_dataset(dataset, guard=self.label_guard)

    def evaluate(
        self,
        checkpoint: Optional[Union[str, Path]] = None,
        dataset: str = "target",
        out_dir: Optional[Union[str, Path]] = None,
    ) -> MetricsReport:
        """
        Evaluate a checkpoint on a labelled dataset and write the metric artifacts

        Args:
            checkpoint: Checkpoint file; defaults to M2, else the stage-one checkpoint
            dataset: "source-val", "target" (synthetic hold-out or labelled directory) or a path
            out_dir: Artifact directory; defaults to <output_dir>/eval

        Returns:
            MetricsReport
        """
        checkpoint = Path(checkpoint) if checkpoint else self._default_checkpoint()
        try:
            model, _ = load_checkpoint(checkpoint)
            images = self._eval_images(dataset)
            if not images:
                raise DatasetError(f"No labelled images to evaluate for dataset '{dataset}'")
            self.logger.info(f"Evaluating {checkpoint} on {len(images)} images ({dataset})")
            report = evaluate_model(model, images, self.config.train)
            save_metrics_report(
                report, Path(out_dir) if out_dir else self.output_dir / "eval",
                title=f"{checkpoint.name} on {dataset}",
            )
        except (CheckpointError, DatasetError, MetricsError) as e:
            self.logger.error(f"Evaluation failed: {str(e)}")
            raise

        self.logger.info(
            f"P={report.precision:.4f} R={report.recall:.4f} "
            f"mAP@.5={report.map50:.4f} mAP@.5:.95={report.map5095:.4f}"
        )
        return report

    # -- full runs and ablation -----------------------------------------------

    def run_pipeline(self, spf: Optional[bool] = None) -> Dict[str, Any]:
        """
        Stage one, SPF when the bag of tricks is on, then target hold-out evaluation

        Args:
            spf: Run the SPF stage; defaults to the BOT switch

        Returns:
            Dictionary of target metrics plus run details
        """
        spf = self.config.bot_enabled if spf is None else spf
        result = self.train_stage_one()
        checkpoint = result.best_checkpoint or result.last_checkpoint
        spf_status = "off"
        if spf:
            try:
                checkpoint = self.run_spf(checkpoint)["checkpoint"]
                spf_status = "done"
            except SPFError as e:
                self.logger.warning(f"SPF skipped, evaluating M1: {e}")
                spf_status = "skipped"

        report = self.evaluate(checkpoint, dataset="target")
        return {
            "seed": self.config.seed,
            "spf": spf_status,
            "checkpoint": str(checkpoint),
            "precision": report.precision,
            "recall": report.recall,
            "map50": report.map50,
            "map5095": report.map5095,
        }

    def _ablation_config(self, run_dir: Path, seed: int, **components: Optional[bool]) -> ExperimentConfig:
        cfg = replace(
            self.config,
            components=ComponentToggles(**components),
            seed=seed,
            output_dir=str(run_dir),
        )
        if self.config.ablation.epochs:
            cfg.train = replace(cfg.train, epochs=self.config.ablation.epochs)
        return cfg

    def _write_table(self, path: Path, rows: List[Dict[str, Any]], columns: List[str]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)

    @staticmethod
    def _summarize(runs: List[Dict[str, Any]]) -> Dict[str, Any]:
        summary: Dict[str, Any] = {"runs": len(runs)}
        for metric in ("recall", "map5095", "map50"):
            mean, std = _mean_std([run[metric] for run in runs])
            summary[f"{metric}_mean"] = mean
            summary[f"{metric}_std"] = std
        return summary

    def run_ablation(self) -> List[Dict[str, Any]]:
        """
        Run the eight ASAF / SHEM / BOT combinations over every ablation seed

        Writes ablation/ablation.csv (mean and std of target recall, mAP@.5:.95 and
        mAP@.5 per row), ablation/runs.json, and ablation/ablation_bot.csv when
        ``ablation.split_bot`` is set.

        Returns:
            One summary dictionary per grid row, in grid order
        """
        cfg = self.config
        if not (cfg.data.source.is_synthetic and cfg.data.target.is_synthetic):
            raise ConfigError("The ablation needs synthetic source and target profiles")

        root = self.output_dir / "ablation"
        root.mkdir(parents=True, exist_ok=True)
        rows: List[Dict[str, Any]] = []
        all_runs: Dict[str, List[Dict[str, Any]]] = {}

        for index, (asaf, shem, bot) in enumerate(ABLATION_GRID, 1):
            runs = []
            for seed in cfg.ablation.seeds:
                self.logger.info(f"Ablation row {index}/8 (asaf={asaf}, shem={shem}, bot={bot}), seed {seed}")
                run_cfg = self._ablation_config(
                    root / f"row{index}_seed{seed}", seed, asaf=asaf, shem=shem, bot=bot
                )
                runs.append(CraterTAN(run_cfg, logger=self.logger).run_pipeline())
            all_runs[f"row{index}"] = runs
            rows.append(dict({"row": index, "asaf": asaf, "shem": shem, "bot": bot}, **self._summarize(runs)))
            self.logger.info(
                f"Row {index}: recall={rows[-1]['recall_mean']:.4f}±{rows[-1]['recall_std']:.4f} "
                f"mAP@.5:.95={rows[-1]['map5095_mean']:.4f}±{rows[-1]['map5095_std']:.4f}"
            )
        self._write_table(root / "ablation.csv", rows, ABLATION_COLUMNS)

        if cfg.ablation.split_bot:
            bot_rows = []
            for name, augmentation, spf in BOT_GRID:
                runs = []
                for seed in cfg.ablation.seeds:
                    run_cfg = self._ablation_config(
                        root / f"bot_{name.replace('+', '_')}_seed{seed}", seed,
                        asaf=False, shem=False, bot=augmentation or spf,
                    )
                    run_cfg.augmentation = replace(run_cfg.augmentation, enabled=augmentation)
                    runs.append(CraterTAN(run_cfg, logger=self.logger).run_pipeline(spf=spf))
                all_runs[f"bot_{name}"] = runs
                bot_rows.append(dict({"variant": name}, **self._summarize(runs)))
            self._write_table(
                root / "ablation_bot.csv", bot_rows, ["variant"] + ABLATION_COLUMNS[4:]
            )

        (root / "runs.json").write_text(json.dumps(all_runs, indent=2), encoding="utf-8")
        self.logger.info(f"Ablation written to {root}")
        return rows

    # -- introspection --------------------------------------------------------

    def model_summary(self, checkpoint: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        """
        Parameter counts of the baseline and ASAF graphs, and of the configured
        model with the SPF freeze applied

        Args:
            checkpoint: Optional checkpoint to summarize as well

        Returns:
            Summary dictionary
        """
        detector = self.config.detector
        baseline = build_model(replace(detector, asaf_enabled=False, num_scales=3, anchors=None))
        asaf = build_model(replace(detector, asaf_enabled=True, num_scales=4, anchors=None))
        configured = build_model(self.config.detector_config())
        summary = {
            "baseline": model_summary(baseline),
            "asaf": model_summary(asaf),
            "configured": model_summary(freeze_layers(configured, self.config.spf.freeze_n)),
        }
        if checkpoint:
            model, meta = load_checkpoint(checkpoint)
            summary["checkpoint"] = dict(model_summary(model), meta=meta)
        return summary

    def __repr__(self) -> str:
        return (
            f"CraterTAN(direction='{self.config.direction.value}', "
            f"output_dir='{self.output_dir}', seed={self.config.seed})"
        )


__all__ = ["ABLATION_GRID", "BOT_GRID", "CraterTAN"]
