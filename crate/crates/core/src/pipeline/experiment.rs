//! End-to-end runs: training the model variants, scoring the validation
//! split and measuring every pipeline stage.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use super::context::{ContextModel, SceneClassifier};
use super::data::{crop_resize, generate_dataset, Annotation, Dataset, DatasetSpec, SyntheticScene, MAX_CLASSES};
use super::detect::{class_detections, score_boxes, ScoreTable};
use super::ensemble::{ensemble_map, greedy_ensemble, EnsembleSelection};
use super::eval::{evaluate_map, MapReport};
use super::proposals::propose_boxes;
use super::regress::{apply_offsets, regression_features, BoxRegressor};
use super::reject::{reject_boxes, rejection_recall, Rejector};
use super::svm::SvmConfig;
use crate::error::Result;
use crate::net::{finetune_from, pretrain_trunk, Architecture, Network, Pooling, PretrainData, PretrainScheme, Sample};
use crate::net::{TrainConfig, TrainReport};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Seeds pretraining data, sample selection, training and the SVMs.
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Scenes in the separately generated pretraining set (all classes).
    pub pretrain_scenes: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub keep_fraction: f64,
    pub positives_per_object: usize,
    pub negatives_per_scene: usize,
    pub svm: SvmConfig,
    pub ridge_lambda: f64,
    pub regression_iou: f64,
    pub nms_iou: f64,
}

impl ExperimentConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            dataset: DatasetSpec::toy(4, 200, 100, seed),
            pretrain_scenes: 200,
            pretrain: TrainConfig::scaled(300, 16, seed),
            finetune: TrainConfig::scaled(400, 16, seed),
            keep_fraction: 0.3,
            positives_per_object: 3,
            negatives_per_scene: 4,
            svm: SvmConfig { seed, ..SvmConfig::default() },
            ridge_lambda: 1.0,
            regression_iou: 0.6,
            nms_iou: 0.3,
        }
    }

    /// Same settings with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.dataset.seed = seed;
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c.svm.seed = seed;
        c
    }
}

/// A pooling choice plus the pretraining scheme for its trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub pooling: Pooling,
    pub scheme: Option<PretrainScheme>,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::new(Pooling::Max, PretrainScheme::ImageLevel),
        Variant::new(Pooling::Max, PretrainScheme::ObjectLevel),
        Variant::new(Pooling::Def, PretrainScheme::ImageLevel),
        Variant::new(Pooling::Def, PretrainScheme::ObjectLevel),
    ];

    pub const fn new(pooling: Pooling, scheme: PretrainScheme) -> Self {
        Self {
            pooling,
            scheme: Some(scheme),
        }
    }

    pub fn name(&self) -> String {
        let p = match self.pooling {
            Pooling::Max => "max",
            Pooling::Def => "def",
            Pooling::DefMaxBasis => "defmax",
        };
        let s = match self.scheme {
            Some(PretrainScheme::ImageLevel) => "image",
            Some(PretrainScheme::ObjectLevel) => "object",
            None => "scratch",
        };
        format!("{p}-{s}")
    }
}

fn scene_sample(scene: &SyntheticScene, side: usize, classes: usize) -> Sample {
    let (w, h) = scene.size();
    let image = crop_resize(&scene.image, &BoundingBox::new(0, 0, w, h), side);
    let labels = (0..classes)
        .map(|k| if scene.objects.iter().any(|o| o.class == k) { 1.0 } else { -1.0 })
        .collect();
    Sample { image, labels }
}

/// Whole scenes with multi-label targets and tight object crops, both drawn
/// from the same generated scenes.
pub fn pretrain_data(scenes: &[SyntheticScene], classes: usize, side: usize) -> PretrainData {
    PretrainData {
        classes,
        scenes: scenes.iter().map(|s| scene_sample(s, side, classes)).collect(),
        crops: scenes
            .iter()
            .flat_map(|s| {
                s.objects
                    .iter()
                    .map(|o| Sample::one_hot(crop_resize(&s.image, &o.bbox, side), Some(o.class), classes))
            })
            .collect(),
    }
}

/// Pretraining scenes covering every template class, from a seed disjoint
/// from the detection data.
pub fn pretrain_scenes(cfg: &ExperimentConfig) -> Result<Vec<SyntheticScene>> {
    let spec = DatasetSpec {
        classes: MAX_CLASSES,
        train_scenes: cfg.pretrain_scenes,
        val_scenes: 0,
        seed: cfg.seed ^ 0x005e_ed0f_9e7a,
        ..cfg.dataset.clone()
    };
    Ok(generate_dataset(&spec)?.train)
}

/// Fine-tuning set: every object crop and its best-overlapping proposals
/// (IoU ≥ 0.5) as positives, plus random low-overlap proposals (IoU < 0.3)
/// as background.
pub fn finetune_samples(scenes: &[SyntheticScene], classes: usize, side: usize, cfg: &ExperimentConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7);
    let mut out = Vec::new();
    for scene in scenes {
        let (w, h) = scene.size();
        let boxes = propose_boxes(w, h);
        for o in &scene.objects {
            out.push(Sample::one_hot(crop_resize(&scene.image, &o.bbox, side), Some(o.class), classes));
            let mut near: Vec<(f64, &BoundingBox)> =
                boxes.iter().map(|b| (b.iou(&o.bbox), b)).filter(|(iou, _)| *iou >= 0.5).collect();
            near.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (_, b) in near.into_iter().take(cfg.positives_per_object) {
                out.push(Sample::one_hot(crop_resize(&scene.image, b, side), Some(o.class), classes));
            }
        }
        let background: Vec<&BoundingBox> = boxes
            .iter()
            .filter(|b| scene.objects.iter().all(|o| o.bbox.iou(b) < 0.3))
            .collect();
        for b in background.choose_multiple(&mut rng, cfg.negatives_per_scene) {
            out.push(Sample::one_hot(crop_resize(&scene.image, b, side), None, classes));
        }
    }
    out
}

/// Proposals per scene after optional rejection.
pub fn scene_proposals(scenes: &[SyntheticScene], rejector: Option<&Rejector>, keep_fraction: f64) -> Result<Vec<Vec<BoundingBox>>> {
    par::try_map(scenes, |scene| {
        let (w, h) = scene.size();
        let boxes = propose_boxes(w, h);
        Ok(match rejector {
            Some(r) => reject_boxes(&r.objectness(&scene.image, &boxes)?, keep_fraction)?
                .into_iter()
                .map(|i| boxes[i])
                .collect(),
            None => boxes,
        })
    })
}

/// Scores every scene's boxes with `net`; scenes run in parallel, results
/// stay in scene order.
pub fn score_scenes(net: &Network, scenes: &[SyntheticScene], boxes: &[Vec<BoundingBox>]) -> Result<ScoreTable> {
    let idx: Vec<usize> = (0..scenes.len()).collect();
    par::try_map(&idx, |&i| score_boxes(net, &scenes[i].image, &boxes[i]))
}

pub fn ground_truth(scenes: &[SyntheticScene]) -> Vec<Vec<Annotation>> {
    scenes.iter().map(|s| s.objects.clone()).collect()
}

pub fn table_map(table: &ScoreTable, scenes: &[SyntheticScene], classes: usize, nms_iou: f64) -> MapReport {
    evaluate_map(&class_detections(table, classes, nms_iou), &ground_truth(scenes), classes, 0.5)
}

/// Adds regressed boxes to every detection in place.
pub fn regress_table(table: &mut ScoreTable, net: &Network, reg: &BoxRegressor, scenes: &[SyntheticScene]) -> Result<()> {
    let updated = par::try_map(&(0..scenes.len()).collect::<Vec<_>>(), |&s| {
        let (w, h) = scenes[s].size();
        table[s]
            .iter()
            .map(|d| {
                let t = reg.predict(&regression_features(net, &scenes[s].image, &d.bbox)?)?;
                Ok((t, apply_offsets(&d.bbox, &t, w, h)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for (dets, regs) in table.iter_mut().zip(updated) {
        for (d, r) in dets.iter_mut().zip(regs) {
            d.regression = Some(r);
        }
    }
    Ok(())
}

/// Trained pieces shared by every model variant of one run.
#[derive(Debug, Clone)]
pub struct Stages {
    pub rejector: Rejector,
    pub scene_classifier: SceneClassifier,
}

impl Stages {
    pub fn train(ds: &Dataset, svm: &SvmConfig) -> Result<Self> {
        Ok(Self {
            rejector: Rejector::train(&ds.train, svm)?,
            scene_classifier: SceneClassifier::train(&ds.train, ds.spec.themes(), svm)?,
        })
    }

    pub fn scene_scores(&self, scenes: &[SyntheticScene]) -> Result<Vec<Vec<f64>>> {
        par::try_map(scenes, |s| self.scene_classifier.scores(&s.image))
    }
}

/// Pretrained trunks for both schemes, keyed by scheme.
pub fn pretrain_trunks(cfg: &ExperimentConfig, arch: &Architecture) -> Result<Vec<(PretrainScheme, Network)>> {
    let scenes = pretrain_scenes(cfg)?;
    let data = pretrain_data(&scenes, MAX_CLASSES, arch.input[1]);
    [PretrainScheme::ImageLevel, PretrainScheme::ObjectLevel]
        .into_iter()
        .map(|s| Ok((s, pretrain_trunk(arch, &data, s, &cfg.pretrain)?)))
        .collect()
}

pub fn train_variant(
    variant: Variant,
    ds: &Dataset,
    trunks: &[(PretrainScheme, Network)],
    samples: &[Sample],
    cfg: &ExperimentConfig,
) -> Result<(Network, TrainReport)> {
    let arch = Architecture::toy(ds.spec.classes, variant.pooling);
    let trunk = variant.scheme.and_then(|s| trunks.iter().find(|(t, _)| *t == s)).map(|(_, n)| n);
    finetune_from(&arch, trunk, samples, &cfg.finetune)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub step: String,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub val_map: f64,
    pub val2_map: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub rejection_recall: f64,
    pub models: Vec<ModelResult>,
    pub ensemble: EnsembleSelection,
    /// Ensemble mAP recomputed from the selected members.
    pub ensemble_remeasured: f64,
    pub context_before: f64,
    pub context_after: f64,
    pub regression_before: f64,
    pub regression_after: f64,
    /// Context weight of each class on its own theme score.
    pub own_theme_weights: Vec<f64>,
    pub train_map: f64,
    pub ablation: Vec<AblationRow>,
}

impl ExperimentReport {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// One full seeded run: four variants, rejection, ensemble, context and
/// regression, plus the component ladder on the second validation half.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_on_dataset(&generate_dataset(&cfg.dataset)?, cfg)
}

/// [`run_experiment`] on an existing dataset; `cfg.dataset` is ignored.
pub fn run_on_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let k = ds.spec.classes;
    let side = 28;
    let base_arch = Architecture::toy(k, Pooling::Max);
    let stages = Stages::train(ds, &cfg.svm)?;
    let recall = rejection_recall(&stages.rejector, &ds.val, cfg.keep_fraction)?;
    info!("seed {}: rejection recall {recall:.3}", cfg.seed);

    let trunks = pretrain_trunks(cfg, &base_arch)?;
    let samples = finetune_samples(&ds.train, k, side, cfg);
    let kept = scene_proposals(&ds.val, Some(&stages.rejector), cfg.keep_fraction)?;
    let half = ds.val.len() / 2;
    let (val1, val2) = (ds.val1(), ds.val2());

    let mut nets = Vec::new();
    let mut tables = Vec::new();
    let mut models = Vec::new();
    for v in Variant::ALL {
        let (net, report) = train_variant(v, ds, &trunks, &samples, cfg)?;
        let table = score_scenes(&net, &ds.val, &kept)?;
        let val_map = table_map(&table, &ds.val, k, cfg.nms_iou).map;
        let val2_map = table_map(&table[half..].to_vec(), val2, k, cfg.nms_iou).map;
        info!("seed {}: {} val mAP {val_map:.4} (val2 {val2_map:.4})", cfg.seed, v.name());
        models.push(ModelResult {
            name: v.name(),
            val_map,
            val2_map,
            epoch_losses: report.epoch_losses,
        });
        nets.push(net);
        tables.push(table);
    }

    let val2_tables: Vec<ScoreTable> = tables.iter().map(|t| t[half..].to_vec()).collect();
    let gt2 = ground_truth(val2);
    let ensemble = greedy_ensemble(&val2_tables, &gt2, k, cfg.nms_iou)?;
    let ensemble_remeasured = ensemble_map(&val2_tables, &ensemble.selected, &gt2, k, cfg.nms_iou)?;

    // Final configuration: def-pooling with object-level pretraining.
    let fin = 3;
    let scene_scores = stages.scene_scores(&ds.val)?;
    let context = ContextModel::train(&tables[fin][..half].to_vec(), &scene_scores[..half], val1, k, &cfg.svm)?;
    let mut refined = val2_tables[fin].clone();
    context.apply(&mut refined, &scene_scores[half..])?;
    let context_before = models[fin].val2_map;
    let context_after = table_map(&refined, val2, k, cfg.nms_iou).map;

    let regressor = BoxRegressor::train_on_scenes(&nets[fin], &ds.train, cfg.regression_iou, cfg.ridge_lambda)?;
    let mut regressed = refined.clone();
    regress_table(&mut regressed, &nets[fin], &regressor, val2)?;
    let regression_after = table_map(&regressed, val2, k, cfg.nms_iou).map;

    let all_val2 = scene_proposals(val2, None, 1.0)?;
    let baseline = table_map(&score_scenes(&nets[0], val2, &all_val2)?, val2, k, cfg.nms_iou).map;

    let train_eval = &ds.train[..ds.train.len().min(ds.val.len())];
    let train_kept = scene_proposals(train_eval, Some(&stages.rejector), cfg.keep_fraction)?;
    let train_map = table_map(&score_scenes(&nets[fin], train_eval, &train_kept)?, train_eval, k, cfg.nms_iou).map;

    let ablation = [
        ("baseline", baseline),
        ("+rejection", models[0].val2_map),
        ("+object-level pretraining", models[1].val2_map),
        ("+def-pooling", models[3].val2_map),
        ("+context", context_after),
        ("+bbox regression", regression_after),
    ]
    .into_iter()
    .map(|(s, m)| AblationRow { step: s.into(), map: m })
    .collect();

    Ok(ExperimentReport {
        seed: cfg.seed,
        rejection_recall: recall,
        models,
        ensemble,
        ensemble_remeasured,
        context_before,
        context_after,
        regression_before: context_after,
        regression_after,
        own_theme_weights: (0..k).map(|c| context.context_weight(c, c)).collect(),
        train_map,
        ablation,
    })
}
