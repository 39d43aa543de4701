//! Desk-scale joint training of the toy detector and the alignment heads
//! on synthetic scenes.

mod detector;
mod metrics;
mod synthetic;

pub use detector::{
    cross_entropy, global_input, object_inputs, softmax_rows, DetectorShape, ToyDetector,
    GEOMETRY_DIM,
};
pub use metrics::{eval_confusion, eval_object_alignment, eval_retrieval};
pub use synthetic::{
    category_names, generate_synthetic, SyntheticConfig, SyntheticDataset, SyntheticScene,
    BUILTIN_CATEGORIES,
};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotations::{Hierarchy, BACKGROUND};
use crate::embedding::{EmbeddingError, HashEmbedder, HeadForward, HeadGrads, ProjectionHead};
use crate::mi::{
    self, FeatureBatch, FeatureRole, GradTarget, LossConfig, LossOutput, MiError,
    NegativeSharing,
};
use crate::negatives::{self, FailureSet, NegativeError, ScoredPrediction};
use crate::prompting::{
    render_background_description, render_object_description, PromptError, PromptTemplate,
    Renderer, TemplateSet,
};
use crate::seeds;
use detector::{classifier_grads, stack_rows};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("empty evaluation input for {0}")]
    EmptyEval(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
}

impl TrainError {
    /// Whether the failure is numerical rather than a bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Divergence { .. }
                | TrainError::Mi(MiError::NonFinite(_))
                | TrainError::Embedding(EmbeddingError::ZeroNorm { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak step size.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub n_h: usize,
    /// Shared embedding width `d`.
    pub dim: usize,
    /// Width of the hash text encoder.
    pub text_dim: usize,
    pub hidden: usize,
    pub enable_image_level: bool,
    pub enable_object_level: bool,
    pub enable_hard_negatives: bool,
    pub negative_sharing: NegativeSharing,
    /// Epochs trained before hard negatives switch on.
    pub warmup_epochs: usize,
    pub workers: usize,
    pub template_set: TemplateSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 20,
            batch_size: 32,
            lr: 0.1,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            n_h: negatives::DEFAULT_NUM_NEGATIVES,
            dim: crate::embedding::DEFAULT_DIM,
            text_dim: 128,
            hidden: 256,
            enable_image_level: true,
            enable_object_level: true,
            enable_hard_negatives: true,
            negative_sharing: NegativeSharing::PerImage,
            warmup_epochs: 0,
            workers: 1,
            template_set: TemplateSet::Cqps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let problem = if self.batch_size == 0 {
            Some("batch_size must be at least 1")
        } else if !(self.lr >= 0.0 && self.lr.is_finite()) {
            Some("lr must be non-negative and finite")
        } else if self.n_h == 0 && self.enable_hard_negatives {
            Some("n_h must be at least 1 when hard negatives are enabled")
        } else if self.dim == 0 || self.text_dim == 0 || self.hidden == 0 {
            Some("dimensions must be positive")
        } else if self.workers == 0 {
            Some("workers must be at least 1")
        } else {
            None
        };
        match problem {
            Some(p) => Err(TrainError::Config(p.to_string())),
            None => Ok(()),
        }
    }
}

/// Step size over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at the first step down to zero after the last.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Step size for step `t` of `total`.
    pub fn at(self, lr: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Batch-averaged loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub det: f64,
    pub vg: f64,
    pub lg: f64,
    pub o: f64,
    pub total: f64,
}

impl LossComponents {
    fn add(&mut self, other: &LossComponents) {
        self.det += other.det;
        self.vg += other.vg;
        self.lg += other.lg;
        self.o += other.o;
        self.total += other.total;
    }

    fn scale(&mut self, k: f64) {
        self.det *= k;
        self.vg *= k;
        self.lg *= k;
        self.o *= k;
        self.total *= k;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub retrieval_top1: f64,
    pub object_alignment_top1: f64,
    pub sibling_confusion_rate: f64,
}

/// One line of the metrics log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub losses: Option<LossComponents>,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub retrieval_top1: f64,
    pub object_alignment_top1: f64,
    pub sibling_confusion_rate: f64,
}

impl TrainReport {
    pub fn initial(&self) -> &EvalMetrics {
        &self.epochs[0].metrics
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain data serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub detector: ToyDetector,
}

struct EvalSet {
    global: Array2<f64>,
    text: Array2<f64>,
    confused: Array2<f64>,
    objects: Array2<f64>,
    labels: Vec<usize>,
}

struct Trainer<'a> {
    dataset: &'a SyntheticDataset,
    hierarchy: &'a Hierarchy,
    renderer: Renderer<'a>,
    config: &'a TrainConfig,
    shape: DetectorShape,
    detector: ToyDetector,
    embedder: HashEmbedder,
    category_text: Array2<f64>,
}

/// Forward pass with rows split across workers and gathered in rank order.
fn sharded_forward(
    head: &ProjectionHead,
    x: &Array2<f64>,
    workers: usize,
    role: FeatureRole,
) -> Result<(Vec<HeadForward>, FeatureBatch)> {
    let n = x.nrows();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        let fwd = head.forward_batch(x.view())?;
        let batch = FeatureBatch::from_raw(role, fwd.output.clone());
        return Ok((vec![fwd], batch));
    }
    let chunk = n.div_ceil(workers);
    let shards: Vec<_> = (0..n).step_by(chunk).map(|lo| (lo, (lo + chunk).min(n))).collect();
    let fwds: Vec<std::result::Result<HeadForward, EmbeddingError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|&(lo, hi)| scope.spawn(move || head.forward_batch(x.slice(s![lo..hi, ..]))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let fwds = fwds.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let parts: Vec<FeatureBatch> = fwds
        .iter()
        .map(|f| FeatureBatch::from_raw(role, f.output.clone()))
        .collect();
    let ranks: Vec<usize> = (0..parts.len()).collect();
    let gathered = mi::gather_features(&parts, &ranks)?;
    Ok((fwds, gathered))
}

fn sharded_backward(head: &ProjectionHead, fwds: &[HeadForward], upstream: &Array2<f64>) -> HeadGrads {
    let mut total = HeadGrads::zeros_like(head);
    let mut lo = 0;
    for f in fwds {
        let hi = lo + f.output.nrows();
        let g = head.backward_batch(f, upstream.slice(s![lo..hi, ..]));
        total.add_params(&g);
        lo = hi;
    }
    total
}

impl<'a> Trainer<'a> {
    fn text_rows(&mut self, texts: &[String]) -> Result<Array2<f64>> {
        let rows = texts
            .iter()
            .map(|t| Ok(self.embedder.embed_text(t).normalize()?.values))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack_rows(&rows, self.shape.text_dim))
    }

    fn description_seed(&self, epoch: usize, scene: usize) -> u64 {
        seeds::mix(seeds::mix(self.config.seed, epoch as u64), scene as u64)
    }

    fn build_eval(&mut self) -> Result<EvalSet> {
        let scenes = &self.dataset.eval;
        let mut anchors = Vec::with_capacity(scenes.len());
        let mut confused = Vec::with_capacity(scenes.len());
        let mut objects = Vec::new();
        let mut labels = Vec::new();
        let mut globals = Vec::with_capacity(scenes.len());
        for (i, scene) in scenes.iter().enumerate() {
            let seed = seeds::mix(seeds::mix(self.config.seed, 0x6576_616c), i as u64);
            let anchor = self.renderer.describe(&scene.annotation, seed)?;
            let neg = negatives::build_negative_set(
                &scene.annotation,
                &anchor,
                &FailureSet::default(),
                self.hierarchy,
                &self.renderer,
                1,
                seeds::mix(seed, 1),
            )?;
            confused.push(neg.negatives[0].text.clone());
            anchors.push(anchor.text);
            globals.push(global_input(scene, self.shape.signature_dim));
            objects.extend(object_inputs(scene));
            labels.extend(scene.annotation.boxes.iter().map(|b| b.category_id));
        }
        Ok(EvalSet {
            global: stack_rows(&globals, self.shape.global_input()),
            text: self.text_rows(&anchors)?,
            confused: self.text_rows(&confused)?,
            objects: stack_rows(&objects, self.shape.object_input()),
            labels,
        })
    }

    fn evaluate(&self, eval: &EvalSet) -> Result<EvalMetrics> {
        let det = &self.detector;
        let v = det.global_encoder.forward_batch(eval.global.view())?.output;
        let t = det.text_global.forward_batch(eval.text.view())?.output;
        let c = det.text_global.forward_batch(eval.confused.view())?.output;
        let n = v.nrows();
        let mut hits = 0.0;
        for lo in (0..n).step_by(self.config.batch_size) {
            let hi = (lo + self.config.batch_size).min(n);
            let frac = eval_retrieval(v.slice(s![lo..hi, ..]), t.slice(s![lo..hi, ..]))?;
            hits += frac * (hi - lo) as f64;
        }
        let objects = det.object_encoder.forward_batch(eval.objects.view())?.output;
        let cats = det.text_category.forward_batch(self.category_text.view())?.output;
        Ok(EvalMetrics {
            retrieval_top1: hits / n as f64,
            object_alignment_top1: eval_object_alignment(objects.view(), cats.view(), &eval.labels)?,
            sibling_confusion_rate: eval_confusion(v.view(), t.view(), c.view())?,
        })
    }

    fn failures(&self, scene: &SyntheticScene, scores: &Array2<f64>, rows: &[usize]) -> Result<FailureSet> {
        let a = &scene.annotation;
        let mut preds: Vec<ScoredPrediction> = a
            .boxes
            .iter()
            .enumerate()
            .map(|(k, b)| ScoredPrediction {
                score: scores.row(rows[k]).to_vec(),
                assigned_label: b.category_id,
                bbox: *b,
                matched_object: Some(k),
            })
            .collect();
        preds.push(ScoredPrediction {
            score: scores.row(rows[a.boxes.len()]).to_vec(),
            assigned_label: BACKGROUND,
            bbox: scene.background_box,
            matched_object: None,
        });
        Ok(negatives::detect_failures(&preds)?)
    }

    fn step(
        &mut self,
        batch: &[usize],
        epoch: usize,
        batch_index: usize,
        lr: f64,
    ) -> Result<LossComponents> {
        let cfg = self.config;
        let scenes: Vec<&SyntheticScene> = batch.iter().map(|&i| &self.dataset.scenes[i]).collect();
        let sig_dim = self.shape.signature_dim;

        // Classifier inputs: every object, then every background proposal.
        let mut cls_rows = Vec::new();
        let mut cls_labels = Vec::new();
        let mut scene_rows: Vec<Vec<usize>> = Vec::with_capacity(scenes.len());
        for s in &scenes {
            scene_rows.push(Vec::new());
            for (b, sig) in s.annotation.boxes.iter().zip(&s.signatures) {
                scene_rows.last_mut().expect("pushed").push(cls_rows.len());
                cls_rows.push(sig.clone());
                cls_labels.push(b.category_id);
            }
        }
        for (k, s) in scenes.iter().enumerate() {
            scene_rows[k].push(cls_rows.len());
            cls_rows.push(s.background_signature.clone());
            cls_labels.push(BACKGROUND);
        }
        let cls_x = stack_rows(&cls_rows, sig_dim);
        let logits = self.detector.classifier.forward(cls_x.view());
        let (det_value, d_logits) = cross_entropy(&logits, &cls_labels);
        let det = LossOutput {
            value: det_value,
            grads: vec![mi::Gradient {
                target: GradTarget::Logits,
                values: d_logits,
            }],
        };

        let mut l_vg = LossOutput::constant(0.0);
        let mut l_lg = LossOutput::constant(0.0);
        let mut image_state = None;
        if cfg.enable_image_level {
            let mut texts = Vec::with_capacity(scenes.len());
            let mut descriptions = Vec::with_capacity(scenes.len());
            for (k, s) in scenes.iter().enumerate() {
                let d = self
                    .renderer
                    .describe(&s.annotation, self.description_seed(epoch, batch[k]))?;
                texts.push(d.text.clone());
                descriptions.push(d);
            }
            let use_negatives = cfg.enable_hard_negatives && epoch > cfg.warmup_epochs;
            let mut neg_counts = Vec::new();
            if use_negatives {
                let scores = softmax_rows(&logits);
                for (k, s) in scenes.iter().enumerate() {
                    let failures = self.failures(s, &scores, &scene_rows[k])?;
                    let set = negatives::build_negative_set(
                        &s.annotation,
                        &descriptions[k],
                        &failures,
                        self.hierarchy,
                        &self.renderer,
                        cfg.n_h,
                        seeds::negative_seed(self.description_seed(epoch, batch[k]), s.annotation.image_id),
                    )?;
                    neg_counts.push(set.len());
                    texts.extend(set.negatives.into_iter().map(|d| d.text));
                }
            }
            let globals: Vec<Vec<f64>> = scenes.iter().map(|s| global_input(s, sig_dim)).collect();
            let global_x = stack_rows(&globals, self.shape.global_input());
            let text_x = self.text_rows(&texts)?;
            let (v_fwd, f_v) =
                sharded_forward(&self.detector.global_encoder, &global_x, cfg.workers, FeatureRole::VisualGlobal)?;
            let (t_fwd, f_t) =
                sharded_forward(&self.detector.text_global, &text_x, cfg.workers, FeatureRole::LinguisticGlobal)?;
            let n = scenes.len();
            let all_t = f_t.into_vectors();
            let f_l = FeatureBatch::from_raw(FeatureRole::LinguisticGlobal, all_t.slice(s![..n, ..]).to_owned());
            let mut negs = Vec::with_capacity(neg_counts.len());
            let mut lo = n;
            for &c in &neg_counts {
                negs.push(FeatureBatch::from_raw(
                    FeatureRole::HardNegative,
                    all_t.slice(s![lo..lo + c, ..]).to_owned(),
                ));
                lo += c;
            }
            l_vg = mi::infonce_hard(&f_v, &f_l, &negs, cfg.loss.tau, cfg.negative_sharing)?;
            l_lg = mi::infonce_text(&f_l, &f_v, cfg.loss.tau)?;
            image_state = Some((v_fwd, t_fwd, neg_counts, all_t.nrows()));
        }

        let mut l_o = LossOutput::constant(0.0);
        let mut object_state = None;
        if cfg.enable_object_level {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for s in &scenes {
                rows.extend(object_inputs(s));
                labels.extend(s.annotation.boxes.iter().map(|b| b.category_id));
            }
            let obj_x = stack_rows(&rows, self.shape.object_input());
            let (o_fwd, f_o) =
                sharded_forward(&self.detector.object_encoder, &obj_x, cfg.workers, FeatureRole::VisualObject)?;
            let c_fwd = self.detector.text_category.forward_batch(self.category_text.view())?;
            let f_c = FeatureBatch::from_raw(FeatureRole::LinguisticCategory, c_fwd.output.clone());
            l_o = mi::infonce_object(&f_o, &f_c, &labels, cfg.loss.tau)?;
            object_state = Some((o_fwd, c_fwd));
        }

        let components = LossComponents {
            det: det.value,
            vg: l_vg.value,
            lg: l_lg.value,
            o: l_o.value,
            total: 0.0,
        };
        let total = match mi::combined_loss(&det, &l_vg, &l_lg, &l_o, &cfg.loss) {
            Ok(t) if t.is_finite() => t,
            Ok(_) | Err(MiError::NonFinite(_)) => {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_index,
                })
            }
            Err(e) => return Err(e.into()),
        };

        if let Some((v_fwd, t_fwd, neg_counts, text_rows)) = image_state {
            let gv = total
                .grad(GradTarget::Features(FeatureRole::VisualGlobal))
                .expect("visual gradient present");
            let g = sharded_backward(&self.detector.global_encoder, &v_fwd, &gv);
            self.detector.global_encoder.apply(&g, lr);

            let mut gt = Array2::zeros((text_rows, self.shape.dim));
            let n = scenes.len();
            if let Some(gl) = total.grad(GradTarget::Features(FeatureRole::LinguisticGlobal)) {
                gt.slice_mut(s![..n, ..]).assign(&gl);
            }
            let mut lo = n;
            for (i, &c) in neg_counts.iter().enumerate() {
                if let Some(gh) = total.grad(GradTarget::HardNegatives(i)) {
                    gt.slice_mut(s![lo..lo + c, ..]).assign(&gh);
                }
                lo += c;
            }
            let g = sharded_backward(&self.detector.text_global, &t_fwd, &gt);
            self.detector.text_global.apply(&g, lr);
        }
        if let Some((o_fwd, c_fwd)) = object_state {
            let go = total
                .grad(GradTarget::Features(FeatureRole::VisualObject))
                .expect("object gradient present");
            let g = sharded_backward(&self.detector.object_encoder, &o_fwd, &go);
            self.detector.object_encoder.apply(&g, lr);
            let gc = total
                .grad(GradTarget::Features(FeatureRole::LinguisticCategory))
                .expect("category gradient present");
            let g = self.detector.text_category.backward_batch(&c_fwd, gc.view());
            self.detector.text_category.apply(&g, lr);
        }
        let gl = total.grad(GradTarget::Logits).expect("detection gradient present");
        let (gw, gb) = classifier_grads(cls_x.view(), &gl);
        self.detector.classifier.w.scaled_add(-lr, &gw);
        self.detector.classifier.b.scaled_add(-lr, &gb);

        if !self.detector.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: batch_index,
            });
        }
        Ok(LossComponents {
            total: total.value,
            ..components
        })
    }
}

/// Trains a fresh [`ToyDetector`] on `dataset.scenes` and evaluates it on
/// `dataset.eval` before training and after every epoch.
pub fn train(
    dataset: &SyntheticDataset,
    templates: &[PromptTemplate],
    hierarchy: &Hierarchy,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let table = &dataset.categories;
    let shape = DetectorShape {
        signature_dim: dataset.signature_dim,
        text_dim: config.text_dim,
        hidden: config.hidden,
        dim: config.dim,
        num_categories: table.len(),
    };
    let mut embedder = HashEmbedder::new(config.text_dim);
    let mut category_texts = vec![render_background_description().text];
    for id in table.ids() {
        category_texts.push(render_object_description(id, table)?.text);
    }
    let category_rows = category_texts
        .iter()
        .map(|t| Ok(embedder.embed_text(t).normalize()?.values))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer {
        dataset,
        hierarchy,
        renderer: Renderer::new(templates, table)?,
        config,
        shape,
        detector: ToyDetector::new(&shape, seeds::mix(config.seed, 0x6465_7465)),
        embedder,
        category_text: stack_rows(&category_rows, config.text_dim),
    };
    let eval = trainer.build_eval()?;

    let mut epochs = vec![EpochRecord {
        epoch: 0,
        losses: None,
        metrics: trainer.evaluate(&eval)?,
    }];
    let mut order: Vec<usize> = (0..dataset.scenes.len()).collect();
    let per_epoch = order.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    for epoch in 1..=config.epochs {
        let mut rng = seeds::rng(seeds::mix(config.seed, 0x7368_7566 ^ epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let t = (epoch - 1) * per_epoch + b;
            let lr = config.lr_schedule.at(config.lr, t, total_steps);
            sum.add(&trainer.step(chunk, epoch, b, lr)?);
            batches += 1;
        }
        sum.scale(1.0 / batches as f64);
        epochs.push(EpochRecord {
            epoch,
            losses: Some(sum),
            metrics: trainer.evaluate(&eval)?,
        });
    }
    let last = epochs.last().expect("epoch 0 recorded").metrics;
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            retrieval_top1: last.retrieval_top1,
            object_alignment_top1: last.object_alignment_top1,
            sibling_confusion_rate: last.sibling_confusion_rate,
        },
        detector: trainer.detector,
    })
}

/// Templates for `config.template_set`.
pub fn default_templates(config: &TrainConfig) -> Vec<PromptTemplate> {
    config.template_set.templates()
}

/// Mean of a metric over reports.
pub fn mean_metric(reports: &[TrainReport], f: impl Fn(&TrainReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len().max(1) as f64
}
