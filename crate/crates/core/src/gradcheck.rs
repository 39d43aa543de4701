//! Central finite-difference checks for every analytic gradient in the
//! crate.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

use crate::embedding::ProjectionHead;
use crate::mi::{
    self, FeatureBatch, FeatureRole, GradTarget, LossOutput, MiError, NegativeSharing,
};
use crate::seeds;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 50;
/// Temperature used by the stability sweep.
pub const EXTREME_TAU: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    InfonceVisual,
    InfonceText,
    InfonceObject,
    InfonceHard,
    ProjectionHead,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] = [
        CheckedLoss::InfonceVisual,
        CheckedLoss::InfonceText,
        CheckedLoss::InfonceObject,
        CheckedLoss::InfonceHard,
        CheckedLoss::ProjectionHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::InfonceVisual => "infonce_visual",
            CheckedLoss::InfonceText => "infonce_text",
            CheckedLoss::InfonceObject => "infonce_object",
            CheckedLoss::InfonceHard => "infonce_hard",
            CheckedLoss::ProjectionHead => "projection_head",
        }
    }
}

impl fmt::Display for CheckedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckedLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown loss {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub tau: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Test hook: negate the analytic gradient of this loss.
    pub sabotage: Option<CheckedLoss>,
}

impl GradcheckConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            instances: DEFAULT_INSTANCES,
            seed,
            tau: mi::DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            sabotage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstCoordinate {
    pub instance: usize,
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: CheckedLoss,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCheck {
    pub tau: f64,
    pub all_finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub stability: StabilityCheck,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.stability.all_finite && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LossCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// `|a − n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

type Eval<'a> = dyn Fn(&[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>), MiError> + 'a;

struct Accumulator {
    loss: CheckedLoss,
    flip: bool,
    epsilon: f64,
    coordinates: usize,
    max_rel_error: f64,
    worst: Option<WorstCoordinate>,
}

impl Accumulator {
    fn check(
        &mut self,
        instance: usize,
        names: &[String],
        inputs: Vec<Array2<f64>>,
        eval: &Eval<'_>,
    ) -> Result<(), MiError> {
        let (_, mut analytic) = eval(&inputs)?;
        if self.flip {
            analytic.iter_mut().for_each(|g| g.mapv_inplace(|v| -v));
        }
        let mut probe = inputs;
        for t in 0..probe.len() {
            let (rows, cols) = probe[t].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = probe[t][[r, c]];
                    probe[t][[r, c]] = orig + self.epsilon;
                    let (plus, _) = eval(&probe)?;
                    probe[t][[r, c]] = orig - self.epsilon;
                    let (minus, _) = eval(&probe)?;
                    probe[t][[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * self.epsilon);
                    let a = analytic[t][[r, c]];
                    let err = relative_error(a, numeric);
                    self.coordinates += 1;
                    if err > self.max_rel_error || (err.is_nan() && !self.max_rel_error.is_nan()) {
                        self.max_rel_error = err;
                        self.worst = Some(WorstCoordinate {
                            instance,
                            tensor: names[t].clone(),
                            row: r,
                            col: c,
                            analytic: a,
                            numeric,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self, instances: usize, tolerance: f64) -> LossCheck {
        LossCheck {
            loss: self.loss,
            instances,
            coordinates: self.coordinates,
            passed: self.max_rel_error < tolerance,
            max_rel_error: self.max_rel_error,
            worst: self.worst,
        }
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, dim), || {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    m
}

fn raw(role: FeatureRole, m: &Array2<f64>) -> FeatureBatch {
    FeatureBatch::from_raw(role, m.clone())
}

fn grads_for(out: &LossOutput, targets: &[GradTarget], shapes: &[Array2<f64>]) -> Vec<Array2<f64>> {
    targets
        .iter()
        .zip(shapes)
        .map(|(t, s)| out.grad(*t).unwrap_or_else(|| Array2::zeros(s.raw_dim())))
        .collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

const VG: GradTarget = GradTarget::Features(FeatureRole::VisualGlobal);
const LG: GradTarget = GradTarget::Features(FeatureRole::LinguisticGlobal);
const VO: GradTarget = GradTarget::Features(FeatureRole::VisualObject);
const LC: GradTarget = GradTarget::Features(FeatureRole::LinguisticCategory);

fn check_pair_loss(
    acc: &mut Accumulator,
    rng: &mut ChaCha8Rng,
    instance: usize,
    tau: f64,
) -> Result<(), MiError> {
    let n = rng.random_range(1..=5);
    let d = rng.random_range(2..=6);
    let inputs = vec![unit_rows(rng, n, d), unit_rows(rng, n, d)];
    let text = acc.loss == CheckedLoss::InfonceText;
    let eval = move |t: &[Array2<f64>]| {
        let v = raw(FeatureRole::VisualGlobal, &t[0]);
        let l = raw(FeatureRole::LinguisticGlobal, &t[1]);
        let out = if text {
            mi::infonce_text(&l, &v, tau)?
        } else {
            mi::infonce_visual(&v, &l, tau)?
        };
        Ok((out.value, grads_for(&out, &[VG, LG], t)))
    };
    acc.check(instance, &names(&["visual", "linguistic"]), inputs, &eval)
}

fn check_object_loss(
    acc: &mut Accumulator,
    rng: &mut ChaCha8Rng,
    instance: usize,
    tau: f64,
) -> Result<(), MiError> {
    let objects = rng.random_range(1..=4);
    let classes = rng.random_range(1..=4);
    let d = rng.random_range(2..=6);
    let labels: Vec<usize> = (0..objects).map(|_| rng.random_range(1..=classes)).collect();
    let inputs = vec![unit_rows(rng, objects, d), unit_rows(rng, classes + 1, d)];
    let eval = move |t: &[Array2<f64>]| {
        let o = raw(FeatureRole::VisualObject, &t[0]);
        let c = raw(FeatureRole::LinguisticCategory, &t[1]);
        let out = mi::infonce_object(&o, &c, &labels, tau)?;
        Ok((out.value, grads_for(&out, &[VO, LC], t)))
    };
    acc.check(instance, &names(&["objects", "categories"]), inputs, &eval)
}

fn check_hard_loss(
    acc: &mut Accumulator,
    rng: &mut ChaCha8Rng,
    instance: usize,
    tau: f64,
) -> Result<(), MiError> {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(2..=6);
    let sharing = if instance % 2 == 0 {
        NegativeSharing::PerImage
    } else {
        NegativeSharing::Shared
    };
    let mut inputs = vec![unit_rows(rng, n, d), unit_rows(rng, n, d)];
    let mut tensor_names = names(&["visual", "linguistic"]);
    let mut targets = vec![VG, LG];
    for i in 0..n {
        let k = rng.random_range(0..=3);
        inputs.push(unit_rows(rng, k, d));
        tensor_names.push(format!("hard_negative[{i}]"));
        targets.push(GradTarget::HardNegatives(i));
    }
    let eval = move |t: &[Array2<f64>]| {
        let v = raw(FeatureRole::VisualGlobal, &t[0]);
        let l = raw(FeatureRole::LinguisticGlobal, &t[1]);
        let negs: Vec<FeatureBatch> =
            t[2..].iter().map(|h| raw(FeatureRole::HardNegative, h)).collect();
        let out = mi::infonce_hard(&v, &l, &negs, tau, sharing)?;
        Ok((out.value, grads_for(&out, &targets, t)))
    };
    acc.check(instance, &tensor_names, inputs, &eval)
}

fn head_from(t: &[Array2<f64>]) -> ProjectionHead {
    ProjectionHead {
        w1: t[0].clone(),
        b1: t[1].row(0).to_owned(),
        w2: t[2].clone(),
        b2: t[3].row(0).to_owned(),
        seed: 0,
    }
}

fn check_head(acc: &mut Accumulator, rng: &mut ChaCha8Rng, instance: usize) -> Result<(), MiError> {
    // Resample until no hidden pre-activation sits within reach of the kink.
    let (head, x) = loop {
        let d_in = rng.random_range(3..=6);
        let d_hidden = rng.random_range(4..=8);
        let d = rng.random_range(2..=5);
        let mut head = ProjectionHead::random(d_in, d_hidden, d, rng.random());
        head.b1 = Array1::from_shape_simple_fn(d_hidden, || rng.random_range(-0.2..0.2));
        head.b2 = Array1::from_shape_simple_fn(d, || rng.random_range(-0.2..0.2));
        let n = rng.random_range(1..=3);
        let x = Array2::from_shape_simple_fn((n, d_in), || rng.random_range(-1.0..1.0));
        let pre = x.dot(&head.w1.t()) + &head.b1;
        if pre.iter().all(|v| v.abs() > 1e-3) && pre.iter().any(|v| *v > 0.0) {
            break (head, x);
        }
    };
    let upstream = Array2::from_shape_simple_fn((x.nrows(), head.d_out()), || {
        rng.random_range(-1.0..1.0)
    });
    let inputs = vec![
        head.w1.clone(),
        head.b1.clone().insert_axis(Axis(0)),
        head.w2.clone(),
        head.b2.clone().insert_axis(Axis(0)),
        x,
    ];
    let eval = move |t: &[Array2<f64>]| {
        let head = head_from(t);
        let fwd = head
            .forward_batch(t[4].view())
            .map_err(|e| MiError::NonFinite(e.to_string()))?;
        let value = (&fwd.output * &upstream).sum();
        let g = head.backward_batch(&fwd, upstream.view());
        Ok((
            value,
            vec![
                g.w1,
                g.b1.insert_axis(Axis(0)),
                g.w2,
                g.b2.insert_axis(Axis(0)),
                g.input,
            ],
        ))
    };
    acc.check(instance, &names(&["w1", "b1", "w2", "b2", "input"]), inputs, &eval)
}

fn stability_sweep(rng: &mut ChaCha8Rng) -> Result<bool, MiError> {
    let tau = EXTREME_TAU;
    let mut finite = true;
    for _ in 0..10 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=6);
        let v = FeatureBatch::from_raw(FeatureRole::VisualGlobal, unit_rows(rng, n, d));
        let l = FeatureBatch::from_raw(FeatureRole::LinguisticGlobal, unit_rows(rng, n, d));
        let negs: Vec<FeatureBatch> = (0..n)
            .map(|_| FeatureBatch::from_raw(FeatureRole::HardNegative, unit_rows(rng, 2, d)))
            .collect();
        let c = FeatureBatch::from_raw(FeatureRole::LinguisticCategory, unit_rows(rng, 4, d));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        finite &= mi::infonce_visual(&v, &l, tau)?.is_finite();
        finite &= mi::infonce_text(&l, &v, tau)?.is_finite();
        finite &= mi::infonce_hard(&v, &l, &negs, tau, NegativeSharing::PerImage)?.is_finite();
        finite &= mi::infonce_object(&v, &c, &labels, tau)?.is_finite();
    }
    Ok(finite)
}

/// Runs every suite with `config.instances` random instances each.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport, MiError> {
    let mut checks = Vec::new();
    for (k, loss) in CheckedLoss::ALL.into_iter().enumerate() {
        let mut rng = seeds::rng(seeds::mix(config.seed, k as u64));
        let mut acc = Accumulator {
            loss,
            flip: config.sabotage == Some(loss),
            epsilon: config.epsilon,
            coordinates: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for instance in 0..config.instances {
            match loss {
                CheckedLoss::InfonceVisual | CheckedLoss::InfonceText => {
                    check_pair_loss(&mut acc, &mut rng, instance, config.tau)?
                }
                CheckedLoss::InfonceObject => {
                    check_object_loss(&mut acc, &mut rng, instance, config.tau)?
                }
                CheckedLoss::InfonceHard => {
                    check_hard_loss(&mut acc, &mut rng, instance, config.tau)?
                }
                CheckedLoss::ProjectionHead => check_head(&mut acc, &mut rng, instance)?,
            }
        }
        checks.push(acc.finish(config.instances, config.tolerance));
    }
    let mut rng = seeds::rng(seeds::mix(config.seed, 0x7374_6162));
    let stability = StabilityCheck {
        tau: EXTREME_TAU,
        all_finite: stability_sweep(&mut rng)?,
    };
    Ok(GradcheckReport { checks, stability })
}
