//! Seeded synthetic scenes: every category owns a unit signature, and each
//! object carries its category's signature plus gaussian noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::annotations::{BoundingBox, CategoryTable, Hierarchy, SceneAnnotation};
use crate::seeds;

/// Built-in category names as `(name, parent)`, arranged in sibling pairs.
pub const BUILTIN_CATEGORIES: [(&str, &str); 16] = [
    ("dog", "canine"),
    ("wolf", "canine"),
    ("cat", "feline"),
    ("tiger", "feline"),
    ("car", "vehicle"),
    ("truck", "vehicle"),
    ("apple", "fruit"),
    ("orange", "fruit"),
    ("chair", "furniture"),
    ("sofa", "furniture"),
    ("cup", "tableware"),
    ("bowl", "tableware"),
    ("horse", "equine"),
    ("zebra", "equine"),
    ("kite", "aircraft"),
    ("plane", "aircraft"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_categories: usize,
    pub scenes: usize,
    /// Held-out scenes used for evaluation, drawn from a separate stream.
    pub eval_scenes: usize,
    pub max_objects_per_scene: usize,
    pub signature_dim: usize,
    pub noise_sigma: f64,
    /// Cosine between the signatures of two same-parent categories.
    pub sibling_similarity: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_categories: 8,
            scenes: 2000,
            eval_scenes: 320,
            max_objects_per_scene: 4,
            signature_dim: 16,
            noise_sigma: 0.05,
            sibling_similarity: 0.6,
            image_width: 640,
            image_height: 480,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let problem = if self.num_categories < 2 {
            Some("num_categories must be at least 2")
        } else if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            Some("noise_sigma must be non-negative")
        } else if self.max_objects_per_scene == 0 {
            Some("max_objects_per_scene must be at least 1")
        } else if self.signature_dim == 0 {
            Some("signature_dim must be at least 1")
        } else if !(0.0..=1.0).contains(&self.sibling_similarity) {
            Some("sibling_similarity must lie in [0, 1]")
        } else if self.image_width == 0 || self.image_height == 0 {
            Some("image size must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(TrainError::Config(p.to_string())),
            None => Ok(()),
        }
    }
}

/// One scene with per-object signatures and a background proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub annotation: SceneAnnotation,
    pub signatures: Vec<Vec<f64>>,
    /// A box with no object behind it, scored as a background prediction.
    pub background_box: BoundingBox,
    pub background_signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub categories: CategoryTable,
    pub hierarchy: Hierarchy,
    /// Unit signature of category `k + 1` at index `k`.
    pub prototypes: Vec<Vec<f64>>,
    pub scenes: Vec<SyntheticScene>,
    pub eval: Vec<SyntheticScene>,
    pub signature_dim: usize,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Category names and parents for `C` categories.
pub fn category_names(c: usize) -> Vec<(String, String)> {
    (0..c)
        .map(|k| match BUILTIN_CATEGORIES.get(k) {
            Some((name, parent)) => (name.to_string(), parent.to_string()),
            None => (format!("thing{k}"), format!("group{}", k / 2)),
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32, category_id: usize) -> BoundingBox {
    let (w_img, h_img) = (width as f64, height as f64);
    let w = rng.random_range(0.05..0.6) * w_img;
    let h = rng.random_range(0.05..0.6) * h_img;
    let x = rng.random_range(0.0..=(w_img - w));
    let y = rng.random_range(0.0..=(h_img - h));
    BoundingBox::new(x, y, w, h, category_id)
}

fn generate_scene(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    prototypes: &[Vec<f64>],
    image_id: i64,
) -> SyntheticScene {
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let count = rng.random_range(1..=config.max_objects_per_scene);
    let mut boxes = Vec::with_capacity(count);
    let mut signatures = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.random_range(1..=config.num_categories);
        boxes.push(random_box(rng, config.image_width, config.image_height, category));
        signatures.push(
            prototypes[category - 1]
                .iter()
                .map(|p| p + noise.sample(rng))
                .collect(),
        );
    }
    let background_box = random_box(rng, config.image_width, config.image_height, 0);
    let background_signature = (0..config.signature_dim)
        .map(|_| noise.sample(rng) + 0.25 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    SyntheticScene {
        annotation: SceneAnnotation::new(image_id, config.image_width, config.image_height)
            .with_boxes(boxes),
        signatures,
        background_box,
        background_signature,
    }
}

/// Builds the training and evaluation scenes. Fully determined by the
/// config, including its seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset, TrainError> {
    config.validate()?;
    let names = category_names(config.num_categories);
    let table = CategoryTable::from_names(
        &names
            .iter()
            .map(|(n, _)| (n.as_str(), None))
            .collect::<Vec<_>>(),
    );
    let pairs: Vec<(&str, &str)> = names.iter().map(|(n, p)| (n.as_str(), p.as_str())).collect();
    let hierarchy = Hierarchy::from_pairs(&table, &pairs)
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let mut rng = seeds::rng(seeds::mix(config.seed, 0x7369_6773));
    let mut parent_sigs: Vec<(String, Vec<f64>)> = Vec::new();
    let s = config.sibling_similarity;
    let prototypes: Vec<Vec<f64>> = names
        .iter()
        .map(|(_, parent)| {
            let shared = match parent_sigs.iter().find(|(p, _)| p == parent) {
                Some((_, v)) => v.clone(),
                None => {
                    let v = unit_gaussian(&mut rng, config.signature_dim);
                    parent_sigs.push((parent.clone(), v.clone()));
                    v
                }
            };
            let own = unit_gaussian(&mut rng, config.signature_dim);
            let mixed: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(a, b)| s.sqrt() * a + (1.0 - s).sqrt() * b)
                .collect();
            let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            mixed.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let mut train_rng = seeds::rng(seeds::mix(config.seed, 0x7472_6169));
    let scenes = (0..config.scenes)
        .map(|i| generate_scene(&mut train_rng, config, &prototypes, i as i64 + 1))
        .collect();
    let mut eval_rng = seeds::rng(seeds::mix(config.seed, 0x6576_616c));
    let eval = (0..config.eval_scenes)
        .map(|i| generate_scene(&mut eval_rng, config, &prototypes, 1_000_000 + i as i64))
        .collect();
    Ok(SyntheticDataset {
        categories: table,
        hierarchy,
        prototypes,
        scenes,
        eval,
        signature_dim: config.signature_dim,
    })
}
