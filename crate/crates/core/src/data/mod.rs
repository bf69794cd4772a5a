//! Synthetic paired-modality data, persistence, and retrieval evaluation.
//!
//! A [`SyntheticWorld`] fixes concept prototypes and one orthonormal linear
//! embedding per modality. Each sample draws a concept `c`, a shared latent
//! `u = μ_c + s·ε`, and observes `A·u + σ·η` on the image side and `B·u + σ·η'`
//! on the text side. A mismatched sample regenerates its text from another
//! concept and keeps the image concept as its label.

mod eval;
pub mod io;

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::PairBatch;
use crate::numerics::{dot, streams, Matrix, RngStream};

pub use eval::{evaluate_retrieval, recall_at_1, zero_shot_accuracy, RetrievalMetrics};
use io::{read_matrix, write_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    /// Size of the (possibly mismatched) training split.
    pub samples: usize,
    /// Size of the clean held-out evaluation split.
    pub eval_samples: usize,
    /// Size of an extra clean split from the same world, for pretraining
    /// reference and teacher models; `0` omits it.
    pub curated_samples: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Width of the shared latent space; at most `min(d_img, d_txt)`.
    pub latent_dim: usize,
    /// Per-modality observation noise σ.
    pub modality_noise_sigma: f64,
    /// Spread of an instance around its concept prototype, shared by both modalities.
    pub instance_spread: f64,
    pub mismatch_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 32,
            samples: 50_000,
            eval_samples: 1000,
            curated_samples: 50_000,
            d_img: 48,
            d_txt: 48,
            latent_dim: 24,
            modality_noise_sigma: 0.5,
            instance_spread: 0.6,
            mismatch_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_concepts >= 2, "need at least 2 concepts, got {}", self.num_concepts);
        ensure!(
            self.latent_dim >= 1 && self.latent_dim <= self.d_img.min(self.d_txt),
            "latent_dim {} must be in 1..=min(d_img, d_txt) = {}",
            self.latent_dim,
            self.d_img.min(self.d_txt)
        );
        ensure!(
            self.modality_noise_sigma.is_finite() && self.modality_noise_sigma >= 0.0,
            "modality_noise_sigma must be finite and non-negative"
        );
        ensure!(
            self.instance_spread.is_finite() && self.instance_spread >= 0.0,
            "instance_spread must be finite and non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.mismatch_rate),
            "mismatch_rate must lie in [0, 1), got {}",
            self.mismatch_rate
        );
        Ok(())
    }
}

/// Paired features with ground-truth concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image: Matrix,
    pub text: Matrix,
    pub concepts: Vec<usize>,
    pub mismatched: Vec<bool>,
    /// Noise-free text-side features of every concept prototype, used as
    /// zero-shot class embeddings.
    pub class_text: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn pairs(&self) -> Result<PairBatch> {
        PairBatch::new(self.image.clone(), self.text.clone())
    }

    pub fn select(&self, indices: &[usize]) -> Result<PairBatch> {
        ensure!(
            indices.iter().all(|&i| i < self.len()),
            "dataset index out of range"
        );
        PairBatch::new(self.image.select_rows(indices), self.text.select_rows(indices))
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        ensure!(
            self.image.rows() == n && self.text.rows() == n && self.mismatched.len() == n,
            "dataset columns have unequal lengths"
        );
        ensure!(
            self.concepts.iter().all(|&c| c < self.class_text.rows()),
            "concept label out of range"
        );
        ensure!(
            self.class_text.cols() == self.text.cols(),
            "class embeddings do not match text width"
        );
        Ok(())
    }
}

/// Gaussian matrix with orthonormalized columns (`rows ≥ cols`).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_fn(rows, cols, |i, j| basis[j][i])
}

/// Fixed generative structure derived from `SyntheticSpec::seed`.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    prototypes: Matrix,
    image_projection: Matrix,
    text_projection: Matrix,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut g = RngStream::with_stream(spec.seed, streams::DATA).derive(0).generator();
        let prototypes = Matrix::from_fn(spec.num_concepts, spec.latent_dim, |_, _| {
            StandardNormal.sample(&mut g)
        });
        let image_projection = orthonormal_columns(spec.d_img, spec.latent_dim, &mut g);
        let text_projection = orthonormal_columns(spec.d_txt, spec.latent_dim, &mut g);
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            image_projection,
            text_projection,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// `num_concepts × latent_dim`.
    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    /// `d_img × latent_dim`, orthonormal columns.
    pub fn image_projection(&self) -> &Matrix {
        &self.image_projection
    }

    /// `d_txt × latent_dim`, orthonormal columns.
    pub fn text_projection(&self) -> &Matrix {
        &self.text_projection
    }

    pub fn class_text(&self) -> Matrix {
        self.prototypes
            .matmul_t(&self.text_projection)
            .expect("projection widths agree")
    }

    fn latent(&self, concept: usize, rng: &mut impl Rng) -> Vec<f64> {
        self.prototypes
            .row(concept)
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + self.spec.instance_spread * e
            })
            .collect()
    }

    fn observe(&self, projection: &Matrix, latent: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        (0..projection.rows())
            .map(|r| {
                let e: f64 = StandardNormal.sample(rng);
                dot(projection.row(r), latent) + self.spec.modality_noise_sigma * e
            })
            .collect()
    }

    /// Draws `n` samples, mismatching each with probability `mismatch_rate`.
    pub fn sample(&self, n: usize, mismatch_rate: f64, rng: RngStream) -> Result<Dataset> {
        ensure!(
            (0.0..1.0).contains(&mismatch_rate),
            "mismatch_rate must lie in [0, 1)"
        );
        let k = self.spec.num_concepts;
        let mut g = rng.generator();
        let mut image = Vec::with_capacity(n * self.spec.d_img);
        let mut text = Vec::with_capacity(n * self.spec.d_txt);
        let mut concepts = Vec::with_capacity(n);
        let mut mismatched = Vec::with_capacity(n);
        for _ in 0..n {
            let c = g.random_range(0..k);
            let u = self.latent(c, &mut g);
            image.extend(self.observe(&self.image_projection, &u, &mut g));
            let swap = mismatch_rate > 0.0 && g.random::<f64>() < mismatch_rate;
            if swap {
                let other = (c + 1 + g.random_range(0..k - 1)) % k;
                let u2 = self.latent(other, &mut g);
                text.extend(self.observe(&self.text_projection, &u2, &mut g));
            } else {
                text.extend(self.observe(&self.text_projection, &u, &mut g));
            }
            concepts.push(c);
            mismatched.push(swap);
        }
        Ok(Dataset {
            image: Matrix::new(n, self.spec.d_img, image)?,
            text: Matrix::new(n, self.spec.d_txt, text)?,
            concepts,
            mismatched,
            class_text: self.class_text(),
        })
    }
}

/// Draws `spec.samples` examples from the world fixed by `spec.seed`, using `rng` for the draws.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: RngStream) -> Result<Dataset> {
    SyntheticWorld::new(spec)?.sample(spec.samples, spec.mismatch_rate, rng)
}

/// Splits drawn independently from one world: the training split carries
/// mismatches at `spec.mismatch_rate`, the other two are clean.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: SyntheticSpec,
    pub train: Dataset,
    pub eval: Dataset,
    pub curated: Option<Dataset>,
}

impl DatasetBundle {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let world = SyntheticWorld::new(spec)?;
        let root = RngStream::with_stream(spec.seed, streams::DATA);
        let train = world.sample(spec.samples, spec.mismatch_rate, root.derive(1))?;
        let eval = world.sample(spec.eval_samples, 0.0, root.derive(2))?;
        let curated = match spec.curated_samples {
            0 => None,
            n => Some(world.sample(n, 0.0, root.derive(3))?),
        };
        Ok(Self {
            spec: spec.clone(),
            train,
            eval,
            curated,
        })
    }

    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "eval" => Ok(&self.eval),
            "curated" => self
                .curated
                .as_ref()
                .ok_or_else(|| Error::invalid("dataset has no curated split")),
            other => Err(Error::invalid(format!(
                "unknown split {other:?}; expected train, eval or curated"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    count: usize,
    d_img: usize,
    d_txt: usize,
    image: String,
    text: String,
    labels: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    seed: u64,
    spec: SyntheticSpec,
    num_concepts: usize,
    class_text: String,
    train: SplitManifest,
    eval: SplitManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    curated: Option<SplitManifest>,
}

const DATASET_FORMAT: &str = "curation-dataset";
pub const DATASET_MANIFEST: &str = "manifest.json";

fn labels_matrix(d: &Dataset) -> Matrix {
    Matrix::from_fn(d.len(), 2, |i, j| match j {
        0 => d.concepts[i] as f64,
        _ => d.mismatched[i] as u8 as f64,
    })
}

fn write_split(dir: &Path, name: &str, d: &Dataset) -> Result<SplitManifest> {
    let m = SplitManifest {
        count: d.len(),
        d_img: d.image.cols(),
        d_txt: d.text.cols(),
        image: format!("{name}_image.acde"),
        text: format!("{name}_text.acde"),
        labels: format!("{name}_labels.acde"),
    };
    write_matrix(&dir.join(&m.image), &d.image)?;
    write_matrix(&dir.join(&m.text), &d.text)?;
    write_matrix(&dir.join(&m.labels), &labels_matrix(d))?;
    Ok(m)
}

fn read_split(dir: &Path, m: &SplitManifest, class_text: &Matrix) -> Result<Dataset> {
    let image = read_matrix(&dir.join(&m.image))?;
    let text = read_matrix(&dir.join(&m.text))?;
    let labels = read_matrix(&dir.join(&m.labels))?;
    if image.shape() != (m.count, m.d_img)
        || text.shape() != (m.count, m.d_txt)
        || labels.shape() != (m.count, 2)
    {
        return Err(Error::Format {
            field: "manifest",
            message: format!("split files disagree with manifest counts/dims for {}", m.image),
        });
    }
    let d = Dataset {
        image,
        text,
        concepts: (0..m.count).map(|i| labels[(i, 0)] as usize).collect(),
        mismatched: (0..m.count).map(|i| labels[(i, 1)] != 0.0).collect(),
        class_text: class_text.clone(),
    };
    d.validate().map_err(|e| Error::Format {
        field: "labels",
        message: e.to_string(),
    })?;
    Ok(d)
}

/// Writes the dataset directory: embedding files plus `manifest.json`.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let class_file = "class_text.acde".to_string();
    write_matrix(&dir.join(&class_file), &bundle.train.class_text)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        seed: bundle.spec.seed,
        spec: bundle.spec.clone(),
        num_concepts: bundle.spec.num_concepts,
        class_text: class_file,
        train: write_split(dir, "train", &bundle.train)?,
        eval: write_split(dir, "eval", &bundle.eval)?,
        curated: match &bundle.curated {
            Some(d) => Some(write_split(dir, "curated", d)?),
            None => None,
        },
    };
    let path = dir.join(DATASET_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 {
        return Err(Error::Format {
            field: "manifest",
            message: format!("unsupported dataset {} v{}", manifest.format, manifest.version),
        });
    }
    let class_text = read_matrix(&dir.join(&manifest.class_text))?;
    Ok(DatasetBundle {
        spec: manifest.spec,
        train: read_split(dir, &manifest.train, &class_text)?,
        eval: read_split(dir, &manifest.eval, &class_text)?,
        curated: match &manifest.curated {
            Some(m) => Some(read_split(dir, m, &class_text)?),
            None => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: 5,
            samples: 200,
            eval_samples: 50,
            curated_samples: 0,
            d_img: 8,
            d_txt: 6,
            latent_dim: 4,
            modality_noise_sigma: 0.3,
            instance_spread: 0.5,
            mismatch_rate: 0.25,
            seed: 11,
        }
    }

    #[test]
    fn zero_mismatch_has_no_flags() {
        let spec = SyntheticSpec {
            mismatch_rate: 0.0,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, RngStream::new(1)).unwrap();
        assert!(d.mismatched.iter().all(|m| !m));
        assert!(d.concepts.iter().all(|&c| c < 5));
    }

    #[test]
    fn mismatch_rate_is_respected() {
        let spec = SyntheticSpec {
            samples: 4000,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, RngStream::new(2)).unwrap();
        let frac = d.mismatched.iter().filter(|&&m| m).count() as f64 / 4000.0;
        assert!((frac - 0.25).abs() < 0.03, "{frac}");
    }

    #[test]
    fn noiseless_same_concept_pairs_are_collinear() {
        let spec = SyntheticSpec {
            modality_noise_sigma: 0.0,
            instance_spread: 0.0,
            mismatch_rate: 0.0,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, RngStream::new(3)).unwrap();
        for side in [&d.image, &d.text] {
            for i in 0..40 {
                for j in 0..40 {
                    if d.concepts[i] != d.concepts[j] {
                        continue;
                    }
                    let (a, b) = (side.row(i), side.row(j));
                    let cos = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
                    assert!((cos - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn clean_features_are_separable_by_nearest_prototype() {
        let spec = SyntheticSpec {
            modality_noise_sigma: 0.0,
            instance_spread: 0.0,
            mismatch_rate: 0.0,
            ..small_spec()
        };
        let world = SyntheticWorld::new(&spec).unwrap();
        let d = world.sample(300, 0.0, RngStream::new(4)).unwrap();
        let class_img = world.prototypes().matmul_t(world.image_projection()).unwrap();
        for i in 0..d.len() {
            let x = d.image.row(i);
            let nearest = (0..spec.num_concepts)
                .map(|c| {
                    let p = class_img.row(c);
                    let dist: f64 = x.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(nearest, d.concepts[i]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(), RngStream::new(5)).unwrap();
        let b = generate_synthetic(&small_spec(), RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_spec(), RngStream::new(6)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec {
                num_concepts: 1,
                ..small_spec()
            },
            SyntheticSpec {
                mismatch_rate: 1.0,
                ..small_spec()
            },
            SyntheticSpec {
                latent_dim: 7,
                ..small_spec()
            },
        ] {
            assert!(matches!(
                generate_synthetic(&spec, RngStream::new(0)),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn projections_are_orthonormal() {
        let world = SyntheticWorld::new(&small_spec()).unwrap();
        let p = world.image_projection();
        let gram = p.t_matmul(p).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            curated_samples: 30,
            ..small_spec()
        };
        let bundle = DatasetBundle::generate(&spec).unwrap();
        save_dataset(&bundle, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, bundle.spec);
        assert_eq!(back.train.concepts, bundle.train.concepts);
        assert_eq!(back.train.mismatched, bundle.train.mismatched);
        assert_eq!(back.train.image, bundle.train.image.map(|v| v as f32 as f64));
        assert!(back.eval.mismatched.iter().all(|m| !m));
        assert_eq!(back.curated.as_ref().unwrap().len(), 30);
        assert!(back.split("curated").unwrap().mismatched.iter().all(|m| !m));
        assert!(back.split("other").is_err());
    }
}
