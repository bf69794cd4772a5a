//! Two-tower encoders and the learnable logit scale/offset.
//!
//! Each tower is `input → tanh(W₁x + b₁) → W₂h + b₂ → L2-normalize`. The
//! student, reference and teachers all share this structure and differ only
//! in widths and weights.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::io::{read_matrix, write_matrix};
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, l2_norm, Matrix, RngStream};
use crate::objectives::ContrastiveKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

/// Layer shapes for a full two-tower model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub image: TowerShape,
    pub text: TowerShape,
    /// Output width of the learnable feature-matching head, if the model carries one.
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

impl ModelShape {
    /// Same hidden and embedding widths on both towers.
    pub fn symmetric(d_img: usize, d_txt: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            image: TowerShape {
                input_dim: d_img,
                hidden_dim,
                embed_dim,
            },
            text: TowerShape {
                input_dim: d_txt,
                hidden_dim,
                embed_dim,
            },
            projection_dim: None,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, t) in [("image", &self.image), ("text", &self.text)] {
            ensure!(
                t.input_dim > 0 && t.hidden_dim > 0 && t.embed_dim > 0,
                "{name} tower has a zero dimension: {t:?}"
            );
        }
        ensure!(
            self.image.embed_dim == self.text.embed_dim,
            "towers must share an embedding width ({} vs {})",
            self.image.embed_dim,
            self.text.embed_dim
        );
        Ok(())
    }
}

/// A dense layer `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Self {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerParams {
    pub hidden: Dense,
    pub output: Dense,
}

/// Intermediate activations of one tower pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct TowerTrace {
    pub hidden: Matrix,
    pub norms: Vec<f64>,
    pub embed: Matrix,
}

impl TowerParams {
    pub fn init(shape: TowerShape, rng: &mut impl rand::Rng) -> Self {
        Self {
            hidden: Dense::init(shape.input_dim, shape.hidden_dim, rng),
            output: Dense::init(shape.hidden_dim, shape.embed_dim, rng),
        }
    }

    pub fn shape(&self) -> TowerShape {
        TowerShape {
            input_dim: self.hidden.weight.rows(),
            hidden_dim: self.hidden.weight.cols(),
            embed_dim: self.output.weight.cols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.hidden.bias.len() == self.hidden.weight.cols()
                && self.output.weight.rows() == self.hidden.weight.cols()
                && self.output.bias.len() == self.output.weight.cols(),
            "tower layer shapes do not chain"
        );
        Ok(())
    }

    pub(crate) fn forward(&self, features: &Matrix) -> Result<TowerTrace> {
        ensure!(
            features.cols() == self.hidden.weight.rows(),
            "features have {} columns, tower expects {}",
            features.cols(),
            self.hidden.weight.rows()
        );
        let hidden = self.hidden.apply(features)?.map(f64::tanh);
        let mut embed = self.output.apply(&hidden)?;
        let mut norms = Vec::with_capacity(embed.rows());
        for i in 0..embed.rows() {
            let n = l2_norm(embed.row(i));
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "tower output row {i} has norm {n}"
                )));
            }
            embed.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(TowerTrace {
            hidden,
            norms,
            embed,
        })
    }

    /// Accumulates parameter gradients of this tower into `grad` given
    /// `d_embed = ∂L/∂z` for the normalized embeddings.
    pub(crate) fn backward(
        &self,
        features: &Matrix,
        trace: &TowerTrace,
        d_embed: &Matrix,
        grad: &mut TowerParams,
    ) -> Result<()> {
        let z = &trace.embed;
        // Through the normalization: (I − z zᵀ)/‖e‖.
        let mut d_raw = d_embed.clone();
        for i in 0..z.rows() {
            let proj = dot(z.row(i), d_embed.row(i));
            let n = trace.norms[i];
            for (d, &zi) in d_raw.row_mut(i).iter_mut().zip(z.row(i)) {
                *d = (*d - zi * proj) / n;
            }
        }
        grad.output
            .weight
            .add_assign_scaled(&trace.hidden.t_matmul(&d_raw)?, 1.0);
        for (g, s) in grad.output.bias.iter_mut().zip(d_raw.col_sums()) {
            *g += s;
        }
        let mut d_pre = d_raw.matmul_t(&self.output.weight)?;
        for (d, &h) in d_pre.data_mut().iter_mut().zip(trace.hidden.data()) {
            *d *= 1.0 - h * h;
        }
        grad.hidden
            .weight
            .add_assign_scaled(&features.t_matmul(&d_pre)?, 1.0);
        for (g, s) in grad.hidden.bias.iter_mut().zip(d_pre.col_sums()) {
            *g += s;
        }
        Ok(())
    }
}

/// Full model state. Also used as the gradient container: a gradient is a
/// `ModelParams` whose entries are partial derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image: TowerParams,
    pub text: TowerParams,
    /// `α = exp(log_alpha)` keeps the inverse temperature positive.
    pub log_alpha: f64,
    pub beta: f64,
    /// Learnable `embed × teacher_embed` head used only by feature-matching KD.
    pub projection: Option<Matrix>,
}

impl ModelParams {
    /// Gaussian fan-in-scaled weights, zero biases, `α = 10`, and
    /// `β = −10` for the sigmoid loss or `0` for softmax.
    pub fn init(shape: &ModelShape, kind: ContrastiveKind, rng: RngStream) -> Result<Self> {
        shape.validate()?;
        let mut g = rng.generator();
        let image = TowerParams::init(shape.image, &mut g);
        let text = TowerParams::init(shape.text, &mut g);
        let projection = shape.projection_dim.map(|out| {
            // Starts as a truncated identity so the head is a no-op when widths match.
            Matrix::from_fn(shape.image.embed_dim, out, |i, j| if i == j { 1.0 } else { 0.0 })
        });
        Ok(Self {
            image,
            text,
            log_alpha: 10f64.ln(),
            beta: match kind {
                ContrastiveKind::Sigmoid => -10.0,
                ContrastiveKind::Softmax => 0.0,
            },
            projection,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output.weight.cols()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            image: self.image.shape(),
            text: self.text.shape(),
            projection_dim: self.projection.as_ref().map(Matrix::cols),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.shape().validate()?;
        if let Some(p) = &self.projection {
            ensure!(
                p.rows() == self.embed_dim(),
                "projection has {} rows, embedding width is {}",
                p.rows(),
                self.embed_dim()
            );
        }
        ensure!(
            self.groups().iter().all(|(_, v)| v.iter().all(|x| x.is_finite())),
            "model parameters contain non-finite values"
        );
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            log_alpha: 0.0,
            beta: 0.0,
            projection: self
                .projection
                .as_ref()
                .map(|p| Matrix::zeros(p.rows(), p.cols())),
        }
    }

    /// Named flat views of every parameter array, in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        let mut g: Vec<(&'static str, &[f64])> = vec![
            ("image.hidden.weight", self.image.hidden.weight.data()),
            ("image.hidden.bias", &self.image.hidden.bias),
            ("image.output.weight", self.image.output.weight.data()),
            ("image.output.bias", &self.image.output.bias),
            ("text.hidden.weight", self.text.hidden.weight.data()),
            ("text.hidden.bias", &self.text.hidden.bias),
            ("text.output.weight", self.text.output.weight.data()),
            ("text.output.bias", &self.text.output.bias),
            ("log_alpha", std::slice::from_ref(&self.log_alpha)),
            ("beta", std::slice::from_ref(&self.beta)),
        ];
        if let Some(p) = &self.projection {
            g.push(("projection", p.data()));
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut g: Vec<(&'static str, &mut [f64])> = vec![
            ("image.hidden.weight", self.image.hidden.weight.data_mut()),
            ("image.hidden.bias", &mut self.image.hidden.bias),
            ("image.output.weight", self.image.output.weight.data_mut()),
            ("image.output.bias", &mut self.image.output.bias),
            ("text.hidden.weight", self.text.hidden.weight.data_mut()),
            ("text.hidden.bias", &mut self.text.hidden.bias),
            ("text.output.weight", self.text.output.weight.data_mut()),
            ("text.output.bias", &mut self.text.output.bias),
            ("log_alpha", std::slice::from_mut(&mut self.log_alpha)),
            ("beta", std::slice::from_mut(&mut self.beta)),
        ];
        if let Some(p) = &mut self.projection {
            g.push(("projection", p.data_mut()));
        }
        g
    }

    pub fn num_parameters(&self) -> usize {
        self.groups().iter().map(|(_, v)| v.len()).sum()
    }

    /// Embeds both sides of a batch.
    pub fn embed(&self, batch: &PairBatch) -> Result<(Matrix, Matrix)> {
        Ok((
            encode(&self.image, batch.image())?,
            encode(&self.text, batch.text())?,
        ))
    }

    /// `b × b` logits of a batch under this model's own α and β.
    pub fn logits(&self, batch: &PairBatch) -> Result<Matrix> {
        let (zi, zt) = self.embed(batch)?;
        pairwise_logits(&zi, &zt, self.alpha(), self.beta)
    }
}

/// Paired examples; row `i` of `image` is matched with row `i` of `text`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    image: Matrix,
    text: Matrix,
}

impl PairBatch {
    pub fn new(image: Matrix, text: Matrix) -> Result<Self> {
        ensure!(
            image.rows() == text.rows(),
            "pair batch sides differ in length: {} images vs {} texts",
            image.rows(),
            text.rows()
        );
        ensure!(image.rows() >= 1, "pair batch must not be empty");
        Ok(Self { image, text })
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the listed pairs, in order.
    pub fn select(&self, indices: &[usize]) -> Result<PairBatch> {
        ensure!(
            indices.iter().all(|&i| i < self.len()),
            "index out of range for batch of {}",
            self.len()
        );
        PairBatch::new(
            self.image.select_rows(indices),
            self.text.select_rows(indices),
        )
    }
}

/// Encodes `features` through a tower into unit-norm embeddings.
pub fn encode(params: &TowerParams, features: &Matrix) -> Result<Matrix> {
    Ok(params.forward(features)?.embed)
}

/// `l_ij = α · z_img_i · z_txt_j + β`.
pub fn pairwise_logits(z_img: &Matrix, z_txt: &Matrix, alpha: f64, beta: f64) -> Result<Matrix> {
    ensure!(
        z_img.shape() == z_txt.shape(),
        "embedding blocks differ in shape: {:?} vs {:?}",
        z_img.shape(),
        z_txt.shape()
    );
    ensure!(alpha.is_finite() && beta.is_finite(), "non-finite alpha/beta");
    Ok(z_img.matmul_t(z_txt)?.map(|s| alpha * s + beta))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    shape: ModelShape,
    log_alpha: f64,
    beta: f64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

const CHECKPOINT_FORMAT: &str = "curation-checkpoint";
const CHECKPOINT_HEADER: &str = "checkpoint.json";

/// Writes a checkpoint directory: `checkpoint.json` plus one embedding-format
/// file per parameter array. Arrays are stored as 32-bit floats.
pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    let mut write = |name: &str, m: &Matrix| -> Result<()> {
        let file = format!("{name}.acde");
        write_matrix(&dir.join(&file), m)?;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            file,
            rows: m.rows(),
            cols: m.cols(),
        });
        Ok(())
    };
    for (tower_name, tower) in [("image", &params.image), ("text", &params.text)] {
        for (layer_name, layer) in [("hidden", &tower.hidden), ("output", &tower.output)] {
            write(&format!("{tower_name}.{layer_name}.weight"), &layer.weight)?;
            let bias = Matrix::from_vec_unchecked(1, layer.bias.len(), layer.bias.clone());
            write(&format!("{tower_name}.{layer_name}.bias"), &bias)?;
        }
    }
    if let Some(p) = &params.projection {
        write("projection", p)?;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        shape: params.shape(),
        log_alpha: params.log_alpha,
        beta: params.beta,
        arrays,
    };
    let path = dir.join(CHECKPOINT_HEADER);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let path = dir.join(CHECKPOINT_HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Format {
            field: "checkpoint header",
            message: format!("unsupported checkpoint {} v{}", header.format, header.version),
        });
    }
    let read = |name: &str| -> Result<Matrix> {
        let entry = header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format {
                field: "checkpoint arrays",
                message: format!("missing array {name}"),
            })?;
        let m = read_matrix(&dir.join(&entry.file))?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(Error::Format {
                field: "checkpoint arrays",
                message: format!(
                    "{name} is {:?}, header says {:?}",
                    m.shape(),
                    (entry.rows, entry.cols)
                ),
            });
        }
        Ok(m)
    };
    let dense = |prefix: &str| -> Result<Dense> {
        Ok(Dense {
            weight: read(&format!("{prefix}.weight"))?,
            bias: read(&format!("{prefix}.bias"))?.into_data(),
        })
    };
    let params = ModelParams {
        image: TowerParams {
            hidden: dense("image.hidden")?,
            output: dense("image.output")?,
        },
        text: TowerParams {
            hidden: dense("text.hidden")?,
            output: dense("text.output")?,
        },
        log_alpha: header.log_alpha,
        beta: header.beta,
        projection: match header.shape.projection_dim {
            Some(_) => Some(read("projection")?),
            None => None,
        },
    };
    params.validate()?;
    if params.shape() != header.shape {
        return Err(Error::Format {
            field: "checkpoint shape",
            message: "array shapes disagree with header shape".into(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, stream: u64) -> Matrix {
        let mut g = RngStream::with_stream(99, stream).generator();
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut g))
    }

    fn small_model() -> ModelParams {
        let shape = ModelShape::symmetric(5, 6, 7, 4);
        ModelParams::init(&shape, ContrastiveKind::Sigmoid, RngStream::new(3)).unwrap()
    }

    #[test]
    fn zero_hidden_weights_give_constant_bias_direction() {
        let mut tower = small_model().image;
        tower.hidden.weight = Matrix::zeros(5, 7);
        tower.output.bias = vec![3.0, 0.0, 4.0, 0.0];
        let z = encode(&tower, &random_matrix(3, 5, 1)).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(z[(i, 0)], 0.6, epsilon = 1e-15);
            assert_abs_diff_eq!(z[(i, 2)], 0.8, epsilon = 1e-15);
            assert_eq!(z[(i, 1)], 0.0);
        }
    }

    #[test]
    fn encode_outputs_unit_rows_and_is_deterministic() {
        let x = random_matrix(10, 5, 2);
        let z = encode(&small_model().image, &x).unwrap();
        for i in 0..z.rows() {
            assert_abs_diff_eq!(l2_norm(z.row(i)), 1.0, epsilon = 1e-12);
        }
        let again = encode(&small_model().image, &x).unwrap();
        assert_eq!(
            z.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let x = random_matrix(2, 6, 2);
        assert!(matches!(
            encode(&small_model().image, &x),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn logits_examples() {
        let u = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let l = pairwise_logits(&u, &u, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 1.0, epsilon = 1e-15);

        // dot = 0.5 between (1, 0) and (0.5, √3/2)
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, 0.75f64.sqrt()]]).unwrap();
        let l = pairwise_logits(&a, &b, 10.0, -5.0).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 0.0, epsilon = 1e-15);

        assert!(pairwise_logits(&a, &random_matrix(2, 2, 4), 1.0, 0.0).is_err());
    }

    #[test]
    fn logits_match_double_loop() {
        let zi = crate::numerics::unit_normalize(&random_matrix(4, 3, 5)).unwrap();
        let zt = crate::numerics::unit_normalize(&random_matrix(4, 3, 6)).unwrap();
        let (alpha, beta) = (7.5, -2.25);
        let l = pairwise_logits(&zi, &zt, alpha, beta).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += zi[(i, k)] * zt[(j, k)];
                }
                assert_abs_diff_eq!(l[(i, j)], alpha * s + beta, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn init_conventions() {
        let shape = ModelShape::symmetric(3, 3, 4, 2);
        let sig = ModelParams::init(&shape, ContrastiveKind::Sigmoid, RngStream::new(1)).unwrap();
        let smax = ModelParams::init(&shape, ContrastiveKind::Softmax, RngStream::new(1)).unwrap();
        assert_abs_diff_eq!(sig.alpha(), 10.0, epsilon = 1e-12);
        assert_eq!(sig.beta, -10.0);
        assert_eq!(smax.beta, 0.0);
        assert_eq!(sig.image, smax.image);
        assert!(sig.image.hidden.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut shape = ModelShape::symmetric(5, 6, 7, 4);
        shape.projection_dim = Some(3);
        let mut params =
            ModelParams::init(&shape, ContrastiveKind::Softmax, RngStream::new(8)).unwrap();
        for (_, g) in params.groups_mut() {
            g.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        params.log_alpha = 2.123456789012345;
        save_checkpoint(&params, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, params);
    }

    proptest! {
        #[test]
        fn logits_within_alpha_band_and_permute_with_rows(
            seed in 0u64..1000,
            alpha in 0.1f64..100.0,
            beta in -20.0f64..20.0,
        ) {
            let zi = crate::numerics::unit_normalize(&random_matrix(5, 3, seed)).unwrap();
            let zt = crate::numerics::unit_normalize(&random_matrix(5, 3, seed + 5000)).unwrap();
            let l = pairwise_logits(&zi, &zt, alpha, beta).unwrap();
            let slack = 1e-12 * (alpha + beta.abs());
            prop_assert!(l.data().iter().all(|&v| v >= beta - alpha - slack && v <= beta + alpha + slack));

            let perm = [3, 0, 4, 2, 1];
            let lp = pairwise_logits(&zi.select_rows(&perm), &zt.select_rows(&perm), alpha, beta).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(lp[(i, j)], l[(perm[i], perm[j])]);
                }
            }
        }
    }
}
