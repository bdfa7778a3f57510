//! GIN encoder with mean pooling and a three-layer MLP head.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::AdversarialSample;
use crate::diffcore::{BatchNorm, Matrix, NormMode, Tape};
use crate::error::{invalid, Error, Result};
use crate::graphdata::Graph;
use crate::model::{Model, NormModes};
use crate::prompt::PromptStack;
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// One weight per layer and no activation: `Ã H Θ`.
    Linear,
    /// Two-layer MLP, batch norm and relu around the aggregation.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub mode: BackboneMode,
    /// Self-loop offset of each layer; the aggregation uses `A + (1 + ε) I`.
    pub epsilon_gin: Vec<f64>,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_layers: usize, mode: BackboneMode) -> Self {
        Self { num_layers, input_dim, hidden_dim, mode, epsilon_gin: vec![0.0; num_layers] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.epsilon_gin.len() != self.num_layers {
            return Err(Error::Config(format!(
                "{} epsilon values for {} layers",
                self.epsilon_gin.len(),
                self.num_layers
            )));
        }
        if self.epsilon_gin.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("epsilon_gin must be finite".into()));
        }
        Ok(())
    }

    /// Width of the features entering layer `l`.
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GinLayer {
    Linear {
        theta: Matrix,
    },
    Full {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
        norm: BatchNorm,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// Three (weight, bias) pairs: hidden -> hidden -> hidden -> tasks.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl Head {
    pub fn init(hidden_dim: usize, num_tasks: usize, rng: &mut Rng) -> Self {
        let dims = [hidden_dim, hidden_dim, hidden_dim, num_tasks];
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for w in dims.windows(2) {
            weights.push(uniform(w[0], w[1], w[0], rng));
            biases.push(uniform(1, w[1], w[0], rng));
        }
        Self { weights, biases }
    }

    pub fn num_tasks(&self) -> usize {
        self.weights.last().map_or(0, Matrix::cols)
    }
}

/// Encoder layers plus classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub layers: Vec<GinLayer>,
    pub head: Head,
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, num_tasks: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_tasks == 0 {
            return Err(Error::Config("head needs at least one task".into()));
        }
        let mut rng = rng_for(seed, &[10]);
        let h = config.hidden_dim;
        let layers = (0..config.num_layers)
            .map(|l| {
                let d_in = config.layer_input_dim(l);
                match config.mode {
                    BackboneMode::Linear => GinLayer::Linear { theta: uniform(d_in, h, d_in, &mut rng) },
                    BackboneMode::Full => GinLayer::Full {
                        w1: uniform(d_in, h, d_in, &mut rng),
                        b1: uniform(1, h, d_in, &mut rng),
                        w2: uniform(h, h, h, &mut rng),
                        b2: uniform(1, h, h, &mut rng),
                        norm: BatchNorm::new(h),
                    },
                }
            })
            .collect();
        let head = Head::init(h, num_tasks, &mut rng_for(seed, &[11]));
        Ok(Self { config, layers, head })
    }

    /// Replaces the head with a freshly initialized one for `num_tasks` outputs.
    pub fn reset_head(&mut self, num_tasks: usize, seed: u64) {
        self.head = Head::init(self.config.hidden_dim, num_tasks, &mut rng_for(seed, &[11]));
    }

    /// Checksum over the encoder weights (not the head).
    pub fn encoder_fingerprint(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                GinLayer::Linear { theta } => out.extend(theta.iter().map(|v| v.to_bits())),
                GinLayer::Full { w1, b1, w2, b2, norm } => {
                    for m in [w1, b1, w2, b2, &norm.gamma, &norm.beta] {
                        out.extend(m.iter().map(|v| v.to_bits()));
                    }
                    out.extend(norm.running_mean.iter().chain(&norm.running_var).map(|v| v.to_bits()));
                }
            }
        }
        out
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// `a + (1 + ε) I`.
pub fn aug_adjacency(a: &Matrix, epsilon_gin: f64) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::Shape { op: "aug_adjacency", left: a.shape(), right: a.shape() });
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        out.set(i, i, a.get(i, i) + 1.0 + epsilon_gin);
    }
    Ok(out)
}

/// One GIN layer applied to `h` with an explicit augmented adjacency.
pub fn layer_forward(h: &Matrix, a_tilde: &Matrix, layer: &mut GinLayer, mode: NormMode) -> Result<Matrix> {
    let agg = a_tilde.matmul(h)?;
    match layer {
        GinLayer::Linear { theta } => agg.matmul(theta),
        GinLayer::Full { w1, b1, w2, b2, norm } => {
            let z = agg.matmul(w1)?.add_row(b1)?.relu().matmul(w2)?.add_row(b2)?;
            Ok(crate::diffcore::batchnorm(&z, norm, mode)?.relu())
        }
    }
}

/// Per-layer node features and the pooled graph embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub per_layer: Vec<Matrix>,
    pub embedding: Matrix,
}

/// Eval-mode forward of one graph, optionally prompted and perturbed.
pub fn encode(
    g: &Graph,
    params: &BackboneParams,
    prompts: Option<&PromptStack>,
    noise: Option<&AdversarialSample>,
) -> Result<Encoding> {
    let (x, a) = match noise {
        Some(s) => {
            if s.e_x.shape() != g.x.shape() || s.e_a.shape() != g.a.shape() {
                return Err(Error::Shape { op: "encode noise", left: g.x.shape(), right: s.e_x.shape() });
            }
            (g.x.add(&s.e_x)?, g.a.add(&s.e_a)?)
        }
        None => (g.x.clone(), g.a.clone()),
    };
    let model = Model { backbone: params.clone(), prompts: prompts.cloned().unwrap_or_else(PromptStack::none) };
    let tape = Tape::new();
    let bound = model.bind(&tape, &[]);
    let xv = tape.constant(x);
    let av = tape.constant(a);
    let pass = model.forward(&bound, xv, &[av], &[0, g.n()], NormModes::eval())?;
    Ok(Encoding {
        per_layer: pass.per_layer.iter().map(|v| (*v.value()).clone()).collect(),
        embedding: (*pass.embedding.value()).clone(),
    })
}

/// Head applied to one or more pooled embeddings (one per row).
pub fn classify(embedding: &Matrix, head: &Head) -> Result<Matrix> {
    if head.weights.len() != 3 || head.biases.len() != 3 {
        return Err(invalid("head must have three layers"));
    }
    let mut z = embedding.clone();
    for k in 0..3 {
        z = z.matmul(&head.weights[k])?.add_row(&head.biases[k])?;
        if k < 2 {
            z = z.relu();
        }
    }
    Ok(z)
}
