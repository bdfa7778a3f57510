//! Additive node prompts: per-layer bottleneck prompts and the shared-vector
//! baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::{uniform, BackboneConfig};
use crate::diffcore::{batchnorm, BatchNorm, Matrix, NormMode};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptScheme {
    /// Bottleneck prompt on every layer.
    Agp,
    /// Bottleneck prompt on the input layer only.
    AgpS,
    /// One learnable vector added to every input node.
    Gpf,
    None,
}

impl std::str::FromStr for PromptScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agp" => Ok(Self::Agp),
            "agp_s" => Ok(Self::AgpS),
            "gpf" => Ok(Self::Gpf),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown prompt scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub scheme: PromptScheme,
    pub bottleneck_dim: usize,
    /// Layer indices that carry a bottleneck prompt.
    pub layers: Vec<usize>,
}

impl PromptConfig {
    /// The layer set implied by `scheme` for the given backbone.
    pub fn new(scheme: PromptScheme, bottleneck_dim: usize, backbone: &BackboneConfig) -> Result<Self> {
        let layers = match scheme {
            PromptScheme::Agp => (0..backbone.num_layers).collect(),
            PromptScheme::AgpS => vec![0],
            PromptScheme::Gpf | PromptScheme::None => Vec::new(),
        };
        let cfg = Self { scheme, bottleneck_dim, layers };
        cfg.validate(backbone)?;
        Ok(cfg)
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let expected: Vec<usize> = match self.scheme {
            PromptScheme::Agp => (0..backbone.num_layers).collect(),
            PromptScheme::AgpS => vec![0],
            PromptScheme::Gpf | PromptScheme::None => Vec::new(),
        };
        if self.layers != expected {
            return Err(Error::Config(format!("{:?} prompts layers {:?}, got {:?}", self.scheme, expected, self.layers)));
        }
        if matches!(self.scheme, PromptScheme::Agp | PromptScheme::AgpS)
            && (self.bottleneck_dim == 0 || self.bottleneck_dim >= backbone.hidden_dim)
        {
            return Err(Error::Config(format!(
                "bottleneck dim {} must be in 1..{}",
                self.bottleneck_dim, backbone.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Down/up projections and normalization of one prompted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLayer {
    pub layer: usize,
    pub w_d: Matrix,
    pub w_u: Matrix,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStack {
    pub config: PromptConfig,
    pub layers: Vec<PromptLayer>,
    /// The shared vector of the GPF scheme, 1 x input_dim.
    pub shared: Option<Matrix>,
}

impl PromptStack {
    pub fn none() -> Self {
        Self {
            config: PromptConfig { scheme: PromptScheme::None, bottleneck_dim: 0, layers: Vec::new() },
            layers: Vec::new(),
            shared: None,
        }
    }

    pub fn layer(&self, l: usize) -> Option<&PromptLayer> {
        self.layers.iter().find(|p| p.layer == l)
    }

    /// Number of trainable prompt scalars.
    pub fn param_count(&self) -> usize {
        let bottleneck: usize =
            self.layers.iter().map(|p| p.w_d.len() + p.w_u.len() + p.norm.gamma.len() + p.norm.beta.len()).sum();
        bottleneck + self.shared.as_ref().map_or(0, Matrix::len)
    }
}

/// `BN(relu(h W_d) W_u)`.
pub fn compute_prompt(h: &Matrix, layer: &mut PromptLayer, mode: NormMode) -> Result<Matrix> {
    let z = h.matmul(&layer.w_d)?.relu().matmul(&layer.w_u)?;
    batchnorm(&z, &mut layer.norm, mode)
}

/// `h + p`; a single-row `p` is added to every row.
pub fn apply_prompt(h: &Matrix, p: &Matrix) -> Result<Matrix> {
    if p.rows() == 1 && h.rows() != 1 {
        h.add_row(p)
    } else {
        h.add(p)
    }
}

/// Fresh prompts whose output is exactly zero: `W_u = 0`, unit scale and zero
/// shift in the normalization, zero shared vector.
pub fn init_prompt_stack(cfg: &PromptConfig, backbone: &BackboneConfig, seed: u64) -> Result<PromptStack> {
    cfg.validate(backbone)?;
    let d = cfg.bottleneck_dim;
    let layers = cfg
        .layers
        .iter()
        .map(|&l| {
            let dim = backbone.layer_input_dim(l);
            let mut rng = rng_for(seed, &[20, l as u64]);
            PromptLayer { layer: l, w_d: uniform(dim, d, dim, &mut rng), w_u: Matrix::zeros(d, dim), norm: BatchNorm::new(dim) }
        })
        .collect();
    let shared = (cfg.scheme == PromptScheme::Gpf).then(|| Matrix::zeros(1, backbone.input_dim));
    Ok(PromptStack { config: cfg.clone(), layers, shared })
}

/// Bottleneck prompt parameters for layer widths `dims` and bottleneck `d`:
/// `sum(2 D d + 2 D)`.
pub fn bottleneck_param_count(dims: &[usize], d: usize) -> usize {
    dims.iter().map(|&dim| 2 * dim * d + 2 * dim).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneMode;
    use crate::diffcore::evaluate_with_gradients;
    use rand::{Rng, SeedableRng};

    fn cfg5() -> BackboneConfig {
        BackboneConfig::new(300, 300, 5, BackboneMode::Full)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn layer_sets_follow_scheme() {
        let b = cfg5();
        assert_eq!(PromptConfig::new(PromptScheme::Agp, 64, &b).unwrap().layers, vec![0, 1, 2, 3, 4]);
        let s = init_prompt_stack(&PromptConfig::new(PromptScheme::AgpS, 64, &b).unwrap(), &b, 0).unwrap();
        assert_eq!(s.layers.len(), 1);
        assert_eq!(s.layers[0].layer, 0);
        assert!(PromptConfig::new(PromptScheme::Agp, 300, &b).is_err());
        assert!(PromptConfig::new(PromptScheme::Agp, 0, &b).is_err());
        let bad = PromptConfig { scheme: PromptScheme::AgpS, bottleneck_dim: 4, layers: vec![1] };
        assert!(bad.validate(&b).is_err());
    }

    #[test]
    fn parameter_count_for_default_sizes() {
        let b = cfg5();
        let s = init_prompt_stack(&PromptConfig::new(PromptScheme::Agp, 64, &b).unwrap(), &b, 1).unwrap();
        assert_eq!(s.param_count(), 195_000);
        assert_eq!(bottleneck_param_count(&[300; 5], 64), 195_000);
        let small = BackboneConfig::new(7, 16, 2, BackboneMode::Full);
        let g = init_prompt_stack(&PromptConfig::new(PromptScheme::Gpf, 4, &small).unwrap(), &small, 1).unwrap();
        assert_eq!(g.param_count(), 7);
    }

    #[test]
    fn initial_prompt_is_zero() {
        let b = BackboneConfig::new(4, 8, 3, BackboneMode::Full);
        let mut s = init_prompt_stack(&PromptConfig::new(PromptScheme::Agp, 3, &b).unwrap(), &b, 2).unwrap();
        for layer in &mut s.layers {
            let dim = layer.w_d.rows();
            let h = random(5, dim, 3);
            assert_eq!(compute_prompt(&h, layer, NormMode::Train).unwrap(), Matrix::zeros(5, dim));
        }
    }

    #[test]
    fn single_node_prompt_is_shift_only() {
        let b = BackboneConfig::new(4, 8, 1, BackboneMode::Full);
        let mut s = init_prompt_stack(&PromptConfig::new(PromptScheme::Agp, 3, &b).unwrap(), &b, 2).unwrap();
        let layer = &mut s.layers[0];
        layer.w_u = random(3, 4, 9);
        layer.norm.beta = Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = compute_prompt(&random(1, 4, 4), layer, NormMode::Train).unwrap();
        assert_eq!(p, layer.norm.beta);
    }

    #[test]
    fn prompt_matches_direct_formula() {
        let h = random(6, 4, 5);
        let mut layer = PromptLayer { layer: 0, w_d: random(4, 2, 6), w_u: random(2, 4, 7), norm: BatchNorm::new(4) };
        layer.norm.gamma = random(1, 4, 8);
        layer.norm.beta = random(1, 4, 9);
        let got = compute_prompt(&h, &mut layer.clone(), NormMode::Train).unwrap();
        let mut z = vec![vec![0.0; 4]; 6];
        for (i, row) in z.iter_mut().enumerate() {
            let hidden: Vec<f64> = (0..2)
                .map(|k| (0..4).map(|c| h.get(i, c) * layer.w_d.get(c, k)).sum::<f64>().max(0.0))
                .collect();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..2).map(|k| hidden[k] * layer.w_u.get(k, c)).sum();
            }
        }
        for c in 0..4 {
            let mean = z.iter().map(|r| r[c]).sum::<f64>() / 6.0;
            let var = z.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 6.0;
            for i in 0..6 {
                let expected = (z[i][c] - mean) / (var + layer.norm.eps).sqrt() * layer.norm.gamma.get(0, c)
                    + layer.norm.beta.get(0, c);
                assert!((got.get(i, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_prompt_examples() {
        let h = random(3, 2, 10);
        assert_eq!(apply_prompt(&h, &Matrix::zeros(3, 2)).unwrap(), h);
        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 3.0]]).unwrap();
        let shifted = apply_prompt(&two, &Matrix::row_vector(&[1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(shifted.to_rows(), vec![vec![1.0, -1.0], vec![3.0, 2.0]]);
        let p = random(3, 2, 11);
        let sum = apply_prompt(&h, &p).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(sum.get(i, j), h.get(i, j) + p.get(i, j));
            }
        }
        assert!(apply_prompt(&h, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn shared_vector_gradient_is_column_sum_of_input_gradient() {
        let x = random(5, 3, 12);
        let p = Matrix::zeros(1, 3);
        let w = random(3, 1, 13);
        let (_, gp) = evaluate_with_gradients(&[x.clone(), p], |t, v| {
            let wv = t.constant(w.clone());
            v[0].add_row(&v[1])?.matmul(&wv)?.relu().sum()
        })
        .unwrap();
        let (_, gx) = evaluate_with_gradients(&[x], |t, v| {
            let wv = t.constant(w.clone());
            v[0].matmul(&wv)?.relu().sum()
        })
        .unwrap();
        assert!(gp[1].max_abs_diff(&gx[0].column_sums()).unwrap() < 1e-14);
    }
}
