//! Closed-form noise-cancelling prompts for the linear GIN encoder.
//!
//! For a corrupted graph `(Â, X̂) = (A + E_a, X + E_x)` and a linear encoder
//! `H ← Ã (H + P) Θ` with `Ã = Â + (1+ε) I`, the prompts
//!
//! - `P⁰ = Ã⁻¹ E_a (E_x − X̂) − E_x` on the input layer, and
//! - `Pˡ = −Ã⁻¹ E_a X̂ˡ` on every later layer, with `X̂ˡ` the running features,
//!
//! make the prompted corrupted forward pass equal the clean one.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::flip_mask;
use crate::backbone::{aug_adjacency, layer_forward, BackboneConfig, BackboneMode, BackboneParams, GinLayer};
use crate::diffcore::{Matrix, NormMode};
use crate::error::{Error, Result};
use crate::graphdata::is_valid_adjacency;
use crate::rng::Rng;

/// Condition numbers above this are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Corrupted graph together with the noise that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScenario {
    pub x_hat: Matrix,
    pub a_hat: Matrix,
    pub e_x: Matrix,
    pub e_a: Matrix,
}

impl NoiseScenario {
    /// Builds a scenario from a clean graph and its noise.
    pub fn from_clean(x: &Matrix, a: &Matrix, e_x: Matrix, e_a: Matrix) -> Result<Self> {
        let a_hat = a.add(&e_a)?;
        let s = Self { x_hat: x.add(&e_x)?, a_hat, e_x, e_a };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let clean = self.a_hat.sub(&self.e_a)?;
        if !is_valid_adjacency(&self.a_hat) || !is_valid_adjacency(&clean) {
            return Err(Error::InvalidArgument("corrupted and clean adjacencies must both be binary and symmetric".into()));
        }
        if self.e_x.shape() != self.x_hat.shape() {
            return Err(Error::Shape { op: "scenario", left: self.x_hat.shape(), right: self.e_x.shape() });
        }
        Ok(())
    }

    pub fn clean_x(&self) -> Result<Matrix> {
        self.x_hat.sub(&self.e_x)
    }

    pub fn clean_a(&self) -> Result<Matrix> {
        self.a_hat.sub(&self.e_a)
    }
}

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = m.as_dmatrix().clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve(a_tilde: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if a_tilde.rows() != a_tilde.cols() || a_tilde.rows() != rhs.rows() {
        return Err(Error::Shape { op: "solve", left: a_tilde.shape(), right: rhs.shape() });
    }
    let cond = condition_number(a_tilde);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let lu = a_tilde.as_dmatrix().clone().lu();
    let x: DMatrix<f64> = lu.solve(rhs.as_dmatrix()).ok_or(Error::IllConditioned(f64::INFINITY))?;
    Matrix::checked(x, "solve")
}

/// `Ã⁻¹ E_a (E_x − X̂) − E_x`.
pub fn optimal_input_prompt(a_tilde: &Matrix, e_a: &Matrix, e_x: &Matrix, x_hat: &Matrix) -> Result<Matrix> {
    let rhs = e_a.matmul(&e_x.sub(x_hat)?)?;
    solve(a_tilde, &rhs)?.sub(e_x)
}

/// `−Ã⁻¹ E_a X̂ˡ`.
pub fn optimal_hidden_prompt(a_tilde: &Matrix, e_a: &Matrix, x_hat_l: &Matrix) -> Result<Matrix> {
    solve(a_tilde, &e_a.matmul(x_hat_l)?)?.scale(-1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    /// Max absolute difference between the prompted corrupted output and the
    /// clean output.
    pub deviation: f64,
    /// Condition number of each layer's augmented corrupted adjacency.
    pub conditions: Vec<f64>,
    pub prompts: Vec<Matrix>,
}

fn linear_layers(backbone: &BackboneParams) -> Result<()> {
    if backbone.config.mode != BackboneMode::Linear {
        return Err(Error::InvalidArgument("closed-form prompts need the linear encoder".into()));
    }
    Ok(())
}

fn clean_output(s: &NoiseScenario, backbone: &BackboneParams) -> Result<Matrix> {
    let mut layers = backbone.layers.clone();
    let a = s.clean_a()?;
    let mut h = s.clean_x()?;
    for (l, layer) in layers.iter_mut().enumerate() {
        h = layer_forward(&h, &aug_adjacency(&a, backbone.config.epsilon_gin[l])?, layer, NormMode::Eval)?;
    }
    Ok(h)
}

/// Runs the corrupted graph through the encoder with prompts chosen layer by
/// layer by `choose(l, a_tilde, features)`.
fn prompted_output(
    s: &NoiseScenario,
    backbone: &BackboneParams,
    mut choose: impl FnMut(usize, &Matrix, &Matrix) -> Result<Matrix>,
) -> Result<(Matrix, Vec<Matrix>)> {
    let mut layers = backbone.layers.clone();
    let mut h = s.x_hat.clone();
    let mut prompts = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter_mut().enumerate() {
        let a_tilde = aug_adjacency(&s.a_hat, backbone.config.epsilon_gin[l])?;
        let p = choose(l, &a_tilde, &h)?;
        h = layer_forward(&h.add(&p)?, &a_tilde, layer, NormMode::Eval)?;
        prompts.push(p);
    }
    Ok((h, prompts))
}

/// Builds the closed-form prompts for `s` and reports how far the prompted
/// corrupted output is from the clean output.
pub fn verify_theorem1(s: &NoiseScenario, backbone: &BackboneParams) -> Result<TheoremCheck> {
    linear_layers(backbone)?;
    s.validate()?;
    let mut conditions = Vec::new();
    let (out, prompts) = prompted_output(s, backbone, |l, a_tilde, h| {
        conditions.push(condition_number(a_tilde));
        if l == 0 {
            optimal_input_prompt(a_tilde, &s.e_a, &s.e_x, h)
        } else {
            optimal_hidden_prompt(a_tilde, &s.e_a, h)
        }
    })?;
    let deviation = out.max_abs_diff(&clean_output(s, backbone)?)?;
    Ok(TheoremCheck { deviation, conditions, prompts })
}

/// Feature noise only: `P⁰ = −E_x` and no hidden prompts.
pub fn verify_input_prompt_only(s: &NoiseScenario, backbone: &BackboneParams) -> Result<TheoremCheck> {
    linear_layers(backbone)?;
    s.validate()?;
    let mut conditions = Vec::new();
    let (out, prompts) = prompted_output(s, backbone, |l, a_tilde, h| {
        conditions.push(condition_number(a_tilde));
        if l == 0 {
            s.e_x.scale(-1.0)
        } else {
            Ok(Matrix::zeros(h.rows(), h.cols()))
        }
    })?;
    let deviation = out.max_abs_diff(&clean_output(s, backbone)?)?;
    Ok(TheoremCheck { deviation, conditions, prompts })
}

/// A random linear encoder whose layers keep activations on the scale of the
/// input: each `Θ` is rescaled by the spectral norms of itself and of the
/// augmented corrupted adjacency it will meet.
pub fn scaled_linear_backbone(s: &NoiseScenario, hidden_dim: usize, epsilon_gin: Vec<f64>, seed: u64) -> Result<BackboneParams> {
    let mut cfg = BackboneConfig::new(s.x_hat.cols(), hidden_dim, epsilon_gin.len(), BackboneMode::Linear);
    cfg.epsilon_gin = epsilon_gin;
    let mut params = BackboneParams::init(cfg, 1, seed)?;
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let GinLayer::Linear { theta } = layer else { unreachable!("linear config") };
        let a_norm = spectral_norm(&aug_adjacency(&s.a_hat, params.config.epsilon_gin[l])?);
        let t_norm = spectral_norm(theta);
        if t_norm > 0.0 && a_norm > 0.0 {
            *theta = theta.scale(1.0 / (t_norm * a_norm))?;
        }
    }
    Ok(params)
}

fn spectral_norm(m: &Matrix) -> f64 {
    m.as_dmatrix().clone().singular_values().iter().copied().fold(0.0, f64::max)
}

/// Outcome of sampling a well-conditioned random scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledScenario {
    pub scenario: NoiseScenario,
    pub epsilon_gin: Vec<f64>,
    /// Draws discarded for exceeding the condition bound.
    pub rejections: usize,
}

/// Random clean graph on `n` nodes with `d` features, feature noise in
/// `±noise`, and each node pair flipped with probability `flip_prob`. Draws
/// are repeated until every layer's `Ã` has condition number at most
/// `max_condition`.
pub fn sample_scenario(
    n: usize,
    d: usize,
    layers: usize,
    flip_prob: f64,
    max_condition: f64,
    rng: &mut Rng,
) -> Result<SampledScenario> {
    let mut rejections = 0;
    for _ in 0..10_000 {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.35) {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
            }
        }
        let mask = flip_mask(&a)?;
        let mut e_a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(flip_prob) {
                    e_a.set(i, j, mask.get(i, j));
                    e_a.set(j, i, mask.get(j, i));
                }
            }
        }
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let e_x = Matrix::from_fn(n, d, |_, _| rng.random_range(-0.8..0.8));
        let eps: Vec<f64> = (0..layers).map(|_| rng.random_range(-0.5..0.5)).collect();
        let s = NoiseScenario::from_clean(&x, &a, e_x, e_a)?;
        let ok = eps.iter().all(|&e| {
            let a_t = aug_adjacency(&s.a_hat, e).expect("square");
            let a_c = aug_adjacency(&s.clean_a().expect("shape"), e).expect("square");
            condition_number(&a_t) <= max_condition && condition_number(&a_c) <= max_condition
        });
        if ok {
            return Ok(SampledScenario { scenario: s, epsilon_gin: eps, rejections });
        }
        rejections += 1;
    }
    Err(Error::InfeasibleSpec("no well-conditioned scenario after 10000 draws".into()))
}

/// One of the single-node illustrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrationCase {
    pub name: String,
    pub prompt: Vec<f64>,
    pub clean_message: Vec<f64>,
    pub noisy_message: Vec<f64>,
    pub prompted_message: Vec<f64>,
    pub restored: bool,
}

/// Sum-aggregated message at node 4 (index 3), self included, with an
/// optional prompt added to node 4's own features.
fn message_at_node4(x: &Matrix, a: &Matrix, prompt: Option<&[f64]>) -> Vec<f64> {
    let target = 3;
    (0..x.cols())
        .map(|c| {
            let mut m = x.get(target, c) + prompt.map_or(0.0, |p| p[c]);
            for j in 0..x.rows() {
                if a.get(target, j) != 0.0 {
                    m += x.get(j, c);
                }
            }
            m
        })
        .collect()
}

/// Node noise on node 1, a cut edge 3–4, and both together, each undone by a
/// single prompt on node 4.
pub fn figure4_cases() -> Result<Vec<IllustrationCase>> {
    // star around node 4 (index 3) plus the edge 1-2; integer features keep
    // the arithmetic exact
    let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![-2.0, 4.0], vec![5.0, 0.0]])?;
    let a = {
        let mut a = Matrix::zeros(4, 4);
        for (i, j) in [(0, 3), (1, 3), (2, 3), (0, 1)] {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    };
    let e_x1 = [3.0, -7.0];
    let noisy_x = {
        let mut m = x.clone();
        for (c, e) in e_x1.iter().enumerate() {
            m.set(0, c, x.get(0, c) + e);
        }
        m
    };
    let cut_a = {
        let mut m = a.clone();
        m.set(2, 3, 0.0);
        m.set(3, 2, 0.0);
        m
    };
    let x3 = x.row(2);
    let clean = message_at_node4(&x, &a, None);
    let cases = [
        ("node noise", &noisy_x, &a, e_x1.iter().map(|e| -e).collect::<Vec<_>>()),
        ("edge cut", &x, &cut_a, x3.clone()),
        ("hybrid", &noisy_x, &cut_a, x3.iter().zip(&e_x1).map(|(v, e)| v - e).collect()),
    ];
    Ok(cases
        .into_iter()
        .map(|(name, xs, adj, prompt)| {
            let noisy = message_at_node4(xs, adj, None);
            let prompted = message_at_node4(xs, adj, Some(&prompt));
            IllustrationCase {
                name: name.into(),
                restored: prompted == clean,
                prompt,
                clean_message: clean.clone(),
                noisy_message: noisy,
                prompted_message: prompted,
            }
        })
        .collect())
}
