//! Tape gradients of the prompted-model loss against central finite
//! differences of an independent straight-line forward pass.
//!
//! Leaves are the feature noise `E_x`, the relaxed edge flips `B`, and every
//! prompt layer's `W_d` and `W_u`. Coordinates whose finite-difference stencil
//! crosses a relu kink are skipped.

#![allow(dead_code)]

use agp_core::attack::flip_mask;
use agp_core::backbone::{BackboneConfig, BackboneMode, BackboneParams, GinLayer};
use agp_core::diffcore::{Matrix, NormMode, Tape};
use agp_core::graphdata::Graph;
use agp_core::model::{GraphBatch, Model, NormModes, ParamGroup};
use agp_core::prompt::{init_prompt_stack, PromptConfig, PromptScheme};
use agp_oracles::{bce_from_probability, fd_gradient_smooth, max_relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

/// Shape of one random instance.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub nodes: usize,
    pub layers: usize,
    pub features: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub mode: BackboneMode,
    pub prompt_norm: NormMode,
}

impl Shape {
    /// Random shape with at most `max_nodes` nodes and `max_layers` layers.
    pub fn random(seed: u64, max_nodes: usize, max_layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = rng.random_range(3..=7);
        Self {
            nodes: rng.random_range(3..=max_nodes),
            layers: rng.random_range(1..=max_layers),
            features: rng.random_range(2..=5),
            hidden,
            bottleneck: rng.random_range(1..hidden),
            mode: if rng.random_bool(0.75) { BackboneMode::Full } else { BackboneMode::Linear },
            prompt_norm: if rng.random_bool(0.5) { NormMode::Train } else { NormMode::Eval },
        }
    }
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub struct Instance {
    pub shape: Shape,
    pub model: Model,
    pub graph: Graph,
    pub leaves: Vec<Matrix>,
}

impl Instance {
    pub fn new(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let n = shape.nodes;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let tasks = rng.random_range(1..=2);
        let labels = (0..tasks).map(|t| if t == 1 && rng.random_bool(0.3) { None } else { Some(rng.random_bool(0.5)) }).collect();
        let graph = Graph::from_edges(random(n, shape.features, 1.0, &mut rng), &edges, labels).unwrap();

        let mut cfg = BackboneConfig::new(shape.features, shape.hidden, shape.layers, shape.mode);
        cfg.epsilon_gin = (0..shape.layers).map(|_| rng.random_range(-0.3..0.3)).collect();
        let mut backbone = BackboneParams::init(cfg.clone(), tasks, seed).unwrap();
        for layer in &mut backbone.layers {
            match layer {
                GinLayer::Full { norm, .. } => {
                    let h = shape.hidden;
                    norm.running_mean = (0..h).map(|_| rng.random_range(-0.3..0.3)).collect();
                    norm.running_var = (0..h).map(|_| rng.random_range(0.5..2.0)).collect();
                    norm.gamma = random(1, h, 1.5, &mut rng);
                    norm.beta = random(1, h, 0.5, &mut rng);
                }
                GinLayer::Linear { theta } => {
                    // keep linear activations on the unit scale
                    *theta = theta.scale(1.0 / (n as f64).sqrt()).unwrap();
                }
            }
        }
        let pc = PromptConfig::new(PromptScheme::Agp, shape.bottleneck, &cfg).unwrap();
        let mut prompts = init_prompt_stack(&pc, &cfg, seed).unwrap();
        for p in &mut prompts.layers {
            let f = p.w_u.cols();
            p.w_u = random(p.w_u.rows(), f, 0.8, &mut rng);
            p.norm.running_mean = (0..f).map(|_| rng.random_range(-0.3..0.3)).collect();
            p.norm.running_var = (0..f).map(|_| rng.random_range(0.5..2.0)).collect();
            p.norm.gamma = random(1, f, 1.5, &mut rng);
        }
        let model = Model { backbone, prompts };

        let mut leaves =
            vec![random(n, shape.features, 0.8, &mut rng), Matrix::from_fn(n, n, |_, _| rng.random_range(0.05..0.95))];
        for p in &model.prompts.layers {
            leaves.push(p.w_d.clone());
            leaves.push(p.w_u.clone());
        }
        Self { shape, model, graph, leaves }
    }

    pub fn leaf_names(&self) -> Vec<String> {
        let mut names = vec!["E_x".to_string(), "B".to_string()];
        for p in &self.model.prompts.layers {
            names.push(format!("W_d{}", p.layer));
            names.push(format!("W_u{}", p.layer));
        }
        names
    }

    fn with_leaves(&self, leaves: &[Matrix]) -> Model {
        let mut m = self.model.clone();
        for (i, p) in m.prompts.layers.iter_mut().enumerate() {
            p.w_d = leaves[2 + 2 * i].clone();
            p.w_u = leaves[3 + 2 * i].clone();
        }
        m
    }

    /// Loss and its tape gradient with respect to every leaf.
    pub fn tape_loss(&self, leaves: &[Matrix]) -> (f64, Vec<Matrix>) {
        let m = self.with_leaves(leaves);
        let g = &self.graph;
        let batch = GraphBatch::new(&[g]).unwrap();
        let tape = Tape::new();
        let e_x = tape.param(leaves[0].clone());
        let b = tape.param(leaves[1].clone());
        let x = tape.constant(g.x.clone()).add(&e_x).unwrap();
        let mask = tape.constant(flip_mask(&g.a).unwrap());
        let adj = tape.constant(g.a.clone()).add(&b.hadamard(&mask).unwrap()).unwrap();
        let bound = m.bind(&tape, &[ParamGroup::Prompt]);
        let modes = NormModes { backbone: NormMode::Eval, prompt: self.shape.prompt_norm };
        let out = m.forward(&bound, x, &[adj], &batch.offsets, modes).unwrap();
        let loss = out.logits.bce_with_logits(&batch.targets, &batch.mask).unwrap();
        // prompt vars come as w_d, w_u, gamma, beta per layer
        let pv = bound.trainable(&[ParamGroup::Prompt]);
        let mut wrt = vec![e_x, b];
        for i in 0..m.prompts.layers.len() {
            wrt.push(pv[4 * i]);
            wrt.push(pv[4 * i + 1]);
        }
        let grads = tape.gradients(loss, &wrt).unwrap();
        (loss.scalar().unwrap(), grads)
    }

    /// Straight-line forward pass. Returns the loss and the sign pattern of
    /// every relu input.
    pub fn reference_loss(&self, leaves: &[Matrix]) -> (f64, Vec<bool>) {
        let m = self.with_leaves(leaves);
        let g = &self.graph;
        let n = g.n();
        let mask = flip_mask(&g.a).unwrap();
        let adj = Matrix::from_fn(n, n, |i, j| g.a.get(i, j) + leaves[1].get(i, j) * mask.get(i, j));
        let mut h = g.x.add(&leaves[0]).unwrap();
        let mut fp = Vec::new();
        for (l, layer) in m.backbone.layers.iter().enumerate() {
            if let Some(p) = m.prompts.layers.iter().find(|p| p.layer == l) {
                let z = h.matmul(&p.w_d).unwrap();
                fp.extend(signs(&z));
                let u = relu(&z).matmul(&p.w_u).unwrap();
                let stats = match self.shape.prompt_norm {
                    NormMode::Eval => Some((p.norm.running_mean.as_slice(), p.norm.running_var.as_slice())),
                    NormMode::Train => None,
                };
                h = h.add(&batch_norm(&u, &p.norm.gamma, &p.norm.beta, stats, p.norm.eps)).unwrap();
            }
            let self_w = 1.0 + m.backbone.config.epsilon_gin[l];
            let a_tilde = Matrix::from_fn(n, n, |i, j| adj.get(i, j) + if i == j { self_w } else { 0.0 });
            let agg = a_tilde.matmul(&h).unwrap();
            h = match layer {
                GinLayer::Linear { theta } => agg.matmul(theta).unwrap(),
                GinLayer::Full { w1, b1, w2, b2, norm } => {
                    let z1 = agg.matmul(w1).unwrap().add_row(b1).unwrap();
                    fp.extend(signs(&z1));
                    let z2 = relu(&z1).matmul(w2).unwrap().add_row(b2).unwrap();
                    let stats = Some((norm.running_mean.as_slice(), norm.running_var.as_slice()));
                    let normed = batch_norm(&z2, &norm.gamma, &norm.beta, stats, norm.eps);
                    fp.extend(signs(&normed));
                    relu(&normed)
                }
            };
        }
        let mut z = h.column_means();
        let head = &m.backbone.head;
        for k in 0..head.weights.len() {
            z = z.matmul(&head.weights[k]).unwrap().add_row(&head.biases[k]).unwrap();
            if k + 1 < head.weights.len() {
                fp.extend(signs(&z));
                z = relu(&z);
            }
        }
        let (targets, mask) = g.label_rows();
        let (mut total, mut count) = (0.0, 0.0);
        for c in 0..z.cols() {
            if mask[c] != 0.0 {
                let p = 1.0 / (1.0 + (-z.get(0, c)).exp());
                total += bce_from_probability(p, targets[c]);
                count += 1.0;
            }
        }
        (total / count, fp)
    }
}

fn signs(m: &Matrix) -> Vec<bool> {
    m.iter().map(|&v| v > 0.0).collect()
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0)).unwrap()
}

fn batch_norm(z: &Matrix, gamma: &Matrix, beta: &Matrix, stats: Option<(&[f64], &[f64])>, eps: f64) -> Matrix {
    let n = z.rows() as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => (0..z.cols())
            .map(|c| {
                let mu = (0..z.rows()).map(|r| z.get(r, c)).sum::<f64>() / n;
                (mu, (0..z.rows()).map(|r| (z.get(r, c) - mu).powi(2)).sum::<f64>() / n)
            })
            .unzip(),
    };
    Matrix::from_fn(z.rows(), z.cols(), |r, c| {
        (z.get(r, c) - mean[c]) / (var[c] + eps).sqrt() * gamma.get(0, c) + beta.get(0, c)
    })
}

fn flatten(leaves: &[Matrix]) -> Vec<f64> {
    leaves.iter().flat_map(|m| m.to_row_major()).collect()
}

fn unflatten(flat: &[f64], like: &[Matrix]) -> Vec<Matrix> {
    let mut at = 0;
    like.iter()
        .map(|m| {
            let out = Matrix::from_row_slice(m.rows(), m.cols(), &flat[at..at + m.len()]).unwrap();
            at += m.len();
            out
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub coordinates: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub shape: Shape,
    /// `|tape forward − reference forward|`.
    pub forward_gap: f64,
    pub leaves: Vec<LeafReport>,
}

impl InstanceReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn check(shape: Shape, seed: u64) -> InstanceReport {
    let inst = Instance::new(shape, seed);
    let (value, grads) = inst.tape_loss(&inst.leaves);
    let (reference, _) = inst.reference_loss(&inst.leaves);
    let fd = fd_gradient_smooth(|flat| inst.reference_loss(&unflatten(flat, &inst.leaves)), &flatten(&inst.leaves), STEP)
        .unwrap();
    let analytic = flatten(&grads);
    let mut leaves = Vec::new();
    let mut at = 0;
    for (name, leaf) in inst.leaf_names().into_iter().zip(&inst.leaves) {
        let (mut a, mut f) = (Vec::new(), Vec::new());
        for i in at..at + leaf.len() {
            if let Some(v) = fd[i] {
                a.push(analytic[i]);
                f.push(v);
            }
        }
        leaves.push(LeafReport {
            name,
            coordinates: leaf.len(),
            checked: a.len(),
            max_rel_error: max_relative_error(&a, &f, FLOOR),
            max_abs_gradient: f.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        });
        at += leaf.len();
    }
    InstanceReport { shape, forward_gap: (value - reference).abs(), leaves }
}
