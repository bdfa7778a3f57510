//! JointPGD: projected-gradient attacks on node features and topology.
//!
//! Feature noise `E_x` takes signed-gradient steps inside an ℓ∞ ball. Topology
//! noise is optimized through a relaxed indicator `B ∈ [0,1]^{N×N}`: the model
//! sees `A + B ⊙ 𝔸`, where the flip mask `𝔸` turns an indicator into edge
//! insertions (+1) and deletions (−1). After the last step `B` is sampled
//! into a binary flip pattern.

use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graphdata::{adjacency_nnz, Graph};
use crate::model::{GraphBatch, Model, NormModes};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Node,
    Topology,
    Hybrid,
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Self::Node),
            "topology" => Ok(Self::Topology),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown attack mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Node => "node",
            Self::Topology => "topology",
            Self::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationBudget {
    /// ℓ∞ radius of the feature noise.
    pub epsilon: f64,
    /// Fraction of adjacency entries that may be flipped.
    pub ratio: f64,
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mode: AttackMode,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self { epsilon: 0.8, ratio: 0.4, steps: 10, alpha: 0.01, beta: 100.0, mode: AttackMode::Hybrid }
    }
}

impl PerturbationBudget {
    pub fn with_mode(mut self, mode: AttackMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be finite and non-negative", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("attack step sizes must be positive".into()));
        }
        Ok(())
    }

    /// Feature radius after applying the mode (topology attacks use 0).
    pub fn effective_epsilon(&self) -> f64 {
        if self.mode == AttackMode::Topology {
            0.0
        } else {
            self.epsilon
        }
    }

    /// Flip ratio after applying the mode (node attacks use 0).
    pub fn effective_ratio(&self) -> f64 {
        if self.mode == AttackMode::Node {
            0.0
        } else {
            self.ratio
        }
    }

    /// `q = floor(r · ‖A‖₀)` for this graph.
    pub fn edge_budget(&self, g: &Graph) -> usize {
        (self.effective_ratio() * adjacency_nnz(g) as f64).floor() as usize
    }
}

/// Noise found by an attack on one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSample {
    pub e_x: Matrix,
    /// Relaxed flip indicator after the last projection.
    pub b: Matrix,
    /// Discrete topology noise; `A + e_a` is binary.
    pub e_a: Matrix,
}

impl AdversarialSample {
    pub fn zero(g: &Graph) -> Self {
        Self { e_x: Matrix::zeros(g.n(), g.feature_dim()), b: Matrix::zeros(g.n(), g.n()), e_a: Matrix::zeros(g.n(), g.n()) }
    }

    /// Number of flipped undirected edges.
    pub fn flips(&self) -> usize {
        self.e_a.nnz() / 2
    }

    pub fn linf(&self) -> f64 {
        self.e_x.max_abs()
    }

    /// The perturbed graph `(X + e_x, A + e_a)`.
    pub fn apply(&self, g: &Graph) -> Result<Graph> {
        Graph::new(g.x.add(&self.e_x)?, g.a.add(&self.e_a)?, g.labels.clone())
    }
}

/// `11ᵀ − I − 2A`: +1 where an edge may be inserted, −1 where one may be
/// removed, 0 on the diagonal.
pub fn flip_mask(a: &Matrix) -> Result<Matrix> {
    if !crate::graphdata::is_valid_adjacency(a) {
        return Err(invalid("flip mask needs a symmetric binary adjacency with zero diagonal"));
    }
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| if i == j { 0.0 } else { 1.0 - 2.0 * a.get(i, j) }))
}

/// Entrywise clamp onto `[−ε, ε]`.
pub fn proj_x(e_x: &Matrix, epsilon: f64) -> Result<Matrix> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("epsilon {epsilon} must be non-negative")));
    }
    if epsilon == 0.0 {
        return Ok(Matrix::zeros(e_x.rows(), e_x.cols()));
    }
    e_x.clamp(-epsilon, epsilon)
}

/// Keeps the `floor(q/2)` largest strict-upper-triangle entries (ties to the
/// smaller `(i, j)`), zeroes the rest, mirrors, and clamps into `[0, 1]`.
/// The result has at most `q` nonzero entries.
pub fn proj_a(b: &Matrix, q: usize) -> Result<Matrix> {
    let n = b.rows();
    if b.cols() != n {
        return Err(Error::Shape { op: "proj_a", left: (n, n), right: b.shape() });
    }
    let mut upper: Vec<(usize, usize, f64)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            upper.push((i, j, b.get(i, j)));
        }
    }
    let slots = (q / 2).min(upper.len());
    // stable sort keeps row-major order among equal values
    upper.sort_by(|x, y| y.2.total_cmp(&x.2));
    let mut out = Matrix::zeros(n, n);
    for &(i, j, v) in &upper[..slots] {
        let v = v.clamp(0.0, 1.0);
        out.set(i, j, v);
        out.set(j, i, v);
    }
    Ok(out)
}

/// Samples each upper-triangle flip with probability `b_ij`, mirrors, and
/// signs the result with the flip mask of `a`.
pub fn bernoulli_discretize(b: &Matrix, a: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    let n = a.rows();
    if b.shape() != a.shape() {
        return Err(Error::Shape { op: "bernoulli_discretize", left: a.shape(), right: b.shape() });
    }
    if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("flip probabilities must lie in [0, 1]"));
    }
    let mask = flip_mask(a)?;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            // one draw per pair, whatever the probability
            let u: f64 = rng.random();
            if u < b.get(i, j) {
                out.set(i, j, mask.get(i, j));
                out.set(j, i, mask.get(j, i));
            }
        }
    }
    Ok(out)
}

/// Receives `(graph, step, e_x, b)` after every projection.
pub type Observer<'a> = dyn FnMut(usize, usize, &Matrix, &Matrix) + 'a;

/// JointPGD on one graph.
pub fn joint_pgd(g: &Graph, model: &Model, budget: &PerturbationBudget, rng: &mut Rng) -> Result<AdversarialSample> {
    let seed: u64 = rng.random();
    let mut out = attack_batch(&[g], model, budget, &[seed], None)?;
    Ok(out.remove(0))
}

/// Node-only or topology-only attack; hybrid budgets are rejected.
pub fn restricted_pgd(g: &Graph, model: &Model, budget: &PerturbationBudget, rng: &mut Rng) -> Result<AdversarialSample> {
    if budget.mode == AttackMode::Hybrid {
        return Err(Error::Config("restricted attack needs mode node or topology".into()));
    }
    joint_pgd(g, model, budget, rng)
}

/// Attacks every graph of a batch at once. Graph `b` draws its randomness
/// from `seeds[b]` only, and its noise depends only on its own loss, so the
/// result matches attacking the graphs one at a time.
pub fn attack_batch(
    graphs: &[&Graph],
    model: &Model,
    budget: &PerturbationBudget,
    seeds: &[u64],
    mut observer: Option<&mut Observer<'_>>,
) -> Result<Vec<AdversarialSample>> {
    budget.validate()?;
    if graphs.len() != seeds.len() {
        return Err(invalid("one seed per attacked graph is required"));
    }
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = GraphBatch::new(graphs)?;
    let eps = budget.effective_epsilon();
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng_for(s, &[30])).collect();
    let budgets: Vec<usize> = graphs.iter().map(|g| budget.edge_budget(g)).collect();
    let masks = graphs.iter().map(|g| flip_mask(&g.a)).collect::<Result<Vec<_>>>()?;
    let feature_attack = eps > 0.0;
    let topology_attack = budgets.iter().any(|&q| q >= 2);

    let mut e_x: Vec<Matrix> = graphs
        .iter()
        .zip(rngs.iter_mut())
        .map(|(g, rng)| {
            let init = Matrix::from_fn(g.n(), g.feature_dim(), |_, _| eps * (2.0 * rng.random::<f64>() - 1.0));
            proj_x(&init, eps)
        })
        .collect::<Result<_>>()?;
    let mut b: Vec<Matrix> = graphs.iter().map(|g| Matrix::zeros(g.n(), g.n())).collect();
    let weights = batch.per_graph_weights();
    let labelled = batch.labelled_graphs() as f64;

    for step in 1..=budget.steps {
        if !(feature_attack || topology_attack) {
            break;
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, &[]);
        let ex_refs: Vec<&Matrix> = e_x.iter().collect();
        let ex_var = if feature_attack {
            tape.param(Matrix::vstack(&ex_refs)?)
        } else {
            tape.constant(Matrix::vstack(&ex_refs)?)
        };
        let x = tape.constant(batch.x.clone()).add(&ex_var)?;
        let mut b_vars: Vec<Var<'_>> = Vec::with_capacity(graphs.len());
        let mut adjs = Vec::with_capacity(graphs.len());
        for (k, g) in graphs.iter().enumerate() {
            let a = tape.constant(g.a.clone());
            if topology_attack {
                let bv = tape.param(b[k].clone());
                let flip = bv.hadamard(&tape.constant(masks[k].clone()))?;
                adjs.push(a.add(&flip)?);
                b_vars.push(bv);
            } else {
                adjs.push(a);
            }
        }
        let abort = |graph: usize, reason: String| Error::AttackAborted { graph, step, reason };
        let pass = model.forward(&bound, x, &adjs, &batch.offsets, NormModes::eval()).map_err(|e| abort(0, e.to_string()))?;
        // sum of per-graph mean losses
        let loss = pass.logits.bce_with_logits(&batch.targets, &weights)?.scale(labelled).map_err(|e| abort(0, e.to_string()))?;
        let mut wrt = vec![ex_var];
        wrt.extend(&b_vars);
        let grads = tape.gradients(loss, &wrt).map_err(|e| abort(0, e.to_string()))?;

        for (k, g) in graphs.iter().enumerate() {
            let n = g.n();
            if feature_attack {
                let gx = grads[0].row_block(batch.offsets[k], n);
                if gx.iter().any(|v| !v.is_finite()) {
                    return Err(abort(k, "non-finite feature gradient".into()));
                }
                let stepped = e_x[k].add(&gx.sign().scale(budget.alpha)?)?;
                e_x[k] = proj_x(&stepped, eps)?;
            }
            if topology_attack {
                let gb = &grads[1 + k];
                if gb.iter().any(|v| !v.is_finite()) {
                    return Err(abort(k, "non-finite topology gradient".into()));
                }
                let sym = gb.add(&gb.transpose())?.scale(0.5 * budget.beta)?;
                b[k] = proj_a(&b[k].add(&sym)?, budgets[k])?;
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(k, step, &e_x[k], &b[k]);
            }
        }
    }

    let mut out = Vec::with_capacity(graphs.len());
    for (k, g) in graphs.iter().enumerate() {
        let e_a = bernoulli_discretize(&b[k], &g.a, &mut rngs[k])?;
        out.push(AdversarialSample { e_x: e_x[k].clone(), b: b[k].clone(), e_a });
    }
    Ok(out)
}

/// Seed of the attack on graph `index` under a base seed and a context path
/// (for example an epoch number).
pub fn graph_seed(base: u64, context: &[u64], index: usize) -> u64 {
    let mut path = context.to_vec();
    path.push(index as u64);
    crate::rng::derive_seed(base, &path)
}
