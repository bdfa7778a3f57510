//! The prompted model as a whole: parameter binding, the batched forward
//! pass on a tape, and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, GinLayer};
use crate::diffcore::{BatchStats, Matrix, NormMode, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graphdata::Graph;
use crate::prompt::PromptStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Head,
    Prompt,
}

/// Normalization modes for the backbone and prompt layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormModes {
    pub backbone: NormMode,
    pub prompt: NormMode,
}

impl NormModes {
    pub fn eval() -> Self {
        Self { backbone: NormMode::Eval, prompt: NormMode::Eval }
    }

    /// Frozen backbone, prompts learning.
    pub fn tuning() -> Self {
        Self { backbone: NormMode::Eval, prompt: NormMode::Train }
    }

    pub fn train_all() -> Self {
        Self { backbone: NormMode::Train, prompt: NormMode::Train }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: BackboneParams,
    pub prompts: PromptStack,
}

enum LayerVars<'t> {
    Linear { theta: Var<'t> },
    Full { w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>, gamma: Var<'t>, beta: Var<'t> },
}

struct PromptVars<'t> {
    w_d: Var<'t>,
    w_u: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
}

/// Model parameters recorded on a tape.
pub struct Bound<'t> {
    layers: Vec<LayerVars<'t>>,
    head: Vec<(Var<'t>, Var<'t>)>,
    prompts: Vec<PromptVars<'t>>,
    shared: Option<Var<'t>>,
    named: Vec<(String, ParamGroup, Var<'t>)>,
}

impl<'t> Bound<'t> {
    /// Differentiable parameters, in the order of [`Model::tensors_mut`]
    /// filtered to the same groups.
    pub fn trainable(&self, groups: &[ParamGroup]) -> Vec<Var<'t>> {
        self.named.iter().filter(|(_, g, _)| groups.contains(g)).map(|(_, _, v)| *v).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named.iter().map(|(n, _, _)| n.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSlot {
    Backbone(usize),
    Prompt(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    pub slot: NormSlot,
    pub stats: BatchStats,
}

pub struct ForwardPass<'t> {
    /// One row per graph, one column per task.
    pub logits: Var<'t>,
    /// Node features after each layer.
    pub per_layer: Vec<Var<'t>>,
    pub embedding: Var<'t>,
    /// Batch statistics observed by train-mode normalizations.
    pub norm_updates: Vec<NormUpdate>,
}

/// Several graphs stacked for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub x: Matrix,
    pub adjs: Vec<Matrix>,
    pub offsets: Vec<usize>,
    pub targets: Matrix,
    pub mask: Matrix,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let xs: Vec<&Matrix> = graphs.iter().map(|g| &g.x).collect();
        let mut offsets = vec![0];
        for g in graphs {
            offsets.push(offsets.last().unwrap() + g.n());
        }
        let t = graphs[0].labels.len();
        let mut targets = Matrix::zeros(graphs.len(), t);
        let mut mask = Matrix::zeros(graphs.len(), t);
        for (b, g) in graphs.iter().enumerate() {
            let (tr, mr) = g.label_rows();
            if tr.len() != t {
                return Err(invalid("graphs in a batch disagree on task count"));
            }
            for c in 0..t {
                targets.set(b, c, tr[c]);
                mask.set(b, c, mr[c]);
            }
        }
        Ok(Self { x: Matrix::vstack(&xs)?, adjs: graphs.iter().map(|g| g.a.clone()).collect(), offsets, targets, mask })
    }

    pub fn len(&self) -> usize {
        self.adjs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjs.is_empty()
    }

    /// Loss weights under which the masked mean BCE equals the average over
    /// graphs of each graph's own mean BCE.
    pub fn per_graph_weights(&self) -> Matrix {
        let mut w = self.mask.clone();
        for b in 0..w.rows() {
            let count: f64 = (0..w.cols()).map(|c| self.mask.get(b, c)).sum();
            for c in 0..w.cols() {
                if count > 0.0 {
                    w.set(b, c, self.mask.get(b, c) / count);
                }
            }
        }
        w
    }

    /// Number of graphs with at least one label.
    pub fn labelled_graphs(&self) -> usize {
        (0..self.mask.rows()).filter(|&b| (0..self.mask.cols()).any(|c| self.mask.get(b, c) != 0.0)).count()
    }
}

impl Model {
    /// All tensors with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            match layer {
                GinLayer::Linear { theta } => out.push((format!("layer{l}.theta"), ParamGroup::Encoder, theta)),
                GinLayer::Full { w1, b1, w2, b2, norm } => {
                    for (n, m) in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2), ("gamma", &norm.gamma), ("beta", &norm.beta)] {
                        out.push((format!("layer{l}.{n}"), ParamGroup::Encoder, m));
                    }
                }
            }
        }
        let head = &self.backbone.head;
        for (k, (w, b)) in head.weights.iter().zip(&head.biases).enumerate() {
            out.push((format!("head{k}.w"), ParamGroup::Head, w));
            out.push((format!("head{k}.b"), ParamGroup::Head, b));
        }
        for p in &self.prompts.layers {
            let l = p.layer;
            for (n, m) in [("w_d", &p.w_d), ("w_u", &p.w_u), ("gamma", &p.norm.gamma), ("beta", &p.norm.beta)] {
                out.push((format!("prompt{l}.{n}"), ParamGroup::Prompt, m));
            }
        }
        if let Some(p) = &self.prompts.shared {
            out.push(("prompt.shared".into(), ParamGroup::Prompt, p));
        }
        out
    }

    /// Mutable tensors of the given groups, in [`Model::tensors`] order.
    pub fn tensors_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if groups.contains(&ParamGroup::Encoder) {
            for layer in &mut self.backbone.layers {
                match layer {
                    GinLayer::Linear { theta } => out.push(theta),
                    GinLayer::Full { w1, b1, w2, b2, norm } => {
                        out.extend([w1, b1, w2, b2, &mut norm.gamma, &mut norm.beta]);
                    }
                }
            }
        }
        if groups.contains(&ParamGroup::Head) {
            let head = &mut self.backbone.head;
            for (w, b) in head.weights.iter_mut().zip(head.biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        if groups.contains(&ParamGroup::Prompt) {
            for p in &mut self.prompts.layers {
                out.extend([&mut p.w_d, &mut p.w_u, &mut p.norm.gamma, &mut p.norm.beta]);
            }
            if let Some(p) = &mut self.prompts.shared {
                out.push(p);
            }
        }
        out
    }

    /// Records every parameter on `tape`; groups in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &[ParamGroup]) -> Bound<'t> {
        let mut named = Vec::new();
        let mut leaf = |name: String, group: ParamGroup, m: &Matrix| {
            let v = if trainable.contains(&group) { tape.param(m.clone()) } else { tape.constant(m.clone()) };
            named.push((name, group, v));
            v
        };
        let enc = ParamGroup::Encoder;
        let layers = self
            .backbone
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match layer {
                GinLayer::Linear { theta } => LayerVars::Linear { theta: leaf(format!("layer{l}.theta"), enc, theta) },
                GinLayer::Full { w1, b1, w2, b2, norm } => LayerVars::Full {
                    w1: leaf(format!("layer{l}.w1"), enc, w1),
                    b1: leaf(format!("layer{l}.b1"), enc, b1),
                    w2: leaf(format!("layer{l}.w2"), enc, w2),
                    b2: leaf(format!("layer{l}.b2"), enc, b2),
                    gamma: leaf(format!("layer{l}.gamma"), enc, &norm.gamma),
                    beta: leaf(format!("layer{l}.beta"), enc, &norm.beta),
                },
            })
            .collect();
        let h = &self.backbone.head;
        let head = (0..h.weights.len())
            .map(|k| {
                let w = leaf(format!("head{k}.w"), ParamGroup::Head, &h.weights[k]);
                let b = leaf(format!("head{k}.b"), ParamGroup::Head, &h.biases[k]);
                (w, b)
            })
            .collect();
        let pg = ParamGroup::Prompt;
        let prompts = self
            .prompts
            .layers
            .iter()
            .map(|p| {
                let l = p.layer;
                PromptVars {
                    w_d: leaf(format!("prompt{l}.w_d"), pg, &p.w_d),
                    w_u: leaf(format!("prompt{l}.w_u"), pg, &p.w_u),
                    gamma: leaf(format!("prompt{l}.gamma"), pg, &p.norm.gamma),
                    beta: leaf(format!("prompt{l}.beta"), pg, &p.norm.beta),
                }
            })
            .collect();
        let shared = self.prompts.shared.as_ref().map(|p| leaf("prompt.shared".into(), pg, p));
        Bound { layers, head, prompts, shared, named }
    }

    /// Forward pass over stacked graphs. `x` stacks node features and
    /// `adjs[b]` is the adjacency of the graph occupying rows
    /// `offsets[b]..offsets[b+1]`.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        adjs: &[Var<'t>],
        offsets: &[usize],
        modes: NormModes,
    ) -> Result<ForwardPass<'t>> {
        let cfg = &self.backbone.config;
        if x.shape().1 != cfg.input_dim {
            return Err(Error::Shape { op: "forward", left: (x.shape().0, cfg.input_dim), right: x.shape() });
        }
        let mut updates = Vec::new();
        let mut h = x;
        if let Some(p) = &bound.shared {
            h = h.add_row(p)?;
        }
        let mut per_layer = Vec::with_capacity(cfg.num_layers);
        for (l, layer) in bound.layers.iter().enumerate() {
            if let Some(i) = self.prompts.layers.iter().position(|p| p.layer == l) {
                let state = &self.prompts.layers[i].norm;
                let pv = &bound.prompts[i];
                let z = h.matmul(&pv.w_d)?.relu().matmul(&pv.w_u)?;
                let p = match modes.prompt {
                    NormMode::Train => {
                        let (out, stats) = z.batch_norm_train(&pv.gamma, &pv.beta, state.eps)?;
                        updates.push(NormUpdate { slot: NormSlot::Prompt(i), stats });
                        out
                    }
                    NormMode::Eval => {
                        z.batch_norm_eval(&pv.gamma, &pv.beta, &state.running_mean, &state.running_var, state.eps)?
                    }
                };
                h = h.add(&p)?;
            }
            let agg = h.aggregate(adjs, offsets, 1.0 + cfg.epsilon_gin[l])?;
            h = match layer {
                LayerVars::Linear { theta } => agg.matmul(theta)?,
                LayerVars::Full { w1, b1, w2, b2, gamma, beta } => {
                    let z = agg.matmul(w1)?.add_row(b1)?.relu().matmul(w2)?.add_row(b2)?;
                    let GinLayer::Full { norm, .. } = &self.backbone.layers[l] else {
                        return Err(invalid("layer kind changed during forward"));
                    };
                    let normed = match modes.backbone {
                        NormMode::Train => {
                            let (out, stats) = z.batch_norm_train(gamma, beta, norm.eps)?;
                            updates.push(NormUpdate { slot: NormSlot::Backbone(l), stats });
                            out
                        }
                        NormMode::Eval => z.batch_norm_eval(gamma, beta, &norm.running_mean, &norm.running_var, norm.eps)?,
                    };
                    normed.relu()
                }
            };
            per_layer.push(h);
        }
        let embedding = h.segment_mean(offsets)?;
        let mut z = embedding;
        for (k, (w, b)) in bound.head.iter().enumerate() {
            z = z.matmul(w)?.add_row(b)?;
            if k + 1 < bound.head.len() {
                z = z.relu();
            }
        }
        Ok(ForwardPass { logits: z, per_layer, embedding, norm_updates: updates })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        for u in updates {
            let norm = match u.slot {
                NormSlot::Prompt(i) => &mut self.prompts.layers[i].norm,
                NormSlot::Backbone(l) => match &mut self.backbone.layers[l] {
                    GinLayer::Full { norm, .. } => norm,
                    GinLayer::Linear { .. } => continue,
                },
            };
            norm.update_running(&u.stats);
        }
    }

    /// Eval-mode logits, one row per graph.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Matrix> {
        self.predict_perturbed(batch, &batch.x, &batch.adjs)
    }

    /// Eval-mode logits with replacement node features and adjacencies.
    pub fn predict_perturbed(&self, batch: &GraphBatch, x: &Matrix, adjs: &[Matrix]) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.bind(&tape, &[]);
        let xv = tape.constant(x.clone());
        let av: Vec<Var<'_>> = adjs.iter().map(|a| tape.constant(a.clone())).collect();
        let pass = self.forward(&bound, xv, &av, &batch.offsets, NormModes::eval())?;
        let logits = pass.logits.value();
        Ok((*logits).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Model = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.backbone.config.validate()?;
        model.prompts.config.validate(&model.backbone.config)?;
        Ok(model)
    }
}
