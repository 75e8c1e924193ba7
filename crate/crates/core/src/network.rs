//! Parameter groups of the adapted network and the optimizer step.
//!
//! The trunk (`repr_layers`) maps inputs to the shared representation.
//! Two affine heads read that representation: the category classifier and
//! the two-way domain classifier. Each group can be frozen or updated
//! independently through a [`ParamGroupMask`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// One affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("valid extents"),
            bias: Tensor::new(vec![fan_out], vec![0.0; fan_out]).expect("valid extents"),
        }
    }

    fn check(&self, fan_in: usize, fan_out: usize, name: &str) -> Result<()> {
        if self.weight.shape() != [fan_in, fan_out] || self.bias.shape() != [fan_out] {
            return Err(Error::param(format!(
                "{name}: expected weight [{fan_in}, {fan_out}] and bias [{fan_out}], got {:?} and {:?}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Selects which parameter groups an optimizer step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamGroupMask {
    pub update_repr: bool,
    pub update_classifier: bool,
    pub update_domain_head: bool,
}

impl ParamGroupMask {
    pub const ALL: Self = Self::new(true, true, true);
    pub const NONE: Self = Self::new(false, false, false);
    pub const DOMAIN_HEAD: Self = Self::new(false, false, true);
    pub const REPR_AND_CLASSIFIER: Self = Self::new(true, true, false);

    pub const fn new(update_repr: bool, update_classifier: bool, update_domain_head: bool) -> Self {
        Self {
            update_repr,
            update_classifier,
            update_domain_head,
        }
    }

    pub fn any(self) -> bool {
        self.update_repr || self.update_classifier || self.update_domain_head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Repr,
    Classifier,
    Domain,
}

impl Group {
    fn selected(self, mask: ParamGroupMask) -> bool {
        match self {
            Group::Repr => mask.update_repr,
            Group::Classifier => mask.update_classifier,
            Group::Domain => mask.update_domain_head,
        }
    }
}

/// Trunk, category head and domain head of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    layer_dims: Vec<usize>,
    num_categories: usize,
    repr_layers: Vec<Linear>,
    classifier: Linear,
    domain_head: Linear,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    layer_dims: Vec<usize>,
    num_categories: usize,
    repr_layers: Vec<Linear>,
    classifier: Linear,
    domain_head: Linear,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let p = ModelParams {
            layer_dims: raw.layer_dims,
            num_categories: raw.num_categories,
            repr_layers: raw.repr_layers,
            classifier: raw.classifier,
            domain_head: raw.domain_head,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams {
            layer_dims: p.layer_dims,
            num_categories: p.num_categories,
            repr_layers: p.repr_layers,
            classifier: p.classifier,
            domain_head: p.domain_head,
        }
    }
}

/// Random initialization: weights uniform in `±sqrt(6 / fan_in)`, zero biases.
///
/// `layer_dims` lists the input width followed by every trunk layer width;
/// the last entry is the representation width.
pub fn init_params(layer_dims: &[usize], num_categories: usize, seed: u64) -> Result<ModelParams> {
    if layer_dims.len() < 2 {
        return Err(Error::param(format!(
            "layer_dims needs an input width and at least one layer, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::param(format!(
            "layer extents must be >= 1, got {layer_dims:?}"
        )));
    }
    if num_categories < 2 {
        return Err(Error::param(format!(
            "need at least 2 categories, got {num_categories}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let repr_layers = layer_dims
        .windows(2)
        .map(|w| Linear::uniform(w[0], w[1], &mut rng))
        .collect();
    let width = *layer_dims.last().unwrap();
    let classifier = Linear::uniform(width, num_categories, &mut rng);
    let domain_head = Linear::uniform(width, 2, &mut rng);
    Ok(ModelParams {
        layer_dims: layer_dims.to_vec(),
        num_categories,
        repr_layers,
        classifier,
        domain_head,
    })
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param(format!("bad layer_dims {dims:?}")));
        }
        if self.num_categories < 2 {
            return Err(Error::param("need at least 2 categories"));
        }
        if self.repr_layers.len() != dims.len() - 1 {
            return Err(Error::param(format!(
                "{} trunk layers for layer_dims {dims:?}",
                self.repr_layers.len()
            )));
        }
        for (i, (layer, w)) in self.repr_layers.iter().zip(dims.windows(2)).enumerate() {
            layer.check(w[0], w[1], &format!("repr layer {i}"))?;
        }
        let width = self.repr_width();
        self.classifier
            .check(width, self.num_categories, "classifier")?;
        self.domain_head.check(width, 2, "domain head")?;
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn repr_width(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn repr_layers(&self) -> &[Linear] {
        &self.repr_layers
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn domain_head(&self) -> &Linear {
        &self.domain_head
    }

    pub fn repr_layers_mut(&mut self) -> &mut [Linear] {
        &mut self.repr_layers
    }

    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }

    pub fn domain_head_mut(&mut self) -> &mut Linear {
        &mut self.domain_head
    }

    /// Number of tensors; the flat order is trunk (w, b)..., classifier, domain head.
    pub fn num_tensors(&self) -> usize {
        2 * (self.repr_layers.len() + 2)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    fn tensors(&self) -> impl Iterator<Item = (Group, &Tensor)> {
        self.repr_layers
            .iter()
            .map(|l| (Group::Repr, l))
            .chain(std::iter::once((Group::Classifier, &self.classifier)))
            .chain(std::iter::once((Group::Domain, &self.domain_head)))
            .flat_map(|(g, l)| [(g, &l.weight), (g, &l.bias)])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = (Group, &mut Tensor)> {
        self.repr_layers
            .iter_mut()
            .map(|l| (Group::Repr, l))
            .chain(std::iter::once((Group::Classifier, &mut self.classifier)))
            .chain(std::iter::once((Group::Domain, &mut self.domain_head)))
            .flat_map(|(g, l)| [(g, &mut l.weight), (g, &mut l.bias)])
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        self.tensors().nth(index).expect("tensor index in range").1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        self.tensors_mut()
            .nth(index)
            .expect("tensor index in range")
            .1
    }

    /// Records every tensor as a graph leaf. Groups selected by `mask`
    /// receive gradients; the rest enter the graph as constants.
    pub fn bind(&self, g: &mut Graph, mask: ParamGroupMask) -> BoundParams {
        let mut leaf =
            |group: Group, t: &Tensor| g.leaf(&t.clone().with_requires_grad(group.selected(mask)));
        let mut pair = |group: Group, l: &Linear| (leaf(group, &l.weight), leaf(group, &l.bias));
        let repr = self
            .repr_layers
            .iter()
            .map(|l| pair(Group::Repr, l))
            .collect();
        let classifier = pair(Group::Classifier, &self.classifier);
        let domain_head = pair(Group::Domain, &self.domain_head);
        BoundParams {
            repr,
            classifier,
            domain_head,
        }
    }

    /// Adds the leaf gradients of `g` into the matching tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for ((_, t), v) in self.tensors_mut().zip(bound.vars()) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Trunk output for each row of `features` (`n x input_width`).
    pub fn representations(&self, features: &Tensor) -> Result<Tensor> {
        self.infer(features, forward_repr)
    }

    pub fn class_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.infer(features, |g, b, x| {
            let r = forward_repr(g, b, x)?;
            forward_classifier(g, b, r)
        })
    }

    pub fn domain_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.infer(features, |g, b, x| {
            let r = forward_repr(g, b, x)?;
            forward_domain(g, b, r)
        })
    }

    /// Predicted category per row (argmax of the logits, lowest index on ties).
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.class_logits(features)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// [`ModelParams::predict`] over row chunks, possibly in parallel.
    pub fn predict_with(&self, exec: Exec, rows: &[&[f64]], chunk: usize) -> Result<Vec<usize>> {
        let chunks: Vec<&[&[f64]]> = rows.chunks(chunk.max(1)).collect();
        let parts = exec.map_slice(&chunks, |c| {
            Tensor::from_rows(c).and_then(|t| self.predict(&t))
        });
        let mut out = Vec::with_capacity(rows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn infer(
        &self,
        features: &Tensor,
        f: impl FnOnce(&mut Graph, &BoundParams, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, ParamGroupMask::NONE);
        let x = g.constant(features.clone());
        let out = f(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("serializing params", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("parsing params", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Graph handles for every tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub repr: Vec<(Var, Var)>,
    pub classifier: (Var, Var),
    pub domain_head: (Var, Var),
}

impl BoundParams {
    /// All handles in the flat tensor order of [`ModelParams`].
    pub fn vars(&self) -> Vec<Var> {
        self.repr
            .iter()
            .chain([&self.classifier, &self.domain_head])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Affine + ReLU through every trunk layer, including the last.
pub fn forward_repr(g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
    let mut h = x;
    for &(w, b) in &params.repr {
        let z = g.affine(h, w, b)?;
        h = g.relu(z);
    }
    Ok(h)
}

/// Category logits; softmax is left to the losses.
pub fn forward_classifier(g: &mut Graph, params: &BoundParams, repr: Var) -> Result<Var> {
    let (w, b) = params.classifier;
    g.affine(repr, w, b)
}

/// Two-way domain logits, column 0 = source, column 1 = target.
pub fn forward_domain(g: &mut Graph, params: &BoundParams, repr: Var) -> Result<Var> {
    let (w, b) = params.domain_head;
    g.affine(repr, w, b)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stochastic gradient descent with optional momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_momentum(learning_rate, 0.0, 0.0)
    }

    pub fn with_momentum(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `p <- p - lr * grad` for the selected groups, then clears every gradient.
    pub fn step(&mut self, params: &mut ModelParams, mask: ParamGroupMask) -> Result<()> {
        if !mask.any() {
            return Err(Error::contract("optimizer step with an empty group mask"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (i, (group, t)) in params.tensors().enumerate() {
            if group.selected(mask) && t.grad().is_none() {
                return Err(Error::contract(format!(
                    "tensor {i} of group {group:?} has no gradient"
                )));
            }
        }
        if self.velocity.len() != params.num_tensors() {
            self.velocity = vec![None; params.num_tensors()];
        }
        let lr = self.learning_rate;
        for (i, (group, t)) in params.tensors_mut().enumerate() {
            if !group.selected(mask) {
                continue;
            }
            let grad = t.grad().expect("checked above").to_vec();
            let mut step: Vec<f64> = if self.weight_decay != 0.0 {
                grad.iter()
                    .zip(t.data())
                    .map(|(g, p)| g + self.weight_decay * p)
                    .collect()
            } else {
                grad
            };
            if self.momentum != 0.0 {
                let v = self.velocity[i].get_or_insert_with(|| vec![0.0; step.len()]);
                v.iter_mut()
                    .zip(&step)
                    .for_each(|(v, s)| *v = self.momentum * *v + s);
                step.copy_from_slice(v);
            }
            t.data_mut()
                .iter_mut()
                .zip(&step)
                .for_each(|(p, s)| *p -= lr * s);
        }
        params.zero_grad();
        Ok(())
    }
}

/// Plain SGD step without momentum.
pub fn sgd_step(params: &mut ModelParams, mask: ParamGroupMask, learning_rate: f64) -> Result<()> {
    Sgd::new(learning_rate).step(params, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_grad(p: &mut ModelParams, mask: ParamGroupMask) {
        for (group, t) in p.tensors_mut() {
            if group.selected(mask) {
                let g = vec![1.0; t.len()];
                t.accumulate_grad(&g).unwrap();
            }
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_params(&[2, 8, 8], 3, 5).unwrap();
        assert_eq!(p.repr_layers().len(), 2);
        assert_eq!(p.classifier().weight.shape(), &[8, 3]);
        assert_eq!(p.domain_head().weight.shape(), &[8, 2]);
        assert_eq!(p.domain_head().bias.shape(), &[2]);
        let q = init_params(&[2, 8, 8], 3, 5).unwrap();
        assert_eq!(p, q);
        assert_ne!(p, init_params(&[2, 8, 8], 3, 6).unwrap());
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params(&[2], 3, 0).is_err());
        assert!(init_params(&[], 3, 0).is_err());
        assert!(init_params(&[2, 0], 3, 0).is_err());
        assert!(init_params(&[2, 4], 1, 0).is_err());
    }

    #[test]
    fn init_weights_are_centred_uniform() {
        // 100 x 100 trunk layer = 10k draws from U(-l, l).
        let p = init_params(&[100, 100], 2, 9).unwrap();
        let w = p.repr_layers()[0].weight.data();
        let limit = (6.0f64 / 100.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.02 * 2.0 * limit, "mean {mean}");
        assert!(p.repr_layers()[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_representation() {
        let mut p = init_params(&[3, 4], 2, 0).unwrap();
        p.repr_layers_mut()[0].weight.data_mut().fill(0.0);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(p.representations(&x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let mut p = init_params(&[3, 3], 2, 0).unwrap();
        let w = p.repr_layers_mut()[0].weight.data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.25]]).unwrap();
        assert_eq!(p.representations(&x).unwrap().data(), x.data());
    }

    #[test]
    fn forward_matches_layer_loop_oracle() {
        let p = init_params(&[3, 5, 4], 3, 21).unwrap();
        let rows = vec![vec![0.2, -1.0, 0.7], vec![1.5, 0.3, -0.4]];
        let x = Tensor::from_rows(&rows).unwrap();
        let logits = p.class_logits(&x).unwrap();
        let dlogits = p.domain_logits(&x).unwrap();
        let dense = |input: &[f64], l: &Linear, act: bool| -> Vec<f64> {
            let (d, m) = (l.weight.shape()[0], l.weight.shape()[1]);
            (0..m)
                .map(|j| {
                    let mut s = l.bias.data()[j];
                    for (k, v) in input.iter().enumerate().take(d) {
                        s += v * l.weight.data()[k * m + j];
                    }
                    if act {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        for (i, row) in rows.iter().enumerate() {
            let mut h = row.clone();
            for l in p.repr_layers() {
                h = dense(&h, l, true);
            }
            let c = dense(&h, p.classifier(), false);
            let d = dense(&h, p.domain_head(), false);
            for (a, b) in logits.row(i).iter().zip(&c) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in dlogits.row(i).iter().zip(&d) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_zero_and_symmetric_cases() {
        let mut p = init_params(&[2, 4], 3, 1).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        p.classifier_mut().weight.data_mut().fill(0.0);
        assert!(p.class_logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
        // symmetric domain columns
        let w = p.domain_head_mut().weight.data_mut();
        for k in 0..4 {
            w[2 * k + 1] = w[2 * k];
        }
        let d = p.domain_logits(&x).unwrap();
        for i in 0..2 {
            assert_eq!(d.at(i, 0), d.at(i, 1));
        }
        p.domain_head_mut().weight.data_mut().fill(0.0);
        let d = p.domain_logits(&x).unwrap();
        let probs = crate::autodiff::softmax(d.row(0), 1.0);
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn bias_shift_keeps_argmax() {
        let mut p = init_params(&[2, 6], 4, 3).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -0.3], vec![0.2, 0.9], vec![-1.0, -1.0]]).unwrap();
        let before = p.predict(&x).unwrap();
        p.classifier_mut()
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b += 2.5);
        assert_eq!(before, p.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let p = init_params(&[3, 4], 2, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            p.representations(&x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -2.0, 5.0]), 2);
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = init_params(&[2, 3], 2, 4).unwrap();
        let before = p.clone();
        ones_grad(&mut p, ParamGroupMask::ALL);
        sgd_step(&mut p, ParamGroupMask::ALL, 0.0).unwrap();
        assert_eq!(p, before);

        let mut p = init_params(&[1, 1], 2, 4).unwrap();
        p.repr_layers_mut()[0].weight.data_mut()[0] = 1.0;
        ones_grad(&mut p, ParamGroupMask::ALL);
        // grad of 2 on the single trunk weight
        p.repr_layers_mut()[0]
            .weight
            .accumulate_grad(&[1.0])
            .unwrap();
        sgd_step(&mut p, ParamGroupMask::ALL, 0.1).unwrap();
        assert!((p.repr_layers()[0].weight.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.tensors().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn sgd_respects_mask_and_requires_grads() {
        let mut p = init_params(&[2, 3, 3], 2, 4).unwrap();
        ones_grad(&mut p, ParamGroupMask::ALL);
        let before = p.clone();
        sgd_step(&mut p, ParamGroupMask::DOMAIN_HEAD, 0.5).unwrap();
        for (a, b) in p.repr_layers().iter().zip(before.repr_layers()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
        assert_eq!(
            p.classifier().weight.data(),
            before.classifier().weight.data()
        );
        assert_ne!(
            p.domain_head().weight.data(),
            before.domain_head().weight.data()
        );

        let mut p = init_params(&[2, 3], 2, 4).unwrap();
        ones_grad(&mut p, ParamGroupMask::DOMAIN_HEAD);
        let err = sgd_step(&mut p, ParamGroupMask::REPR_AND_CLASSIFIER, 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(sgd_step(&mut p, ParamGroupMask::NONE, 0.1).is_err());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = init_params(&[1, 1], 2, 0).unwrap();
        p.repr_layers_mut()[0].weight.data_mut()[0] = 0.0;
        let mut opt = Sgd::with_momentum(1.0, 0.5, 0.0);
        for _ in 0..2 {
            ones_grad(&mut p, ParamGroupMask::REPR_AND_CLASSIFIER);
            opt.step(&mut p, ParamGroupMask::REPR_AND_CLASSIFIER)
                .unwrap();
        }
        // v1 = 1, v2 = 1.5
        assert_eq!(p.repr_layers()[0].weight.data()[0], -2.5);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut p = init_params(&[3, 7, 5], 4, 99).unwrap();
        p.classifier_mut().bias.data_mut()[1] = 1.0 / 3.0;
        let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
        for (a, b) in p.tensors().zip(back.tensors()) {
            assert!(a
                .1
                .data()
                .iter()
                .zip(b.1.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p, back);
    }

    #[test]
    fn json_rejects_inconsistent_shapes() {
        let p = init_params(&[2, 3], 2, 0).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        v["num_categories"] = serde_json::json!(5);
        assert!(ModelParams::from_json(&v.to_string()).is_err());
    }
}
