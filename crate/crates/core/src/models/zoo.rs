use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{CocaError, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Convnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batchnorm,
    Layernorm,
}

/// Architecture description.
///
/// For `mlp`, `hidden_sizes` lists the widths of the `linear -> norm -> relu`
/// blocks. For `convnet`, it lists the channel counts of exactly two
/// `conv3x3 -> batchnorm -> relu` blocks and `input_shape` is `[C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub norm_kind: NormKind,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: &[usize], norm_kind: NormKind, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: vec![input],
            hidden_sizes: hidden.to_vec(),
            norm_kind,
            num_classes,
        }
    }

    pub fn convnet(input_shape: [usize; 3], channels: [usize; 2], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Convnet,
            input_shape: input_shape.to_vec(),
            hidden_sizes: channels.to_vec(),
            norm_kind: NormKind::Batchnorm,
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocaError::invalid(format!("unsupported model spec: {m}")));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?}", self.input_shape));
        }
        if self.hidden_sizes.contains(&0) {
            return bad("zero-width hidden layer".into());
        }
        match self.kind {
            ModelKind::Mlp if self.hidden_sizes.is_empty() => {
                bad("mlp needs at least one hidden layer".into())
            }
            ModelKind::Convnet if self.input_shape.len() != 3 => bad(format!(
                "convnet input must be [C, H, W], got {:?}",
                self.input_shape
            )),
            ModelKind::Convnet if self.hidden_sizes.len() != 2 => bad(format!(
                "convnet has exactly 2 conv blocks, got {:?}",
                self.hidden_sizes
            )),
            ModelKind::Convnet if self.norm_kind != NormKind::Batchnorm => {
                bad("convnet supports batchnorm only".into())
            }
            _ => Ok(()),
        }
    }

    /// `(name, shape, init)` of every parameter in forward order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let norm = |out: &mut Vec<_>, i: usize, width: usize| {
            out.push((format!("norm{i}.scale"), vec![width], Init::One));
            out.push((format!("norm{i}.shift"), vec![width], Init::Zero));
        };
        let head_in = match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input_len();
                for (i, &h) in self.hidden_sizes.iter().enumerate() {
                    out.push((
                        format!("fc{i}.weight"),
                        vec![fan_in, h],
                        Init::HeUniform(fan_in),
                    ));
                    out.push((format!("fc{i}.bias"), vec![h], Init::Zero));
                    norm(&mut out, i, h);
                    fan_in = h;
                }
                fan_in
            }
            ModelKind::Convnet => {
                let mut cin = self.input_shape[0];
                for (i, &c) in self.hidden_sizes.iter().enumerate() {
                    out.push((
                        format!("conv{i}.weight"),
                        vec![c, cin, 3, 3],
                        Init::HeUniform(cin * 9),
                    ));
                    out.push((format!("conv{i}.bias"), vec![c], Init::Zero));
                    norm(&mut out, i, c);
                    cin = c;
                }
                cin * self.input_shape[1] * self.input_shape[2]
            }
        };
        out.push((
            "head.weight".into(),
            vec![head_in, self.num_classes],
            Init::HeUniform(head_in),
        ));
        out.push(("head.bias".into(), vec![self.num_classes], Init::Zero));
        out
    }

    /// Number of scalar parameters, without building the model.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    HeUniform(usize),
}

/// Which parameters a forward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    NormOnly,
    Nothing,
}

/// A classifier and its named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    params: BTreeMap<String, Tensor>,
    order: Vec<String>,
    norm_names: Vec<String>,
}

/// Result of recording a model on a tape.
pub struct Forward {
    pub logits: Var,
    bound: Vec<(String, Var)>,
}

impl Model {
    /// He-uniform weights, zero biases, unit scales and zero shifts, all drawn
    /// from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = BTreeMap::new();
        let mut order = Vec::new();
        let mut norm_names = Vec::new();
        for (name, shape, init) in spec.layout() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::HeUniform(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            if name.starts_with("norm") {
                norm_names.push(name.clone());
            }
            params.insert(name.clone(), Tensor::new(shape, data)?);
            order.push(name);
        }
        Ok(Self {
            spec,
            seed,
            params,
            order,
            norm_names,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter names in forward order.
    pub fn param_names(&self) -> &[String] {
        &self.order
    }

    /// Names of the affine scale/shift tensors of every normalization layer.
    pub fn norm_param_names(&self) -> &[String] {
        &self.norm_names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order.iter().map(|n| (n.as_str(), &self.params[n]))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_param(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| CocaError::invalid(format!("no parameter named {name}")))?;
        if t.len() != values.len() {
            return Err(CocaError::shape(
                "set_param",
                format!(
                    "{name} has shape {:?}, got {} values",
                    t.shape(),
                    values.len()
                ),
            ));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutable access to the tensors in `names`, for an optimizer step.
    pub fn params_for_update<'a>(
        &'a mut self,
        names: &'a [String],
    ) -> Vec<(&'a str, &'a mut Tensor)> {
        self.params
            .iter_mut()
            .filter(|(k, _)| names.contains(k))
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        let rest = shape.get(1..).unwrap_or(&[]);
        let ok = rest == self.spec.input_shape.as_slice() || rest == [self.spec.input_len()];
        if shape.is_empty() || !ok {
            return Err(CocaError::shape(
                "forward",
                format!(
                    "batch {:?} for input shape {:?}",
                    shape, self.spec.input_shape
                ),
            ));
        }
        let b = shape[0];
        if b < 2 && self.spec.norm_kind == NormKind::Batchnorm {
            return Err(CocaError::invalid(format!(
                "batchnorm model needs a batch of at least 2 samples, got {b}"
            )));
        }
        Ok(b)
    }

    /// Records the model on `tape` and returns the `(B, C)` logits.
    pub fn forward(&self, tape: &mut Tape, batch: Var, trainable: Trainable) -> Result<Forward> {
        let b = self.check_batch(tape.shape(batch))?;
        let mut bound = Vec::with_capacity(self.order.len());
        let mut vars = BTreeMap::new();
        for name in &self.order {
            let t = &self.params[name];
            let grad = match trainable {
                Trainable::All => true,
                Trainable::NormOnly => self.norm_names.contains(name),
                Trainable::Nothing => false,
            };
            let v = tape.leaf_with_grad(t, grad);
            if grad {
                bound.push((name.clone(), v));
            }
            vars.insert(name.as_str(), v);
        }
        let p = |n: String| vars[n.as_str()];
        let norm = |tape: &mut Tape, x: Var, i: usize| -> Result<Var> {
            let (s, t) = (p(format!("norm{i}.scale")), p(format!("norm{i}.shift")));
            match self.spec.norm_kind {
                NormKind::Batchnorm => tape.batch_norm(x, s, t),
                NormKind::Layernorm => tape.layer_norm(x, s, t),
            }
        };
        let mut h = match self.spec.kind {
            ModelKind::Mlp => {
                let mut h = tape.reshape(batch, vec![b, self.spec.input_len()])?;
                for i in 0..self.spec.hidden_sizes.len() {
                    let z = tape.matmul(h, p(format!("fc{i}.weight")))?;
                    let z = tape.add(z, p(format!("fc{i}.bias")))?;
                    let z = norm(tape, z, i)?;
                    h = tape.relu(z);
                }
                h
            }
            ModelKind::Convnet => {
                let mut shape = vec![b];
                shape.extend_from_slice(&self.spec.input_shape);
                let mut h = tape.reshape(batch, shape)?;
                for i in 0..2 {
                    let z =
                        tape.conv2d(h, p(format!("conv{i}.weight")), p(format!("conv{i}.bias")))?;
                    let z = norm(tape, z, i)?;
                    h = tape.relu(z);
                }
                let width = tape.value(h).len() / b;
                tape.reshape(h, vec![b, width])?
            }
        };
        h = tape.matmul(h, p("head.weight".into()))?;
        let logits = tape.add(h, p("head.bias".into()))?;
        Ok(Forward { logits, bound })
    }

    /// Logits of a batch without recording gradients.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let f = self.forward(&mut tape, x, Trainable::Nothing)?;
        Ok(tape.tensor(f.logits))
    }

    /// Adds the gradients of the parameters bound in `fwd` into their tensors.
    pub fn accumulate_grads(&mut self, grads: &Gradients, fwd: &Forward) -> Result<()> {
        for (name, v) in &fwd.bound {
            let t = self
                .params
                .get_mut(name)
                .expect("bound names come from this model");
            grads.accumulate_into(*v, t)?;
        }
        Ok(())
    }
}

/// Model indices ordered anchor first: descending parameter count, ties kept
/// in declaration order.
pub fn anchor_order(param_counts: &[usize]) -> Result<Vec<usize>> {
    if param_counts.len() < 2 {
        return Err(CocaError::invalid(format!(
            "anchor selection needs at least 2 models, got {}",
            param_counts.len()
        )));
    }
    let mut idx: Vec<usize> = (0..param_counts.len()).collect();
    idx.sort_by(|&a, &b| param_counts[b].cmp(&param_counts[a]));
    Ok(idx)
}

pub fn anchor_select(models: &[&Model]) -> Result<Vec<usize>> {
    let counts: Vec<usize> = models.iter().map(|m| m.param_count()).collect();
    anchor_order(&counts)
}
