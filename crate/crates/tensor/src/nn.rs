//! Named parameter storage and the layer building blocks used by the models.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Replaces parameter `i`, keeping its name. Shapes must agree.
    pub fn set(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(crate::error::shape_err(
                "param set",
                format!(
                    "`{}` expects {:?}, got {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// Records every parameter on `tape`; those for which `trainable` returns
    /// false enter as constants and never receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(usize) -> bool) -> Bound<'t, T> {
        let mut vars = Vec::with_capacity(self.len());
        let mut flags = Vec::with_capacity(self.len());
        for (i, v) in self.values.iter().enumerate() {
            let t = trainable(i);
            vars.push(if t {
                tape.param(v.clone())
            } else {
                tape.constant_arc(v.clone())
            });
            flags.push(t);
        }
        Bound {
            vars,
            trainable: flags,
        }
    }

    pub fn bind_all<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }
}

/// Parameters of one store recorded on a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    trainable: Vec<bool>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Binds caller-made variables in store order, e.g. perturbed copies
    /// of the parameters for finite differences.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        let trainable = vars.iter().map(|v| v.requires_grad()).collect();
        Self { vars, trainable }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients of the trainable parameters, in store order.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { Some(grads.wrt(*v)) } else { None })
            .collect()
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[input, output], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.dense(p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(Some(p.var(self.gain)), Some(p.var(self.shift)), 1e-5)
    }
}

/// 2-D convolution with square kernel and symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            p.var(self.weight),
            Some(p.var(self.bias)),
            (self.stride, self.stride),
            (self.padding, self.padding),
        )
    }
}

/// Transposed 2-D convolution (weights `[in, out, k, k]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride).max(1);
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[in_channels, out_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv_transpose2d(
            p.var(self.weight),
            Some(p.var(self.bias)),
            (self.stride, self.stride),
            (self.padding, self.padding),
        )
    }
}
