//! Small building blocks shared by the world model and the agent.

use ape_tensor::nn::{LayerNorm, Linear};
use ape_tensor::{Bound, ParamId, ParamStore, Real, Var};
use rand::Rng;

use crate::error::Result;

/// `layers` hidden blocks of Linear -> LayerNorm -> SiLU, then a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Vec<(Linear, LayerNorm)>,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        units: usize,
        layers: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut width = input;
        let hidden = (0..layers)
            .map(|i| {
                let lin = Linear::new(store, &format!("{name}.{i}"), width, units, rng);
                let norm = LayerNorm::new(store, &format!("{name}.{i}.norm"), units);
                width = units;
                (lin, norm)
            })
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), width, output, rng);
        Self { hidden, out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (lin, norm) in &self.hidden {
            x = norm.forward(p, lin.forward(p, x)?)?.silu();
        }
        Ok(self.out.forward(p, x)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (lin, norm) in &self.hidden {
            ids.extend([lin.weight, lin.bias, norm.gain, norm.shift]);
        }
        ids.extend([self.out.weight, self.out.bias]);
        ids
    }

    /// Scales the output layer's weights, e.g. to start value heads near zero.
    pub fn scale_output<T: Real>(&self, store: &mut ParamStore<T>, factor: f64) {
        let f = T::of(factor);
        store.value_mut(self.out.weight.0).data_mut().iter_mut().for_each(|w| *w = *w * f);
    }
}

/// `sign(x) ln(1 + |x|)`.
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Inverse of [`symlog`].
pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symlog_values() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert!((symlog(-(std::f64::consts::E - 1.0)) + 1.0).abs() < 1e-15);
        for x in [-50.0, -1.5, 0.3, 7.0, 1e4] {
            assert!((symexp(symlog(x)) - x).abs() < 1e-9 * x.abs().max(1.0));
        }
    }
}
