use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Array;

use super::params::ParamStore;
use super::transformer::{adapter, Bindings};

/// Bottleneck adapter: `up(relu(down(z))) + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    /// `[d_model, hidden]`
    pub down: Array,
    pub down_bias: Array,
    /// `[hidden, d_model]`
    pub up: Array,
    pub up_bias: Array,
}

impl AdapterLayer {
    pub fn d_model(&self) -> usize {
        self.down.shape()[0]
    }

    /// Reads the adapter stored under `prefix` (e.g. `enc.0.adapter_ffn`).
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            store.get(&name).cloned().ok_or(Error::MissingParam(name))
        };
        Ok(AdapterLayer {
            down: get("down.weight")?,
            down_bias: get("down.bias")?,
            up: get("up.weight")?,
            up_bias: get("up.bias")?,
        })
    }
}

/// Applies the adapter row-wise to `z`, whose last extent must be d_model.
pub fn adapter_apply(layer: &AdapterLayer, z: &Array) -> Result<Array> {
    let d = layer.d_model();
    if z.shape().last() != Some(&d) {
        return Err(Error::shape("adapter_apply", format!("input {:?} for d_model {d}", z.shape())));
    }
    let rows = z.len() / d;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    b.insert("a.down.weight", g.constant(layer.down.clone()));
    b.insert("a.down.bias", g.constant(layer.down_bias.clone()));
    b.insert("a.up.weight", g.constant(layer.up.clone()));
    b.insert("a.up.bias", g.constant(layer.up_bias.clone()));
    let flat = z.with_data(z.data().to_vec())?;
    let x = g.constant(Array::new(vec![rows, d], flat.data().to_vec())?);
    let y = adapter(&mut g, &b, "a", x)?;
    Array::new(z.shape().to_vec(), g.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array {
        Array::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let layer = AdapterLayer {
            down: arr(&[3, 2], &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]),
            down_bias: arr(&[2], &[0.1, -0.2]),
            up: Array::zeros(&[2, 3]),
            up_bias: Array::zeros(&[3]),
        };
        let z = arr(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        assert!(adapter_apply(&layer, &z).unwrap().bit_eq(&z));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let layer = AdapterLayer {
            down: arr(&[2, 1], &[0.5, -1.5]),
            down_bias: Array::zeros(&[1]),
            up: arr(&[1, 2], &[2.0, 3.0]),
            up_bias: Array::zeros(&[2]),
        };
        let z = Array::zeros(&[1, 2]);
        assert_eq!(adapter_apply(&layer, &z).unwrap(), z);
    }

    #[test]
    fn hand_computed_two_by_one() {
        // d_model 2, hidden 1:
        // h = relu(0.5*1 + (-1.5)*(-2) + 0.25) = relu(3.75) = 3.75
        // out = [2*3.75 + 0.1 + 1, 3*3.75 - 0.2 - 2] = [8.6, 9.05]
        let layer = AdapterLayer {
            down: arr(&[2, 1], &[0.5, -1.5]),
            down_bias: arr(&[1], &[0.25]),
            up: arr(&[1, 2], &[2.0, 3.0]),
            up_bias: arr(&[2], &[0.1, -0.2]),
        };
        let z = arr(&[1, 2], &[1.0, -2.0]);
        let y = adapter_apply(&layer, &z).unwrap();
        assert!((y.data()[0] - 8.6).abs() < 1e-12);
        assert!((y.data()[1] - 9.05).abs() < 1e-12);
        // negative pre-activation is cut by relu: output is z + up_bias
        let z = arr(&[1, 2], &[-1.0, 2.0]);
        let y = adapter_apply(&layer, &z).unwrap();
        assert!((y.data()[0] - (-0.9)).abs() < 1e-12);
        assert!((y.data()[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn wrong_width_rejected() {
        let layer = AdapterLayer {
            down: Array::zeros(&[2, 1]),
            down_bias: Array::zeros(&[1]),
            up: Array::zeros(&[1, 2]),
            up_bias: Array::zeros(&[2]),
        };
        assert!(adapter_apply(&layer, &Array::zeros(&[1, 3])).is_err());
    }
}
