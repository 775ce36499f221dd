use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::{affine, silu_map, Tape, Var};
use super::{ParamStore, Tensor};

/// Feed-forward layer stack: affine layers with SiLU between them and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Parameter-name prefix, e.g. `policy.net`.
    pub prefix: String,
    /// Layer widths including input and output: `[in, h1, ..., out]`.
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        MlpSpec {
            prefix: prefix.into(),
            widths,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)` for
    /// weights and biases alike.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
            let b = Array2::from_shape_fn((1, fan_out), |_| rng.gen_range(-bound..bound));
            store.insert(self.weight_name(l), w);
            store.insert(self.bias_name(l), b);
        }
    }

    /// Sets the output layer to zero so the network starts as a constant.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        let l = self.n_layers() - 1;
        store.get_mut(&self.weight_name(l))?.fill(0.0);
        store.get_mut(&self.bias_name(l))?.fill(0.0);
        Ok(())
    }

    fn check(&self, store: &ParamStore, input_cols: usize) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Contract(format!(
                "mlp `{}` needs at least one layer",
                self.prefix
            )));
        }
        if input_cols != self.input_width() {
            return Err(Error::Contract(format!(
                "mlp `{}` expects input width {}, got {input_cols}",
                self.prefix,
                self.input_width()
            )));
        }
        for l in 0..self.n_layers() {
            let w = store.get(&self.weight_name(l))?;
            let b = store.get(&self.bias_name(l))?;
            if w.dim() != (self.widths[l], self.widths[l + 1]) || b.dim() != (1, self.widths[l + 1])
            {
                return Err(Error::Contract(format!(
                    "mlp `{}` layer {l} parameters have the wrong shape",
                    self.prefix
                )));
            }
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        self.check(store, input.ncols())?;
        let mut h = input.clone();
        for l in 0..self.n_layers() {
            h = affine(
                &h,
                store.get(&self.weight_name(l))?,
                store.get(&self.bias_name(l))?,
            );
            if l + 1 < self.n_layers() {
                h = silu_map(&h);
            }
        }
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::numeric(format!("mlp `{}` forward", self.prefix)));
        }
        Ok(h)
    }

    /// Recorded forward pass. Returns the output and the post-activation
    /// hidden states (one per hidden layer).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<(Var, Vec<Var>)> {
        self.check(store, tape.value(input).ncols())?;
        let mut h = input;
        let mut hidden = Vec::with_capacity(self.n_layers().saturating_sub(1));
        for l in 0..self.n_layers() {
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            h = tape.affine(h, w, b)?;
            if l + 1 < self.n_layers() {
                h = tape.silu(h)?;
                hidden.push(h);
            }
        }
        Ok((h, hidden))
    }
}
