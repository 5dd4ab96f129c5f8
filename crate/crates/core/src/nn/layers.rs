use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{xavier_uniform, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

/// One affine layer `y = act(x W + b)` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(in_dim, out_dim, rng))?;
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)))?;
        Ok(Self { w, b, in_dim, out_dim, activation })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(Error::Shape(format!("dense layer expects width {}, got {cols}", self.in_dim)));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        let y = tape.add_row(y, b)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Tanh => tape.tanh(y),
            Activation::None => y,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Widths from input to output; `dims.len() - 1` layers.
    pub dims: Vec<usize>,
    /// One activation per layer.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Every layer shares one activation.
    pub fn uniform(dims: &[usize], activation: Activation) -> Self {
        Self { dims: dims.to_vec(), activations: vec![activation; dims.len().saturating_sub(1)] }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if self.activations.len() != self.dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers but {} activations",
                self.dims.len() - 1,
                self.activations.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .dims
            .windows(2)
            .zip(&spec.activations)
            .enumerate()
            .map(|(i, (w, &act))| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], act, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.apply(tape, h))
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Evaluates an MLP on a plain array without keeping gradients.
pub fn mlp_apply(mlp: &Mlp, params: &ParamStore, x: Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params);
    let v = tape.input(x);
    let y = mlp.apply(&mut tape, v)?;
    Ok(tape.value(y).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_through() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &MlpSpec::uniform(&[3, 3], Activation::None), &mut rng).unwrap();
        *store.value_mut(mlp.layers[0].w) = Array2::eye(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]];
        assert_eq!(mlp_apply(&mlp, &store, x.clone()).unwrap(), x);
    }

    #[test]
    fn relu_clamps() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &MlpSpec::uniform(&[1, 1], Activation::Relu), &mut rng).unwrap();
        *store.value_mut(mlp.layers[0].w) = array![[1.0]];
        assert_eq!(mlp_apply(&mlp, &store, array![[-1.0]]).unwrap(), array![[0.0]]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &MlpSpec::uniform(&[3, 2], Activation::Tanh), &mut rng).unwrap();
        assert!(matches!(mlp_apply(&mlp, &store, Array2::zeros((2, 4))), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_spec_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec { dims: vec![2, 3, 4], activations: vec![Activation::Tanh] };
        assert!(Mlp::new(&mut store, "m", &spec, &mut rng).is_err());
    }
}
