use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{sigmoid, Tape, Var};
use crate::error::{Result, TcmError};
use crate::numerics::{Matrix, RngStream, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Weights ~ N(0, std²), zero bias.
    Normal {
        std: f64,
    },
    /// Square layers start at I + N(0, jitter²); other layers use Xavier-normal.
    NearIdentity {
        jitter: f64,
    },
    /// Xavier/Glorot normal, zero bias.
    Xavier,
    Zero,
}

/// Layer widths `[in, h1, ..., out]` with one activation per hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Vec<Activation>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputActivation) -> Result<Self> {
        let n_hidden = widths.len().saturating_sub(2);
        let spec = Self {
            widths,
            hidden: vec![hidden; n_hidden],
            output,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single affine layer `in -> out`.
    pub fn affine(input: usize, output: usize) -> Self {
        Self {
            widths: vec![input, output],
            hidden: vec![],
            output: OutputActivation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(TcmError::Contract("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(TcmError::Contract(format!(
                "MLP widths must be positive, got {:?}",
                self.widths
            )));
        }
        if self.hidden.len() != self.widths.len() - 2 {
            return Err(TcmError::Contract(format!(
                "{} hidden activations for {} hidden layers",
                self.hidden.len(),
                self.widths.len() - 2
            )));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_slot(prefix: &str, layer: usize) -> String {
        format!("{prefix}.l{layer}.w")
    }

    pub fn bias_slot(prefix: &str, layer: usize) -> String {
        format!("{prefix}.l{layer}.b")
    }

    /// Registers `{prefix}.l{i}.w` (out x in) and `{prefix}.l{i}.b` (1 x out).
    pub fn init(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<()> {
        self.validate()?;
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let xavier = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w = match init {
                Init::Normal { std } => rng.normal_matrix(fan_out, fan_in, std),
                Init::Xavier => rng.normal_matrix(fan_out, fan_in, xavier),
                Init::NearIdentity { jitter } if fan_in == fan_out => {
                    Matrix::identity(fan_in).add(&rng.normal_matrix(fan_out, fan_in, jitter))?
                }
                Init::NearIdentity { .. } => rng.normal_matrix(fan_out, fan_in, xavier),
                Init::Zero => Matrix::zeros(fan_out, fan_in),
            };
            store.register(Self::weight_slot(prefix, l), w)?;
            store.register(Self::bias_slot(prefix, l), Matrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(TcmError::shape(
                "mlp",
                format!("input width {cols}, expected {}", self.in_dim()),
            ));
        }
        Ok(())
    }

    /// Batch forward pass without recording.
    pub fn forward(&self, store: &ParamStore, prefix: &str, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.cols())?;
        let mut h = x.clone();
        for l in 0..self.layers() {
            let w = store.get(&Self::weight_slot(prefix, l))?;
            let b = store.get(&Self::bias_slot(prefix, l))?;
            h = h.matmul_t(w)?.add_row(b.data())?;
            h = if l + 1 < self.layers() {
                match self.hidden[l] {
                    Activation::Tanh => h.map(f64::tanh),
                    Activation::Relu => h.map(|v| v.max(0.0)),
                    Activation::LeakyRelu(s) => h.map(|v| if v > 0.0 { v } else { s * v }),
                }
            } else {
                match self.output {
                    OutputActivation::Linear => h,
                    OutputActivation::Sigmoid => h.map(sigmoid),
                }
            };
        }
        Ok(h)
    }

    /// Single-vector forward pass.
    pub fn apply(&self, store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vector> {
        Ok(self
            .forward(store, prefix, &Matrix::row_vector(x))?
            .into_data())
    }

    /// Records the forward pass on `tape`.
    pub fn record(&self, store: &ParamStore, prefix: &str, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).cols())?;
        let mut h = x;
        for l in 0..self.layers() {
            let w = tape.param(store, &Self::weight_slot(prefix, l))?;
            let b = tape.param(store, &Self::bias_slot(prefix, l))?;
            let z = tape.matmul_t(h, w)?;
            h = tape.add_row(z, b)?;
            h = if l + 1 < self.layers() {
                match self.hidden[l] {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                    Activation::LeakyRelu(s) => tape.leaky_relu(h, s),
                }
            } else {
                match self.output {
                    OutputActivation::Linear => h,
                    OutputActivation::Sigmoid => tape.sigmoid(h),
                }
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, OutputActivation::Linear).unwrap();
        let mut store = ParamStore::new();
        spec.init(&mut store, "m", Init::Zero, &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(
            spec.apply(&store, "m", &[1.0, -2.0, 3.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn identity_layer_passes_through() {
        let spec = MlpSpec::affine(3, 3);
        let mut store = ParamStore::new();
        spec.init(
            &mut store,
            "m",
            Init::NearIdentity { jitter: 0.0 },
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(
            spec.apply(&store, "m", &[0.5, -1.0, 2.0]).unwrap(),
            vec![0.5, -1.0, 2.0]
        );
    }

    #[test]
    fn two_layer_tanh_matches_hand_composition() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh, OutputActivation::Linear).unwrap();
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(7, 1);
        spec.init(&mut store, "m", Init::Normal { std: 0.7 }, &mut rng)
            .unwrap();
        store.set("m.l0.b", rng.normal_matrix(1, 5, 0.3)).unwrap();
        store.set("m.l1.b", rng.normal_matrix(1, 2, 0.3)).unwrap();
        let x = [0.2, -0.7, 1.3];

        let (w0, b0) = (store.get("m.l0.w").unwrap(), store.get("m.l0.b").unwrap());
        let (w1, b1) = (store.get("m.l1.w").unwrap(), store.get("m.l1.b").unwrap());
        let mut h = [0.0; 5];
        for i in 0..5 {
            let mut s = b0.get(0, i);
            for j in 0..3 {
                s += w0.get(i, j) * x[j];
            }
            h[i] = s.tanh();
        }
        let mut out = [0.0; 2];
        for i in 0..2 {
            out[i] = b1.get(0, i) + (0..5).map(|j| w1.get(i, j) * h[j]).sum::<f64>();
        }

        let got = spec.apply(&store, "m", &x).unwrap();
        for i in 0..2 {
            assert!((got[i] - out[i]).abs() < 1e-14);
        }

        let mut tape = Tape::new();
        let xv = tape.constant(Matrix::row_vector(&x));
        let y = spec.record(&store, "m", &mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), got.as_slice());
    }

    #[test]
    fn shape_and_spec_errors() {
        let spec = MlpSpec::affine(3, 2);
        let mut store = ParamStore::new();
        spec.init(&mut store, "m", Init::Xavier, &mut RngStream::new(0, 0))
            .unwrap();
        assert!(matches!(
            spec.apply(&store, "m", &[1.0]),
            Err(TcmError::Shape { .. })
        ));
        assert!(MlpSpec::new(vec![3], Activation::Tanh, OutputActivation::Linear).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Tanh, OutputActivation::Linear).is_err());
    }
}
