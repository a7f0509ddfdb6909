//! MLP building blocks shared by the model layers: specs, Xavier-uniform
//! initialization into a [`ParameterSet`], and the forward application.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Identity => Ok(t.clone()),
            Activation::Relu => t.relu_act(),
            Activation::Tanh => t.tanh_act(),
        }
    }
}

/// Affine-then-activation stack. `sizes` lists every width from input to
/// output; the final layer gets its own activation (identity for logits).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, fin: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP spec needs at least input and output sizes".into(),
            ));
        }
        Ok(MlpSpec { sizes, hidden_activation: hidden, final_activation: fin })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("spec is nonempty")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }
}

/// Xavier-uniform sample in [-limit, limit] with limit = gain * sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize, gain: f64) -> Vec<f64> {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Register the weights/biases for `spec` under `{prefix}.w{i}` / `{prefix}.b{i}`.
pub fn init_mlp(
    params: &mut ParameterSet,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut ChaCha12Rng,
    gain: f64,
) -> Result<()> {
    for i in 0..spec.layer_count() {
        let (fan_in, fan_out) = (spec.sizes[i], spec.sizes[i + 1]);
        params.insert(
            &format!("{prefix}.w{i}"),
            fan_in,
            fan_out,
            xavier_uniform(rng, fan_in, fan_out, gain),
        )?;
        params.insert(&format!("{prefix}.b{i}"), 1, fan_out, vec![0.0; fan_out])?;
    }
    Ok(())
}

pub fn mlp_apply(
    params: &ParameterSet,
    prefix: &str,
    spec: &MlpSpec,
    input: &Tensor,
) -> Result<Tensor> {
    if input.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "mlp `{prefix}`: input has {} columns, spec expects {}",
            input.cols(),
            spec.input_dim()
        )));
    }
    let mut x = input.clone();
    for i in 0..spec.layer_count() {
        let w = params.get(&format!("{prefix}.w{i}"))?;
        let b = params.get(&format!("{prefix}.b{i}"))?;
        x = x.matmul(w)?.add_bias(b)?;
        let act = if i + 1 == spec.layer_count() {
            spec.final_activation
        } else {
            spec.hidden_activation
        };
        x = act.apply(&x)?;
    }
    Ok(x)
}

/// Single affine map (no activation): used for input encoders, message nets,
/// and the final logit head.
pub fn init_affine(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha12Rng,
    gain: f64,
) -> Result<()> {
    params.insert(&format!("{prefix}.w0"), fan_in, fan_out, xavier_uniform(rng, fan_in, fan_out, gain))?;
    params.insert(&format!("{prefix}.b0"), 1, fan_out, vec![0.0; fan_out])?;
    Ok(())
}

pub fn affine_apply(params: &ParameterSet, prefix: &str, input: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.w0"))?;
    let b = params.get(&format!("{prefix}.b0"))?;
    input.matmul(w)?.add_bias(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut params = ParameterSet::new();
        let spec = MlpSpec::new(vec![2, 2], Activation::Tanh, Activation::Identity).unwrap();
        params.insert("f.w0", 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        params.insert("f.b0", 1, 2, vec![0.0, 0.0]).unwrap();
        let x = Tensor::leaf(3, 2, vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0], false).unwrap();
        let y = mlp_apply(&params, "f", &spec, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_broadcast_the_bias() {
        let mut params = ParameterSet::new();
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh, Activation::Identity).unwrap();
        params.insert("f.w0", 3, 2, vec![0.0; 6]).unwrap();
        params.insert("f.b0", 1, 2, vec![5.0, -1.0]).unwrap();
        let x = Tensor::leaf(2, 3, vec![1.0; 6], false).unwrap();
        let y = mlp_apply(&params, "f", &spec, &x).unwrap();
        assert_eq!(y.data(), &[5.0, -1.0, 5.0, -1.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_matmul() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, Activation::Identity).unwrap();
        let mut params = ParameterSet::new();
        init_mlp(&mut params, "f", &spec, &mut rng, 1.0).unwrap();
        let x_data: Vec<f64> = (0..6).map(|i| (i as f64) * 0.3 - 0.7).collect();
        let x = Tensor::leaf(2, 3, x_data.clone(), false).unwrap();
        let y = mlp_apply(&params, "f", &spec, &x).unwrap();

        // Straight-line re-computation.
        let w0 = params.get("f.w0").unwrap().data();
        let b0 = params.get("f.b0").unwrap().data();
        let w1 = params.get("f.w1").unwrap().data();
        let b1 = params.get("f.b1").unwrap().data();
        let mut expected = vec![0.0; 4];
        for r in 0..2 {
            let mut h = [0.0f64; 4];
            for j in 0..4 {
                let mut s = b0[j];
                for k in 0..3 {
                    s += x_data[r * 3 + k] * w0[k * 4 + j];
                }
                h[j] = s.tanh();
            }
            for j in 0..2 {
                let mut s = b1[j];
                for (k, hv) in h.iter().enumerate() {
                    s += hv * w1[k * 2 + j];
                }
                expected[r * 2 + j] = s;
            }
        }
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh, Activation::Identity).unwrap();
        let mut params = ParameterSet::new();
        init_mlp(&mut params, "f", &spec, &mut rng, 1.0).unwrap();
        let x = Tensor::leaf(1, 2, vec![1.0, 2.0], false).unwrap();
        assert!(mlp_apply(&params, "f", &spec, &x).is_err());
    }
}
