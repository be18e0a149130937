use rand::Rng;
use rand_distr::StandardNormal;

use super::array::Array;
use super::params::ParamStore;
use super::tape::Var;
use crate::error::{Error, Result};

/// Fully connected network with softplus hidden activations and a linear
/// output layer. The struct holds only the layout; parameters live in a
/// [`ParamStore`] as `(weight, bias)` pairs in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "mlp needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Number of parameter tensors (two per layer).
    pub fn num_tensors(&self) -> usize {
        2 * self.num_layers()
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// He-style normal init scaled by `1/sqrt(fan_in)`; biases zero. The
    /// last layer is multiplied by `out_scale` (0 gives an exactly-zero head).
    pub fn init<R: Rng + ?Sized>(
        &self,
        prefix: &str,
        out_scale: f64,
        rng: &mut R,
        store: &mut ParamStore,
    ) {
        let last = self.num_layers() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut std = (1.0 / fan_in as f64).sqrt();
            if l == last {
                std *= out_scale;
            }
            let data = (0..fan_in * fan_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            store.push(
                format!("{prefix}.layer{l}.weight"),
                Array::matrix(fan_in, fan_out, data).expect("sized"),
            );
            store.push(format!("{prefix}.layer{l}.bias"), Array::zeros(1, fan_out));
        }
    }

    /// `params` is the slice of bound tensors for this network, in the
    /// order written by [`Mlp::init`].
    pub fn forward<'t>(&self, x: &Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        if params.len() != self.num_tensors() {
            return Err(Error::invalid(format!(
                "mlp expects {} tensors, got {}",
                self.num_tensors(),
                params.len()
            )));
        }
        if x.value().cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                left: x.shape().to_vec(),
                right: vec![x.value().rows(), self.input_dim()],
            });
        }
        let mut h = x.clone();
        let last = self.num_layers() - 1;
        for (l, pair) in params.chunks(2).enumerate() {
            h = h.affine(&pair[0], &pair[1])?;
            if l != last {
                h = h.softplus()?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_store() {
        let mlp = Mlp::new(vec![3, 5, 4, 2]).unwrap();
        let mut store = ParamStore::new();
        mlp.init("net", 1.0, &mut ChaCha8Rng::seed_from_u64(0), &mut store);
        assert_eq!(mlp.param_count(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(store.num_scalars(), mlp.param_count());
    }

    #[test]
    fn output_shape_follows_last_width() {
        let mlp = Mlp::new(vec![2, 8, 3]).unwrap();
        let mut store = ParamStore::new();
        mlp.init("m", 1.0, &mut ChaCha8Rng::seed_from_u64(1), &mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = mlp.forward(&Var::constant(Array::zeros(7, 2)), &p).unwrap();
        assert_eq!(y.value().dims(), (7, 3));
        assert!(mlp.forward(&Var::constant(Array::zeros(7, 3)), &p).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mlp = Mlp::new(vec![2, 4, 2]).unwrap();
        let mut store = ParamStore::new();
        mlp.init("m", 0.0, &mut ChaCha8Rng::seed_from_u64(2), &mut store);
        let y = mlp
            .forward(&Var::constant(Array::full(3, 2, 0.3)), &store.frozen())
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
