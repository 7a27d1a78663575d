//! Parameterized layers recorded onto a [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `y = x·Wᵀ + b` with `W` stored out×in and `b` as a 1×out row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from N(0, std²); bias zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), Matrix::randn(d_out, d_in, std, rng), trainable);
        let bias = store.register(format!("{name}.bias"), Matrix::zeros(1, d_out), trainable);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul_nt(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Matrix::filled(1, dim, T::one()), trainable),
            bias: store.register(format!("{name}.bias"), Matrix::zeros(1, dim), trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Low-rank adapter pair: `A` is r×in, `B` is out×r.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

/// A frozen [`Linear`] plus an optional trainable [`Adapter`]:
/// `y = x·Wᵀ + b + (alpha/r)·(drop(x)·Aᵀ)·Bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<Adapter>,
}

/// Inverted dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix<T> {
    let keep = T::of(1.0 / (1.0 - p));
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl LoraLinear {
    /// The base map is frozen. With `rank > 0`, `A` ~ N(0, 1/in) and `B` = 0.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        lora: Option<(usize, f64, f64)>,
        rng: &mut R,
    ) -> Self {
        let base = Linear::new(store, name, d_in, d_out, std, false, rng);
        let adapter_seed: u64 = rng.random();
        let adapter = lora.map(|(rank, alpha, dropout)| {
            let rng = &mut ChaCha8Rng::seed_from_u64(adapter_seed);
            let a = store.register(
                format!("{name}.lora_a"),
                Matrix::randn(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng),
                true,
            );
            let b = store.register(format!("{name}.lora_b"), Matrix::zeros(d_out, rank), true);
            Adapter {
                a,
                b,
                rank,
                scale: alpha / rank as f64,
                dropout,
            }
        });
        Self { base, adapter }
    }

    /// `rng` enables adapter-input dropout; pass `None` for evaluation.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        rng: Option<&mut R>,
    ) -> NodeId {
        let y = self.base.forward(tape, store, x);
        let Some(ad) = &self.adapter else {
            return y;
        };
        let xin = match rng {
            Some(rng) if ad.dropout > 0.0 => {
                let (r, c) = tape.value(x).shape();
                tape.mul_const(x, dropout_mask(r, c, ad.dropout, rng))
            }
            _ => x,
        };
        let a = tape.param(store, ad.a);
        let b = tape.param(store, ad.b);
        let h = tape.matmul_nt(xin, a);
        let h = tape.matmul_nt(h, b);
        let h = tape.scale(h, T::of(ad.scale));
        tape.add(y, h)
    }

    /// `W + (alpha/r)·B·A`, the base weight with the adapter folded in.
    pub fn merged_weight<T: Scalar>(&self, store: &ParamStore<T>) -> Matrix<T> {
        let mut w = store.value(self.base.weight).clone();
        if let Some(ad) = &self.adapter {
            let ba = store.value(ad.b).matmul(store.value(ad.a));
            w.add_scaled(T::of(ad.scale), &ba);
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &LoraLinear, store: &ParamStore<f64>, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::inference();
        let xn = tape.constant(Matrix::row_vector(x.to_vec()));
        let y = layer.forward::<f64, ChaCha8Rng>(&mut tape, store, xn, None);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn rank_one_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = LoraLinear::new(&mut store, "t", 2, 2, 0.0, Some((1, 1.0, 0.0)), &mut rng);
        let ad = layer.adapter.clone().unwrap();
        store.get_mut(ad.a).value = Matrix::from_f64(1, 2, &[1.0, 0.0]);
        store.get_mut(ad.b).value = Matrix::from_f64(2, 1, &[1.0, 0.0]);
        assert_eq!(run(&layer, &store, &[1.0, 2.0]), vec![1.0, 0.0]);
        assert_eq!(layer.merged_weight(&store).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_b_is_the_base_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lora = LoraLinear::new(&mut store, "l", 5, 3, 0.5, Some((2, 4.0, 0.0)), &mut rng);
        let base = LoraLinear {
            base: lora.base.clone(),
            adapter: None,
        };
        let x = [0.3, -1.0, 2.0, 0.5, 0.1];
        assert_eq!(run(&lora, &store, &x), run(&base, &store, &x));
        assert_eq!(&lora.merged_weight(&store), store.value(lora.base.weight));
    }

    #[test]
    fn dropout_mask_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m: Matrix<f64> = dropout_mask(100, 100, 0.1, &mut rng);
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&zeros));
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }
}
