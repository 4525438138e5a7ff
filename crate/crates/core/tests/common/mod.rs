#![allow(dead_code)]

use cnnav::gradcheck::relative_error;
use cnnav::rng::{self, Stream};
use cnnav::{Element, Tape, Tensor, Var};
use rand::Rng;

/// Uniform values in [-1, 1).
pub fn rand_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, Stream::Sampling);
    Tensor::from_fn(shape.to_vec(), |_| T::of(r.random_range(-1.0..1.0)))
}

pub fn scaled<T: Element>(t: &Tensor<T>, k: f64) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::of(v.as_f64() * k)).collect()).unwrap()
}

/// Max relative error between tape gradients and central differences of the
/// scalar `f`, over every coordinate of every input.
pub fn fd_max_error<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward(f(&vars)).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&vars).value().data()[0]
    };
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut probe = inputs.to_vec();
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let r = rand_tensor::<f64>(&y.shape(), seed ^ 0xABCD);
    y.mul(y.tape().constant(r)).unwrap().sum()
}
