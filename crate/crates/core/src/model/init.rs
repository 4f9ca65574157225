use afw_tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("finite samples").with_requires_grad(true)
}

pub(crate) fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("finite samples").with_requires_grad(true)
}

pub(crate) fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_requires_grad(true)
}

pub(crate) fn filled<T: Real>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor::full(shape, T::of(v)).with_requires_grad(true)
}
