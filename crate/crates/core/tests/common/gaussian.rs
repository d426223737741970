//! Linear-Gaussian state-space instances and their exact moments by dense
//! conditioning of the stacked system.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub z: Vec<DVector<f64>>,
    pub s: Vec<DMatrix<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub k1: DMatrix<f64>,
    pub w: Vec<DMatrix<f64>>,
    pub v: Vec<DVector<f64>>,
}

pub fn random_spd(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(r, r) * 0.3
}

pub fn random_instance(r: usize, horizon: usize, n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    Instance {
        z: (0..horizon)
            .map(|_| DVector::from_fn(n, |_, _| normal(&mut rng)))
            .collect(),
        s: (0..horizon)
            .map(|_| DMatrix::from_fn(n, r, |_, _| normal(&mut rng)))
            .collect(),
        m: (1..horizon)
            .map(|_| DMatrix::from_fn(r, r, |_, _| 0.5 * normal(&mut rng)))
            .collect(),
        k1: random_spd(r, &mut rng),
        w: (1..horizon).map(|_| random_spd(r, &mut rng)).collect(),
        v: (0..horizon)
            .map(|_| DVector::from_fn(n, |_, _| 0.2 + rng.random::<f64>()))
            .collect(),
    }
}

/// Prior covariance of the stacked state, from `η = A u` with block-diagonal `Cov(u)`.
pub fn stacked_prior(inst: &Instance) -> DMatrix<f64> {
    let r = inst.k1.nrows();
    let t = inst.z.len();
    let mut a = DMatrix::zeros(r * t, r * t);
    for i in 0..t {
        let mut prod = DMatrix::identity(r, r);
        for j in (0..=i).rev() {
            a.view_mut((i * r, j * r), (r, r)).copy_from(&prod);
            if j > 0 {
                prod = &prod * &inst.m[j - 1];
            }
        }
    }
    let mut d = DMatrix::zeros(r * t, r * t);
    d.view_mut((0, 0), (r, r)).copy_from(&inst.k1);
    for i in 1..t {
        d.view_mut((i * r, i * r), (r, r)).copy_from(&inst.w[i - 1]);
    }
    &a * d * a.transpose()
}

/// Mean and covariance of the stacked state given the first `upto` measurement blocks.
pub fn condition(inst: &Instance, upto: usize) -> (DVector<f64>, DMatrix<f64>) {
    let r = inst.k1.nrows();
    let t = inst.z.len();
    let n = inst.z[0].len();
    let prior = stacked_prior(inst);
    let mut h = DMatrix::zeros(n * upto, r * t);
    let mut v = DMatrix::zeros(n * upto, n * upto);
    let mut z = DVector::zeros(n * upto);
    for i in 0..upto {
        h.view_mut((i * n, i * r), (n, r)).copy_from(&inst.s[i]);
        v.view_mut((i * n, i * n), (n, n))
            .copy_from(&DMatrix::from_diagonal(&inst.v[i]));
        z.rows_mut(i * n, n).copy_from(&inst.z[i]);
    }
    let cross = &prior * h.transpose();
    let gain = &cross * (&h * &prior * h.transpose() + v).try_inverse().unwrap();
    (&gain * z, &prior - &gain * cross.transpose())
}
