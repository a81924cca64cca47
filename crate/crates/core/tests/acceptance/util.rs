use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partseg::geometry::Point3;
use partseg::nn::{ParamId, ParameterStore, Tensor};

pub fn random_tensor(shape: &[usize], scale: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0f32..=1.0))).collect()
}

/// `sum(r * y)`: a scalar whose gradient w.r.t. `y` is `r`.
pub fn probe(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Random parameters; norm gains stay near one, scale frequencies and FiLM
/// gates are perturbed around their initial values.
pub fn randomize(store: &mut ParameterStore, scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        for v in store.get_mut(id).data_mut() {
            let u = rng.random_range(-scale..scale);
            if name.ends_with(".gain") {
                *v = 1.0 + u;
            } else if name.ends_with(".omega") || name.ends_with(".alpha") {
                *v += u;
            } else {
                *v = u;
            }
        }
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}
