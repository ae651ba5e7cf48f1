//! Random weight initializers. Every initializer draws from a caller-owned
//! RNG so parameter layout is reproducible from a single seed.

use rand::Rng;

use super::{Elem, Tensor};

/// Gaussian draws via Box-Muller. Both uniform inputs are drawn per output
/// element so consecutive calls with the same RNG state stay reproducible
/// regardless of tensor size parity.
pub fn normal<T: Elem, R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            // u1 is kept away from zero so ln(u1) stays finite.
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            T::from_f64_lossy(mean + std * z)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("initializer shape is caller-validated")
}

pub fn uniform<T: Elem, R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("initializer shape is caller-validated")
}

/// He initialization for layers followed by a rectifying nonlinearity:
/// normal with std = sqrt(2 / fan_in).
pub fn kaiming<T: Elem, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    assert!(fan_in > 0, "kaiming fan_in must be positive");
    normal(rng, shape, 0.0, (2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn normal_matches_requested_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Tensor<f64> = normal(&mut rng, &[200, 50], 1.0, 0.5);
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn normal_is_reproducible_from_seed() {
        let a: Tensor<f32> = normal(&mut ChaCha8Rng::seed_from_u64(3), &[7, 3], 0.0, 0.02);
        let b: Tensor<f32> = normal(&mut ChaCha8Rng::seed_from_u64(3), &[7, 3], 0.0, 0.02);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Tensor<f64> = uniform(&mut rng, &[1000], -0.25, 0.25);
        assert!(t.data().iter().all(|&x| (-0.25..0.25).contains(&x)));
    }

    #[test]
    fn kaiming_scales_with_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t: Tensor<f64> = kaiming(&mut rng, &[64, 576], 576);
        let n = t.numel() as f64;
        let var: f64 = t.data().iter().map(|x| x * x).sum::<f64>() / n;
        let expected = 2.0 / 576.0;
        assert!((var - expected).abs() < expected * 0.1, "var {var}");
    }
}
