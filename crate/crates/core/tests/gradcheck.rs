//! Central finite differences against the hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viap::net::{self, Architecture, ModelParams};
use viap::Tensor;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;
/// Below this magnitude the comparison becomes absolute; central differences
/// at h = 1e-5 carry roughly 5e-11 of rounding noise on an O(1) loss.
const FLOOR: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

struct Case {
    params: ModelParams,
    batch: Tensor,
    labels: Vec<usize>,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = [4, 8][rng.gen_range(0..2)];
    let channels = rng.gen_range(1..=3);
    let classes = rng.gen_range(2..=5);
    let arch = if seed % 5 == 4 {
        Architecture::dense_only(side, side, channels, classes)
    } else {
        Architecture::standard(side, side, channels, classes)
    };
    let mut params = ModelParams::zeros(arch.clone()).unwrap();
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    // Odd seeds also carry a non-trivial input standardization.
    if seed % 2 == 1 {
        let mean = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
        let std = (0..channels).map(|_| rng.gen_range(0.2..1.5)).collect();
        params = params.with_input_norm(mean, std).unwrap();
    }
    let b = rng.gen_range(1..=3);
    let n = b * arch.image_len();
    let batch = Tensor::new(
        vec![b, side, side, channels],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let labels = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    Case { params, batch, labels }
}

fn fd_input(case: &Case, i: usize) -> f64 {
    let mut plus = case.batch.clone();
    plus.data_mut()[i] += H;
    let mut minus = case.batch.clone();
    minus.data_mut()[i] -= H;
    let lp = net::loss(&case.params, &plus, &case.labels).unwrap();
    let lm = net::loss(&case.params, &minus, &case.labels).unwrap();
    (lp - lm) / (2.0 * H)
}

fn fd_param(case: &Case, t: usize, i: usize) -> f64 {
    let mut plus = case.params.clone();
    plus.tensors_mut()[t].data_mut()[i] += H;
    let mut minus = case.params.clone();
    minus.tensors_mut()[t].data_mut()[i] -= H;
    let lp = net::loss(&plus, &case.batch, &case.labels).unwrap();
    let lm = net::loss(&minus, &case.batch, &case.labels).unwrap();
    (lp - lm) / (2.0 * H)
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let case = random_case(seed);
        let (_, grad) = net::loss_and_input_grad(&case.params, &case.batch, &case.labels).unwrap();
        for i in 0..grad.len() {
            let e = rel_err(grad.data()[i], fd_input(&case, i));
            worst = worst.max(e);
            assert!(e < REL_TOL, "seed {seed} input {i}: rel err {e:e}");
        }
    }
    eprintln!("worst input rel err {worst:e}");
}

#[test]
fn param_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let case = random_case(seed);
        let (_, grads) = net::loss_and_param_grad(&case.params, &case.batch, &case.labels).unwrap();
        for (t, g) in grads.tensors().iter().enumerate() {
            for i in 0..g.len() {
                let e = rel_err(g.data()[i], fd_param(&case, t, i));
                worst = worst.max(e);
                assert!(e < REL_TOL, "seed {seed} tensor {t} index {i}: rel err {e:e}");
            }
        }
    }
    eprintln!("worst param rel err {worst:e}");
}

#[test]
fn gradients_are_deterministic() {
    let case = random_case(99);
    let a = net::loss_and_param_grad(&case.params, &case.batch, &case.labels).unwrap();
    let b = net::loss_and_param_grad(&case.params, &case.batch, &case.labels).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    let x = net::loss_and_input_grad(&case.params, &case.batch, &case.labels).unwrap();
    let y = net::loss_and_input_grad(&case.params, &case.batch, &case.labels).unwrap();
    assert_eq!(x.1, y.1);
}
