//! Self-checks run by `viap verify`: gradients against finite differences,
//! the shared-perturbation identity, ball invariants and attack reductions.
//!
//! Every check uses small random models, so the suite needs no dataset and
//! finishes in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{self, AttackConfig, AttackFamily, IterativeParams};
use crate::error::Result;
use crate::net::{self, Architecture, ModelParams};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-3;
/// Coordinates sampled per tensor in the gradient check.
const FD_SAMPLES: usize = 24;
/// Relative gap between one-sided slopes that marks a ReLU / max-pool kink
/// inside `[x - h, x + h]`.
const KINK_GAP: f64 = 1e-2;
/// One-sided differences carry O(h) truncation error.
const ONE_SIDED_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

/// A random small model with a non-trivial input standardization.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    side: usize,
    channels: usize,
    classes: usize,
    dense_only: bool,
) -> ModelParams {
    let arch = if dense_only {
        Architecture::dense_only(side, side, channels, classes)
    } else {
        Architecture::standard(side, side, channels, classes)
    };
    let mut params = ModelParams::zeros(arch).expect("valid architecture");
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    let mean = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
    let std = (0..channels).map(|_| rng.gen_range(0.2..1.5)).collect();
    params.with_input_norm(mean, std).expect("valid norm")
}

pub fn random_images(rng: &mut ChaCha8Rng, count: usize, side: usize, channels: usize) -> Tensor {
    let n = count * side * side * channels;
    Tensor::new(
        vec![count, side, side, channels],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .expect("consistent shape")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Loss values at `x - h`, `x`, `x + h` for one coordinate.
struct Probe {
    minus: f64,
    center: f64,
    plus: f64,
}

enum Verdict {
    Smooth(f64),
    Kink,
    Mismatch(f64),
}

/// Central differences are only meaningful where the loss is smooth. At a
/// kink the analytic value must instead match one of the one-sided slopes.
fn judge(analytic: f64, p: &Probe) -> Verdict {
    let central = (p.plus - p.minus) / (2.0 * FD_STEP);
    let err = rel_err(analytic, central);
    if err < FD_REL_TOL {
        return Verdict::Smooth(err);
    }
    let forward = (p.plus - p.center) / FD_STEP;
    let backward = (p.center - p.minus) / FD_STEP;
    let kink = rel_err(forward, backward) > KINK_GAP;
    if kink && rel_err(analytic, forward).min(rel_err(analytic, backward)) < ONE_SIDED_TOL {
        Verdict::Kink
    } else {
        Verdict::Mismatch(err)
    }
}

fn sampled(rng: &mut ChaCha8Rng, len: usize, exhaustive: bool) -> Vec<usize> {
    if exhaustive || len <= FD_SAMPLES {
        (0..len).collect()
    } else {
        (0..FD_SAMPLES).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Input and parameter gradients against central differences. Without
/// `exhaustive`, a fixed number of coordinates per tensor is sampled.
pub fn gradient_check(seed: u64, cases: usize, exhaustive: bool) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut kinks = 0usize;
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    let mut tally = |v: Verdict| {
        checked += 1;
        match v {
            Verdict::Smooth(e) => worst = worst.max(e),
            Verdict::Kink => kinks += 1,
            Verdict::Mismatch(e) => {
                mismatches += 1;
                worst = worst.max(e);
            }
        }
    };
    for case in 0..cases {
        let side = [4, 8][case % 2];
        let channels = rng.gen_range(1..=3);
        let classes = rng.gen_range(2..=4);
        let params = random_model(&mut rng, side, channels, classes, case % 4 == 3);
        let b = rng.gen_range(1..=3);
        let batch = random_images(&mut rng, b, side, channels);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();

        let (center, gx) = net::loss_and_input_grad(&params, &batch, &labels)?;
        for i in sampled(&mut rng, gx.len(), exhaustive) {
            let mut plus = batch.clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = batch.clone();
            minus.data_mut()[i] -= FD_STEP;
            let probe = Probe {
                minus: net::loss(&params, &minus, &labels)?,
                center,
                plus: net::loss(&params, &plus, &labels)?,
            };
            tally(judge(gx.data()[i], &probe));
        }
        let (_, gp) = net::loss_and_param_grad(&params, &batch, &labels)?;
        for t in 0..gp.tensors().len() {
            for i in sampled(&mut rng, gp.tensors()[t].len(), exhaustive) {
                let mut plus = params.clone();
                plus.tensors_mut()[t].data_mut()[i] += FD_STEP;
                let mut minus = params.clone();
                minus.tensors_mut()[t].data_mut()[i] -= FD_STEP;
                let probe = Probe {
                    minus: net::loss(&minus, &batch, &labels)?,
                    center,
                    plus: net::loss(&plus, &batch, &labels)?,
                };
                tally(judge(gp.tensors()[t].data()[i], &probe));
            }
        }
    }
    Ok(outcome(
        "gradients vs finite differences",
        mismatches == 0,
        format!(
            "{cases} models, {checked} coordinates, worst central relative error {worst:.3e} \
             (tolerance {FD_REL_TOL:e}), {kinks} at kinks matched one-sided, {mismatches} mismatches"
        ),
    ))
}

/// The VIAP gradient equals the sum of per-view input gradients.
pub fn shared_gradient_identity(seed: u64, batches: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let params = random_model(&mut rng, 8, 3, 4, false);
        let n = rng.gen_range(2..=8);
        let images = random_images(&mut rng, n, 8, 3).unstack();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let delta = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.gen_range(-0.05..0.05)).collect())?;
        let refs: Vec<&Tensor> = images.iter().collect();
        let (_, shared) = attacks::shared_gradient(&params, &refs, &labels, &delta)?;

        let applied: Vec<Tensor> = images
            .iter()
            .map(|x| attacks::apply(&delta, x))
            .collect::<Result<_>>()?;
        let arefs: Vec<&Tensor> = applied.iter().collect();
        let (_, per_view) = net::loss_and_input_grad(&params, &Tensor::stack(&arefs)?, &labels)?;
        let mut sum = vec![0.0; delta.len()];
        for row in per_view.data().chunks(delta.len()) {
            for (s, g) in sum.iter_mut().zip(row) {
                *s += g;
            }
        }
        worst = worst.max(shared.max_abs_diff(&Tensor::new(delta.shape().to_vec(), sum)?)?);
    }
    Ok(outcome(
        "shared-perturbation gradient identity",
        worst < 1e-10,
        format!("{batches} batches, max abs diff {worst:.3e}"),
    ))
}

/// Every iterate of every family stays in the eps-ball and in `[0, 1]`.
pub fn ball_invariants(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_model(&mut rng, 4, 3, 3, false);
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut check = |adv: &Tensor, clean: &Tensor, eps: f64| {
        checked += 1;
        let inside = adv
            .data()
            .iter()
            .zip(clean.data())
            .all(|(a, c)| (a - c).abs() <= eps + 1e-12 && (0.0..=1.0).contains(a));
        if !inside {
            violations += 1;
        }
    };
    for _ in 0..cases {
        let family = AttackFamily::ALL[rng.gen_range(0..AttackFamily::ALL.len())];
        let epsilon = rng.gen_range(0.0..60.0);
        let eps = epsilon / attacks::PIXEL_SCALE;
        let label = rng.gen_range(0..3);
        let target = (label + rng.gen_range(1..3)) % 3;
        let config = AttackConfig::new(family, epsilon)
            .with_target(target)
            .with_iterations(if family.is_iterative() { rng.gen_range(1..=6) } else { 1 })
            .with_seed(rng.gen());
        // Pixels pinned at the range ends exercise the clamp.
        let mut clean = random_images(&mut rng, 1, 4, 3).unstack().remove(0);
        for v in clean.data_mut() {
            if rng.gen_bool(0.1) {
                *v = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
            }
        }
        match family {
            AttackFamily::Fgsm | AttackFamily::FgsmTargeted => {
                check(&attacks::attack_image(&params, &clean, label, &config)?, &clean, eps);
            }
            AttackFamily::Bim | AttackFamily::BimTargeted => {
                attacks::bim_observed(
                    &params,
                    &clean,
                    label,
                    &IterativeParams::from_config(&config),
                    &mut |e| check(e.state, &clean, eps),
                )?;
            }
            AttackFamily::Viap | AttackFamily::ViapTargeted => {
                let extra = rng.gen_range(0..=2);
                let mut views = vec![(clean, label)];
                for image in random_images(&mut rng, extra, 4, 3).unstack() {
                    views.push((image, (target + rng.gen_range(1..3)) % 3));
                }
                let refs: Vec<(&Tensor, usize)> = views.iter().map(|(x, y)| (x, *y)).collect();
                let mut deltas = Vec::new();
                attacks::viap_observed(&params, &refs, Vec::new(), &config, &mut |e| {
                    deltas.push(e.state.clone())
                })?;
                for d in &deltas {
                    for (x, _) in &views {
                        check(&attacks::apply(d, x)?, x, eps);
                    }
                }
            }
        }
    }
    Ok(outcome(
        "eps-ball and pixel-range invariants",
        violations == 0,
        format!("{cases} cases, {checked} iterates, {violations} violations"),
    ))
}

/// BIM with one full step equals FGSM; single-view VIAP without noise steps
/// in the same directions as BIM.
pub fn reductions(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_model(&mut rng, 8, 3, 4, false);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let image = random_images(&mut rng, 1, 8, 3).unstack().remove(0);
        let label = rng.gen_range(0..4);
        let epsilon = rng.gen_range(0.5..20.0);
        let one_step = IterativeParams {
            eps: epsilon / attacks::PIXEL_SCALE,
            step: epsilon / attacks::PIXEL_SCALE,
            iterations: 1,
            target: None,
        };
        let b = attacks::bim(&params, &image, label, &one_step)?;
        let f = attacks::fgsm(&params, &image, label, epsilon / attacks::PIXEL_SCALE)?;
        if b.data() != f.data() {
            mismatches += 1;
        }

        let mut config = AttackConfig::new(AttackFamily::Viap, epsilon).with_iterations(rng.gen_range(1..=5));
        config.init_noise = 0.0;
        config.literal_step = true;
        let mut bim_dirs = Vec::new();
        attacks::bim_observed(
            &params,
            &image,
            label,
            &IterativeParams::from_config(&config),
            &mut |e| bim_dirs.push(e.direction.clone()),
        )?;
        let mut viap_dirs = Vec::new();
        attacks::viap_observed(&params, &[(&image, label)], Vec::new(), &config, &mut |e| {
            viap_dirs.push(e.direction.clone())
        })?;
        if bim_dirs != viap_dirs {
            mismatches += 1;
        }
    }
    Ok(outcome(
        "BIM/FGSM and VIAP/BIM reductions",
        mismatches == 0,
        format!("{cases} cases, {mismatches} mismatches"),
    ))
}

pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        gradient_check(seed, 12, false)?,
        shared_gradient_identity(seed, 10)?,
        ball_invariants(seed, 300)?,
        reductions(seed, 40)?,
    ])
}
