//! Gradient-sign attacks: FGSM, BIM and view-invariant perturbations (VIAP).
//!
//! Epsilons and step sizes in [`AttackConfig`] are on the 0-255 pixel scale;
//! the attack functions below take them already divided by 255, matching
//! images normalized to `[0, 1]`.
//!
//! VIAP optimizes one image-shaped `delta` against a whole set of views. Each
//! iteration evaluates the loss on `clamp(X_i + delta, 0, 1)` for every view,
//! sums the per-view input gradients (the gradient of the batch loss w.r.t.
//! the shared `delta`), takes a sign step and clamps `delta` back into
//! `[-eps, eps]`. The same `delta` is later applied unchanged to unseen views.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, ModelParams};
use crate::tensor::{sign, Tensor};

pub const PERTURBATION_MAGIC: &[u8; 8] = b"VIAPDLT1";

/// Pixel scale of epsilons and step sizes in configs and reports.
pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackFamily {
    #[serde(rename = "fgsm")]
    Fgsm,
    #[serde(rename = "fgsm-t")]
    FgsmTargeted,
    #[serde(rename = "bim")]
    Bim,
    #[serde(rename = "bim-t")]
    BimTargeted,
    #[serde(rename = "viap")]
    Viap,
    #[serde(rename = "viap-t")]
    ViapTargeted,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 6] = [
        AttackFamily::Fgsm,
        AttackFamily::Bim,
        AttackFamily::Viap,
        AttackFamily::FgsmTargeted,
        AttackFamily::BimTargeted,
        AttackFamily::ViapTargeted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::FgsmTargeted => "fgsm-t",
            AttackFamily::Bim => "bim",
            AttackFamily::BimTargeted => "bim-t",
            AttackFamily::Viap => "viap",
            AttackFamily::ViapTargeted => "viap-t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AttackFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown attack family '{s}'")))
    }

    pub fn is_targeted(self) -> bool {
        matches!(
            self,
            AttackFamily::FgsmTargeted | AttackFamily::BimTargeted | AttackFamily::ViapTargeted
        )
    }

    pub fn is_iterative(self) -> bool {
        !matches!(self, AttackFamily::Fgsm | AttackFamily::FgsmTargeted)
    }

    pub fn is_universal(self) -> bool {
        matches!(self, AttackFamily::Viap | AttackFamily::ViapTargeted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// L-infinity bound, 0-255 scale.
    pub epsilon: f64,
    /// Per-iteration step, 0-255 scale. `None` selects `max(2.5 eps / N, 0.5)`.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub target: Option<usize>,
    /// Amplitude of the uniform `delta` initialization, `[0, 1]` scale.
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Use `step = epsilon`, the single-constant form of the update.
    #[serde(default)]
    pub literal_step: bool,
    /// Targeted FGSM adds (rather than subtracts) the signed target gradient.
    #[serde(default)]
    pub ascend_target_loss: bool,
}

fn default_iterations() -> usize {
    20
}

fn default_init_noise() -> f64 {
    0.01
}

impl AttackConfig {
    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        AttackConfig {
            family,
            epsilon,
            step: None,
            iterations: if family.is_iterative() { default_iterations() } else { 1 },
            target: None,
            init_noise: default_init_noise(),
            seed: 0,
            literal_step: false,
            ascend_target_loss: false,
        }
    }

    pub fn with_target(mut self, target: usize) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Epsilon on the `[0, 1]` image scale.
    pub fn eps(&self) -> f64 {
        self.epsilon / PIXEL_SCALE
    }

    /// Step size on the 0-255 scale.
    pub fn step_pixels(&self) -> f64 {
        if self.literal_step || !self.family.is_iterative() {
            return self.epsilon;
        }
        self.step
            .unwrap_or_else(|| (2.5 * self.epsilon / self.iterations.max(1) as f64).max(0.5))
    }

    /// Step size on the `[0, 1]` image scale.
    pub fn step(&self) -> f64 {
        self.step_pixels() / PIXEL_SCALE
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be finite and non-negative"));
        }
        if self.family.is_iterative() {
            if self.iterations == 0 {
                return Err(Error::invalid("iterative attacks need at least one iteration"));
            }
            if !(self.step_pixels() > 0.0 && self.step_pixels().is_finite()) {
                return Err(Error::invalid("iterative attacks need a positive step"));
            }
        } else if self.iterations != 1 {
            return Err(Error::invalid("FGSM is a single-step attack (iterations = 1)"));
        }
        if self.family.is_targeted() && self.target.is_none() {
            return Err(Error::invalid(format!(
                "{} requires a target label",
                self.family.name()
            )));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::invalid("init noise amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// What an iterative attack reports after each update.
pub struct IterationEvent<'a> {
    /// 1-based.
    pub iteration: usize,
    /// The signed direction added this iteration (before any clipping).
    pub direction: &'a Tensor,
    /// BIM: the current adversarial image. VIAP: the current `delta`.
    pub state: &'a Tensor,
}

/// Projects `adv` onto the eps-ball around `clean` and then onto `[0, 1]`:
/// `min(max(adv, clean - eps, 0), clean + eps, 1)`.
pub fn clip_ball(adv: &Tensor, clean: &Tensor, eps: f64) -> Result<Tensor> {
    adv.zip_map(clean, |a, c| a.max(c - eps).max(0.0).min(c + eps).min(1.0))
}

fn single(image: &Tensor) -> Result<Tensor> {
    Tensor::stack(&[image])
}

/// Gradient of the loss for one image w.r.t. that image.
pub fn input_gradient(params: &ModelParams, image: &Tensor, label: usize) -> Result<Tensor> {
    let (_, g) = net::loss_and_input_grad(params, &single(image)?, &[label])?;
    g.reshape(image.shape().to_vec())
}

/// Untargeted FGSM: `clamp(X + eps * sign(grad_X J(X, y)), 0, 1)`.
pub fn fgsm(params: &ModelParams, image: &Tensor, label: usize, eps: f64) -> Result<Tensor> {
    let g = input_gradient(params, image, label)?;
    image.zip_map(&g, |x, gi| (x + eps * sign(gi)).clamp(0.0, 1.0))
}

/// Targeted FGSM: `clamp(X - eps * sign(grad_X J(X, target)), 0, 1)`, which
/// descends the target-label loss. With `ascend` the sign is flipped.
pub fn fgsm_targeted(params: &ModelParams, image: &Tensor, target: usize, eps: f64, ascend: bool) -> Result<Tensor> {
    let g = input_gradient(params, image, target)?;
    let s = if ascend { 1.0 } else { -1.0 };
    image.zip_map(&g, |x, gi| (x + s * eps * sign(gi)).clamp(0.0, 1.0))
}

/// Parameters of a per-image iterative attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterativeParams {
    /// `[0, 1]` scale.
    pub eps: f64,
    /// `[0, 1]` scale.
    pub step: f64,
    pub iterations: usize,
    /// `Some(target)` descends the target loss; `None` ascends the true-label loss.
    pub target: Option<usize>,
}

impl IterativeParams {
    pub fn from_config(config: &AttackConfig) -> Self {
        IterativeParams {
            eps: config.eps(),
            step: config.step(),
            iterations: config.iterations,
            target: if config.family.is_targeted() {
                config.target
            } else {
                None
            },
        }
    }
}

/// Basic iterative method:
/// `X_{n+1} = clip_ball(X_n + step * dir_n, X, eps)`, `X_0 = X`, where
/// `dir_n = sign(grad J(X_n, y))` untargeted or `-sign(grad J(X_n, target))`.
pub fn bim(params: &ModelParams, image: &Tensor, label: usize, p: &IterativeParams) -> Result<Tensor> {
    bim_observed(params, image, label, p, &mut |_| {})
}

pub fn bim_observed(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    p: &IterativeParams,
    observer: &mut dyn FnMut(IterationEvent<'_>),
) -> Result<Tensor> {
    if p.iterations == 0 {
        return Err(Error::invalid("BIM needs at least one iteration"));
    }
    let (y, s) = match p.target {
        Some(t) => (t, -1.0),
        None => (label, 1.0),
    };
    let mut adv = image.clone();
    for iteration in 1..=p.iterations {
        let g = input_gradient(params, &adv, y)?;
        let direction = g.map(|v| s * sign(v));
        let stepped = adv.zip_map(&direction, |a, d| a + p.step * d)?;
        adv = clip_ball(&stepped, image, p.eps)?;
        observer(IterationEvent {
            iteration,
            direction: &direction,
            state: &adv,
        });
    }
    Ok(adv)
}

/// Runs a per-image family (FGSM, FGSM-T, BIM, BIM-T) on one image.
pub fn attack_image(params: &ModelParams, image: &Tensor, label: usize, config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    check_target(config, std::iter::once(label))?;
    match config.family {
        AttackFamily::Fgsm => fgsm(params, image, label, config.eps()),
        AttackFamily::FgsmTargeted => fgsm_targeted(
            params,
            image,
            config.target.expect("validated"),
            config.eps(),
            config.ascend_target_loss,
        ),
        AttackFamily::Bim | AttackFamily::BimTargeted => {
            bim(params, image, label, &IterativeParams::from_config(config))
        }
        AttackFamily::Viap | AttackFamily::ViapTargeted => Err(Error::invalid(format!(
            "{} crafts a shared perturbation; use viap",
            config.family.name()
        ))),
    }
}

fn check_target(config: &AttackConfig, mut labels: impl Iterator<Item = usize>) -> Result<()> {
    match config.target {
        Some(t) if config.family.is_targeted() && labels.any(|y| y == t) => Err(Error::invalid(format!(
            "target label {t} equals the true label of an attacked view"
        ))),
        _ => Ok(()),
    }
}

/// A universal additive perturbation and how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub config: AttackConfig,
    /// Keys of the views the perturbation was optimized on.
    pub training_views: Vec<String>,
    /// Mean batch loss on the training views at the final `delta`.
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct PerturbationHeader {
    config: AttackConfig,
    shape: Vec<usize>,
    training_views: Vec<String>,
    final_loss: f64,
}

impl Perturbation {
    pub fn eps(&self) -> f64 {
        self.config.eps()
    }

    /// `clamp(X + delta, 0, 1)`.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        apply(&self.delta, image)
    }

    /// Magic, little-endian u64 header length, JSON header, raw f64 payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&PerturbationHeader {
            config: self.config.clone(),
            shape: self.delta.shape().to_vec(),
            training_views: self.training_views.clone(),
            final_loss: self.final_loss,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.delta.len());
        out.extend_from_slice(PERTURBATION_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.delta.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |reason: &str| Error::Format {
            what: "perturbation",
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != PERTURBATION_MAGIC {
            return Err(fail("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header"))?;
        let header: PerturbationHeader = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        let n: usize = header.shape.iter().product();
        if payload.len() != 8 * n {
            return Err(fail("payload length does not match shape"));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let delta = Tensor::new(header.shape, data)?;
        delta.ensure_finite("perturbation payload")?;
        Ok(Perturbation {
            delta,
            config: header.config,
            training_views: header.training_views,
            final_loss: header.final_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Perturbation::from_bytes(&fs::read(path)?)
    }
}

/// `clamp(X + delta, 0, 1)`; shapes must match.
pub fn apply(delta: &Tensor, image: &Tensor) -> Result<Tensor> {
    image.zip_map(delta, |x, d| (x + d).clamp(0.0, 1.0))
}

/// Sum over views of the input gradient of the mean batch loss, evaluated at
/// the applied images `clamp(X_i + delta, 0, 1)`. Returns the batch loss too.
///
/// Rows are summed in view order.
pub fn shared_gradient(
    params: &ModelParams,
    images: &[&Tensor],
    labels: &[usize],
    delta: &Tensor,
) -> Result<(f64, Tensor)> {
    let applied = images.iter().map(|x| apply(delta, x)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = applied.iter().collect();
    let batch = Tensor::stack(&refs)?;
    let (loss, grad) = net::loss_and_input_grad(params, &batch, labels)?;
    let mut total = Tensor::zeros(delta.shape());
    let n = delta.len();
    for row in grad.data().chunks(n) {
        for (t, g) in total.data_mut().iter_mut().zip(row) {
            *t += g;
        }
    }
    Ok((loss, total))
}

/// Crafts one perturbation shared by all `views` (`(image, true label)` pairs).
///
/// `config.family` selects untargeted (`Viap`) or targeted (`ViapTargeted`)
/// behaviour; any other family is rejected.
///
/// `delta_0 ~ U(-rho, rho)`; each iteration steps by `step * sign(g)` (minus
/// for targeted), where `g` is the summed gradient from `shared_gradient`, and
/// clamps `delta` to `[-eps, eps]`.
pub fn viap(
    params: &ModelParams,
    views: &[(&Tensor, usize)],
    view_keys: Vec<String>,
    config: &AttackConfig,
) -> Result<Perturbation> {
    viap_observed(params, views, view_keys, config, &mut |_| {})
}

pub fn viap_observed(
    params: &ModelParams,
    views: &[(&Tensor, usize)],
    view_keys: Vec<String>,
    config: &AttackConfig,
    observer: &mut dyn FnMut(IterationEvent<'_>),
) -> Result<Perturbation> {
    if !config.family.is_universal() {
        return Err(Error::invalid(format!("{} is not a VIAP family", config.family.name())));
    }
    config.validate()?;
    check_target(config, views.iter().map(|(_, y)| *y))?;
    let (first, _) = views
        .first()
        .ok_or_else(|| Error::invalid("VIAP needs at least one view"))?;
    let images: Vec<&Tensor> = views.iter().map(|(x, _)| *x).collect();
    for x in &images {
        x.ensure_shape(first.shape())?;
    }
    let (labels, s) = match (config.family.is_targeted(), config.target) {
        (true, Some(t)) => (vec![t; views.len()], -1.0),
        (true, None) => return Err(Error::invalid("targeted VIAP requires a target label")),
        (false, _) => (views.iter().map(|(_, y)| *y).collect::<Vec<_>>(), 1.0),
    };
    let eps = config.eps();
    let step = config.step();

    // Per-component bounds: the eps box, tightened to the hull of what any
    // view can still express. Values outside the hull are clipped away by
    // `apply` on every view, so trimming them changes no image; it keeps the
    // single-view case identical to BIM's clip at the pixel-range boundary.
    let mut lo = first.data().iter().map(|v| -v).collect::<Vec<_>>();
    let mut hi = first.data().iter().map(|v| 1.0 - v).collect::<Vec<_>>();
    for x in &images[1..] {
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(x.data()) {
            *l = l.min(-v);
            *h = h.max(1.0 - v);
        }
    }
    for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
        *l = l.max(-eps);
        *h = h.min(eps);
    }
    let bound = |i: usize, d: f64| d.max(lo[i]).min(hi[i]);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rho = config.init_noise;
    let mut delta = Tensor::zeros(first.shape());
    if rho > 0.0 {
        for (i, d) in delta.data_mut().iter_mut().enumerate() {
            *d = bound(i, rng.gen_range(-rho..=rho));
        }
    }

    for iteration in 1..=config.iterations {
        let (_, g) = shared_gradient(params, &images, &labels, &delta)?;
        let direction = g.map(|v| s * sign(v));
        let mut next = delta.clone();
        for (i, (d, dir)) in next.data_mut().iter_mut().zip(direction.data()).enumerate() {
            *d = bound(i, *d + step * dir);
        }
        delta = next;
        observer(IterationEvent {
            iteration,
            direction: &direction,
            state: &delta,
        });
    }
    let applied = images.iter().map(|x| apply(&delta, x)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = applied.iter().collect();
    let final_loss = net::loss(params, &Tensor::stack(&refs)?, &labels)?;
    Ok(Perturbation {
        delta,
        config: config.clone(),
        training_views: view_keys,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    /// 1x1x1 image, two classes, logits `[w x, -w x]`.
    fn one_pixel_model(w: f64) -> ModelParams {
        ModelParams::from_tensors(
            Architecture::dense_only(1, 1, 1, 2),
            vec![Tensor::new(vec![2, 1], vec![w, -w]).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap()
    }

    fn pixel(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn clip_ball_cases() {
        let clean = t(&[0.5, 0.5, 0.98, 0.02]);
        let inside = t(&[0.55, 0.45, 0.99, 0.0]);
        assert_eq!(clip_ball(&inside, &clean, 0.1).unwrap(), inside);
        let out = clip_ball(&t(&[0.9, 0.1, 1.2, -0.3]), &clean, 0.1).unwrap();
        assert_eq!(out.data(), &[0.6, 0.4, 1.0, 0.0]);
    }

    #[test]
    fn fgsm_moves_pixel_by_eps_along_positive_gradient() {
        // For label 1 the loss rises with x when w > 0.
        let p = one_pixel_model(1.0);
        let g = input_gradient(&p, &pixel(0.5), 1).unwrap();
        assert!(g.data()[0] > 0.0);
        let adv = fgsm(&p, &pixel(0.5), 1, 0.02).unwrap();
        assert_eq!(adv.data()[0], 0.5 + 0.02);
        assert_eq!(fgsm(&p, &pixel(0.5), 1, 0.0).unwrap(), pixel(0.5));
    }

    #[test]
    fn targeted_fgsm_lowers_target_loss_on_linear_model() {
        let p = one_pixel_model(1.5);
        let x = pixel(0.4);
        for target in 0..2 {
            let before = net::loss(&p, &single(&x).unwrap(), &[target]).unwrap();
            let adv = fgsm_targeted(&p, &x, target, 0.01, false).unwrap();
            let after = net::loss(&p, &single(&adv).unwrap(), &[target]).unwrap();
            assert!(after <= before);
            assert!((adv.data()[0] - 0.4).abs() <= 0.01 + 1e-15);
            assert_eq!(fgsm_targeted(&p, &x, target, 0.0, false).unwrap(), x);
            let printed = fgsm_targeted(&p, &x, target, 0.01, true).unwrap();
            assert!(net::loss(&p, &single(&printed).unwrap(), &[target]).unwrap() >= before);
        }
    }

    #[test]
    fn bim_single_step_equals_fgsm() {
        let p = one_pixel_model(2.0);
        let x = pixel(0.3);
        let ip = IterativeParams {
            eps: 0.05,
            step: 0.05,
            iterations: 1,
            target: None,
        };
        assert_eq!(bim(&p, &x, 0, &ip).unwrap(), fgsm(&p, &x, 0, 0.05).unwrap());
    }

    #[test]
    fn bim_stays_in_ball() {
        let p = one_pixel_model(2.0);
        let x = pixel(0.99);
        let ip = IterativeParams {
            eps: 0.05,
            step: 0.02,
            iterations: 10,
            target: None,
        };
        let mut seen = 0;
        bim_observed(&p, &x, 1, &ip, &mut |e| {
            seen += 1;
            let v = e.state.data()[0];
            assert!((v - 0.99).abs() <= 0.05 + 1e-12 && (0.0..=1.0).contains(&v));
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn viap_errors() {
        let p = one_pixel_model(1.0);
        let cfg = AttackConfig::new(AttackFamily::Viap, 5.0);
        assert!(viap(&p, &[], vec![], &cfg).is_err());
        let mut targeted = AttackConfig::new(AttackFamily::ViapTargeted, 5.0);
        let x = pixel(0.5);
        assert!(viap(&p, &[(&x, 0)], vec![], &targeted).is_err());
        targeted.target = Some(1);
        assert!(viap(&p, &[(&x, 0)], vec![], &targeted).is_ok());
        let bim_cfg = AttackConfig::new(AttackFamily::Bim, 5.0);
        assert!(viap(&p, &[(&x, 0)], vec![], &bim_cfg).is_err());
    }

    #[test]
    fn viap_delta_within_eps_and_deterministic() {
        let p = one_pixel_model(1.0);
        let (a, b) = (pixel(0.2), pixel(0.7));
        let views = [(&a, 0), (&b, 1)];
        let cfg = AttackConfig::new(AttackFamily::Viap, 0.5).with_seed(3);
        let mut max_seen: f64 = 0.0;
        let p1 = viap_observed(&p, &views, vec![], &cfg, &mut |e| {
            max_seen = max_seen.max(e.state.max_abs());
        })
        .unwrap();
        assert!(max_seen <= cfg.eps());
        let p2 = viap(&p, &views, vec![], &cfg).unwrap();
        assert_eq!(p1.to_bytes().unwrap(), p2.to_bytes().unwrap());
    }

    #[test]
    fn apply_clamps_and_checks_shape() {
        let delta = t(&[0.0, 0.3, -0.3]);
        let x = t(&[0.5, 0.9, 0.1]);
        assert_eq!(apply(&delta, &x).unwrap().data(), &[0.5, 1.0, 0.0]);
        assert_eq!(apply(&Tensor::zeros(&[3]), &x).unwrap(), x);
        assert!(apply(&Tensor::zeros(&[2]), &x).is_err());
    }

    #[test]
    fn perturbation_file_roundtrip() {
        let p = Perturbation {
            delta: t(&[0.001, -0.002, 0.0]),
            config: AttackConfig::new(AttackFamily::ViapTargeted, 3.0).with_target(2),
            training_views: vec!["o000v01".into()],
            final_loss: 0.125,
        };
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..8], PERTURBATION_MAGIC);
        let q = Perturbation::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes().unwrap(), bytes);
        assert!(Perturbation::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = AttackConfig::new(AttackFamily::Bim, 10.0);
        assert_eq!(c.iterations, 20);
        assert_eq!(c.step_pixels(), 1.25);
        assert_eq!(AttackConfig::new(AttackFamily::Bim, 1.0).step_pixels(), 0.5);
        let lit = AttackConfig {
            literal_step: true,
            ..c.clone()
        };
        assert_eq!(lit.step_pixels(), 10.0);
        assert!(AttackConfig::new(AttackFamily::Fgsm, 1.0)
            .with_iterations(3)
            .validate()
            .is_err());
        assert!(AttackConfig::new(AttackFamily::FgsmTargeted, 1.0).validate().is_err());
        assert!(AttackConfig::new(AttackFamily::Fgsm, -1.0).validate().is_err());
        assert_eq!(AttackFamily::parse("VIAP-T").unwrap(), AttackFamily::ViapTargeted);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AttackConfig>(&json).unwrap(), c);
    }
}
