//! Confidence sweeps over attack families and budgets, plus the report files.
//!
//! Every attack is crafted on training views only. Per-image families
//! (FGSM, BIM and their targeted forms) attack each training view on its own;
//! a test view receives the perturbation crafted on the training view of the
//! same object whose camera direction is closest. VIAP families craft one
//! perturbation per object from all of its training views and apply it
//! unchanged to every view of that object.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackFamily, Perturbation};
use crate::classifier::{self, argmax, CleanMetrics};
use crate::dataset::{self, Dataset, LabeledView, Split};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::stats::{self, Variance};
use crate::tensor::Tensor;

/// Budgets on the 0-255 scale.
pub const DEFAULT_EPSILONS: [f64; 9] = [0.0, 0.5, 1.0, 3.0, 5.0, 10.0, 15.0, 30.0, 50.0];

/// Family pairs compared by the significance test, `(a, b)`.
pub const TTEST_PAIRS: [(AttackFamily, AttackFamily); 4] = [
    (AttackFamily::Viap, AttackFamily::Fgsm),
    (AttackFamily::Viap, AttackFamily::Bim),
    (AttackFamily::ViapTargeted, AttackFamily::FgsmTargeted),
    (AttackFamily::ViapTargeted, AttackFamily::BimTargeted),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetChoice {
    /// One target per object, uniform over the other labels.
    #[default]
    Random,
    /// The same target everywhere; objects of that class skip targeted attacks.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub families: Vec<AttackFamily>,
    pub epsilons: Vec<f64>,
    pub iterations: usize,
    /// Step on the 0-255 scale; `None` uses the attack default.
    pub step: Option<f64>,
    pub literal_step: bool,
    pub init_noise: f64,
    pub ascend_target_loss: bool,
    pub target: TargetChoice,
    pub seed: u64,
    pub min_train_accuracy: f64,
    pub min_test_accuracy: f64,
    /// Budget at which test-split samples are compared.
    pub ttest_epsilon: f64,
    pub ttest_variance: Variance,
    pub dump_images: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            families: AttackFamily::ALL.to_vec(),
            epsilons: DEFAULT_EPSILONS.to_vec(),
            iterations: 20,
            step: None,
            literal_step: false,
            init_noise: 0.01,
            ascend_target_loss: false,
            target: TargetChoice::Random,
            seed: 7,
            min_train_accuracy: 0.95,
            min_test_accuracy: 0.90,
            ttest_epsilon: 5.0,
            ttest_variance: Variance::Welch,
            dump_images: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.epsilons.is_empty() {
            return Err(Error::invalid("sweep needs at least one family and one epsilon"));
        }
        let unique: BTreeSet<AttackFamily> = self.families.iter().copied().collect();
        if unique.len() != self.families.len() {
            return Err(Error::invalid("duplicate attack family in sweep"));
        }
        for (i, e) in self.epsilons.iter().enumerate() {
            if !(*e >= 0.0 && e.is_finite()) {
                return Err(Error::invalid(format!("invalid epsilon {e}")));
            }
            if self.epsilons[..i].contains(e) {
                return Err(Error::invalid(format!("duplicate epsilon {e}")));
            }
        }
        for &family in &self.families {
            self.attack_config(family, 1.0, Some(0), 0).validate()?;
        }
        Ok(())
    }

    /// Attack settings for one cell; `target` is ignored by untargeted families.
    pub fn attack_config(&self, family: AttackFamily, epsilon: f64, target: Option<usize>, seed: u64) -> AttackConfig {
        let mut c = AttackConfig::new(family, epsilon).with_seed(seed);
        if family.is_iterative() {
            c.iterations = self.iterations;
        }
        c.step = self.step;
        c.literal_step = self.literal_step;
        c.init_noise = self.init_noise;
        c.ascend_target_loss = self.ascend_target_loss;
        if family.is_targeted() {
            c.target = target;
        }
        c
    }
}

/// Outcome for one view in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: String,
    pub object_id: usize,
    pub split: Split,
    pub label: usize,
    pub target: Option<usize>,
    /// Softmax of the target label (targeted) or the true label (untargeted).
    pub tracked: f64,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub views: Vec<ViewScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub top1_accuracy: f64,
    /// Targeted families only.
    pub top1_target_accuracy: Option<f64>,
}

impl SweepCell {
    pub fn split_views(&self, split: Split) -> impl Iterator<Item = &ViewScore> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn scores(&self, split: Split) -> Vec<f64> {
        self.split_views(split).map(|v| v.tracked).collect()
    }

    pub fn summary(&self, split: Split) -> CellSummary {
        let views: Vec<&ViewScore> = self.split_views(split).collect();
        let (mean, std) = mean_std(&self.scores(split));
        let predicted: Vec<usize> = views.iter().map(|v| v.predicted).collect();
        let labels: Vec<usize> = views.iter().map(|v| v.label).collect();
        let targets: Option<Vec<usize>> = views.iter().map(|v| v.target).collect();
        CellSummary {
            mean,
            std,
            n: views.len(),
            top1_accuracy: top1_accuracy(&predicted, &labels),
            top1_target_accuracy: if self.family.is_targeted() {
                targets.map(|t| top1_target_accuracy(&predicted, &t))
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub family_a: AttackFamily,
    pub family_b: AttackFamily,
    pub epsilon: f64,
    pub split: Split,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when both samples are constant.
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p: Option<f64>,
}

/// An adversarial (or clean, `family == None`) image kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleImage {
    pub family: Option<AttackFamily>,
    pub epsilon: f64,
    pub view: String,
    pub image: Tensor,
}

impl SampleImage {
    pub fn file_name(&self) -> String {
        match self.family {
            Some(f) => format!("{}_{}_{}.ppm", f.name(), self.epsilon, self.view),
            None => format!("clean_{}.ppm", self.view),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTarget {
    pub object_id: usize,
    pub label: usize,
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub clean_train: CleanMetrics,
    pub clean_test: CleanMetrics,
    pub targets: Vec<ObjectTarget>,
    pub cells: Vec<SweepCell>,
    pub ttests: Vec<SignificanceRow>,
    #[serde(skip)]
    pub samples: Vec<SampleImage>,
}

impl SweepResult {
    pub fn cell(&self, family: AttackFamily, epsilon: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.family == family && c.epsilon == epsilon)
    }
}

/// Fraction of predictions equal to the true labels.
pub fn top1_accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    fraction_equal(predicted, labels)
}

/// Fraction of predictions equal to the target labels.
pub fn top1_target_accuracy(predicted: &[usize], targets: &[usize]) -> f64 {
    fraction_equal(predicted, targets)
}

fn fraction_equal(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return f64::NAN;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Mean and sample standard deviation (`n - 1`); NaN for an empty sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (m, v) = stats::mean_var(xs);
    (m, v.sqrt())
}

struct ObjectGroup<'a> {
    object_id: usize,
    label: usize,
    train: Vec<&'a LabeledView>,
    test: Vec<&'a LabeledView>,
    /// For each test view, the index of the train view with the closest camera.
    nearest: Vec<usize>,
}

fn view_direction(v: &LabeledView) -> [f64; 3] {
    let (t, p) = (v.pose.theta, v.pose.phi);
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

fn group_objects(dataset: &Dataset) -> Result<Vec<ObjectGroup<'_>>> {
    dataset
        .object_ids()
        .into_iter()
        .map(|object_id| {
            let views: Vec<&LabeledView> = dataset.views.iter().filter(|v| v.object_id == object_id).collect();
            let train: Vec<&LabeledView> = views.iter().copied().filter(|v| v.split == Split::Train).collect();
            let test: Vec<&LabeledView> = views.iter().copied().filter(|v| v.split == Split::Test).collect();
            if train.is_empty() {
                return Err(Error::invalid(format!("object {object_id} has no training views")));
            }
            let dirs: Vec<[f64; 3]> = train.iter().map(|v| view_direction(v)).collect();
            let nearest = test
                .iter()
                .map(|v| {
                    let d = view_direction(v);
                    let mut best = (0, f64::NEG_INFINITY);
                    for (i, t) in dirs.iter().enumerate() {
                        let cos = t[0] * d[0] + t[1] * d[1] + t[2] * d[2];
                        if cos > best.1 {
                            best = (i, cos);
                        }
                    }
                    best.0
                })
                .collect();
            Ok(ObjectGroup {
                object_id,
                label: views[0].label,
                train,
                test,
                nearest,
            })
        })
        .collect()
}

fn draw_targets(
    groups: &[ObjectGroup<'_>],
    classes: usize,
    choice: TargetChoice,
    seed: u64,
) -> Result<Vec<ObjectTarget>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .iter()
        .map(|g| {
            let target = match choice {
                TargetChoice::Random => {
                    if classes < 2 {
                        return Err(Error::invalid("targeted attacks need at least two classes"));
                    }
                    // Resample on collision with the true label.
                    loop {
                        let t = rng.gen_range(0..classes);
                        if t != g.label {
                            break Some(t);
                        }
                    }
                }
                TargetChoice::Fixed(t) if t >= classes => {
                    return Err(Error::LabelOutOfRange { label: t, classes });
                }
                TargetChoice::Fixed(t) => (t != g.label).then_some(t),
            };
            Ok(ObjectTarget {
                object_id: g.object_id,
                label: g.label,
                target,
            })
        })
        .collect()
}

/// Training and test views of one object, in that order, after the attack,
/// plus the shared perturbation for VIAP families.
///
/// A zero budget leaves every image untouched.
fn attack_object(
    params: &ModelParams,
    group: &ObjectGroup<'_>,
    config: &AttackConfig,
) -> Result<(Vec<Tensor>, Option<Perturbation>)> {
    let all = group.train.iter().chain(&group.test);
    if config.epsilon == 0.0 {
        return Ok((all.map(|v| v.image.clone()).collect(), None));
    }
    if config.family.is_universal() {
        let pairs: Vec<(&Tensor, usize)> = group.train.iter().map(|v| (&v.image, v.label)).collect();
        let keys = group.train.iter().map(|v| v.key()).collect();
        let p = attacks::viap(params, &pairs, keys, config)?;
        let images = all.map(|v| p.apply(&v.image)).collect::<Result<_>>()?;
        return Ok((images, Some(p)));
    }
    let mut out: Vec<Tensor> = group
        .train
        .iter()
        .map(|v| attacks::attack_image(params, &v.image, v.label, config))
        .collect::<Result<_>>()?;
    for (v, &j) in group.test.iter().zip(&group.nearest) {
        let delta = out[j].zip_map(&group.train[j].image, |a, c| a - c)?;
        out.push(attacks::apply(&delta, &v.image)?);
    }
    Ok((out, None))
}

/// Attacked images of one object with their scores.
struct ObjectOutcome {
    scores: Vec<ViewScore>,
    images: Vec<Tensor>,
    perturbation: Option<Perturbation>,
}

fn run_object(
    params: &ModelParams,
    group: &ObjectGroup<'_>,
    family: AttackFamily,
    epsilon: f64,
    target: Option<usize>,
    config: &SweepConfig,
) -> Result<Option<ObjectOutcome>> {
    if family.is_targeted() && target.is_none() {
        return Ok(None);
    }
    let seed = config.seed.wrapping_add(group.object_id as u64);
    let attack = config.attack_config(family, epsilon, target, seed);
    let (images, perturbation) = attack_object(params, group, &attack)?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let probs = classifier::predict(params, &refs)?;
    let k = params.arch().classes;
    let scores = group
        .train
        .iter()
        .chain(&group.test)
        .zip(probs.data().chunks(k))
        .map(|(v, row)| {
            let tracked_label = if family.is_targeted() {
                target.expect("checked")
            } else {
                v.label
            };
            ViewScore {
                view: v.key(),
                object_id: v.object_id,
                split: v.split,
                label: v.label,
                target: family.is_targeted().then_some(tracked_label),
                tracked: row[tracked_label],
                predicted: argmax(row),
            }
        })
        .collect();
    Ok(Some(ObjectOutcome {
        scores,
        images,
        perturbation,
    }))
}

/// One family at one budget over a whole dataset.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub targets: Vec<ObjectTarget>,
    /// Train views then test views, per object in id order.
    pub scores: Vec<ViewScore>,
    /// Attacked image for each entry of `scores`.
    pub images: Vec<Tensor>,
    /// VIAP families: the perturbation crafted for each object.
    pub perturbations: Vec<(usize, Perturbation)>,
}

/// Attacks every object of `dataset` with one family and budget, using the
/// same crafting protocol as `confidence_sweep` but without the clean gate.
pub fn attack_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    family: AttackFamily,
    epsilon: f64,
    config: &SweepConfig,
) -> Result<AttackRun> {
    config.validate()?;
    let groups = group_objects(dataset)?;
    let targets = draw_targets(&groups, params.arch().classes, config.target, config.seed)?;
    let outcomes: Vec<Option<ObjectOutcome>> = groups
        .par_iter()
        .zip(&targets)
        .map(|(g, t)| run_object(params, g, family, epsilon, t.target, config))
        .collect::<Result<_>>()?;
    let mut run = AttackRun {
        family,
        epsilon,
        targets,
        scores: Vec::new(),
        images: Vec::new(),
        perturbations: Vec::new(),
    };
    for (g, o) in groups.iter().zip(outcomes) {
        if let Some(o) = o {
            run.scores.extend(o.scores);
            run.images.extend(o.images);
            if let Some(p) = o.perturbation {
                run.perturbations.push((g.object_id, p));
            }
        }
    }
    Ok(run)
}

fn dump_keys(groups: &[ObjectGroup<'_>]) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut keys = BTreeSet::new();
    for g in groups {
        if seen.insert(g.label) {
            keys.insert(g.train[0].key());
            if let Some(t) = g.test.first() {
                keys.insert(t.key());
            }
        }
    }
    keys
}

/// Runs every `(family, epsilon)` cell on a trained model.
///
/// Fails with `Error::CleanGate` before attacking if the clean accuracy is
/// below the configured minimums. Work is spread over `(cell, object)` units
/// on the rayon pool; results are assembled in a fixed order, so the output
/// does not depend on the number of threads.
pub fn confidence_sweep(params: &ModelParams, dataset: &Dataset, config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let train_views = dataset.split(Split::Train);
    let test_views = dataset.split(Split::Test);
    if test_views.is_empty() {
        return Err(Error::invalid("sweep needs test views"));
    }
    let clean_train = classifier::evaluate_clean(params, &train_views)?;
    let clean_test = classifier::evaluate_clean(params, &test_views)?;
    if clean_train.accuracy < config.min_train_accuracy || clean_test.accuracy < config.min_test_accuracy {
        return Err(Error::CleanGate {
            train: clean_train.accuracy,
            test: clean_test.accuracy,
            train_min: config.min_train_accuracy,
            test_min: config.min_test_accuracy,
        });
    }

    let groups = group_objects(dataset)?;
    let targets = draw_targets(&groups, params.arch().classes, config.target, config.seed)?;
    let dump = if config.dump_images {
        dump_keys(&groups)
    } else {
        BTreeSet::new()
    };

    let cells: Vec<(AttackFamily, f64)> = config
        .families
        .iter()
        .flat_map(|&f| config.epsilons.iter().map(move |&e| (f, e)))
        .collect();
    let units: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..groups.len()).map(move |g| (c, g)))
        .collect();

    let outcomes: Vec<Option<(Vec<ViewScore>, Vec<SampleImage>)>> = units
        .par_iter()
        .map(|&(c, gi)| {
            let (family, epsilon) = cells[c];
            let Some(o) = run_object(params, &groups[gi], family, epsilon, targets[gi].target, config)? else {
                return Ok(None);
            };
            let samples = o
                .scores
                .iter()
                .zip(o.images)
                .filter(|(s, _)| dump.contains(&s.view))
                .map(|(s, image)| SampleImage {
                    family: Some(family),
                    epsilon,
                    view: s.view.clone(),
                    image,
                })
                .collect();
            Ok(Some((o.scores, samples)))
        })
        .collect::<Result<_>>()?;

    let mut samples: Vec<SampleImage> = dataset
        .views
        .iter()
        .filter(|v| dump.contains(&v.key()))
        .map(|v| SampleImage {
            family: None,
            epsilon: 0.0,
            view: v.key(),
            image: v.image.clone(),
        })
        .collect();
    let mut result_cells: Vec<SweepCell> = cells
        .iter()
        .map(|&(family, epsilon)| SweepCell {
            family,
            epsilon,
            views: Vec::new(),
        })
        .collect();
    for (&(c, _), outcome) in units.iter().zip(outcomes) {
        if let Some((scores, s)) = outcome {
            result_cells[c].views.extend(scores);
            samples.extend(s);
        }
    }
    // Train views first, then test views; object order within each split.
    for cell in &mut result_cells {
        cell.views
            .sort_by_key(|v| (v.split == Split::Test, v.object_id, v.view.clone()));
    }

    let mut result = SweepResult {
        config: config.clone(),
        clean_train,
        clean_test,
        targets,
        cells: result_cells,
        ttests: Vec::new(),
        samples,
    };
    result.ttests = significance(&result, config.ttest_epsilon, Split::Test, config.ttest_variance)?;
    Ok(result)
}

/// Two-sample tests of per-view tracked softmax for the `TTEST_PAIRS` present
/// in the sweep.
pub fn significance(
    result: &SweepResult,
    epsilon: f64,
    split: Split,
    variance: Variance,
) -> Result<Vec<SignificanceRow>> {
    let mut rows = Vec::new();
    for (fa, fb) in TTEST_PAIRS {
        let (Some(ca), Some(cb)) = (result.cell(fa, epsilon), result.cell(fb, epsilon)) else {
            continue;
        };
        let (a, b) = (ca.scores(split), cb.scores(split));
        let test = match stats::ttest(&a, &b, variance) {
            Ok(r) => Some(r),
            Err(Error::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        rows.push(SignificanceRow {
            family_a: fa,
            family_b: fb,
            epsilon,
            split,
            n_a: a.len(),
            n_b: b.len(),
            mean_a: mean_std(&a).0,
            mean_b: mean_std(&b).0,
            t: test.map(|r| r.t),
            df: test.map(|r| r.df),
            p: test.map(|r| r.p),
        });
    }
    Ok(rows)
}

const CSV_HEADER: &str = "family,epsilon,split,metric,mean,std,n\n";

fn tracked_metric(family: AttackFamily) -> &'static str {
    if family.is_targeted() {
        "target_softmax"
    } else {
        "true_softmax"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// One row per `(family, epsilon, split)`: tracked softmax mean and std.
pub fn confidence_csv(result: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    for cell in &result.cells {
        for split in [Split::Train, Split::Test] {
            let s = cell.summary(split);
            writeln!(
                out,
                "{},{},{},{},{:e},{:e},{}",
                cell.family.name(),
                cell.epsilon,
                split.name(),
                tracked_metric(cell.family),
                s.mean,
                s.std,
                s.n
            )
            .unwrap();
        }
    }
    out
}

/// One row per `(family, epsilon, split)`: top-1 accuracy for untargeted
/// families, top-1 target accuracy for targeted ones. `std` is that of the
/// per-view 0/1 indicator.
pub fn accuracy_csv(result: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    for cell in &result.cells {
        for split in [Split::Train, Split::Test] {
            let hits: Vec<f64> = cell
                .split_views(split)
                .map(|v| {
                    let want = v.target.unwrap_or(v.label);
                    if v.predicted == want {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let (mean, std) = mean_std(&hits);
            let metric = if cell.family.is_targeted() {
                "top1_target_accuracy"
            } else {
                "top1_accuracy"
            };
            writeln!(
                out,
                "{},{},{},{},{:e},{:e},{}",
                cell.family.name(),
                cell.epsilon,
                split.name(),
                metric,
                mean,
                std,
                hits.len()
            )
            .unwrap();
        }
    }
    out
}

/// Per family and split: mean and std over budgets of the cell means,
/// excluding `epsilon = 0`.
pub fn summary_csv(result: &SweepResult) -> String {
    let mut out = String::from("family,split,metric,mean,std,n\n");
    for &family in &result.config.families {
        for split in [Split::Train, Split::Test] {
            let means: Vec<f64> = result
                .cells
                .iter()
                .filter(|c| c.family == family && c.epsilon > 0.0)
                .map(|c| c.summary(split).mean)
                .collect();
            let (m, s) = mean_std(&means);
            writeln!(
                out,
                "{},{},{},{:e},{:e},{}",
                family.name(),
                split.name(),
                tracked_metric(family),
                m,
                s,
                means.len()
            )
            .unwrap();
        }
    }
    out
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = String::from("family_a,family_b,epsilon,split,n_a,n_b,mean_a,mean_b,t,df,p\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e},{:e},{},{},{}",
            r.family_a.name(),
            r.family_b.name(),
            r.epsilon,
            r.split.name(),
            r.n_a,
            r.n_b,
            r.mean_a,
            r.mean_b,
            opt(r.t),
            opt(r.df),
            opt(r.p)
        )
        .unwrap();
    }
    out
}

fn table(result: &SweepResult, targeted: bool) -> String {
    let families: Vec<AttackFamily> = result
        .config
        .families
        .iter()
        .copied()
        .filter(|f| f.is_targeted() == targeted)
        .collect();
    let mut out = String::new();
    if targeted {
        out.push_str("Mean target-label softmax under targeted attacks\n\n");
    } else {
        out.push_str("Mean true-label softmax under untargeted attacks\n\n");
    }
    let _ = write!(out, "{:>6}", "eps");
    for f in &families {
        for split in [Split::Train, Split::Test] {
            let _ = write!(out, " {:>12}", format!("{}/{}", f.name(), split.name()));
        }
    }
    out.push('\n');
    for &eps in &result.config.epsilons {
        let _ = write!(out, "{eps:>6}");
        for &f in &families {
            for split in [Split::Train, Split::Test] {
                let v = result.cell(f, eps).map(|c| c.summary(split).mean);
                let _ = write!(out, " {:>12}", v.map(|x| format!("{x:.4e}")).unwrap_or_default());
            }
        }
        out.push('\n');
    }
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let _ = write!(out, "{label:>6}");
        for &f in &families {
            for split in [Split::Train, Split::Test] {
                let means: Vec<f64> = result
                    .cells
                    .iter()
                    .filter(|c| c.family == f && c.epsilon > 0.0)
                    .map(|c| c.summary(split).mean)
                    .collect();
                let ms = mean_std(&means);
                let v = if pick == 0 { ms.0 } else { ms.1 };
                let _ = write!(out, " {:>12}", format!("{v:.4e}"));
            }
        }
        out.push('\n');
    }
    let _ = write!(
        out,
        "\nClean baseline: train accuracy {:.4}, mean true softmax {:.6}; test accuracy {:.4}, mean true softmax {:.6}.\n",
        result.clean_train.accuracy,
        result.clean_train.mean_true_softmax,
        result.clean_test.accuracy,
        result.clean_test.mean_true_softmax
    );
    out.push_str(
        "Notes: epsilon is on the 0-255 scale. Every attack is crafted on training views only. \
         Per-image attacks reach test views through the perturbation of the nearest-camera training \
         view of the same object; VIAP uses one perturbation per object. Rows mean/std summarize the \
         cell means over epsilon > 0. Targets are drawn per object, excluding the true label.\n\
         The epsilon = 0 row scores strictly clean images for every family, VIAP included: the random \
         delta initialization is not applied there, so all families share one clean baseline.\n",
    );
    out
}

fn significance_table(result: &SweepResult) -> String {
    let mut out = format!(
        "Two-sample t-tests ({:?} variance), per-view tracked softmax on the test split at epsilon {}.\n\
         Samples: one value per test view; tracked softmax is the true-label probability for untargeted \
         families and the target-label probability for targeted ones.\n\n",
        result.config.ttest_variance, result.config.ttest_epsilon
    );
    let _ = writeln!(
        out,
        "{:>14} {:>12} {:>12} {:>12} {:>12}",
        "pair", "mean_a", "mean_b", "t", "p"
    );
    for r in &result.ttests {
        let _ = writeln!(
            out,
            "{:>14} {:>12.4e} {:>12.4e} {:>12} {:>12}",
            format!("{}|{}", r.family_a.name(), r.family_b.name()),
            r.mean_a,
            r.mean_b,
            r.t.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into()),
            r.p.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "undefined".into()),
        );
    }
    out
}

/// Writes the sweep tables, raw JSON, significance files and sample images.
///
/// Files: `confidence.csv`, `accuracy.csv`, `summary.csv`, `sweep.json`,
/// `table_untargeted.txt`, `table_targeted.txt`, and when tests were run
/// `significance.csv` plus `table_significance.txt`. Images go to `images/`.
pub fn emit_report(result: &SweepResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("confidence.csv"), confidence_csv(result))?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(result))?;
    fs::write(dir.join("summary.csv"), summary_csv(result))?;
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    fs::write(dir.join("sweep.json"), json)?;
    if result.config.families.iter().any(|f| !f.is_targeted()) {
        fs::write(dir.join("table_untargeted.txt"), table(result, false))?;
    }
    if result.config.families.iter().any(|f| f.is_targeted()) {
        fs::write(dir.join("table_targeted.txt"), table(result, true))?;
    }
    if !result.ttests.is_empty() {
        fs::write(dir.join("significance.csv"), significance_csv(&result.ttests))?;
        fs::write(dir.join("table_significance.txt"), significance_table(result))?;
    }
    if !result.samples.is_empty() {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        for s in &result.samples {
            dataset::write_ppm(&images.join(s.file_name()), &s.image)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_fractions() {
        assert_eq!(top1_accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]), 0.5);
        assert_eq!(top1_target_accuracy(&[2, 2], &[2, 2]), 1.0);
        assert!(top1_accuracy(&[], &[]).is_nan());
    }

    #[test]
    fn sample_names() {
        let s = SampleImage {
            family: Some(AttackFamily::ViapTargeted),
            epsilon: 0.5,
            view: "o001v03".into(),
            image: Tensor::zeros(&[1, 1, 3]),
        };
        assert_eq!(s.file_name(), "viap-t_0.5_o001v03.ppm");
        let s = SampleImage {
            family: Some(AttackFamily::Bim),
            epsilon: 5.0,
            ..s
        };
        assert_eq!(s.file_name(), "bim_5_o001v03.ppm");
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig::default().validate().is_ok());
        let dup = SweepConfig {
            epsilons: vec![1.0, 1.0],
            ..SweepConfig::default()
        };
        assert!(dup.validate().is_err());
        let neg = SweepConfig {
            epsilons: vec![-1.0],
            ..SweepConfig::default()
        };
        assert!(neg.validate().is_err());
        let zero_iters = SweepConfig {
            iterations: 0,
            ..SweepConfig::default()
        };
        assert!(zero_iters.validate().is_err());
    }

    #[test]
    fn attack_config_carries_settings() {
        let cfg = SweepConfig {
            iterations: 7,
            literal_step: true,
            ..SweepConfig::default()
        };
        let a = cfg.attack_config(AttackFamily::BimTargeted, 3.0, Some(2), 9);
        assert_eq!((a.iterations, a.target, a.seed, a.literal_step), (7, Some(2), 9, true));
        let f = cfg.attack_config(AttackFamily::Fgsm, 3.0, Some(2), 9);
        assert_eq!((f.iterations, f.target), (1, None));
    }
}
