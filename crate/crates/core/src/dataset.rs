//! Seeded multi-view dataset: objects per class, views per object, and a
//! per-object train/test split of the views.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render, sample_camera, CameraPose, PoseAxis, RenderConfig, ShapeKind, ShapeSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ShapeKind,
    pub albedo: [f64; 3],
}

pub fn default_classes() -> Vec<ClassSpec> {
    let c = |kind: ShapeKind, albedo| ClassSpec {
        name: kind.name().to_string(),
        kind,
        albedo,
    };
    vec![
        c(ShapeKind::Cube, [0.80, 0.30, 0.25]),
        c(ShapeKind::Sphere, [0.30, 0.70, 0.30]),
        c(ShapeKind::Cone, [0.25, 0.35, 0.80]),
        c(ShapeKind::Torus, [0.80, 0.70, 0.20]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: Vec<ClassSpec>,
    pub objects_per_class: usize,
    pub views_per_object: usize,
    /// Views of each object assigned to the train split.
    pub train_views: usize,
    pub seed: u64,
    /// Relative pose deviation applied to every view.
    pub jitter_frac: f64,
    pub jitter_axis: Option<PoseAxis>,
    pub base_polar: f64,
    pub base_radius: f64,
    /// Per-component albedo jitter half-width.
    pub albedo_jitter: f64,
    /// Relative size jitter half-width.
    pub size_jitter: f64,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: default_classes(),
            objects_per_class: 4,
            views_per_object: 10,
            train_views: 7,
            seed: 7,
            jitter_frac: 0.15,
            jitter_axis: None,
            base_polar: PI / 3.0,
            base_radius: 3.0,
            albedo_jitter: 0.1,
            size_jitter: 0.1,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub image: Tensor,
    pub label: usize,
    pub object_id: usize,
    /// Index of the view within its object.
    pub view_id: usize,
    pub pose: CameraPose,
    pub split: Split,
}

impl LabeledView {
    /// Stable identifier used in file names and reports.
    pub fn key(&self) -> String {
        format!("o{:03}v{:02}", self.object_id, self.view_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub object_id: usize,
    pub view_id: usize,
    pub label: usize,
    pub split: Split,
    /// Byte offset of the image payload in the image store.
    pub offset: u64,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub objects: Vec<ShapeSpec>,
    pub records: Vec<ViewRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: Vec<LabeledView>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.manifest.image_shape
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledView> {
        self.views.iter().filter(|v| v.split == split).collect()
    }

    pub fn object_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.views.iter().map(|v| v.object_id).collect();
        ids.dedup();
        ids
    }

    /// Concatenated little-endian f64 payloads in record order.
    pub fn image_store(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in &self.views {
            for x in v.image.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(IMAGES_FILE), self.image_store())?;
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let store = fs::read(dir.join(IMAGES_FILE))?;
        let shape = manifest.image_shape;
        let n = shape.iter().product::<usize>();
        let mut views = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let start = r.offset as usize;
            let end = start + 8 * n;
            let bytes = store.get(start..end).ok_or_else(|| Error::Format {
                what: "image store",
                reason: format!("record o{}v{} out of bounds", r.object_id, r.view_id),
            })?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format {
                    what: "image store",
                    reason: "pixel outside [0, 1]".into(),
                });
            }
            views.push(LabeledView {
                image: Tensor::new(shape.to_vec(), data)?,
                label: r.label,
                object_id: r.object_id,
                view_id: r.view_id,
                pose: r.pose,
                split: r.split,
            });
        }
        Ok(Dataset { manifest, views })
    }
}

/// Renders every view of every object, ordered by (class, object, view).
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.views_per_object < 2 {
        return Err(Error::invalid("need at least two views per object to split"));
    }
    if config.train_views == 0 || config.train_views >= config.views_per_object {
        return Err(Error::invalid(format!(
            "train views {} must lie in [1, {})",
            config.train_views, config.views_per_object
        )));
    }
    if config.classes.len() < 2 || config.objects_per_class == 0 {
        return Err(Error::invalid("need at least two classes and one object per class"));
    }

    struct Job {
        shape: ShapeSpec,
        object_id: usize,
        view_id: usize,
        pose: CameraPose,
        split: Split,
    }
    let mut jobs = Vec::new();
    let mut objects = Vec::new();
    let v = config.views_per_object;
    for (class_id, class) in config.classes.iter().enumerate() {
        for k in 0..config.objects_per_class {
            let object_id = class_id * config.objects_per_class + k;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(object_id as u64);
            let (size, ratio) = class.kind.default_size();
            let mut albedo = class.albedo;
            for a in albedo.iter_mut() {
                *a = (*a + rng.gen_range(-config.albedo_jitter..=config.albedo_jitter)).clamp(0.0, 1.0);
            }
            let shape = ShapeSpec {
                class_id,
                kind: class.kind,
                size: size * (1.0 + rng.gen_range(-config.size_jitter..=config.size_jitter)),
                ratio,
                yaw: rng.gen_range(0.0..TAU),
                albedo,
                seed: rng.gen(),
            };
            let offset = rng.gen_range(0.0..TAU / v as f64);
            let mut order: Vec<usize> = (0..v).collect();
            order.shuffle(&mut rng);
            let mut split = vec![Split::Test; v];
            for &i in &order[..config.train_views] {
                split[i] = Split::Train;
            }
            for (view_id, &view_split) in split.iter().enumerate() {
                let base = CameraPose {
                    theta: config.base_polar,
                    phi: offset + TAU * view_id as f64 / v as f64,
                    r: config.base_radius,
                };
                let pose = sample_camera(base, config.jitter_frac, config.jitter_axis, &mut rng)?;
                jobs.push(Job {
                    shape: shape.clone(),
                    object_id,
                    view_id,
                    pose,
                    split: view_split,
                });
            }
            objects.push(shape);
        }
    }

    let images: Vec<Tensor> = jobs
        .par_iter()
        .map(|j| render(&j.shape, &j.pose, &config.render))
        .collect::<Result<_>>()?;

    let image_shape = [config.render.height, config.render.width, 3];
    let bytes_per_image = 8 * image_shape.iter().product::<usize>() as u64;
    let mut records = Vec::with_capacity(jobs.len());
    let mut views = Vec::with_capacity(jobs.len());
    for (i, (job, image)) in jobs.into_iter().zip(images).enumerate() {
        records.push(ViewRecord {
            object_id: job.object_id,
            view_id: job.view_id,
            label: job.shape.class_id,
            split: job.split,
            offset: i as u64 * bytes_per_image,
            pose: job.pose,
        });
        views.push(LabeledView {
            image,
            label: job.shape.class_id,
            object_id: job.object_id,
            view_id: job.view_id,
            pose: job.pose,
            split: job.split,
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            seed: config.seed,
            class_names: config.classes.iter().map(|c| c.name.clone()).collect(),
            image_shape,
            objects,
            records,
        },
        views,
    })
}

/// Binary PPM (P6) with 8-bit channels.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0), 3],
            actual: s.to_vec(),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, ppm_bytes(image)?)?;
    Ok(())
}
