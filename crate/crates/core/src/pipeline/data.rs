//! Synthetic scenes of deformable objects.
//!
//! Every class is a fixed arrangement of primitives drawn from a small shared
//! vocabulary (discs and bars), so classes reuse the same visual patterns and
//! differ mainly in where those patterns sit and how they are allowed to move.
//! Each part jitters independently with a class-specific, anisotropic
//! amplitude. Scenes carry a background theme (a stripe texture) that
//! correlates with the class of their first object.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Primitive {
    Disc,
    HBar,
    VBar,
}

/// One part: primitive, canvas-relative centre `(u, v)` and jitter amplitude.
#[derive(Debug, Clone, Copy)]
struct Part {
    shape: Primitive,
    u: f64,
    v: f64,
    ju: f64,
    jv: f64,
}

const fn part(shape: Primitive, u: f64, v: f64, ju: f64, jv: f64) -> Part {
    Part { shape, u, v, ju, jv }
}

use Primitive::{Disc, HBar, VBar};

// Classes come in pairs with the same parts in the same place; within a pair
// only the direction in which the parts move differs.
const TEMPLATES: [[Part; 3]; 8] = [
    // Two discs over a bar; discs slide horizontally.
    [part(Disc, 0.3, 0.3, 0.14, 0.02), part(Disc, 0.7, 0.3, 0.14, 0.02), part(HBar, 0.5, 0.75, 0.03, 0.03)],
    // Same layout; discs slide vertically.
    [part(Disc, 0.3, 0.3, 0.02, 0.14), part(Disc, 0.7, 0.3, 0.02, 0.14), part(HBar, 0.5, 0.75, 0.03, 0.03)],
    // A disc between two posts; the disc bobs vertically.
    [part(VBar, 0.2, 0.5, 0.02, 0.03), part(VBar, 0.8, 0.5, 0.02, 0.03), part(Disc, 0.5, 0.5, 0.02, 0.2)],
    // Same layout; the disc swings horizontally.
    [part(VBar, 0.2, 0.5, 0.02, 0.03), part(VBar, 0.8, 0.5, 0.02, 0.03), part(Disc, 0.5, 0.5, 0.16, 0.02)],
    // Disc over two bars.
    [part(Disc, 0.5, 0.25, 0.1, 0.1), part(HBar, 0.5, 0.55, 0.02, 0.04), part(HBar, 0.5, 0.82, 0.02, 0.04)],
    // A "T" with a trailing disc.
    [part(HBar, 0.5, 0.25, 0.03, 0.02), part(VBar, 0.5, 0.65, 0.02, 0.05), part(Disc, 0.2, 0.8, 0.06, 0.06)],
    // Diagonal chain of discs.
    [part(Disc, 0.25, 0.25, 0.05, 0.05), part(Disc, 0.5, 0.5, 0.05, 0.05), part(Disc, 0.75, 0.75, 0.05, 0.05)],
    // Bar corner with a trailing disc.
    [part(VBar, 0.3, 0.5, 0.02, 0.06), part(HBar, 0.7, 0.3, 0.06, 0.02), part(Disc, 0.7, 0.75, 0.08, 0.02)],
];

pub const MAX_CLASSES: usize = TEMPLATES.len();

pub fn class_name(k: usize) -> String {
    format!("class{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub image_size: usize,
    /// Square object sizes to draw from, in pixels.
    pub object_sizes: Vec<usize>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Multiplier on every class's part jitter; 0 disables deformation.
    pub deformation: f64,
    /// Probability that a scene's theme matches its first object's class.
    pub theme_affinity: f64,
    pub noise: f64,
    /// Upper bound on loose primitives scattered outside the objects.
    pub clutter: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn toy(classes: usize, train_scenes: usize, val_scenes: usize, seed: u64) -> Self {
        Self {
            classes,
            train_scenes,
            val_scenes,
            image_size: 48,
            object_sizes: vec![16, 20, 24],
            min_objects: 1,
            max_objects: 2,
            deformation: 1.0,
            theme_affinity: 0.8,
            noise: 0.05,
            clutter: 3,
            seed,
        }
    }

    /// Background themes; one per class.
    pub fn themes(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return err(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.train_scenes < 1 {
            return err("at least one scene required".into());
        }
        if self.object_sizes.is_empty() || self.object_sizes.contains(&0) {
            return err("object sizes must be positive".into());
        }
        let largest = *self.object_sizes.iter().max().unwrap();
        if largest * self.max_objects.max(1) > self.image_size {
            return err(format!(
                "{} objects of size {largest} do not fit a {}px image",
                self.max_objects, self.image_size
            ));
        }
        if self.min_objects > self.max_objects {
            return err("min_objects exceeds max_objects".into());
        }
        if !(self.deformation >= 0.0) || !(0.0..=1.0).contains(&self.theme_affinity) || !(self.noise >= 0.0) {
            return err("deformation, theme affinity and noise out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub objects: Vec<Annotation>,
    pub theme: usize,
}

impl SyntheticScene {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

impl Dataset {
    /// First half of the validation scenes: trains post-hoc components.
    pub fn val1(&self) -> &[SyntheticScene] {
        &self.val[..self.val.len() / 2]
    }

    /// Second half: selection and evaluation.
    pub fn val2(&self) -> &[SyntheticScene] {
        &self.val[self.val.len() / 2..]
    }
}

/// Renders one object of class `class` on an `size×size` canvas (zero
/// background, parts at 1.0).
pub fn render_object(class: usize, size: usize, deformation: f64, rng: &mut impl Rng) -> Tensor {
    let mut canvas = Tensor::zeros(&[1, size, size]);
    let s = size as f64;
    for p in &TEMPLATES[class] {
        let cu = p.u + deformation * p.ju * rng.gen_range(-1.0..=1.0);
        let cv = p.v + deformation * p.jv * rng.gen_range(-1.0..=1.0);
        draw_primitive(&mut canvas, p.shape, cu * s, cv * s, s, |_, _| true);
    }
    canvas
}

/// Paints a primitive scaled for an object of side `s` centred at `(cx, cy)`
/// onto every pixel `allow` accepts.
fn draw_primitive(canvas: &mut Tensor, shape: Primitive, cx: f64, cy: f64, s: f64, allow: impl Fn(usize, usize) -> bool) {
    let (h, w) = (canvas.shape()[1], canvas.shape()[2]);
    let (hw, hh) = match shape {
        Disc => (0.12 * s, 0.12 * s),
        HBar => (0.22 * s, 0.06 * s),
        VBar => (0.06 * s, 0.22 * s),
    };
    let i0 = (cy - hh - 1.0).max(0.0) as usize;
    let j0 = (cx - hw - 1.0).max(0.0) as usize;
    let i1 = ((cy + hh + 1.0).max(0.0) as usize).min(h);
    let j1 = ((cx + hw + 1.0).max(0.0) as usize).min(w);
    for i in i0..i1 {
        for j in j0..j1 {
            let (x, y) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let inside = match shape {
                Disc => x * x + y * y <= hw * hw,
                HBar | VBar => x.abs() <= hw && y.abs() <= hh,
            };
            if inside && allow(i, j) {
                *canvas.at3_mut(0, i, j) = 1.0;
            }
        }
    }
}

fn background(theme: usize, size: usize, rng: &mut impl Rng) -> Tensor {
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = 0.2;
    Tensor::from_fn(&[1, size, size], |k| {
        let (i, j) = ((k / size) as f64, (k % size) as f64);
        let t = match theme % 4 {
            0 => i * 0.8,
            1 => j * 0.8,
            2 => (i + j) * 0.55,
            _ => (i - j) * 0.55,
        };
        // Themes beyond four repeat the orientation at double frequency.
        let t = if theme >= 4 { 2.0 * t } else { t };
        amp * (t + phase).sin()
    })
}

fn place(sizes: &[usize], image: usize, rng: &mut impl Rng) -> Option<Vec<BoundingBox>> {
    let mut placed: Vec<BoundingBox> = Vec::new();
    for &s in sizes {
        let mut ok = None;
        for _ in 0..200 {
            let b = BoundingBox::new(rng.gen_range(0..=image - s), rng.gen_range(0..=image - s), s, s);
            if placed.iter().all(|p| p.intersection(&b) == 0) {
                ok = Some(b);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

fn generate_split(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<SyntheticScene> {
    let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(spec.min_objects..=spec.max_objects)).collect();
    let total: usize = counts.iter().sum();
    // Balanced by construction: a shuffled pool with each class equally often.
    let mut pool: Vec<usize> = (0..total).map(|i| i % spec.classes).collect();
    pool.shuffle(rng);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut next = 0;
    counts
        .into_iter()
        .map(|count| {
            let classes = &pool[next..next + count];
            next += count;
            let theme = match classes.first() {
                Some(&c) if rng.gen_bool(spec.theme_affinity) => c,
                _ => rng.gen_range(0..spec.themes()),
            };
            let sizes: Vec<usize> = (0..count).map(|_| *spec.object_sizes.choose(rng).unwrap()).collect();
            let boxes = loop {
                if let Some(b) = place(&sizes, spec.image_size, rng) {
                    break b;
                }
            };
            let mut image = background(theme, spec.image_size, rng);
            let mut objects = Vec::with_capacity(count);
            for (&class, bbox) in classes.iter().zip(boxes) {
                let obj = render_object(class, bbox.w, spec.deformation, rng);
                for i in 0..bbox.h {
                    for j in 0..bbox.w {
                        let v = obj.at3(0, i, j);
                        if v > 0.0 {
                            *image.at3_mut(0, bbox.y + i, bbox.x + j) = v;
                        }
                    }
                }
                objects.push(Annotation { class, bbox });
            }
            let n_clutter = rng.gen_range(0..=spec.clutter);
            for _ in 0..n_clutter {
                let shape = *[Disc, HBar, VBar].choose(rng).unwrap();
                let size = *spec.object_sizes.choose(rng).unwrap() as f64;
                let cx = rng.gen_range(0.0..spec.image_size as f64);
                let cy = rng.gen_range(0.0..spec.image_size as f64);
                draw_primitive(&mut image, shape, cx, cy, size, |i, j| {
                    objects.iter().all(|o: &Annotation| {
                        let b = o.bbox;
                        i < b.y || i >= b.y + b.h || j < b.x || j >= b.x + b.w
                    })
                });
            }
            if spec.noise > 0.0 {
                image.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            SyntheticScene { image, objects, theme }
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, spec.train_scenes, &mut rng);
    let val = generate_split(spec, spec.val_scenes, &mut rng);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Bilinear resample of `bbox` from a single-channel image to `out×out`.
pub fn crop_resize(image: &Tensor, bbox: &BoundingBox, out: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let sx = bbox.w as f64 / out as f64;
    let sy = bbox.h as f64 / out as f64;
    Tensor::from_fn(&[1, out, out], |k| {
        let (oi, oj) = (k / out, k % out);
        let fy = (bbox.y as f64 + (oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = (bbox.x as f64 + (oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = image.at3(0, y0, x0) * (1.0 - tx) + image.at3(0, y0, x1) * tx;
        let bottom = image.at3(0, y1, x0) * (1.0 - tx) + image.at3(0, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub themes: usize,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub scene: String,
    pub split: String,
    pub theme: usize,
    pub objects: Vec<Annotation>,
}

fn scene_id(split: &str, i: usize) -> String {
    format!("{split}_{i:05}")
}

/// Writes `manifest.json`, `annotations.json` and `scenes/<id>.tensor`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir)?;
    let mut annotations = Vec::new();
    let mut ids = [Vec::new(), Vec::new()];
    for (si, (split, scenes)) in [("train", &ds.train), ("val", &ds.val)].into_iter().enumerate() {
        for (i, scene) in scenes.iter().enumerate() {
            let id = scene_id(split, i);
            save_tensor(&scene.image, scenes_dir.join(format!("{id}.tensor")))?;
            annotations.push(SceneAnnotation {
                scene: id.clone(),
                split: split.to_string(),
                theme: scene.theme,
                objects: scene.objects.clone(),
            });
            ids[si].push(id);
        }
    }
    let [train, val] = ids;
    let manifest = Manifest {
        class_names: (0..ds.spec.classes).map(class_name).collect(),
        themes: ds.spec.themes(),
        seed: ds.spec.seed,
        spec: ds.spec.clone(),
        train,
        val,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&annotations)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let annotations: Vec<SceneAnnotation> = serde_json::from_str(&fs::read_to_string(dir.join("annotations.json"))?)?;
    let load = |ids: &[String]| -> Result<Vec<SyntheticScene>> {
        ids.iter()
            .map(|id| {
                let ann = annotations
                    .iter()
                    .find(|a| &a.scene == id)
                    .ok_or_else(|| Error::Format(format!("no annotation for scene {id}")))?;
                let image = load_tensor(dir.join("scenes").join(format!("{id}.tensor")))?;
                let (_, h, w) = image.dims3()?;
                if ann.objects.iter().any(|o| !o.bbox.fits(w, h) || o.class >= manifest.spec.classes) {
                    return Err(Error::Format(format!("annotation out of range in scene {id}")));
                }
                Ok(SyntheticScene {
                    image,
                    objects: ann.objects.clone(),
                    theme: ann.theme,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        spec: manifest.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_deformation_instances_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in 0..MAX_CLASSES {
            let a = render_object(class, 20, 0.0, &mut rng);
            let b = render_object(class, 20, 0.0, &mut rng);
            assert_eq!(a, b);
            assert!(a.max_value() == 1.0);
        }
        let a = render_object(0, 20, 1.0, &mut rng);
        let b = render_object(0, 20, 1.0, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = DatasetSpec::toy(3, 10, 4, 9);
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    }

    #[test]
    fn classes_balanced() {
        let ds = generate_dataset(&DatasetSpec::toy(4, 200, 10, 3)).unwrap();
        let mut counts = [0usize; 4];
        ds.train.iter().flat_map(|s| &s.objects).for_each(|o| counts[o.class] += 1);
        let mean = counts.iter().sum::<usize>() as f64 / 4.0;
        for c in counts {
            assert!((c as f64 - mean).abs() <= 0.1 * mean, "{counts:?}");
        }
    }

    #[test]
    fn boxes_inside_and_disjoint() {
        let ds = generate_dataset(&DatasetSpec::toy(4, 50, 10, 4)).unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            for (i, a) in s.objects.iter().enumerate() {
                assert!(a.bbox.fits(48, 48));
                for b in &s.objects[i + 1..] {
                    assert_eq!(a.bbox.intersection(&b.bbox), 0);
                }
            }
        }
    }

    #[test]
    fn spec_errors() {
        let mut spec = DatasetSpec::toy(4, 0, 10, 1);
        assert!(matches!(generate_dataset(&spec), Err(Error::Spec(_))));
        spec.train_scenes = 5;
        spec.object_sizes = vec![40];
        assert!(matches!(generate_dataset(&spec), Err(Error::Spec(_))));
        assert!(generate_dataset(&DatasetSpec::toy(1, 5, 5, 1)).is_err());
    }

    #[test]
    fn crop_identity_when_sizes_match() {
        let img = Tensor::from_fn(&[1, 10, 10], |k| k as f64);
        let c = crop_resize(&img, &BoundingBox::new(2, 3, 4, 4), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert!((c.at3(0, i, j) - img.at3(0, 3 + i, 2 + j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DatasetSpec::toy(3, 4, 2, 5)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
