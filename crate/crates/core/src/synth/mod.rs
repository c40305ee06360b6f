//! Desk-scale benchmark: 64x64 scenes of colored shapes with exact masks,
//! a toy classifier builder and a constructed toy VLM.

mod toy_vlm;

pub use toy_vlm::{build_toy_vlm, detect_concepts, ToyVlm, DEFAULT_VLM_DIM};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ToyCnn, ToyCnnSpec};
use crate::vlm::{apply_template, Category, ConceptText};
use crate::{par, Error, Image, Result};

pub const CANVAS: usize = 64;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
/// Smallest allowed shape area in pixels.
pub const MIN_SHAPE_AREA: usize = 16;
const SHAPE_GAP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 4] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ShapeColor::Red => [220, 40, 40],
            ShapeColor::Green => [40, 190, 60],
            ShapeColor::Blue => [40, 70, 220],
            ShapeColor::Yellow => [230, 210, 40],
        }
    }

    pub fn from_rgb(rgb: [u8; 3]) -> Option<ShapeColor> {
        Self::ALL.into_iter().find(|c| c.rgb() == rgb)
    }

    /// Color paired with a class under [`ClassRule::ColorBiased`].
    pub fn biased_for(kind: ShapeKind) -> ShapeColor {
        Self::ALL[kind.index()]
    }
}

/// One shape: center `(cx, cy)` in pixel coordinates and half-extent `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Shape {
    /// Pixel `(x, y)` is covered when its center lies inside the shape.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let s = self.scale;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            // Apex up, base at the bottom edge of the bounding box.
            ShapeKind::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| self.covers(x, y))
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.scale, self.cy - self.scale, self.cx + self.scale, self.cy + self.scale)
    }

    fn separated_from(&self, other: &Shape) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax1 + SHAPE_GAP <= bx0 || bx1 + SHAPE_GAP <= ax0 || ay1 + SHAPE_GAP <= by0 || by1 + SHAPE_GAP <= ay0
    }
}

/// A scene; `shapes[0]` is the main (largest) shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: [u8; 3],
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn main_shape(&self) -> Option<&Shape> {
        self.shapes.first()
    }
}

/// Renders a scene. Fails when a shape is smaller than [`MIN_SHAPE_AREA`]
/// pixels or two shapes share a pixel.
pub fn render_scene(spec: &SceneSpec) -> Result<(Image, Vec<Array2<bool>>)> {
    let (h, w) = (spec.height, spec.width);
    let masks: Vec<Array2<bool>> = spec.shapes.iter().map(|s| s.mask(h, w)).collect();
    let mut owner = Array2::<Option<usize>>::from_elem((h, w), None);
    for (i, m) in masks.iter().enumerate() {
        let area = m.iter().filter(|&&b| b).count();
        if area < MIN_SHAPE_AREA {
            return Err(Error::config(format!("shape {i} covers {area} px, below {MIN_SHAPE_AREA}")));
        }
        for ((y, x), &b) in m.indexed_iter() {
            if b {
                if let Some(j) = owner[[y, x]] {
                    return Err(Error::config(format!("shapes {j} and {i} overlap")));
                }
                owner[[y, x]] = Some(i);
            }
        }
    }
    let mut image = Image::zeros((3, h, w));
    for ((y, x), o) in owner.indexed_iter() {
        let rgb = match o {
            Some(i) => spec.shapes[*i].color.rgb(),
            None => spec.background,
        };
        for c in 0..3 {
            image[[c, y, x]] = rgb[c] as f64 / 255.0;
        }
    }
    Ok((image, masks))
}

/// How class labels and main-shape colors are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassRule {
    /// Class is the main shape's kind; colors are uniform and class-irrelevant.
    ShapeKind,
    /// Class is still the main shape's kind, but the main shape takes the
    /// class's paired color with probability `correlation`, so color becomes a
    /// shortcut for the label.
    ColorBiased { correlation: f64 },
}

impl Default for ClassRule {
    fn default() -> Self {
        ClassRule::ShapeKind
    }
}

pub fn class_names() -> Vec<String> {
    ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

/// Color concepts followed by shape-kind concepts.
pub fn default_concepts() -> Vec<ConceptText> {
    let colors = ShapeColor::ALL
        .iter()
        .map(|c| apply_template(c.name(), Category::Color));
    let shapes = ShapeKind::ALL
        .iter()
        .map(|k| apply_template(k.name(), Category::Object));
    colors.chain(shapes).collect::<Result<_>>().expect("fixed labels are non-empty")
}

fn concept_masks(spec: &SceneSpec, shape_masks: &[Array2<bool>]) -> BTreeMap<String, Array2<bool>> {
    let mut out: BTreeMap<String, Array2<bool>> = BTreeMap::new();
    for (s, m) in spec.shapes.iter().zip(shape_masks) {
        for name in [s.color.name(), s.kind.name()] {
            out.entry(name.to_string())
                .and_modify(|acc| acc.zip_mut_with(m, |a, &b| *a |= b))
                .or_insert_with(|| m.clone());
        }
    }
    out
}

/// Per-item seed, independent of generation order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn place(rng: &mut ChaCha8Rng, kind: ShapeKind, color: ShapeColor, scale: f64) -> Shape {
    let lo = scale + 1.0;
    let hi = CANVAS as f64 - scale - 1.0;
    Shape {
        kind,
        color,
        cx: rng.random_range(lo..hi),
        cy: rng.random_range(lo..hi),
        scale,
    }
}

/// Scene `index` of a dataset; the main kind cycles so classes are balanced.
pub fn generate_scene(seed: u64, index: usize, rule: ClassRule) -> SceneSpec {
    let scene_seed = derive_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let kind = ShapeKind::ALL[index % ShapeKind::ALL.len()];
    let uniform_color = |rng: &mut ChaCha8Rng| ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())];
    let color = match rule {
        ClassRule::ShapeKind => uniform_color(&mut rng),
        ClassRule::ColorBiased { correlation } => {
            if rng.random::<f64>() < correlation {
                ShapeColor::biased_for(kind)
            } else {
                uniform_color(&mut rng)
            }
        }
    };
    let main_scale = rng.random_range(10.0..15.0);
    let mut shapes = vec![place(&mut rng, kind, color, main_scale)];
    let n_distractors = rng.random_range(0..=2);
    for _ in 0..n_distractors {
        let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let color = uniform_color(&mut rng);
        let scale = rng.random_range(4.5..7.0);
        for _ in 0..50 {
            let s = place(&mut rng, kind, color, scale);
            if shapes.iter().all(|o| s.separated_from(o)) {
                shapes.push(s);
                break;
            }
        }
    }
    SceneSpec {
        height: CANVAS,
        width: CANVAS,
        background: BACKGROUND,
        shapes,
        seed: scene_seed,
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub spec: SceneSpec,
    pub image: Image,
    pub label: usize,
    /// Masks of concepts present in the scene, keyed by concept label.
    pub masks: BTreeMap<String, Array2<bool>>,
}

impl Sample {
    pub fn from_spec(id: String, spec: SceneSpec) -> Result<Self> {
        let (image, shape_masks) = render_scene(&spec)?;
        let label = spec
            .main_shape()
            .ok_or_else(|| Error::config("scene without shapes"))?
            .kind
            .index();
        let masks = concept_masks(&spec, &shape_masks);
        Ok(Self {
            id,
            spec,
            image,
            label,
            masks,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seed-deterministic 80/10/10 split of `n` indices.
pub fn split_indices(n: usize, seed: u64) -> Split {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let n_train = (n * 8 + 5) / 10;
    let n_val = ((n + 5) / 10).min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub class_rule: ClassRule,
    pub class_names: Vec<String>,
    pub concepts: Vec<ConceptText>,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn images(&self, idx: &[usize]) -> Vec<Image> {
        idx.iter().map(|&i| self.samples[i].image.clone()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Mean RGB over the given samples.
    pub fn mean_color(&self, idx: &[usize]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for &i in idx {
            let img = &self.samples[i].image;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.index_axis(ndarray::Axis(0), c).sum();
            }
            n += img.len() / 3;
        }
        acc.map(|a| if n > 0 { a / n as f64 } else { 0.0 })
    }
}

/// Generates `count` scenes with the default concept set.
pub fn generate_dataset(count: usize, seed: u64, rule: ClassRule) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    if let ClassRule::ColorBiased { correlation } = rule {
        if !(0.0..=1.0).contains(&correlation) {
            return Err(Error::config(format!("correlation {correlation} outside [0, 1]")));
        }
    }
    let samples = par::map_range(count, |i| {
        Sample::from_spec(format!("{i:05}"), generate_scene(seed, i, rule))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        class_rule: rule,
        class_names: class_names(),
        concepts: default_concepts(),
        samples,
        split: split_indices(count, seed),
    })
}

/// Default classifier spec for the benchmark.
pub fn default_classifier_spec(seed: u64) -> ToyCnnSpec {
    ToyCnnSpec {
        input_size: CANVAS,
        channels: vec![8, 16, 32],
        num_classes: ShapeKind::ALL.len(),
        activation: Default::default(),
        seed,
    }
}

/// Builds an untrained toy classifier with 2 to 4 stages.
pub fn build_toy_classifier(spec: &ToyCnnSpec) -> Result<ToyCnn> {
    if !(2..=4).contains(&spec.channels.len()) {
        return Err(Error::config(format!(
            "toy classifier needs 2 to 4 stages, got {}",
            spec.channels.len()
        )));
    }
    ToyCnn::new(spec.clone())
}

pub fn read_png_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_png_image(image: &Image, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| to_u8(image[[c, y as usize, x as usize]])))
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub count: usize,
    pub class_rule: ClassRule,
    pub class_names: Vec<String>,
    pub split: SplitIds,
    /// SHA-256 of every other file, keyed by relative path.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the `files` table.
    pub content_hash: String,
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
    Ok(())
}

fn hash_file(root: &Path, rel: &str, files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
    Ok(())
}

fn json_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain values serialize");
    s.push('\n');
    s.into_bytes()
}

/// Writes the dataset under `dir`:
///
/// ```text
/// images/<id>.png
/// masks/<concept>/<id>.png   (present concepts only)
/// labels.json                {id: class index}
/// concepts.json              [{label, category}]
/// scenes.json                [SceneSpec]
/// manifest.json
/// ```
///
/// Files go to a sibling staging directory first, so a failure leaves `dir`
/// untouched. An existing dataset at `dir` is replaced.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        return Err(Error::config(format!("parent of {} does not exist", dir.display())));
    }
    if dir.exists() && !dir.join("manifest.json").is_file() {
        let empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            return Err(Error::config(format!(
                "{} exists and is not a dataset directory",
                dir.display()
            )));
        }
    }
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    let result = write_dataset_into(dataset, &staging);
    match result {
        Ok(manifest) => {
            if dir.exists() {
                std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_dataset_into(dataset: &Dataset, root: &Path) -> Result<Manifest> {
    let mkdir = |p: PathBuf| std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e));
    mkdir(root.join("images"))?;
    for c in &dataset.concepts {
        mkdir(root.join("masks").join(&c.label))?;
    }
    let written = par::map(&dataset.samples, |s| -> Result<Vec<String>> {
        let mut rels = vec![format!("images/{}.png", s.id)];
        write_png_image(&s.image, &root.join(&rels[0]))?;
        for (concept, mask) in &s.masks {
            let rel = format!("masks/{concept}/{}.png", s.id);
            write_mask_png(mask, &root.join(&rel))?;
            rels.push(rel);
        }
        Ok(rels)
    });
    let mut files = BTreeMap::new();
    for rels in written {
        for rel in rels? {
            hash_file(root, &rel, &mut files)?;
        }
    }
    let labels: BTreeMap<&str, usize> = dataset.samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
    write_file(root, "labels.json", &json_pretty(&labels), &mut files)?;
    let concepts = crate::vlm::concept_set_json(&dataset.concepts) + "\n";
    write_file(root, "concepts.json", concepts.as_bytes(), &mut files)?;
    let specs: Vec<&SceneSpec> = dataset.samples.iter().map(|s| &s.spec).collect();
    write_file(root, "scenes.json", &json_pretty(&specs), &mut files)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].id.clone()).collect();
    let content_hash = hex::encode(Sha256::digest(serde_json::to_vec(&files).expect("map serializes")));
    let manifest = Manifest {
        schema_version: 1,
        seed: dataset.seed,
        count: dataset.samples.len(),
        class_rule: dataset.class_rule,
        class_names: dataset.class_names.clone(),
        split: SplitIds {
            train: ids(&dataset.split.train),
            val: ids(&dataset.split.val),
            test: ids(&dataset.split.test),
        },
        files,
        content_hash,
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, json_pretty(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Loads a dataset written by [`write_dataset`]. Images and masks are read
/// from their PNG files.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let labels: BTreeMap<String, usize> = read_json(&dir.join("labels.json"))?;
    let specs: Vec<SceneSpec> = read_json(&dir.join("scenes.json"))?;
    let concepts = crate::vlm::load_concept_set(&dir.join("concepts.json"))?;
    if specs.len() != manifest.count || labels.len() != manifest.count {
        return Err(Error::Dimension(format!(
            "{}: manifest lists {} scenes, found {} specs and {} labels",
            dir.display(),
            manifest.count,
            specs.len(),
            labels.len()
        )));
    }
    let ids: Vec<String> = (0..manifest.count).map(|i| format!("{i:05}")).collect();
    let samples = par::map_range(manifest.count, |i| -> Result<Sample> {
        let id = &ids[i];
        let image = read_png_image(&dir.join(format!("images/{id}.png")))?;
        let label = *labels
            .get(id)
            .ok_or_else(|| Error::config(format!("no label for {id}")))?;
        let mut masks = BTreeMap::new();
        for c in &concepts {
            let p = dir.join(format!("masks/{}/{id}.png", c.label));
            if p.is_file() {
                masks.insert(c.label.clone(), read_mask_png(&p)?);
            }
        }
        Ok(Sample {
            id: id.clone(),
            spec: specs[i].clone(),
            image,
            label,
            masks,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::config(format!("split names unknown id {n}")))
            })
            .collect()
    };
    Ok(Dataset {
        seed: manifest.seed,
        class_rule: manifest.class_rule,
        class_names: manifest.class_names.clone(),
        concepts,
        split: Split {
            train: resolve(&manifest.split.train)?,
            val: resolve(&manifest.split.val)?,
            test: resolve(&manifest.split.test)?,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(30, 7, ClassRule::ShapeKind).unwrap();
        let b = generate_dataset(30, 7, ClassRule::ShapeKind).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.spec, y.spec);
            assert_eq!(x.image, y.image);
            assert_eq!(x.masks, y.masks);
        }
        assert_eq!(a.split, b.split);
        let c = generate_dataset(30, 8, ClassRule::ShapeKind).unwrap();
        assert_ne!(a.samples[0].spec, c.samples[0].spec);
    }

    #[test]
    fn single_scene_masks_partition() {
        let d = generate_dataset(1, 3, ClassRule::ShapeKind).unwrap();
        assert_eq!(d.split.train, vec![0]);
        let s = &d.samples[0];
        let (_, shape_masks) = render_scene(&s.spec).unwrap();
        let colors: Vec<&Array2<bool>> = ShapeColor::ALL
            .iter()
            .filter_map(|c| s.masks.get(c.name()))
            .collect();
        let kinds: Vec<&Array2<bool>> = ShapeKind::ALL
            .iter()
            .filter_map(|k| s.masks.get(k.name()))
            .collect();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let covered = shape_masks.iter().filter(|m| m[[y, x]]).count();
                assert!(covered <= 1);
                assert_eq!(colors.iter().filter(|m| m[[y, x]]).count(), covered);
                assert_eq!(kinds.iter().filter(|m| m[[y, x]]).count(), covered);
                let bg = (0..3).all(|c| s.image[[c, y, x]] == BACKGROUND[c] as f64 / 255.0);
                assert_eq!(bg, covered == 0);
            }
        }
    }

    #[test]
    fn masks_match_rendered_pixels() {
        let d = generate_dataset(60, 11, ClassRule::ShapeKind).unwrap();
        for s in &d.samples {
            for color in ShapeColor::ALL {
                let rgb = color.rgb();
                let from_pixels = Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| {
                    (0..3).all(|c| to_u8(s.image[[c, y, x]]) == rgb[c])
                });
                let expected = s
                    .masks
                    .get(color.name())
                    .cloned()
                    .unwrap_or_else(|| Array2::from_elem((CANVAS, CANVAS), false));
                assert_eq!(from_pixels, expected);
            }
        }
    }

    #[test]
    fn main_shape_is_largest_and_classes_balanced() {
        let d = generate_dataset(300, 5, ClassRule::ShapeKind).unwrap();
        let mut counts = [0usize; 3];
        for s in &d.samples {
            counts[s.label] += 1;
            let (_, m) = render_scene(&s.spec).unwrap();
            let areas: Vec<usize> = m.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
            assert!(areas[1..].iter().all(|&a| a < areas[0]));
            assert!(areas.iter().all(|&a| a >= MIN_SHAPE_AREA));
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn split_proportions() {
        let s = split_indices(2000, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1600, 200, 200));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }

    #[test]
    fn color_mask_fractions() {
        let d = generate_dataset(2000, 0, ClassRule::ShapeKind).unwrap();
        let mut total = 0;
        let mut inside = 0;
        for s in &d.samples {
            for c in ShapeColor::ALL {
                if let Some(m) = s.masks.get(c.name()) {
                    let f = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
                    total += 1;
                    if f > 0.01 && f < 0.6 {
                        inside += 1;
                    }
                }
            }
        }
        assert!(inside as f64 >= 0.95 * total as f64, "{inside}/{total}");
    }

    #[test]
    fn biased_rule_correlates_color() {
        let d = generate_dataset(300, 2, ClassRule::ColorBiased { correlation: 1.0 }).unwrap();
        for s in &d.samples {
            let main = s.spec.main_shape().unwrap();
            assert_eq!(main.color, ShapeColor::biased_for(main.kind));
        }
        assert!(generate_dataset(3, 2, ClassRule::ColorBiased { correlation: 1.5 }).is_err());
    }

    #[test]
    fn overlapping_shapes_rejected() {
        let s = Shape {
            kind: ShapeKind::Square,
            color: ShapeColor::Red,
            cx: 20.0,
            cy: 20.0,
            scale: 6.0,
        };
        let spec = SceneSpec {
            height: CANVAS,
            width: CANVAS,
            background: BACKGROUND,
            shapes: vec![s, Shape { cx: 25.0, ..s }],
            seed: 0,
        };
        assert!(render_scene(&spec).is_err());
        let tiny = SceneSpec {
            shapes: vec![Shape { scale: 1.0, ..s }],
            ..spec
        };
        assert!(render_scene(&tiny).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let d = generate_dataset(12, 4, ClassRule::ShapeKind).unwrap();
        let m1 = write_dataset(&d, &out).unwrap();
        let back = load_dataset(&out).unwrap();
        assert_eq!(back.split, d.split);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.label, b.label);
        }
        let m2 = write_dataset(&d, &out).unwrap();
        assert_eq!(m1.content_hash, m2.content_hash);
        let bad = dir.path().join("missing/ds");
        assert!(write_dataset(&d, &bad).is_err());
        assert!(!bad.exists());
    }

    #[test]
    fn classifier_stage_bounds() {
        let mut spec = default_classifier_spec(0);
        assert_eq!(build_toy_classifier(&spec).unwrap().spec().channels.len(), 3);
        spec.channels = vec![4];
        assert!(build_toy_classifier(&spec).is_err());
        spec.channels = vec![4; 5];
        assert!(build_toy_classifier(&spec).is_err());
    }
}
