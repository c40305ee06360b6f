use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{ShapeColor, ShapeKind, MIN_SHAPE_AREA};
use crate::vlm::{l2_normalize, ConceptText, VisionLanguageModel};
use crate::{Error, Image, Result};

pub const DEFAULT_VLM_DIM: usize = 64;

/// Constructed VLM. Each vocabulary entry owns one row of a random
/// orthonormal matrix; an image embeds as the normalized sum of the rows of
/// the concepts visible in it, plus a noise vector of norm `epsilon` seeded
/// from the pixel content.
#[derive(Debug, Clone)]
pub struct ToyVlm {
    id: String,
    vocabulary: Vec<String>,
    text: Array2<f64>,
    epsilon: f64,
    seed: u64,
}

pub fn build_toy_vlm(vocabulary: &[String], seed: u64, epsilon: f64) -> Result<ToyVlm> {
    let d = DEFAULT_VLM_DIM;
    if vocabulary.is_empty() || vocabulary.len() > d {
        return Err(Error::config(format!(
            "toy VLM vocabulary must hold 1 to {d} entries, got {}",
            vocabulary.len()
        )));
    }
    let unique: BTreeSet<&String> = vocabulary.iter().collect();
    if unique.len() != vocabulary.len() {
        return Err(Error::config("toy VLM vocabulary has duplicates"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = Array2::<f64>::zeros((vocabulary.len(), d));
    for i in 0..vocabulary.len() {
        // Gram-Schmidt, redrawing in the (measure-zero) degenerate case.
        loop {
            let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for j in 0..i {
                let r = text.row(j);
                let p = v.dot(&r);
                v.scaled_add(-p, &r);
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-6 {
                text.row_mut(i).assign(&(v / n));
                break;
            }
        }
    }
    for i in 0..vocabulary.len() {
        for j in 0..i {
            let dot = text.row(i).dot(&text.row(j)).abs();
            if dot > 0.1 {
                return Err(Error::Dimension(format!("text vectors {i} and {j} overlap by {dot}")));
            }
        }
    }
    Ok(ToyVlm {
        id: format!("toy_vlm:d{d}:seed{seed}:eps{epsilon}"),
        vocabulary: vocabulary.to_vec(),
        text,
        epsilon,
        seed,
    })
}

impl ToyVlm {
    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn text_vector(&self, label: &str) -> Option<Array1<f64>> {
        self.vocabulary
            .iter()
            .position(|v| v == label)
            .map(|i| self.text.row(i).to_owned())
    }

    fn noise(&self, image: &Image) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in image.iter() {
            h.update([to_u8(*v)]);
        }
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let v: Array1<f64> = (0..self.text.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&v) * self.epsilon
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Concept labels visible in an image: palette colors covering at least
/// [`MIN_SHAPE_AREA`] pixels, and shape kinds of same-colored 4-connected
/// components classified by how much of their bounding box they fill.
pub fn detect_concepts(image: &Image) -> BTreeSet<&'static str> {
    let (_, h, w) = image.dim();
    let color_at = Array2::from_shape_fn((h, w), |(y, x)| {
        ShapeColor::from_rgb(std::array::from_fn(|c| to_u8(image[[c, y, x]])))
    });
    let mut found = BTreeSet::new();
    let mut seen = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let Some(color) = color_at[[y0, x0]] else { continue };
            if seen[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            stack.push((y0, x0));
            let (mut n, mut ymin, mut ymax, mut xmin, mut xmax) = (0usize, y0, y0, x0, x0);
            while let Some((y, x)) = stack.pop() {
                n += 1;
                ymin = ymin.min(y);
                ymax = ymax.max(y);
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && !seen[[ny, nx]] && color_at[[ny, nx]] == Some(color) {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if n < MIN_SHAPE_AREA {
                continue;
            }
            found.insert(color.name());
            let fill = n as f64 / ((ymax - ymin + 1) * (xmax - xmin + 1)) as f64;
            let kind = if fill > 0.92 {
                ShapeKind::Square
            } else if fill > 0.66 {
                ShapeKind::Circle
            } else {
                ShapeKind::Triangle
            };
            found.insert(kind.name());
        }
    }
    found
}

impl VisionLanguageModel for ToyVlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.text.ncols()
    }

    fn encode_text(&self, text: &ConceptText) -> Result<Array1<f64>> {
        self.text_vector(&text.label).ok_or_else(|| {
            Error::config(format!("concept {:?} is not in the toy VLM vocabulary", text.label))
        })
    }

    fn encode_image(&self, image: &Image) -> Result<Array1<f64>> {
        if image.dim().0 != 3 {
            return Err(Error::InputShape {
                expected: format!("[3, {}, {}]", image.dim().1, image.dim().2),
                got: format!("{:?}", image.shape()),
            });
        }
        let present = detect_concepts(image);
        let mut sum = Array1::zeros(self.dim());
        for (i, label) in self.vocabulary.iter().enumerate() {
            if present.contains(label.as_str()) {
                sum += &self.text.row(i);
            }
        }
        let mut e = l2_normalize(&sum);
        if self.epsilon > 0.0 {
            e += &self.noise(image);
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_concepts, generate_dataset, ClassRule};
    use crate::vlm::{embed, vlm_similarity, EmbedInput};

    fn vocab() -> Vec<String> {
        default_concepts().into_iter().map(|c| c.label).collect()
    }

    #[test]
    fn text_vectors_orthonormal() {
        let v = build_toy_vlm(&vocab(), 3, 0.05).unwrap();
        for a in 0..v.text.nrows() {
            for b in 0..v.text.nrows() {
                let d = v.text.row(a).dot(&v.text.row(b));
                if a == b {
                    assert!((d - 1.0).abs() < 1e-12);
                } else {
                    assert!(d.abs() <= 0.1);
                }
            }
        }
    }

    #[test]
    fn vocabulary_limits() {
        let big: Vec<String> = (0..65).map(|i| format!("c{i}")).collect();
        assert!(build_toy_vlm(&big, 0, 0.0).is_err());
        assert!(build_toy_vlm(&big[..64], 0, 0.0).is_ok());
        assert!(build_toy_vlm(&["a".into(), "a".into()], 0, 0.0).is_err());
        assert!(build_toy_vlm(&vocab(), 0, -1.0).is_err());
    }

    #[test]
    fn red_maps_to_its_row_and_is_deterministic() {
        let v = build_toy_vlm(&vocab(), 9, 0.05).unwrap();
        let red = &default_concepts()[0];
        let e = embed(&v, EmbedInput::Text(red)).unwrap();
        assert_eq!(e.values, v.text.row(0).to_owned());
        let d = generate_dataset(2, 1, ClassRule::ShapeKind).unwrap();
        let a = v.encode_image(&d.samples[0].image).unwrap();
        let b = v.encode_image(&d.samples[0].image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detection_recovers_present_concepts() {
        let d = generate_dataset(400, 21, ClassRule::ShapeKind).unwrap();
        for s in &d.samples {
            let truth: BTreeSet<&str> = s.masks.keys().map(|k| k.as_str()).collect();
            assert_eq!(detect_concepts(&s.image), truth, "scene {}", s.id);
        }
    }

    #[test]
    fn zero_noise_is_normalized_sum() {
        let v = build_toy_vlm(&vocab(), 2, 0.0).unwrap();
        let d = generate_dataset(20, 6, ClassRule::ShapeKind).unwrap();
        for s in &d.samples {
            let e = v.encode_image(&s.image).unwrap();
            let mut sum = Array1::zeros(DEFAULT_VLM_DIM);
            for k in s.masks.keys() {
                sum += &v.text_vector(k).unwrap();
            }
            let want = l2_normalize(&sum);
            assert!(e.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn present_beats_absent_with_margin() {
        let concepts = default_concepts();
        let v = build_toy_vlm(&vocab(), 4, 0.05).unwrap();
        let texts: Vec<_> = concepts
            .iter()
            .map(|c| embed(&v, EmbedInput::Text(c)).unwrap())
            .collect();
        let d = generate_dataset(500, 13, ClassRule::ShapeKind).unwrap();
        for s in &d.samples {
            let img = embed(&v, EmbedInput::Image(&s.image)).unwrap();
            let mut present = f64::INFINITY;
            let mut absent = f64::NEG_INFINITY;
            for (c, t) in concepts.iter().zip(&texts) {
                let sim = vlm_similarity(&img, t).unwrap();
                if s.masks.contains_key(&c.label) {
                    present = present.min(sim);
                } else {
                    absent = absent.max(sim);
                }
            }
            assert!(present - absent >= 0.2, "scene {}: {present} vs {absent}", s.id);
        }
    }
}
