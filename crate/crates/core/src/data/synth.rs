//! Procedural stroke glyphs: each class is a random set of curved strokes;
//! each exemplar re-draws the prototype with control-point jitter, a small
//! random affine warp and a varying pen width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Grid;

use super::{ClassRecord, Dataset, LabeledSample, Portion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub image_size: usize,
    pub min_strokes: usize,
    pub max_strokes: usize,
    /// Control-point jitter as a fraction of the image side.
    pub jitter: f64,
    /// Maximum translation in pixels.
    pub max_shift: f64,
    pub max_rotation: f64,
    pub max_scale_delta: f64,
    pub pen_width: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            image_size: 52,
            min_strokes: 2,
            max_strokes: 4,
            jitter: 0.025,
            max_shift: 2.0,
            max_rotation: 0.12,
            max_scale_delta: 0.08,
            pen_width: 1.8,
        }
    }
}

#[derive(Debug, Clone)]
struct Prototype {
    /// Quadratic Bezier strokes, control points in unit coordinates.
    strokes: Vec<[(f64, f64); 3]>,
}

fn prototype(rng: &mut impl Rng, p: &SynthParams) -> Prototype {
    let n = rng.random_range(p.min_strokes..=p.max_strokes);
    let mut strokes = Vec::with_capacity(n);
    let mut anchor: Option<(f64, f64)> = None;
    for _ in 0..n {
        // Strokes often start where the previous one ended, like pen-drawn characters.
        let start = match anchor {
            Some(a) if rng.random_bool(0.5) => a,
            _ => (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
        };
        let end = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        let ctrl = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        strokes.push([start, ctrl, end]);
        anchor = Some(end);
    }
    Prototype { strokes }
}

fn bezier(s: &[(f64, f64); 3], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * s[0].0 + 2.0 * u * t * s[1].0 + t * t * s[2].0,
        u * u * s[0].1 + 2.0 * u * t * s[1].1 + t * t * s[2].1,
    )
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn render(proto: &Prototype, rng: &mut impl Rng, p: &SynthParams) -> Grid {
    let side = p.image_size as f64;
    let jitter = Normal::new(0.0, p.jitter).expect("jitter");
    let angle = rng.random_range(-p.max_rotation..=p.max_rotation);
    let scale = 1.0 + rng.random_range(-p.max_scale_delta..=p.max_scale_delta);
    let shift = (
        rng.random_range(-p.max_shift..=p.max_shift),
        rng.random_range(-p.max_shift..=p.max_shift),
    );
    let width = p.pen_width * rng.random_range(0.85..1.15);
    let (sin, cos) = angle.sin_cos();
    let to_pixels = |(x, y): (f64, f64)| {
        let (cx, cy) = (x - 0.5, y - 0.5);
        let (rx, ry) = (cos * cx - sin * cy, sin * cx + cos * cy);
        (
            (rx * scale + 0.5) * side + shift.0,
            (ry * scale + 0.5) * side + shift.1,
        )
    };
    let mut segments = Vec::new();
    for s in &proto.strokes {
        let mut cp = *s;
        for c in &mut cp {
            c.0 += jitter.sample(rng);
            c.1 += jitter.sample(rng);
        }
        let steps = 12;
        let mut prev = to_pixels(bezier(&cp, 0.0));
        for i in 1..=steps {
            let next = to_pixels(bezier(&cp, i as f64 / steps as f64));
            segments.push((prev, next));
            prev = next;
        }
    }
    let n = p.image_size;
    let half = width / 2.0;
    Grid::from_fn(&[n, n], |i| {
        let centre = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        let d = segments
            .iter()
            .map(|(a, b)| segment_distance(centre, *a, *b))
            .fold(f64::INFINITY, f64::min);
        // one-pixel anti-aliased edge
        (half + 0.5 - d).clamp(0.0, 1.0)
    })
}

/// `n_classes` procedurally generated classes with `exemplars_per_class`
/// exemplars each; deterministic per seed.
pub fn synth_glyphs(
    seed: u64,
    n_classes: usize,
    exemplars_per_class: usize,
    params: &SynthParams,
    portion: Portion,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..n_classes)
        .map(|c| {
            let proto = prototype(&mut rng, params);
            let mut class_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let samples = (0..exemplars_per_class)
                .map(|e| LabeledSample {
                    image: render(&proto, &mut class_rng, params),
                    class_id: c,
                    exemplar_id: e,
                })
                .collect();
            ClassRecord {
                name: format!("synth/{seed}/{c:04}"),
                portion,
                samples,
            }
        })
        .collect();
    Dataset { classes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::mean_squared_difference;

    fn small() -> Dataset {
        synth_glyphs(7, 6, 5, &SynthParams::default(), Portion::Evaluation)
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(small(), small());
        let other = synth_glyphs(8, 6, 5, &SynthParams::default(), Portion::Evaluation);
        assert_ne!(small(), other);
    }

    #[test]
    fn pixels_in_unit_range_with_ink() {
        for c in &small().classes {
            for s in &c.samples {
                assert_eq!(s.image.shape(), &[52, 52]);
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(s.image.max() > 0.9);
            }
        }
    }

    #[test]
    fn within_class_closer_than_across() {
        let d = small();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for (ci, c) in d.classes.iter().enumerate() {
            for (ei, s) in c.samples.iter().enumerate() {
                for (cj, c2) in d.classes.iter().enumerate() {
                    for (ej, t) in c2.samples.iter().enumerate() {
                        if (ci, ei) >= (cj, ej) {
                            continue;
                        }
                        let m = mean_squared_difference(&s.image, &t.image).unwrap();
                        if ci == cj {
                            within += m;
                            nw += 1;
                        } else {
                            across += m;
                            na += 1;
                        }
                    }
                }
            }
        }
        assert!(
            within / nw as f64 * 1.2 < across / na as f64,
            "{within} {across}"
        );
    }
}
