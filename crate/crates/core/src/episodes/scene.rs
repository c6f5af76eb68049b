use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, Tensor};

/// Object outline drawn for a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Annulus,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Annulus,
        Shape::Cross,
    ];

    /// Whether `(dy, dx)` (pixel offset from the centre) lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, base at dy = r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Annulus => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Shape::Cross => {
                let (ay, ax) = (dy.abs(), dx.abs());
                (ay <= r && ax <= 0.35 * r) || (ax <= r && ay <= 0.35 * r)
            }
        }
    }
}

/// Renderer for one class: an outline and a base colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub shape: Shape,
    pub color: [f64; 3],
}

/// Default five classes, one per outline, each with a distinct saturated hue.
pub fn default_classes() -> Vec<ShapeClass> {
    let colors = [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.20, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
    ];
    Shape::ALL
        .iter()
        .zip(colors)
        .enumerate()
        .map(|(id, (&shape, color))| ShapeClass { id, shape, color })
        .collect()
}

/// How a scene decides whether to carry a hidden object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contamination {
    /// Bernoulli draw at `contamination_rate` (base classes only).
    Sample,
    /// Always add a hidden object when the class is not itself hidden-eligible.
    Always,
    Never,
}

/// Scene generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub shape_classes: Vec<ShapeClass>,
    pub texture_seed: u64,
    pub contamination_rate: f64,
    /// Classes that may appear unlabeled in other classes' scenes.
    pub contamination_classes: Vec<usize>,
    /// Half-extent range of rendered objects, in pixels.
    pub object_radius: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            shape_classes: default_classes(),
            texture_seed: 0x5eed,
            contamination_rate: 0.0,
            contamination_classes: Vec::new(),
            object_radius: (14.0, 20.0),
        }
    }
}

impl SceneSpec {
    pub fn class(&self, id: usize) -> Option<&ShapeClass> {
        self.shape_classes.iter().find(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.contamination_rate) {
            return Err(Error::config(format!(
                "contamination_rate {} outside [0, 1]",
                self.contamination_rate
            )));
        }
        let (lo, hi) = self.object_radius;
        if !(lo >= 1.0 && hi >= lo && 2.0 * hi < self.image_size as f64) {
            return Err(Error::config(format!("bad object radius range {lo}..{hi}")));
        }
        for &c in &self.contamination_classes {
            if self.class(c).is_none() {
                return Err(Error::config(format!("contamination class {c} is not configured")));
            }
        }
        Ok(())
    }

    /// The four background textures derived from `texture_seed`.
    pub fn textures(&self) -> [Texture; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let muted = |rng: &mut ChaCha8Rng| {
            let base = rng.random_range(0.25..0.7);
            [0, 1, 2].map(|_| base + rng.random_range(-0.08..0.08))
        };
        let kinds = [
            TextureKind::Stripes,
            TextureKind::Checker,
            TextureKind::Gradient,
            TextureKind::Blotches,
        ];
        kinds.map(|kind| Texture {
            kind,
            a: muted(&mut rng),
            b: muted(&mut rng),
            period: rng.random_range(4..10),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    Gradient,
    Blotches,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub period: usize,
}

/// One rendered image with its labeled and hidden object masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub class_id: usize,
    pub mask: BinaryMask,
    pub hidden_mask: BinaryMask,
    /// Class of every hidden object, one entry per instance.
    pub hidden_classes: Vec<usize>,
}

/// Renders one scene for `class_id`. Output is a pure function of the
/// arguments.
pub fn render_scene(spec: &SceneSpec, class_id: usize, rng_seed: u64) -> Result<Scene> {
    render_scene_with(spec, class_id, rng_seed, Contamination::Sample)
}

pub fn render_scene_with(
    spec: &SceneSpec,
    class_id: usize,
    rng_seed: u64,
    contamination: Contamination,
) -> Result<Scene> {
    spec.validate()?;
    let class = *spec
        .class(class_id)
        .ok_or_else(|| Error::config(format!("class {class_id} is not configured")))?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let textures = spec.textures();
    let texture = textures[rng.random_range(0..textures.len())];
    let mut image = paint_background(&texture, size, &mut rng);

    // Empty foregrounds are rejected and redrawn; in practice the first draw
    // always lands inside the image.
    let mask = loop {
        let r = rng.random_range(spec.object_radius.0..=spec.object_radius.1);
        let m = place_object(&class, r, None, size, &mut rng).expect("an unobstructed object always fits");
        if m.any() {
            break m;
        }
    };
    paint_object(&mut image, &mask, &class, &mut rng);

    let eligible: Vec<usize> = spec
        .contamination_classes
        .iter()
        .copied()
        .filter(|&c| c != class_id)
        .collect();
    let is_base = !spec.contamination_classes.contains(&class_id);
    let contaminate = !eligible.is_empty()
        && is_base
        && match contamination {
            Contamination::Sample => rng.random_bool(spec.contamination_rate),
            Contamination::Always => true,
            Contamination::Never => false,
        };

    let mut hidden_mask = BinaryMask::zeros(size, size);
    let mut hidden_classes = Vec::new();
    if contaminate {
        let hidden = *spec
            .class(eligible[rng.random_range(0..eligible.len())])
            .expect("validated");
        let mut r = spec.object_radius.1;
        let placed = loop {
            if let Some(m) = place_object(&hidden, r, Some(&mask), size, &mut rng) {
                break Some(m);
            }
            r *= 0.8;
            if r < 2.0 {
                break None;
            }
        };
        if let Some(m) = placed {
            paint_object(&mut image, &m, &hidden, &mut rng);
            hidden_mask = m;
            hidden_classes.push(hidden.id);
        }
    }

    Ok(Scene {
        image,
        class_id,
        mask,
        hidden_mask,
        hidden_classes,
    })
}

fn paint_background(t: &Texture, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let phase = rng.random_range(0..t.period * 2);
    let horizontal = rng.random_bool(0.5);
    // coarse lattice for blotches, bilinearly interpolated
    let cells = size / t.period.max(1) + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(0.0..1.0)).collect();
    let blotch = |i: usize, j: usize| {
        let fy = i as f64 / t.period as f64;
        let fx = j as f64 / t.period as f64;
        let (y0, x0) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |y: usize, x: usize| lattice[y.min(cells - 1) * cells + x.min(cells - 1)];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };
    let mut img = Tensor::zeros(vec![size, size, 3]);
    for i in 0..size {
        for j in 0..size {
            let (u, v) = if horizontal { (i, j) } else { (j, i) };
            let mix = match t.kind {
                TextureKind::Stripes => (((u + phase) / t.period) % 2) as f64,
                TextureKind::Checker => ((((u + phase) / t.period) + (v / t.period)) % 2) as f64,
                TextureKind::Gradient => u as f64 / (size - 1) as f64,
                TextureKind::Blotches => blotch(i, j),
            };
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                let val = t.a[c] * (1.0 - mix) + t.b[c] * mix + noise;
                img.data_mut()[(i * size + j) * 3 + c] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Draws a random placement of `class` with half-extent `r`. When `avoid` is
/// given, placements touching it (including a one-pixel border) are retried
/// and `None` is returned after a bounded number of attempts.
fn place_object(
    class: &ShapeClass,
    r: f64,
    avoid: Option<&BinaryMask>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BinaryMask> {
    let margin = r.ceil() as usize;
    let lo = margin.min(size / 2);
    let hi = (size - margin).max(lo + 1);
    for _ in 0..64 {
        let cy = rng.random_range(lo..hi) as f64;
        let cx = rng.random_range(lo..hi) as f64;
        let m = BinaryMask::from_fn(size, size, |i, j| class.shape.contains(i as f64 - cy, j as f64 - cx, r));
        match avoid {
            None => return Some(m),
            Some(other) => {
                if !touches(&m, other) {
                    return Some(m);
                }
            }
        }
    }
    None
}

fn touches(a: &BinaryMask, b: &BinaryMask) -> bool {
    let (h, w) = a.dims();
    for i in 0..h {
        for j in 0..w {
            if !a.get(i, j) {
                continue;
            }
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && b.get(y as usize, x as usize) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn paint_object(img: &mut Tensor, mask: &BinaryMask, class: &ShapeClass, rng: &mut ChaCha8Rng) {
    let size = mask.width();
    let tint = [0, 1, 2].map(|c| (class.color[c] + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    for i in 0..mask.height() {
        for j in 0..size {
            if mask.get(i, j) {
                for (c, t) in tint.iter().enumerate() {
                    let noise = rng.random_range(-0.04..0.04);
                    img.data_mut()[(i * size + j) * 3 + c] = (t + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contaminated_spec(rate: f64) -> SceneSpec {
        SceneSpec {
            contamination_rate: rate,
            contamination_classes: vec![4],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_rate_never_hides_objects() {
        let spec = contaminated_spec(0.0);
        for seed in 0..200 {
            let s = render_scene(&spec, (seed % 4) as usize, seed).unwrap();
            assert!(!s.hidden_mask.any());
            assert!(s.hidden_classes.is_empty());
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = contaminated_spec(0.5);
        for seed in [0u64, 7, 12345] {
            assert_eq!(
                render_scene(&spec, 1, seed).unwrap(),
                render_scene(&spec, 1, seed).unwrap()
            );
        }
    }

    #[test]
    fn hidden_objects_never_overlap_labeled_foreground() {
        let spec = contaminated_spec(1.0);
        for seed in 0..300 {
            let s = render_scene(&spec, (seed % 4) as usize, seed).unwrap();
            assert!(s.mask.any());
            assert!(s.hidden_mask.any(), "seed {seed}");
            assert_eq!(s.hidden_classes, vec![4]);
            let mut overlap = 0;
            for i in 0..64 {
                for j in 0..64 {
                    if s.mask.get(i, j) && s.hidden_mask.get(i, j) {
                        overlap += 1;
                    }
                }
            }
            assert_eq!(overlap, 0);
        }
    }

    #[test]
    fn novel_class_scenes_are_never_contaminated() {
        let spec = contaminated_spec(1.0);
        for seed in 0..50 {
            assert!(!render_scene(&spec, 4, seed).unwrap().hidden_mask.any());
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        assert!(render_scene(&SceneSpec::default(), 9, 0).is_err());
    }

    #[test]
    fn pixel_values_stay_in_unit_range() {
        let s = render_scene(&contaminated_spec(1.0), 2, 99).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
