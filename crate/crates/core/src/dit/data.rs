//! Procedural recipes: each step paints one colored primitive onto a
//! persistent canvas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::text::{RecipeSpec, RecipeStep};

/// Palette names and RGB values.
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [235, 215, 40]),
    ("purple", [160, 60, 200]),
    ("white", [245, 245, 245]),
];

/// Canvas color before any step.
pub const BACKGROUND: [u8; 3] = [30, 30, 30];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// One painted shape. Coordinates are in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl Primitive {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn rgb(&self) -> [u8; 3] {
        COLORS[self.color].1
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.size * self.size,
            Shape::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            Shape::Triangle => {
                // Apex up; half-width grows linearly from apex to base.
                dy >= -self.size && dy <= self.size && dx.abs() <= (dy + self.size) / 2.0
            }
        }
    }

    /// Row-major coverage mask of a `height × width` canvas.
    pub fn footprint(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.covers(x, y))
            .collect()
    }

    /// Coarse placement in words, by thirds of the canvas.
    pub fn position_words(&self, height: usize, width: usize) -> String {
        let third = |v: f64, extent: usize| ((3.0 * v / extent as f64) as usize).min(2);
        let row = ["top", "middle", "bottom"][third(self.cy, height)];
        let col = ["left", "center", "right"][third(self.cx, width)];
        match (row, col) {
            ("middle", "center") => "center".to_string(),
            _ => format!("{row} {col}"),
        }
    }

    pub fn caption(&self, height: usize, width: usize) -> String {
        format!(
            "add {} {} at {}",
            self.color_name(),
            self.shape.name(),
            self.position_words(height, width)
        )
    }
}

/// A recipe with its ground-truth step images.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecipe {
    pub recipe: RecipeSpec,
    pub primitives: Vec<Primitive>,
    /// `H × W × 3` images with values in `[-1, 1]`; image `k` holds
    /// primitives `0..=k`.
    pub images: Vec<Tensor>,
}

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Paints `primitives` in order onto a fresh canvas, returning the canvas
/// after every primitive.
pub fn render_sequence(primitives: &[Primitive], height: usize, width: usize) -> Vec<Tensor> {
    let mut canvas: Vec<f64> = (0..height * width).flat_map(|_| BACKGROUND.map(to_unit)).collect();
    primitives
        .iter()
        .map(|p| {
            let rgb = p.rgb().map(to_unit);
            for (i, hit) in p.footprint(height, width).into_iter().enumerate() {
                if hit {
                    canvas[3 * i..3 * i + 3].copy_from_slice(&rgb);
                }
            }
            Tensor::new(vec![height, width, 3], canvas.clone()).expect("canvas shape")
        })
        .collect()
}

fn random_primitive(rng: &mut impl Rng, height: usize, width: usize, previous: Option<&Primitive>) -> Primitive {
    let min_dim = height.min(width) as f64;
    loop {
        let size = rng.random_range(0.12..0.22) * min_dim;
        let p = Primitive {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: rng.random_range(0..COLORS.len()),
            cx: rng.random_range(size..width as f64 - size),
            cy: rng.random_range(size..height as f64 - size),
            size,
        };
        // A primitive identical in color to the one below it could vanish
        // into it; redraw so every step changes pixels.
        let distinct = previous.is_none_or(|q| q.color != p.color);
        if distinct && p.footprint(height, width).iter().any(|&b| b) {
            return p;
        }
    }
}

/// Deterministic dataset of `count` recipes with `2..=max_steps` steps on
/// `height × width` canvases.
pub fn make_synthetic_dataset(
    seed: u64,
    count: usize,
    max_steps: usize,
    height: usize,
    width: usize,
) -> Vec<SyntheticRecipe> {
    let max_steps = max_steps.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=max_steps);
            let mut primitives: Vec<Primitive> = Vec::with_capacity(n);
            for _ in 0..n {
                let p = random_primitive(&mut rng, height, width, primitives.last());
                primitives.push(p);
            }
            let steps = primitives
                .iter()
                .map(|p| RecipeStep {
                    text: p.caption(height, width),
                    ingredients: vec![format!("{} {}", p.color_name(), p.shape.name())],
                })
                .collect();
            let names: Vec<String> = primitives
                .iter()
                .map(|p| format!("a {} {}", p.color_name(), p.shape.name()))
                .collect();
            let recipe = RecipeSpec {
                goal: format!("a plate with {n} shapes"),
                summary: Some(format!("{} on a dark plate.", names.join(", "))),
                steps,
            };
            let images = render_sequence(&primitives, height, width);
            SyntheticRecipe {
                recipe,
                primitives,
                images,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_deterministic() {
        let a = make_synthetic_dataset(4, 5, 5, 16, 16);
        let b = make_synthetic_dataset(4, 5, 5, 16, 16);
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic_dataset(5, 5, 5, 16, 16));
    }

    #[test]
    fn step_counts_cover_range() {
        let data = make_synthetic_dataset(0, 200, 6, 8, 8);
        let mut hist = [0usize; 7];
        for r in &data {
            hist[r.recipe.steps.len()] += 1;
            assert_eq!(r.images.len(), r.recipe.steps.len());
        }
        assert_eq!(hist[0] + hist[1], 0);
        assert!(hist[2..].iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn consecutive_images_differ_by_one_footprint() {
        let (h, w) = (32, 32);
        for r in make_synthetic_dataset(1, 10, 5, h, w) {
            let mut prev: Vec<f64> = (0..h * w).flat_map(|_| BACKGROUND.map(to_unit)).collect();
            for (img, p) in r.images.iter().zip(&r.primitives) {
                let fp = p.footprint(h, w);
                let rgb = p.rgb().map(to_unit);
                for i in 0..h * w {
                    let now = &img.data()[3 * i..3 * i + 3];
                    let before = &prev[3 * i..3 * i + 3];
                    if fp[i] {
                        assert_eq!(now, rgb);
                    } else {
                        assert_eq!(now, before);
                    }
                }
                prev = img.data().to_vec();
            }
        }
    }

    #[test]
    fn captions_name_color_and_shape() {
        let r = &make_synthetic_dataset(2, 1, 3, 32, 32)[0];
        for (s, p) in r.recipe.steps.iter().zip(&r.primitives) {
            assert!(s
                .text
                .starts_with(&format!("add {} {}", p.color_name(), p.shape.name())));
        }
        r.recipe.validate().unwrap();
    }

    #[test]
    fn position_words() {
        let p = Primitive {
            shape: Shape::Circle,
            color: 0,
            cx: 4.0,
            cy: 4.0,
            size: 3.0,
        };
        assert_eq!(p.position_words(32, 32), "top left");
        assert_eq!(
            Primitive {
                cx: 16.0,
                cy: 16.0,
                ..p
            }
            .position_words(32, 32),
            "center"
        );
        assert_eq!(
            Primitive {
                cx: 30.0,
                cy: 16.0,
                ..p
            }
            .position_words(32, 32),
            "middle right"
        );
    }
}
