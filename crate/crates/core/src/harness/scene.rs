use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vlm::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Rectangle,
        Shape::Circle,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    pub fn synonyms(self) -> &'static [&'static str] {
        match self {
            Shape::Rectangle => &["square", "box", "block"],
            Shape::Circle => &["disc", "ball", "dot"],
            Shape::Triangle => &["wedge"],
            Shape::Diamond => &["rhombus"],
            Shape::Cross => &["plus"],
            Shape::Ring => &["hoop", "donut"],
        }
    }

    /// Whether local coordinates `(u, v)` in `[0, 1)²` fall inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Rectangle => true,
            Shape::Circle => r2 <= 0.45 * 0.45,
            Shape::Triangle => du.abs() <= v / 2.0,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Cross => du.abs() <= 0.15 || dv.abs() <= 0.15,
            Shape::Ring => (0.25 * 0.25..=0.45 * 0.45).contains(&r2),
        }
    }
}

/// Synonym table for every shape label.
pub fn shape_synonyms() -> BTreeMap<String, String> {
    Shape::ALL
        .iter()
        .flat_map(|s| s.synonyms().iter().map(move |w| (w.to_string(), s.label().to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Purple => [0.6, 0.1, 0.7],
            Color::Orange => [1.0, 0.55, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Half-open `[r0, c0, r1, c1]` in patch cells.
    pub bbox: [usize; 4],
}

impl SceneObject {
    pub fn cells(&self) -> usize {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }

    /// Vertical and horizontal location words for the box centre.
    pub fn location(&self, grid: usize) -> (&'static str, &'static str) {
        let (r2, c2) = (self.bbox[0] + self.bbox[2], self.bbox[1] + self.bbox[3]);
        let v = if r2 < grid { "top" } else { "bottom" };
        let h = if c2 < grid { "left" } else { "right" };
        (v, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<SceneObject>,
}

const BACKGROUND: f64 = 0.1;

impl Scene {
    /// One to three objects of distinct shape and color on non-overlapping
    /// boxes covering at most half the grid.
    pub fn random(rng: &mut ChaCha8Rng, grid: usize) -> Self {
        let mut shapes = Shape::ALL.to_vec();
        shapes.shuffle(rng);
        let mut colors = Color::ALL.to_vec();
        colors.shuffle(rng);
        let budget = grid * grid / 2;
        let n = rng.random_range(1..=3);
        let mut taken = vec![false; grid * grid];
        let mut used = 0;
        let mut objects = Vec::new();
        for i in 0..n {
            let (mut h, mut w) = (rng.random_range(1..=2.min(grid)), rng.random_range(1..=2.min(grid)));
            if used + h * w > budget {
                (h, w) = (1, 1);
            }
            if used + h * w > budget {
                break;
            }
            for _ in 0..64 {
                let r0 = rng.random_range(0..=grid - h);
                let c0 = rng.random_range(0..=grid - w);
                let free = (r0..r0 + h).all(|r| (c0..c0 + w).all(|c| !taken[r * grid + c]));
                if free {
                    (r0..r0 + h).for_each(|r| (c0..c0 + w).for_each(|c| taken[r * grid + c] = true));
                    used += h * w;
                    objects.push(SceneObject {
                        shape: shapes[i],
                        color: colors[i],
                        bbox: [r0, c0, r0 + h, c0 + w],
                    });
                    break;
                }
            }
        }
        if objects.is_empty() {
            objects.push(SceneObject {
                shape: shapes[0],
                color: colors[0],
                bbox: [0, 0, 1, 1],
            });
        }
        Self { grid, objects }
    }

    pub fn render(&self, patch: usize) -> Image {
        let size = self.grid * patch;
        let mut img = Image::new(size, 3, vec![BACKGROUND; size * size * 3]).expect("valid image shape");
        for o in &self.objects {
            let [r0, c0, r1, c1] = o.bbox;
            let (y0, x0) = (r0 * patch, c0 * patch);
            let (hh, ww) = ((r1 - r0) * patch, (c1 - c0) * patch);
            for y in 0..hh {
                for x in 0..ww {
                    let (u, v) = ((x as f64 + 0.5) / ww as f64, (y as f64 + 0.5) / hh as f64);
                    if o.shape.covers(u, v) {
                        for (c, val) in o.color.rgb().iter().enumerate() {
                            img.set(y0 + y, x0 + x, c, *val);
                        }
                    }
                }
            }
        }
        img
    }
}
