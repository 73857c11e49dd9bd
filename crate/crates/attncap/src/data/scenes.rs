//! Synthetic captioned scenes: 1 to 3 colored shapes on a 3x3 placement grid,
//! rendered with integer-only tests (no anti-aliasing) so every platform
//! produces byte-identical images, plus five paraphrased captions per scene.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [200, 30, 30],
            Color::Green => [30, 160, 30],
            Color::Blue => [30, 30, 200],
            Color::Yellow => [230, 200, 30],
        }
    }
}

const BACKGROUND: [u8; 3] = [235, 235, 235];

/// One placed object; `cell` indexes the 3x3 grid row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: usize,
}

/// A fully determined scene: objects occupy distinct cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticScene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
}

/// Deterministically build scene `scene_id` of the corpus along with its
/// five captions. Each scene gets its own rng stream, so scenes are
/// independent of how many others were generated.
pub fn build_scene(corpus_seed: u64, scene_id: u64) -> (SyntheticScene, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(scene_id);

    let count = rng.random_range(1..=3usize);
    let mut cells: Vec<usize> = (0..9).collect();
    for i in 0..count {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let objects: Vec<SceneObject> = (0..count)
        .map(|i| SceneObject {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            cell: cells[i],
        })
        .collect();

    let scene = SyntheticScene {
        id: scene_id,
        objects,
    };
    let captions = scene.captions(&mut rng);
    (scene, captions)
}

impl SyntheticScene {
    /// Render to raw RGB bytes (row-major, 3 per pixel) at the given side.
    pub fn render(&self, side: usize) -> Vec<u8> {
        let mut rgb = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            rgb.extend_from_slice(&BACKGROUND);
        }
        for object in &self.objects {
            draw(&mut rgb, side, object);
        }
        rgb
    }

    /// Five paraphrased captions; every caption names the color and shape of
    /// every object in the scene.
    fn captions(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut order: Vec<usize> = (0..6).collect();
        for i in 0..order.len() {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        order[..5]
            .iter()
            .map(|&template| self.caption(template, rng))
            .collect()
    }

    fn caption(&self, template: usize, rng: &mut ChaCha8Rng) -> String {
        let d: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("{} {}", o.color.word(), o.shape.word()))
            .collect();
        match self.objects.len() {
            1 => {
                let d = &d[0];
                match template {
                    0 => format!("a {d}"),
                    1 => format!("there is a {d}"),
                    2 => format!("an image of a {d}"),
                    3 => format!("a {d} on a plain background"),
                    4 => format!("the picture shows a {d}"),
                    _ => format!("a single {d} in the image"),
                }
            }
            2 => {
                let (d1, d2) = (&d[0], &d[1]);
                let relation = Relation::between(self.objects[0].cell, self.objects[1].cell);
                let rel = relation.phrase(rng);
                let inv = relation.inverse().phrase(rng);
                match template {
                    0 => format!("a {d1} {rel} a {d2}"),
                    1 => format!("there is a {d1} {rel} a {d2}"),
                    2 => format!("a {d2} {inv} a {d1}"),
                    3 => format!("an image with a {d1} and a {d2}"),
                    4 => format!("the image shows a {d1} and a {d2}"),
                    _ => format!("a {d1} and a {d2}"),
                }
            }
            _ => {
                let (d1, d2, d3) = (&d[0], &d[1], &d[2]);
                match template {
                    0 => format!("a {d1} a {d2} and a {d3}"),
                    1 => format!("an image with a {d1} a {d2} and a {d3}"),
                    2 => format!("there are a {d1} a {d2} and a {d3}"),
                    3 => format!("three shapes a {d1} a {d2} and a {d3}"),
                    4 => format!("a {d1} with a {d2} and a {d3}"),
                    _ => format!("a {d2} a {d3} and a {d1}"),
                }
            }
        }
    }
}

/// Spatial relation between two distinct cells; vertical wins on diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    Above,
    Below,
    Left,
    Right,
}

impl Relation {
    fn between(a: usize, b: usize) -> Relation {
        let (ra, ca) = (a / 3, a % 3);
        let (rb, cb) = (b / 3, b % 3);
        if ra < rb {
            Relation::Above
        } else if ra > rb {
            Relation::Below
        } else if ca < cb {
            Relation::Left
        } else {
            Relation::Right
        }
    }

    fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
        }
    }

    fn phrase(self, rng: &mut ChaCha8Rng) -> &'static str {
        let variants: [&'static str; 2] = match self {
            Relation::Above => ["above", "over"],
            Relation::Below => ["below", "under"],
            Relation::Left => ["left of", "to the left of"],
            Relation::Right => ["right of", "to the right of"],
        };
        variants[rng.random_range(0..2usize)]
    }
}

fn draw(rgb: &mut [u8], side: usize, object: &SceneObject) {
    let (row, col) = (object.cell / 3, object.cell % 3);
    let y0 = row * side / 3;
    let y1 = (row + 1) * side / 3;
    let x0 = col * side / 3;
    let x1 = (col + 1) * side / 3;
    let cx = ((x0 + x1) / 2) as i64;
    let cy = ((y0 + y1) / 2) as i64;
    let r = ((x1 - x0).min(y1 - y0) * 2 / 5) as i64;
    let color = object.color.rgb();

    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as i64 - cx;
            let dy = y as i64 - cy;
            let inside = match object.shape {
                Shape::Circle => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= r && dy.abs() <= r,
                // Upward triangle: half-width grows from 0 at the apex to r
                // at the base, two rows of y per unit of width.
                Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            };
            if inside {
                let at = (y * side + x) * 3;
                rgb[at..at + 3].copy_from_slice(&color);
            }
        }
    }
}
