//! Procedural stand-in corpora: single grayscale shapes on flat
//! backgrounds, template edits with known targets, and moving-shape
//! "real-source" clips carrying content tags.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Bar,
}

pub const SHAPES: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Bar];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
        }
    }
}

/// One shape on a flat background. Coordinates and size are fractions of
/// the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub fg: f64,
    pub bg: f64,
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(r: &mut R) -> Self {
        let shape = SHAPES[r.random_range(0..SHAPES.len())];
        let bright = r.random_bool(0.5);
        let hi = r.random_range(0.75..0.95);
        let lo = r.random_range(0.05..0.25);
        Self {
            shape,
            cx: r.random_range(0.3..0.7),
            cy: r.random_range(0.3..0.7),
            size: r.random_range(0.15..0.3),
            fg: if bright { hi } else { lo },
            bg: if bright { lo } else { hi },
        }
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let s = self.size;
        match self.shape {
            Shape::Circle => du.hypot(dv) < s,
            Shape::Square => du.abs().max(dv.abs()) < s,
            Shape::Triangle => dv > -s && dv < s && du.abs() <= (dv + s) / 2.0,
            Shape::Ring => {
                let d = du.hypot(dv);
                d < s && d > 0.55 * s
            }
            Shape::Bar => dv.abs() < 0.35 * s && du.abs() < 1.2 * s,
        }
    }

    /// `[h, w]` pixels in `[0, 1]`.
    pub fn render<T: Scalar>(&self, h: usize, w: usize) -> Tensor<T> {
        Tensor::from_fn(&[h, w], |k| {
            let (i, j) = (k / w, k % w);
            let (u, v) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            T::cst(if self.inside(u, v) { self.fg } else { self.bg })
        })
    }

    pub fn tone(&self) -> &'static str {
        if self.fg >= self.bg {
            "bright"
        } else {
            "dark"
        }
    }

    pub fn position(&self) -> &'static str {
        if self.cx < 0.45 {
            "left"
        } else if self.cx > 0.55 {
            "right"
        } else {
            "center"
        }
    }

    fn size_word(&self) -> &'static str {
        if self.size >= 0.3 {
            "big "
        } else if self.size < 0.15 {
            "small "
        } else {
            ""
        }
    }

    pub fn caption(&self) -> String {
        format!("a {}{} {} on the {}", self.size_word(), self.tone(), self.shape.name(), self.position())
    }

    /// Content tags used to fill instruction templates.
    pub fn tags(&self) -> BTreeMap<String, String> {
        let inverse = if self.tone() == "bright" { "dark" } else { "bright" };
        BTreeMap::from([
            ("shape".to_string(), self.shape.name().to_string()),
            ("tone".to_string(), self.tone().to_string()),
            ("inverse_tone".to_string(), inverse.to_string()),
            ("position".to_string(), self.position().to_string()),
        ])
    }
}

/// Edits whose target scene is known exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    Invert,
    Grow,
    Shrink,
    MoveLeft,
    MoveRight,
    Brighten,
    Reshape(Shape),
}

impl Edit {
    pub fn random<R: Rng + ?Sized>(r: &mut R, scene: &Scene) -> Self {
        let all = [
            Edit::Invert,
            Edit::Grow,
            Edit::Shrink,
            Edit::MoveLeft,
            Edit::MoveRight,
            Edit::Brighten,
            Edit::Reshape(if scene.shape == Shape::Square { Shape::Circle } else { Shape::Square }),
        ];
        all[r.random_range(0..all.len())]
    }

    pub fn instruction(&self, scene: &Scene) -> String {
        let s = scene.shape.name();
        match self {
            Edit::Invert => "invert the colors".to_string(),
            Edit::Grow => format!("make the {s} bigger"),
            Edit::Shrink => format!("make the {s} smaller"),
            Edit::MoveLeft => format!("move the {s} to the left"),
            Edit::MoveRight => format!("move the {s} to the right"),
            Edit::Brighten => "brighten the image".to_string(),
            Edit::Reshape(t) => format!("turn the {s} into a {}", t.name()),
        }
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut s = *scene;
        match self {
            Edit::Invert => {
                s.fg = 1.0 - s.fg;
                s.bg = 1.0 - s.bg;
            }
            Edit::Grow => s.size = (s.size * 1.4).min(0.45),
            Edit::Shrink => s.size *= 0.6,
            Edit::MoveLeft => s.cx = (s.cx - 0.2).max(0.15),
            Edit::MoveRight => s.cx = (s.cx + 0.2).min(0.85),
            Edit::Brighten => {
                s.fg = (s.fg + 0.15).min(1.0);
                s.bg = (s.bg + 0.15).min(1.0);
            }
            Edit::Reshape(t) => s.shape = *t,
        }
        s
    }
}

/// A source image with an instruction and the caption its edit should have.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest<T> {
    pub id: String,
    pub source: Tensor<T>,
    pub source_caption: String,
    pub instruction: String,
    pub target_caption: String,
    pub tags: BTreeMap<String, String>,
}

/// An edit request together with its exact target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriple<T> {
    pub request: EditRequest<T>,
    pub target: Tensor<T>,
}

fn make_pair<T: Scalar>(id: String, side: usize, r: &mut rng::Rng) -> ImageTriple<T> {
    let scene = Scene::random(r);
    let edit = Edit::random(r, &scene);
    let target = edit.apply(&scene);
    ImageTriple {
        request: EditRequest {
            id,
            source: scene.render(side, side),
            source_caption: scene.caption(),
            instruction: edit.instruction(&scene),
            target_caption: target.caption(),
            tags: scene.tags(),
        },
        target: target.render(side, side),
    }
}

/// `n` image-editing triples of `side x side` pixels for training the
/// image editor.
pub fn image_corpus<T: Scalar>(n: usize, side: usize, seed: u64) -> Vec<ImageTriple<T>> {
    (0..n)
        .map(|i| {
            let id = format!("img-{i:05}");
            make_pair(id.clone(), side, &mut rng::stream(seed, &["image-corpus", &id]))
        })
        .collect()
}

/// Fresh sources with instructions for candidate generation; disjoint seeds
/// from [`image_corpus`].
pub fn edit_requests<T: Scalar>(n: usize, side: usize, seed: u64) -> Vec<EditRequest<T>> {
    (0..n)
        .map(|i| {
            let id = format!("src-{i:05}");
            make_pair::<T>(id.clone(), side, &mut rng::stream(seed, &["edit-requests", &id])).request
        })
        .collect()
}

/// A tagged source clip `[f, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T> {
    pub id: String,
    pub video: Tensor<T>,
    pub caption: String,
    pub tags: BTreeMap<String, String>,
}

/// Clips of a shape drifting at constant velocity with mild flicker,
/// standing in for segmented real footage.
pub fn real_corpus<T: Scalar>(n: usize, frames: usize, side: usize, seed: u64) -> Vec<Clip<T>> {
    (0..n)
        .map(|i| {
            let id = format!("real-{i:05}");
            let mut r = rng::stream(seed, &["real-corpus", &id]);
            let scene = Scene::random(&mut r);
            let (vx, vy) = (r.random_range(-0.02..0.02), r.random_range(-0.02..0.02));
            let mut data = Vec::with_capacity(frames * side * side);
            for k in 0..frames {
                let flicker = r.random_range(-0.02..0.02);
                let s = Scene {
                    cx: scene.cx + vx * k as f64,
                    cy: scene.cy + vy * k as f64,
                    fg: (scene.fg + flicker).clamp(0.0, 1.0),
                    ..scene
                };
                data.extend(s.render::<T>(side, side).into_data());
            }
            Clip {
                id,
                video: Tensor::new(&[frames, side, side], data).expect("clip shape"),
                caption: scene.caption(),
                tags: scene.tags(),
            }
        })
        .collect()
}

/// Instruction with a tag-slotted target caption, e.g.
/// `"make the {shape} bigger"` / `"a big {tone} {shape}"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InstructionTemplate {
    pub instruction: String,
    pub caption: String,
}

pub fn default_templates() -> Vec<InstructionTemplate> {
    [
        ("make the {shape} bigger", "a big {tone} {shape} on the {position}"),
        ("make the {shape} smaller", "a small {tone} {shape} on the {position}"),
        ("invert the colors", "a {inverse_tone} {shape} on the {position}"),
        ("turn the {shape} into a square", "a {tone} square on the {position}"),
        ("brighten the image", "a bright {shape} on the {position}"),
    ]
    .into_iter()
    .map(|(i, c)| InstructionTemplate {
        instruction: i.to_string(),
        caption: c.to_string(),
    })
    .collect()
}

/// Replaces `{key}` slots from `tags`; `None` if any slot stays unfilled.
pub fn fill_template(template: &str, tags: &BTreeMap<String, String>) -> Option<String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}')? + open;
        out.push_str(tags.get(&rest[open + 1..close])?);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_deterministic_and_in_range() {
        let a = image_corpus::<f32>(4, 16, 1);
        assert_eq!(a, image_corpus::<f32>(4, 16, 1));
        assert_ne!(a, image_corpus::<f32>(4, 16, 2));
        for t in &a {
            assert_eq!(t.request.source.shape(), &[16, 16]);
            assert!(t.target.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(!t.request.instruction.is_empty());
        }
        let c = real_corpus::<f32>(2, 5, 8, 3);
        assert_eq!(c[0].video.shape(), &[5, 8, 8]);
        assert_eq!(c, real_corpus::<f32>(2, 5, 8, 3));
    }

    #[test]
    fn edits_change_the_scene() {
        let s = Scene {
            shape: Shape::Circle,
            cx: 0.5,
            cy: 0.5,
            size: 0.2,
            fg: 0.9,
            bg: 0.1,
        };
        let inv = Edit::Invert.apply(&s);
        assert_eq!(inv.tone(), "dark");
        let a: Tensor<f64> = s.render(8, 8);
        let b: Tensor<f64> = inv.render(8, 8);
        assert!(a.add(&b).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(Edit::Reshape(Shape::Square).instruction(&s), "turn the circle into a square");
        assert_eq!(s.caption(), "a bright circle on the center");
    }

    #[test]
    fn templates_fill_from_tags() {
        let tags = BTreeMap::from([("shape".to_string(), "ring".to_string())]);
        assert_eq!(fill_template("make the {shape} bigger", &tags).as_deref(), Some("make the ring bigger"));
        assert_eq!(fill_template("no slots", &tags).as_deref(), Some("no slots"));
        assert_eq!(fill_template("a {tone} {shape}", &tags), None);
        assert_eq!(fill_template("broken {shape", &tags), None);
    }
}
