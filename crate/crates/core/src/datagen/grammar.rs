use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedColor {
    pub name: String,
    /// RGB in `[-1, 1]`.
    pub rgb: [f32; 3],
}

fn named(name: &str, rgb: [f32; 3]) -> NamedColor {
    NamedColor { name: name.into(), rgb }
}

/// Axis-aligned pixel box, serialized as `[y, x, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([y, x, h, w]: [usize; 4]) -> Self {
        BBox { y, x, h, w }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.y, b.x, b.h, b.w]
    }
}

impl BBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn overlaps(&self, o: &BBox) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

/// Vocabulary, palette and layout rules of the synthetic scene generator.
///
/// Templates use the placeholders `{shape}`, `{color}`, `{background}` and,
/// for two-object scenes, `{shape2}` and `{color2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub image_size: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<NamedColor>,
    pub backgrounds: Vec<NamedColor>,
    /// Colour indices each shape may take, one list per shape.
    pub palettes: Vec<Vec<usize>>,
    pub template: String,
    pub pair_template: String,
    /// Probability of a second object.
    pub pair_prob: f64,
    /// Probability that a two-object caption mentions only the first object.
    pub omit_prob: f64,
    /// Object side length range in pixels, inclusive.
    pub min_object: usize,
    pub max_object: usize,
    /// Background pixels kept around each object inside its box.
    pub margin: usize,
    /// Probability that a scene is rendered at `low_res_size` and upscaled.
    pub low_res_prob: f64,
    pub low_res_size: usize,
    /// Amplitude of the background texture.
    pub texture: f32,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            image_size: 16,
            shapes: ["circle", "square", "triangle", "cross"].map(String::from).to_vec(),
            colors: vec![
                named("red", [0.9, -0.8, -0.8]),
                named("white", [0.9, 0.9, 0.9]),
                named("blue", [-0.8, -0.6, 0.9]),
                named("yellow", [0.9, 0.8, -0.8]),
                named("magenta", [0.8, -0.8, 0.8]),
                named("cyan", [-0.8, 0.8, 0.8]),
                named("orange", [0.9, 0.1, -0.9]),
                named("black", [-0.9, -0.9, -0.9]),
            ],
            backgrounds: vec![
                named("grass", [-0.5, 0.2, -0.6]),
                named("sand", [0.4, 0.2, -0.2]),
                named("sky", [-0.2, 0.2, 0.6]),
                named("night", [-0.6, -0.6, -0.2]),
            ],
            palettes: vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
            template: "a {shape} on {background}".into(),
            pair_template: "a {shape} and a {shape2} on {background}".into(),
            pair_prob: 0.25,
            omit_prob: 0.2,
            min_object: 3,
            max_object: 10,
            margin: 1,
            low_res_prob: 0.1,
            low_res_size: 8,
            texture: 0.06,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: usize,
    pub objects: Vec<SceneObject>,
    /// Side length the scene was rendered at before any upscaling.
    pub source_resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub image: Image,
    pub caption: String,
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("grammar: {m}")));
        if self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return fail("image_size must be even and at least 4".into());
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.backgrounds.is_empty() {
            return fail("shapes, colors and backgrounds must be non-empty".into());
        }
        if self.palettes.len() != self.shapes.len() {
            return fail("one palette per shape required".into());
        }
        if self.palettes.iter().any(|p| p.is_empty() || p.iter().any(|&c| c >= self.colors.len())) {
            return fail("palettes must be non-empty lists of colour indices".into());
        }
        let side = self.max_object + 2 * self.margin;
        if self.min_object == 0 || self.min_object > self.max_object || side > self.image_size {
            return fail("object size range does not fit the image".into());
        }
        for p in [self.pair_prob, self.omit_prob, self.low_res_prob] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.low_res_size == 0 || self.low_res_size > self.image_size {
            return fail("low_res_size must be in [1, image_size]".into());
        }
        for t in [&self.template, &self.pair_template] {
            if !t.contains("{shape}") || !t.contains("{background}") {
                return fail(format!("template `{t}` must mention {{shape}} and {{background}}"));
            }
        }
        if !self.pair_template.contains("{shape2}") {
            return fail("pair template must mention {shape2}".into());
        }
        let mut words: Vec<&str> = self.shapes.iter().map(String::as_str).collect();
        words.extend(self.colors.iter().map(|c| c.name.as_str()));
        words.extend(self.backgrounds.iter().map(|c| c.name.as_str()));
        let mut seen = std::collections::HashSet::new();
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || !seen.insert(w.to_lowercase()) {
                return fail(format!("class word `{w}` is empty, has spaces or repeats"));
            }
        }
        Vocabulary::from_words(self.vocabulary_words().iter().map(String::as_str))?;
        Ok(())
    }

    fn vocabulary_words(&self) -> Vec<String> {
        let mut words = Vec::new();
        for t in [&self.template, &self.pair_template] {
            for w in t.split_whitespace() {
                if !w.starts_with('{') {
                    words.push(w.to_lowercase());
                }
            }
        }
        words.extend(self.shapes.iter().cloned());
        words.extend(self.colors.iter().map(|c| c.name.clone()));
        words.extend(self.backgrounds.iter().map(|c| c.name.clone()));
        words
    }

    /// Every word any caption can contain.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.vocabulary_words().iter().map(String::as_str))
    }

    /// Longest possible caption in words.
    pub fn max_caption_words(&self) -> usize {
        self.template
            .split_whitespace()
            .count()
            .max(self.pair_template.split_whitespace().count())
    }

    pub fn shape_index(&self, name: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s == name)
    }

    pub fn color_index(&self, name: &str) -> Option<usize> {
        self.colors.iter().position(|c| c.name == name)
    }

    pub fn background_index(&self, name: &str) -> Option<usize> {
        self.backgrounds.iter().position(|c| c.name == name)
    }

    /// Fills `template` for the given objects and background.
    pub fn caption(&self, template: &str, objects: &[SceneObject], background: usize) -> String {
        let mut out = template.replace("{background}", &self.backgrounds[background].name);
        if let Some(o) = objects.get(1) {
            out = out
                .replace("{shape2}", &self.shapes[o.shape])
                .replace("{color2}", &self.colors[o.color].name);
        }
        if let Some(o) = objects.first() {
            out = out
                .replace("{shape}", &self.shapes[o.shape])
                .replace("{color}", &self.colors[o.color].name);
        }
        out
    }

    /// Background colour with its deterministic texture at `(y, x)`.
    pub fn background_pixel(&self, background: usize, y: usize, x: usize) -> [f32; 3] {
        let base = self.backgrounds[background].rgb;
        let a = self.texture;
        let s = self.image_size.max(2) as f32;
        let delta = match background % 4 {
            0 => if x.is_multiple_of(2) { a } else { -a },
            1 => ((x * 7 + y * 13) % 5) as f32 / 2.0 * a - a,
            2 => a * (1.0 - 2.0 * y as f32 / (s - 1.0)),
            _ => if (x * 5 + y * 11).is_multiple_of(23) { 2.5 * a } else { 0.0 },
        };
        base.map(|v| (v + delta).clamp(-1.0, 1.0))
    }

    pub fn render_background(&self, background: usize) -> Image {
        let s = self.image_size;
        let mut img = Image::filled(s, s, [0.0; 3]);
        for y in 0..s {
            for x in 0..s {
                img.set_pixel(y, x, self.background_pixel(background, y, x));
            }
        }
        img
    }

    /// Paints an object into its box, leaving `margin` pixels of background.
    pub fn draw_object(&self, img: &mut Image, obj: &SceneObject) {
        let m = self.margin;
        let side = obj.bbox.h.min(obj.bbox.w).saturating_sub(2 * m);
        let rgb = self.colors[obj.color].rgb;
        for dy in 0..side {
            for dx in 0..side {
                if shape_covers(obj.shape, side, dy, dx) {
                    img.set_pixel(obj.bbox.y + m + dy, obj.bbox.x + m + dx, rgb);
                }
            }
        }
    }

    pub fn render(&self, scene: &Scene) -> Result<Image> {
        let mut img = self.render_background(scene.background);
        for o in &scene.objects {
            self.draw_object(&mut img, o);
        }
        let s = self.image_size;
        if scene.source_resolution < s {
            let r = scene.source_resolution;
            img = img.resize(r, r)?.resize(s, s)?;
        }
        Ok(img)
    }

    /// Scene, rendering and caption for one seed.
    pub fn generate_scene(&self, seed: u64) -> Result<GeneratedScene> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = rng.random_range(0..self.backgrounds.len());
        let want_pair = rng.random::<f64>() < self.pair_prob;
        let omit = rng.random::<f64>() < self.omit_prob;
        let low_res = rng.random::<f64>() < self.low_res_prob;
        let mut objects: Vec<SceneObject> = Vec::new();
        for k in 0..if want_pair { 2 } else { 1 } {
            let obj = self.random_object(&mut rng);
            let clash = objects.iter().any(|o| o.bbox.overlaps(&obj.bbox));
            if k == 0 || !clash {
                objects.push(obj);
            } else if let Some(retry) = (0..20).map(|_| self.place(&mut rng, obj)).find(|c| !objects[0].bbox.overlaps(&c.bbox)) {
                objects.push(retry);
            }
        }
        let scene = Scene {
            background,
            objects,
            source_resolution: if low_res { self.low_res_size } else { self.image_size },
        };
        let template = if scene.objects.len() == 2 && !omit {
            &self.pair_template
        } else {
            &self.template
        };
        let caption = self.caption(template, &scene.objects, background);
        let image = self.render(&scene)?;
        Ok(GeneratedScene { scene, image, caption })
    }

    fn random_object(&self, rng: &mut impl Rng) -> SceneObject {
        let shape = rng.random_range(0..self.shapes.len());
        let palette = &self.palettes[shape];
        let color = palette[rng.random_range(0..palette.len())];
        let size = rng.random_range(self.min_object..=self.max_object);
        let side = size + 2 * self.margin;
        let obj = SceneObject {
            shape,
            color,
            bbox: BBox { y: 0, x: 0, h: side, w: side },
        };
        self.place(rng, obj)
    }

    fn place(&self, rng: &mut impl Rng, mut obj: SceneObject) -> SceneObject {
        let free = self.image_size - obj.bbox.h;
        obj.bbox.y = rng.random_range(0..=free);
        obj.bbox.x = rng.random_range(0..=free);
        obj
    }

    /// An isolated subject: one object of the given shape and colour on
    /// `background`, cropped to its box. Used for evaluation fixtures.
    pub fn render_subject(&self, shape: usize, color: usize, background: usize, size: usize, seed: u64) -> Result<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = size + 2 * self.margin;
        if side > self.image_size || size == 0 {
            return Err(Error::invalid(format!("subject size {size} does not fit")));
        }
        let obj = self.place(
            &mut rng,
            SceneObject {
                shape,
                color,
                bbox: BBox { y: 0, x: 0, h: side, w: side },
            },
        );
        let mut img = self.render_background(background);
        self.draw_object(&mut img, &obj);
        img.crop(obj.bbox.y, obj.bbox.x, side, side)
    }
}

/// Pixel mask of the shape classes on a `side × side` grid. Shape ids beyond
/// the built-in four reuse them cyclically.
pub fn shape_covers(shape: usize, side: usize, dy: usize, dx: usize) -> bool {
    let s = side as f32;
    let (cy, cx) = (dy as f32 + 0.5, dx as f32 + 0.5);
    match shape % 4 {
        0 => {
            let r = s / 2.0;
            (cy - r).powi(2) + (cx - r).powi(2) <= r * r
        }
        1 => true,
        2 => {
            let half = (dy + 1) as f32 / 2.0;
            (cx - s / 2.0).abs() <= half
        }
        _ => {
            let arm = (side / 3).max(1);
            let lo = (side - arm) / 2;
            let hi = lo + arm;
            (dy >= lo && dy < hi) || (dx >= lo && dx < hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grammar_is_valid() {
        let g = GrammarConfig::default();
        g.validate().unwrap();
        let v = g.vocabulary().unwrap();
        for w in ["a", "and", "on", "circle", "cross", "grass", "night", "red", "black"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(g.max_caption_words(), 7);
    }

    #[test]
    fn invalid_grammars_are_rejected() {
        let mut g = GrammarConfig::default();
        g.palettes.pop();
        assert!(g.validate().is_err());
        let mut g = GrammarConfig::default();
        g.max_object = 15;
        assert!(g.validate().is_err());
        let mut g = GrammarConfig::default();
        g.template = "a {shape}".into();
        assert!(g.validate().is_err());
        let mut g = GrammarConfig::default();
        g.colors[0].name = "circle".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let g = GrammarConfig::default();
        for seed in 0..20 {
            assert_eq!(g.generate_scene(seed).unwrap(), g.generate_scene(seed).unwrap());
        }
    }

    #[test]
    fn boxes_fit_and_captions_name_objects() {
        let g = GrammarConfig::default();
        for seed in 0..500 {
            let s = g.generate_scene(seed).unwrap();
            let words: Vec<&str> = s.caption.split_whitespace().collect();
            assert!(words.contains(&g.shapes[s.scene.objects[0].shape].as_str()));
            assert_eq!(words.last(), Some(&g.backgrounds[s.scene.background].name.as_str()));
            for o in &s.scene.objects {
                assert!(o.bbox.y + o.bbox.h <= 16 && o.bbox.x + o.bbox.w <= 16);
                assert!(g.palettes[o.shape].contains(&o.color));
            }
            if let [a, b] = &s.scene.objects[..] {
                assert!(!a.bbox.overlaps(&b.bbox));
            }
        }
    }

    #[test]
    fn colour_template_is_supported() {
        let g = GrammarConfig {
            template: "a {color} {shape} on {background}".into(),
            pair_template: "a {color} {shape} and a {color2} {shape2} on {background}".into(),
            ..GrammarConfig::default()
        };
        g.validate().unwrap();
        let obj = |shape, color| SceneObject {
            shape,
            color,
            bbox: BBox { y: 0, x: 0, h: 4, w: 4 },
        };
        assert_eq!(g.caption(&g.template, &[obj(0, 1)], 2), "a white circle on sky");
        assert_eq!(g.caption(&g.pair_template, &[obj(0, 0), obj(3, 7)], 3), "a red circle and a black cross on night");
    }

    #[test]
    fn shape_masks_differ() {
        let masks: Vec<Vec<bool>> = (0..4)
            .map(|s| (0..64).map(|i| shape_covers(s, 8, i / 8, i % 8)).collect())
            .collect();
        for a in 0..4 {
            assert!(masks[a].iter().any(|&m| m));
            for b in a + 1..4 {
                assert_ne!(masks[a], masks[b]);
            }
        }
    }

    #[test]
    fn subject_render_is_a_box_crop() {
        let g = GrammarConfig::default();
        let crop = g.render_subject(1, 2, 0, 6, 9).unwrap();
        assert_eq!((crop.height(), crop.width()), (8, 8));
        assert_eq!(crop.pixel(4, 4), g.colors[2].rgb);
        assert!(g.render_subject(1, 2, 0, 15, 9).is_err());
    }
}
