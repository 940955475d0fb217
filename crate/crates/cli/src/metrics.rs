//! Oracle metrics for generated scenes, computed from the known grammar.
//!
//! * Background: per-channel median of the border pixels, classified as the
//!   nearest grammar background.
//! * Foreground: pixels farther than [`FOREGROUND_DISTANCE`] from the
//!   estimated background colour.
//! * Shape: best template IoU inside the foreground bounding box.
//! * Subject fidelity: histogram intersection between the generated and
//!   subject foregrounds, each pixel binned to its nearest grammar colour.
//!   Chance floor on uniform noise is about 0.13.
//! * Text alignment: half for the captioned background, half for the
//!   captioned shape. Chance floor is about 0.25.
//! * Background leakage: `1 − d / LEAKAGE_SCALE`, clamped to `[0, 1]`, where
//!   `d` is the distance between the generated and the subject backgrounds.
//!   Noise images score about 0.6 against the default backgrounds, since
//!   the median of uniform noise sits near mid-grey.

use serde::Serialize;
use umm_core::datagen::{shape_covers, Fixture, GrammarConfig};
use umm_core::image::Image;

pub const FOREGROUND_DISTANCE: f32 = 0.4;
pub const LEAKAGE_SCALE: f32 = 1.0;

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn nearest(rgb: [f32; 3], palette: &[[f32; 3]]) -> usize {
    let mut best = 0;
    for (i, p) in palette.iter().enumerate() {
        if dist(rgb, *p) < dist(rgb, palette[best]) {
            best = i;
        }
    }
    best
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-channel median of the outermost ring of pixels.
pub fn border_colour(img: &Image) -> [f32; 3] {
    let (h, w) = (img.height(), img.width());
    let mut ch: [Vec<f32>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                let p = img.pixel(y, x);
                for c in 0..3 {
                    ch[c].push(p[c]);
                }
            }
        }
    }
    [median(&mut ch[0]), median(&mut ch[1]), median(&mut ch[2])]
}

/// What the oracle reads off one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneReading {
    pub background_rgb: [f32; 3],
    pub background: usize,
    /// Row-major foreground mask.
    pub mask: Vec<bool>,
    /// Best-matching shape and its IoU, if any foreground exists.
    pub shape: Option<(usize, f64)>,
    /// Normalized histogram over the grammar colours of the foreground.
    pub colours: Vec<f64>,
}

pub fn read_scene(img: &Image, grammar: &GrammarConfig) -> SceneReading {
    let bg = border_colour(img);
    let backgrounds: Vec<[f32; 3]> = grammar.backgrounds.iter().map(|b| b.rgb).collect();
    let palette: Vec<[f32; 3]> = grammar.colors.iter().map(|c| c.rgb).collect();
    let (h, w) = (img.height(), img.width());
    let mut mask = vec![false; h * w];
    let mut colours = vec![0.0; palette.len()];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            if dist(p, bg) > FOREGROUND_DISTANCE {
                mask[y * w + x] = true;
                colours[nearest(p, &palette)] += 1.0;
                count += 1;
            }
        }
    }
    if count > 0 {
        colours.iter_mut().for_each(|c| *c /= count as f64);
    }
    let shape = classify_shape(&mask, h, w, grammar.shapes.len());
    SceneReading {
        background_rgb: bg,
        background: nearest(bg, &backgrounds),
        mask,
        shape,
        colours,
    }
}

/// Template IoU of each shape over the bounding box of `mask`; returns the
/// best (lowest index on ties).
pub fn classify_shape(mask: &[bool], h: usize, w: usize, n_shapes: usize) -> Option<(usize, f64)> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX || n_shapes == 0 {
        return None;
    }
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let side = bh.max(bw);
    let mut best: Option<(usize, f64)> = None;
    for s in 0..n_shapes {
        let (mut inter, mut union) = (0usize, 0usize);
        for dy in 0..bh {
            for dx in 0..bw {
                let t = shape_covers(s, side, dy * side / bh, dx * side / bw);
                let m = mask[(y0 + dy) * w + x0 + dx];
                inter += (t && m) as usize;
                union += (t || m) as usize;
            }
        }
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((s, iou));
        }
    }
    best
}

/// Scores of one generated image against its fixture. Column order is the
/// CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub index: usize,
    pub alpha: f64,
    pub subject_fidelity: f64,
    pub text_alignment: f64,
    pub background_leakage: f64,
    pub background_ok: bool,
    pub shape_ok: bool,
}

pub fn oracle_metrics(generated: &Image, fixture: &Fixture, grammar: &GrammarConfig) -> (f64, f64, f64, bool, bool) {
    let gen = read_scene(generated, grammar);
    let subject = read_scene(&fixture.subject, grammar);
    let fidelity: f64 = gen.colours.iter().zip(&subject.colours).map(|(a, b)| a.min(*b)).sum();
    let background_ok = gen.background == fixture.background;
    let shape_ok = gen.shape.is_some_and(|(s, _)| s == fixture.shape);
    let alignment = 0.5 * background_ok as u8 as f64 + 0.5 * shape_ok as u8 as f64;
    let d = dist(gen.background_rgb, subject.background_rgb);
    let leakage = (1.0 - d / LEAKAGE_SCALE).clamp(0.0, 1.0) as f64;
    (fidelity.clamp(0.0, 1.0), alignment, leakage, background_ok, shape_ok)
}

pub fn score(index: usize, alpha: f64, generated: &Image, fixture: &Fixture, grammar: &GrammarConfig) -> SampleScore {
    let (subject_fidelity, text_alignment, background_leakage, background_ok, shape_ok) = oracle_metrics(generated, fixture, grammar);
    SampleScore {
        index,
        alpha,
        subject_fidelity,
        text_alignment,
        background_leakage,
        background_ok,
        shape_ok,
    }
}

/// Mean scores of one setting plus its per-sample rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub alpha: f64,
    pub subject_fidelity: f64,
    pub text_alignment: f64,
    pub background_leakage: f64,
    pub samples: Vec<SampleScore>,
}

#[derive(Serialize)]
struct SummaryRow {
    alpha: f64,
    subject_fidelity: f64,
    text_alignment: f64,
    background_leakage: f64,
    n: usize,
}

impl MetricReport {
    pub fn from_samples(alpha: f64, samples: Vec<SampleScore>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
        MetricReport {
            alpha,
            subject_fidelity: mean(|s| s.subject_fidelity),
            text_alignment: mean(|s| s.text_alignment),
            background_leakage: mean(|s| s.background_leakage),
            samples,
        }
    }

    /// Summary table, one row per report:
    /// `alpha,subject_fidelity,text_alignment,background_leakage,n`.
    pub fn summary_csv(reports: &[MetricReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in reports {
            w.serialize(SummaryRow {
                alpha: r.alpha,
                subject_fidelity: r.subject_fidelity,
                text_alignment: r.text_alignment,
                background_leakage: r.background_leakage,
                n: r.samples.len(),
            })
            .expect("in-memory csv write");
        }
        if reports.is_empty() {
            return "alpha,subject_fidelity,text_alignment,background_leakage,n\n".into();
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    /// Per-sample rows of every report, in report order.
    pub fn samples_csv(reports: &[MetricReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut any = false;
        for s in reports.iter().flat_map(|r| &r.samples) {
            w.serialize(s).expect("in-memory csv write");
            any = true;
        }
        if !any {
            return "index,alpha,subject_fidelity,text_alignment,background_leakage,background_ok,shape_ok\n".into();
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// The ground-truth scene for a fixture: caption background, subject
/// foreground pasted at the centre.
pub fn reference_render(fixture: &Fixture, grammar: &GrammarConfig) -> Image {
    let mut img = grammar.render_background(fixture.background);
    let sub = &fixture.subject;
    let sub_bg = border_colour(sub);
    let oy = (img.height() - sub.height().min(img.height())) / 2;
    let ox = (img.width() - sub.width().min(img.width())) / 2;
    for y in 0..sub.height().min(img.height()) {
        for x in 0..sub.width().min(img.width()) {
            let p = sub.pixel(y, x);
            if dist(p, sub_bg) > FOREGROUND_DISTANCE {
                img.set_pixel(oy + y, ox + x, p);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use umm_core::datagen::make_fixtures;

    #[test]
    fn reference_render_scores_perfectly() {
        let g = GrammarConfig::default();
        for f in make_fixtures(&g, 40, 5).unwrap() {
            let img = reference_render(&f, &g);
            let (fid, align, _, bg_ok, shape_ok) = oracle_metrics(&img, &f, &g);
            assert!(bg_ok && shape_ok, "{f:?}");
            assert_eq!(fid, 1.0);
            assert_eq!(align, 1.0);
        }
    }

    #[test]
    fn subject_background_scores_full_leakage() {
        let g = GrammarConfig::default();
        let f = &make_fixtures(&g, 1, 2).unwrap()[0];
        let leaky = g.render_background(f.subject_background);
        let (_, _, leak, _, _) = oracle_metrics(&leaky, f, &g);
        assert!(leak > 0.9, "{leak}");
        let (_, _, clean, _, _) = oracle_metrics(&reference_render(f, &g), f, &g);
        assert!(clean < leak);
    }

    #[test]
    fn noise_images_sit_near_chance() {
        let g = GrammarConfig::default();
        let fixtures = make_fixtures(&g, 100, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut fid, mut align) = (0.0, 0.0);
        for f in &fixtures {
            let data = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let img = Image::new(16, 16, data).unwrap();
            let (a, b, _, _, _) = oracle_metrics(&img, f, &g);
            fid += a;
            align += b;
        }
        let (fid, align) = (fid / 100.0, align / 100.0);
        assert!(fid < 0.3, "fidelity floor {fid}");
        assert!(align < 0.45, "alignment floor {align}");
    }

    #[test]
    fn metrics_are_deterministic_and_bounded() {
        let g = GrammarConfig::default();
        let f = &make_fixtures(&g, 1, 3).unwrap()[0];
        let img = g.render_background(0);
        let a = score(0, 0.5, &img, f, &g);
        assert_eq!(a, score(0, 0.5, &img, f, &g));
        for v in [a.subject_fidelity, a.text_alignment, a.background_leakage] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn csv_column_order_is_fixed() {
        let s = SampleScore {
            index: 3,
            alpha: 0.5,
            subject_fidelity: 0.25,
            text_alignment: 1.0,
            background_leakage: 0.0,
            background_ok: true,
            shape_ok: true,
        };
        let r = MetricReport::from_samples(0.5, vec![s]);
        assert_eq!(
            MetricReport::summary_csv(std::slice::from_ref(&r)),
            "alpha,subject_fidelity,text_alignment,background_leakage,n\n0.5,0.25,1.0,0.0,1\n"
        );
        assert_eq!(
            MetricReport::samples_csv(&[r]),
            "index,alpha,subject_fidelity,text_alignment,background_leakage,background_ok,shape_ok\n3,0.5,0.25,1.0,0.0,true,true\n"
        );
        assert!(MetricReport::summary_csv(&[]).starts_with("alpha,"));
    }
}
