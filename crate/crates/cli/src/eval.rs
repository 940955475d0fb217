//! Fuse-ratio sweeps and pseudo-word embedding export.

use anyhow::{bail, Context, Result};
use umm_core::datagen::{make_fixtures, Fixture, TrainingSample};
use umm_core::diffusion::{sample_batch, SamplerConfig};
use umm_core::image::Image;
use umm_core::tiue::ConditionSet;
use umm_core::trainer::TrainedModel;

use crate::metrics::{score, MetricReport};

/// Fixtures are sampled this many at a time.
const SAMPLE_CHUNK: usize = 32;

pub fn fixture_condition(trained: &TrainedModel, f: &Fixture) -> Result<ConditionSet> {
    let tokens = trained.vocab.tokenize(&f.caption, trained.model.config.max_len)?;
    Ok(ConditionSet::new(tokens, vec![f.subject.clone()], vec![f.position])?)
}

/// Samples every fixture once per α (same starting noise across α) and
/// scores the results. Also returns one row of images per α for the first
/// `grid_cols` fixtures, preceded by a row of subject crops.
pub fn ablate_alpha(
    trained: &TrainedModel,
    alphas: &[f64],
    fixtures: &[Fixture],
    sampler: &SamplerConfig,
    grid_cols: usize,
) -> Result<(Vec<MetricReport>, Image)> {
    if alphas.is_empty() || fixtures.is_empty() {
        bail!("need at least one alpha and one fixture");
    }
    let conds = fixtures.iter().map(|f| fixture_condition(trained, f)).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..fixtures.len() as u64).map(|i| sampler.seed.wrapping_add(i)).collect();
    let size = trained.model.config.image_size;
    let cols = grid_cols.clamp(1, fixtures.len());
    let mut tiles: Vec<Image> = fixtures[..cols].iter().map(|f| f.subject.resize(size, size)).collect::<Result<_, _>>()?;
    let mut reports = Vec::new();
    for &alpha in alphas {
        let cfg = SamplerConfig { alpha, ..sampler.clone() };
        cfg.validate()?;
        let mut images = Vec::with_capacity(fixtures.len());
        for (c, s) in conds.chunks(SAMPLE_CHUNK).zip(seeds.chunks(SAMPLE_CHUNK)) {
            images.extend(sample_batch(&trained.model, trained.params(), c, &cfg, s)?);
        }
        let scores = images
            .iter()
            .zip(fixtures)
            .enumerate()
            .map(|(i, (img, f))| score(i, alpha, img, f, &trained.grammar))
            .collect();
        tiles.extend(images.into_iter().take(cols));
        let report = MetricReport::from_samples(alpha, scores);
        log::info!(
            "alpha {alpha}: fidelity {:.3} alignment {:.3} leakage {:.3}",
            report.subject_fidelity,
            report.text_alignment,
            report.background_leakage
        );
        reports.push(report);
    }
    Ok((reports, Image::grid(&tiles, cols)?))
}

pub fn default_fixtures(trained: &TrainedModel, count: usize, seed: u64) -> Result<Vec<Fixture>> {
    Ok(make_fixtures(&trained.grammar, count, seed)?)
}

/// Pseudo-word embeddings with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub ratio: f64,
}

impl EmbeddingExport {
    /// `label,e0,e1,…` with a header line.
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|i| format!("e{i}"))).collect();
        w.write_record(&header).expect("in-memory csv write");
        for (l, r) in self.labels.iter().zip(&self.rows) {
            let rec: Vec<String> = std::iter::once(l.clone()).chain(r.iter().map(|v| v.to_string())).collect();
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// Minimum distance between class centroids divided by the mean distance
/// of points to their own centroid. Zero when both vanish.
pub fn separation_ratio(rows: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    if rows.len() != labels.len() || rows.is_empty() {
        bail!("need one label per embedding");
    }
    let mut classes: Vec<&String> = labels.iter().collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        bail!("separation needs at least two classes, got {}", classes.len());
    }
    let d = rows[0].len();
    let centroid = |c: &String| {
        let members: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, l)| *l == c).map(|(r, _)| r).collect();
        (0..d).map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64).collect::<Vec<f64>>()
    };
    let centroids: Vec<Vec<f64>> = classes.iter().map(|c| centroid(c)).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut inter = f64::INFINITY;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter = inter.min(dist(&centroids[i], &centroids[j]));
        }
    }
    let intra = rows
        .iter()
        .zip(labels)
        .map(|(r, l)| dist(r, &centroids[classes.iter().position(|c| *c == l).expect("label is a class")]))
        .sum::<f64>()
        / rows.len() as f64;
    if inter == 0.0 {
        return Ok(0.0);
    }
    Ok(inter / intra)
}

/// Embeds the subject crops of `samples`, labelled by shape, keeping at most
/// `per_class` crops per label in corpus order.
pub fn export_embeddings(trained: &TrainedModel, samples: &[TrainingSample], per_class: usize) -> Result<EmbeddingExport> {
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    let mut labels = Vec::new();
    let mut crops = Vec::new();
    for s in samples.iter().flat_map(|s| &s.subjects) {
        let n = counts.entry(s.label.clone()).or_default();
        if *n < per_class {
            *n += 1;
            labels.push(s.label.clone());
            crops.push(&s.crop);
        }
    }
    export_crops(trained, &crops, &labels)
}

pub fn export_crops(trained: &TrainedModel, crops: &[&Image], labels: &[String]) -> Result<EmbeddingExport> {
    let mut per_class = std::collections::BTreeMap::<&String, usize>::new();
    for l in labels {
        *per_class.entry(l).or_default() += 1;
    }
    if per_class.len() < 2 {
        bail!("embedding export needs at least two classes, got {}", per_class.len());
    }
    if let Some((l, n)) = per_class.iter().find(|(_, n)| **n < 4) {
        bail!("class `{l}` has {n} images; at least 4 per class are needed");
    }
    let tiue = &trained.model.tiue;
    let ps = trained.params();
    let mut rows = Vec::with_capacity(crops.len());
    for img in crops {
        let e = tiue.image.encode_image(ps, img).context("encoding subject")?;
        let p = tiue.projector.project(ps, &e)?;
        rows.push(p.data().iter().map(|&v| v as f64).collect());
    }
    let ratio = separation_ratio(&rows, labels)?;
    Ok(EmbeddingExport {
        labels: labels.to_vec(),
        rows,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn separation_of_known_clusters() {
        let rows = vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![10.0, 1.0], vec![10.0, -1.0]];
        let r = separation_ratio(&rows, &labels(&["a", "a", "b", "b"])).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn identical_classes_score_zero_and_single_class_fails() {
        let rows = vec![vec![1.0], vec![2.0], vec![1.0], vec![2.0]];
        assert_eq!(separation_ratio(&rows, &labels(&["a", "a", "b", "b"])).unwrap(), 0.0);
        assert!(separation_ratio(&rows, &labels(&["a", "a", "a", "a"])).is_err());
    }
}
