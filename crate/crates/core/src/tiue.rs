//! Text-and-image unified encoder.
//!
//! Subject images are embedded by the image tower, mapped to pseudo word
//! embeddings by a trainable MLP, and written over the caption's word
//! embeddings at the subject positions (`w_r`). The text tower encodes both
//! `w_r` and the plain caption; the unified sequence `h_u` takes `h_r` rows
//! at the subject positions and `h_y` rows everywhere else.

use rand::Rng;

use crate::encoders::text::linear;
use crate::encoders::{EmbeddingSequence, HiddenSequence, ImageEncoder, Sequence, TextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, ParameterStore, Real, Tensor, Var};

/// MLP from image embeddings to pseudo word embeddings: two GELU hidden
/// layers plus a linear skip path from input to output.
#[derive(Clone, Debug)]
pub struct Projector {
    pub d_img: usize,
    pub d_emb: usize,
    pub hidden: usize,
}

impl Projector {
    pub const PREFIX: &'static str = "projector.";

    pub fn init_params<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.init_linear(rng, "projector.fc1", self.d_img, self.hidden)?;
        store.init_linear(rng, "projector.fc2", self.hidden, self.hidden)?;
        store.init_linear(rng, "projector.fc3", self.hidden, self.d_emb)?;
        let std = 1.0 / (self.d_img as f64).sqrt();
        store.init_normal(rng, "projector.skip.w", &[self.d_img, self.d_emb], std)
    }

    /// Diagnostic weights for `d_img == d_emb`: zero MLP output and an
    /// identity skip, so the projector returns its input unchanged.
    pub fn identity_params<T: Real>(&self) -> Result<ParameterStore<T>> {
        if self.d_img != self.d_emb {
            return Err(Error::invalid("identity projector needs d_img == d_emb"));
        }
        let mut s = ParameterStore::new();
        let (d, h) = (self.d_img, self.hidden);
        s.insert("projector.fc1.w", Tensor::zeros(&[d, h]), true)?;
        s.insert("projector.fc1.b", Tensor::zeros(&[h]), true)?;
        s.insert("projector.fc2.w", Tensor::zeros(&[h, h]), true)?;
        s.insert("projector.fc2.b", Tensor::zeros(&[h]), true)?;
        s.insert("projector.fc3.w", Tensor::zeros(&[h, d]), true)?;
        s.insert("projector.fc3.b", Tensor::zeros(&[d]), true)?;
        let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { T::one() } else { T::zero() });
        s.insert("projector.skip.w", eye, true)?;
        Ok(s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, e: Var) -> Result<Var> {
        let h = linear(g, ps, "projector.fc1", e)?;
        let h = g.gelu(h);
        let h = linear(g, ps, "projector.fc2", h)?;
        let h = g.gelu(h);
        let out = linear(g, ps, "projector.fc3", h)?;
        let skip_w = g.param(ps, "projector.skip.w")?;
        let skip = g.matmul(e, skip_w)?;
        g.add(out, skip)
    }

    pub fn project<T: Real>(&self, ps: &ParameterStore<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        if e.numel() != self.d_img || !e.is_finite() {
            return Err(Error::invalid(format!("image embedding must be {} finite values", self.d_img)));
        }
        let mut g = Graph::new();
        let ev = g.constant(e.clone().reshape(&[1, self.d_img])?);
        let p = self.forward(&mut g, ps, ev)?;
        g.value(p).clone().reshape(&[self.d_emb])
    }
}

/// The `(y, x_s, p)` input: a caption, subject images, and the caption
/// indices (BOS = 0) the subjects refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    caption: TokenSequence,
    subjects: Vec<Image>,
    positions: Vec<usize>,
}

impl ConditionSet {
    pub fn new(caption: TokenSequence, subjects: Vec<Image>, positions: Vec<usize>) -> Result<Self> {
        if subjects.len() != positions.len() {
            return Err(Error::invalid(format!(
                "{} subject images for {} positions",
                subjects.len(),
                positions.len()
            )));
        }
        check_positions(&positions, |p| caption.is_content(p))?;
        Ok(ConditionSet {
            caption,
            subjects,
            positions,
        })
    }

    pub fn text_only(caption: TokenSequence) -> Self {
        ConditionSet {
            caption,
            subjects: Vec::new(),
            positions: Vec::new(),
        }
    }

    /// Same caption without the subjects (the pure-text branch).
    pub fn without_subjects(&self) -> Self {
        Self::text_only(self.caption.clone())
    }

    pub fn caption(&self) -> &TokenSequence {
        &self.caption
    }

    pub fn subjects(&self) -> &[Image] {
        &self.subjects
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn has_subjects(&self) -> bool {
        !self.positions.is_empty()
    }
}

fn check_positions(positions: &[usize], is_content: impl Fn(usize) -> bool) -> Result<()> {
    for (i, &p) in positions.iter().enumerate() {
        if !is_content(p) {
            return Err(Error::InvalidPosition {
                position: p,
                reason: "must point at a word, not BOS/EOS/PAD or past the caption".into(),
            });
        }
        if i > 0 && positions[i - 1] >= p {
            return Err(Error::InvalidPosition {
                position: p,
                reason: "positions must be strictly increasing".into(),
            });
        }
    }
    Ok(())
}

/// `h_u` plus a mask marking the rows taken from `h_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedCondition<T> {
    pub h_u: HiddenSequence<T>,
    pub provenance: Vec<bool>,
}

/// Every intermediate of one unified encoding, for inspection.
#[derive(Clone, Debug)]
pub struct TiueParts<T> {
    pub w_y: EmbeddingSequence<T>,
    pub w_r: EmbeddingSequence<T>,
    pub h_y: HiddenSequence<T>,
    pub h_r: HiddenSequence<T>,
    pub unified: UnifiedCondition<T>,
}

#[derive(Clone, Debug)]
pub struct Tiue {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub projector: Projector,
}

/// Graph nodes produced by [`Tiue::encode_batch`].
#[derive(Clone, Copy, Debug)]
pub struct TiueVars {
    pub w_y: Var,
    pub h_y: Var,
    /// `w_r` and `h_r` for the subset of conditions that have subjects,
    /// in input order.
    pub w_r: Option<Var>,
    pub h_r: Option<Var>,
    pub h_u: Var,
}

impl Tiue {
    /// Replaces rows `rows` of `w` by `pseudo` plus the positional embedding
    /// of `positions` (the in-caption index of each row).
    pub fn assemble_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        w: Var,
        pseudo: Var,
        rows: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let pos = self.text.positional_rows(g, ps, positions)?;
        let rows_in = g.add(pseudo, pos)?;
        g.scatter_rows(w, rows_in, rows)
    }

    /// Batched unified encoding of `conds`, all as `[B·L, d]` nodes.
    pub fn encode_batch<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, conds: &[&ConditionSet]) -> Result<TiueVars> {
        let l = self.text.max_len;
        let captions: Vec<TokenSequence> = conds.iter().map(|c| c.caption.clone()).collect();
        let w_y = self.text.embed(g, ps, &captions)?;
        let h_y = self.text.encode(g, ps, w_y)?;

        let with_subjects: Vec<usize> = (0..conds.len()).filter(|&b| conds[b].has_subjects()).collect();
        if with_subjects.is_empty() {
            return Ok(TiueVars {
                w_y,
                h_y,
                w_r: None,
                h_r: None,
                h_u: h_y,
            });
        }
        let sub_rows: Vec<usize> = with_subjects.iter().flat_map(|&b| b * l..(b + 1) * l).collect();
        let w_sub = g.gather_rows(w_y, &sub_rows)?;

        let mut images = Vec::new();
        let mut local_rows = Vec::new();
        let mut global_rows = Vec::new();
        let mut positions = Vec::new();
        for (j, &b) in with_subjects.iter().enumerate() {
            for (img, &p) in conds[b].subjects.iter().zip(&conds[b].positions) {
                images.push(img);
                local_rows.push(j * l + p);
                global_rows.push(b * l + p);
                positions.push(p);
            }
        }
        let e = self.image.forward(g, ps, &images)?;
        let pseudo = self.projector.forward(g, ps, e)?;
        let w_r = self.assemble_graph(g, ps, w_sub, pseudo, &local_rows, &positions)?;
        let h_r = self.text.encode(g, ps, w_r)?;
        let picked = g.gather_rows(h_r, &local_rows)?;
        let h_u = g.scatter_rows(h_y, picked, &global_rows)?;
        Ok(TiueVars {
            w_y,
            h_y,
            w_r: Some(w_r),
            h_r: Some(h_r),
            h_u,
        })
    }

    /// `w_r`: `w_y` with the rows at `positions` replaced by the pseudo
    /// embeddings plus their positional terms.
    pub fn assemble<T: Real>(
        &self,
        ps: &ParameterStore<T>,
        w_y: &EmbeddingSequence<T>,
        pseudo: &[Tensor<T>],
        positions: &[usize],
    ) -> Result<EmbeddingSequence<T>> {
        if pseudo.len() != positions.len() {
            return Err(Error::invalid("one pseudo embedding per position required"));
        }
        let true_len = w_y.mask.iter().filter(|&&m| m).count();
        check_positions(positions, |p| p >= 1 && p + 1 < true_len)?;
        if positions.is_empty() {
            return Ok(w_y.clone());
        }
        let d = self.projector.d_emb;
        let mut flat = Vec::with_capacity(pseudo.len() * d);
        for p in pseudo {
            if p.numel() != d {
                return Err(Error::invalid(format!("pseudo embedding must have {d} values")));
            }
            flat.extend_from_slice(p.data());
        }
        let mut g = Graph::new();
        let w = g.constant(w_y.values.clone());
        let pv = g.constant(Tensor::new(vec![pseudo.len(), d], flat)?);
        let out = self.assemble_graph(&mut g, ps, w, pv, positions, positions)?;
        Ok(Sequence {
            values: g.value(out).clone(),
            mask: w_y.mask.clone(),
        })
    }

    pub fn encode_parts<T: Real>(&self, ps: &ParameterStore<T>, cond: &ConditionSet) -> Result<TiueParts<T>> {
        let mut g = Graph::new();
        let vars = self.encode_batch(&mut g, ps, &[cond])?;
        let mask = cond.caption.mask();
        let seq = |v: Var| Sequence {
            values: g.value(v).clone(),
            mask: mask.clone(),
        };
        let provenance = (0..self.text.max_len).map(|i| cond.positions.contains(&i)).collect();
        Ok(TiueParts {
            w_y: seq(vars.w_y),
            w_r: seq(vars.w_r.unwrap_or(vars.w_y)),
            h_y: seq(vars.h_y),
            h_r: seq(vars.h_r.unwrap_or(vars.h_y)),
            unified: UnifiedCondition {
                h_u: seq(vars.h_u),
                provenance,
            },
        })
    }

    pub fn encode_unified<T: Real>(&self, ps: &ParameterStore<T>, cond: &ConditionSet) -> Result<UnifiedCondition<T>> {
        let parts = self.encode_parts(ps, cond)?;
        if !parts.unified.h_u.values.is_finite() {
            return Err(Error::NonFinite("unified condition".into()));
        }
        Ok(parts.unified)
    }

    /// `h_y` for a caption: embed then encode.
    pub fn encode_text_condition<T: Real>(&self, ps: &ParameterStore<T>, caption: &TokenSequence) -> Result<HiddenSequence<T>> {
        let w = self.text.embed_sequence(ps, caption)?;
        self.text.encode_sequence(ps, &w)
    }
}
