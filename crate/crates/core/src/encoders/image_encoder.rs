//! Small convolutional image encoder standing in for a pretrained image tower.

use rand::Rng;

use crate::encoders::text::linear;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, ParameterStore, Real, Spatial, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    /// Side length every input is resized to.
    pub resolution: usize,
    /// Output channels of the three conv layers.
    pub channels: [usize; 3],
    pub d_img: usize,
    /// Sizes of the auxiliary classification heads used during pretraining.
    pub n_shapes: usize,
    pub n_colors: usize,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "image.";

    pub fn init_params<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let [c1, c2, c3] = self.channels;
        store.init_conv(rng, "image.conv1", 3, 3, c1)?;
        store.init_conv(rng, "image.conv2", 3, c1, c2)?;
        store.init_conv(rng, "image.conv3", 3, c2, c3)?;
        store.init_linear(rng, "image.head", c3, self.d_img)?;
        store.init_linear(rng, "image.cls_shape", self.d_img, self.n_shapes)?;
        store.init_linear(rng, "image.cls_color", self.d_img, self.n_colors)?;
        Ok(())
    }

    /// Image embeddings `[S, d_img]` for a batch of images of any size.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, images: &[&Image]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        let r = self.resolution;
        let mut data = Vec::with_capacity(images.len() * r * r * 3);
        for img in images {
            let resized = img.resize(r, r)?;
            data.extend(resized.data().iter().map(|&v| T::lit(v as f64)));
        }
        let x = g.constant(Tensor::new(vec![images.len() * r * r, 3], data)?);
        let geom = Spatial::new(images.len(), r, r);
        let h = conv(g, ps, "image.conv1", x, geom)?;
        let h = g.gelu(h);
        let h = g.avg_pool2(h, geom)?;
        let geom = geom.halved();
        let h = conv(g, ps, "image.conv2", h, geom)?;
        let h = g.gelu(h);
        let h = g.avg_pool2(h, geom)?;
        let geom = geom.halved();
        let h = conv(g, ps, "image.conv3", h, geom)?;
        let h = g.gelu(h);
        let pooled = g.group_mean(h, geom.pixels())?;
        linear(g, ps, "image.head", pooled)
    }

    /// Shape and colour logits from embeddings (pretraining heads).
    pub fn classify<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, emb: Var) -> Result<(Var, Var)> {
        let shape = linear(g, ps, "image.cls_shape", emb)?;
        let color = linear(g, ps, "image.cls_color", emb)?;
        Ok((shape, color))
    }

    pub fn encode_image<T: Real>(&self, ps: &ParameterStore<T>, img: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, ps, &[img])?;
        g.value(e).clone().reshape(&[self.d_img])
    }
}

pub(crate) fn conv<T: Real>(g: &mut Graph<T>, ps: &ParameterStore<T>, prefix: &str, x: Var, geom: Spatial) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    let k = ((g.value(w).dims2().0 / g.value(x).dims2().1) as f64).sqrt().round() as usize;
    g.conv2d(x, w, b, geom, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ImageEncoder, ParameterStore<f64>) {
        let enc = ImageEncoder {
            resolution: 8,
            channels: [4, 6, 6],
            d_img: 5,
            n_shapes: 4,
            n_colors: 3,
        };
        let mut ps = ParameterStore::new();
        enc.init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (enc, ps)
    }

    #[test]
    fn zero_image_gives_fixed_vector() {
        let (enc, ps) = setup();
        let zero = Image::filled(8, 8, [0.0; 3]);
        let a = enc.encode_image(&ps, &zero).unwrap();
        let b = enc.encode_image(&ps, &zero.clone()).unwrap();
        assert_eq!(a.shape(), &[5]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn resize_is_idempotent_at_native_resolution() {
        let (enc, ps) = setup();
        let img = Image::new(8, 8, (0..192).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap();
        let direct = enc.encode_image(&ps, &img).unwrap();
        let resized = enc.encode_image(&ps, &img.resize(8, 8).unwrap()).unwrap();
        assert!(direct.bit_eq(&resized));
        let big = img.resize(13, 11).unwrap();
        assert!(enc.encode_image(&ps, &big).unwrap().is_finite());
    }

    #[test]
    fn batch_matches_single_and_heads_have_right_width() {
        let (enc, ps) = setup();
        let a = Image::filled(6, 6, [0.5, -0.2, 0.1]);
        let b = Image::filled(9, 4, [-0.9, 0.4, 0.8]);
        let mut g = Graph::new();
        let e = enc.forward(&mut g, &ps, &[&a, &b]).unwrap();
        let (s, c) = enc.classify(&mut g, &ps, e).unwrap();
        assert_eq!(g.shape(s), &[2, 4]);
        assert_eq!(g.shape(c), &[2, 3]);
        let single = enc.encode_image(&ps, &b).unwrap();
        let row = Tensor::new(vec![5], g.value(e).row(1).to_vec()).unwrap();
        assert!(row.max_abs_diff(&single) < 1e-12);
        assert!(enc.forward(&mut g, &ps, &[]).is_err());
    }
}
