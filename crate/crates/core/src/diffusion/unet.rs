//! Two-resolution U-Net noise predictor with cross-attention conditioning.

use rand::Rng;

use crate::encoders::conv;
use crate::encoders::text::{layer_norm, linear};
use crate::error::{Error, Result};
use crate::numerics::{AttnShape, Graph, ParameterStore, Real, Spatial, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub image_size: usize,
    /// Channel width at full resolution; the half-resolution level uses twice this.
    pub channels: usize,
    pub heads: usize,
    /// Width and length of conditioning sequences.
    pub cond_dim: usize,
    pub cond_len: usize,
}

const ATTN_BLOCKS: [&str; 4] = ["unet.attn_down0", "unet.attn_down1", "unet.attn_mid", "unet.attn_up1"];

impl Denoiser {
    pub const PREFIX: &'static str = "unet.";

    fn time_dim(&self) -> usize {
        4 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) {
            return Err(Error::invalid("denoiser image size must be even"));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid("denoiser channels must be even and divisible by heads"));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let c = self.channels;
        let td = self.time_dim();
        store.init_linear(rng, "unet.time.fc1", c, td)?;
        store.init_linear(rng, "unet.time.fc2", td, td)?;
        store.init_conv(rng, "unet.conv_in", 3, 3, c)?;
        self.init_res(store, rng, "unet.down0", c, c)?;
        self.init_res(store, rng, "unet.down1", c, 2 * c)?;
        self.init_res(store, rng, "unet.mid", 2 * c, 2 * c)?;
        self.init_res(store, rng, "unet.up1", 4 * c, 2 * c)?;
        self.init_res(store, rng, "unet.up0", 3 * c, c)?;
        for (name, width) in ATTN_BLOCKS.iter().zip([c, 2 * c, 2 * c, 2 * c]) {
            self.init_attn(store, rng, name, width)?;
        }
        self.init_attn(store, rng, "unet.attn_up0", c)?;
        store.init_layer_norm("unet.norm_out", c)?;
        store.init_normal(rng, "unet.conv_out.w", &[9 * c, 3], 0.1 / (9.0 * c as f64).sqrt())?;
        store.init_const("unet.conv_out.b", &[3], 0.0)?;
        store.init_normal(rng, "unet.null_cond", &[self.cond_len, self.cond_dim], 1.0)?;
        Ok(())
    }

    fn init_res<T: Real>(&self, s: &mut ParameterStore<T>, rng: &mut impl Rng, p: &str, cin: usize, cout: usize) -> Result<()> {
        s.init_layer_norm(&format!("{p}.ln1"), cin)?;
        s.init_conv(rng, &format!("{p}.conv1"), 3, cin, cout)?;
        s.init_linear(rng, &format!("{p}.time"), self.time_dim(), cout)?;
        s.init_layer_norm(&format!("{p}.ln2"), cout)?;
        s.init_conv(rng, &format!("{p}.conv2"), 3, cout, cout)?;
        if cin != cout {
            s.init_linear(rng, &format!("{p}.skip"), cin, cout)?;
        }
        Ok(())
    }

    fn init_attn<T: Real>(&self, s: &mut ParameterStore<T>, rng: &mut impl Rng, p: &str, c: usize) -> Result<()> {
        s.init_layer_norm(&format!("{p}.ln"), c)?;
        s.init_linear(rng, &format!("{p}.q"), c, c)?;
        s.init_linear(rng, &format!("{p}.k"), self.cond_dim, c)?;
        s.init_linear(rng, &format!("{p}.v"), self.cond_dim, c)?;
        s.init_linear(rng, &format!("{p}.o"), c, c)?;
        Ok(())
    }

    /// `n` copies of the learned null condition, `[n·L, d]`.
    pub fn null_condition<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, n: usize) -> Result<Var> {
        let table = g.param(ps, "unet.null_cond")?;
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..self.cond_len).collect();
        g.gather_rows(table, &idx)
    }

    /// Noise prediction for `x_t` (`[N·H·W, 3]`, NHWC rows) at per-sample
    /// timesteps, conditioned on `cond` (`[N·L, d]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, x_t: Var, t: &[usize], cond: Var) -> Result<Var> {
        let n = t.len();
        let s = self.image_size;
        let geom = Spatial::new(n, s, s);
        if n == 0 || g.shape(x_t) != [geom.rows(), 3] {
            return Err(Error::ShapeMismatch {
                op: "denoiser input",
                lhs: g.shape(x_t).to_vec(),
                rhs: vec![geom.rows(), 3],
            });
        }
        if g.shape(cond) != [n * self.cond_len, self.cond_dim] {
            return Err(Error::ShapeMismatch {
                op: "denoiser condition",
                lhs: g.shape(cond).to_vec(),
                rhs: vec![n * self.cond_len, self.cond_dim],
            });
        }
        let temb = g.constant(timestep_embedding(t, self.channels));
        let temb = linear(g, ps, "unet.time.fc1", temb)?;
        let temb = g.gelu(temb);
        let temb = linear(g, ps, "unet.time.fc2", temb)?;
        let temb = g.gelu(temb);

        let h = conv(g, ps, "unet.conv_in", x_t, geom)?;
        let h = self.res_block(g, ps, "unet.down0", h, geom, temb)?;
        let skip0 = self.cross_attn(g, ps, "unet.attn_down0", h, geom, cond)?;
        let half = geom.halved();
        let h = g.avg_pool2(skip0, geom)?;
        let h = self.res_block(g, ps, "unet.down1", h, half, temb)?;
        let skip1 = self.cross_attn(g, ps, "unet.attn_down1", h, half, cond)?;
        let h = self.res_block(g, ps, "unet.mid", skip1, half, temb)?;
        let h = self.cross_attn(g, ps, "unet.attn_mid", h, half, cond)?;
        let h = g.concat_cols(&[h, skip1])?;
        let h = self.res_block(g, ps, "unet.up1", h, half, temb)?;
        let h = self.cross_attn(g, ps, "unet.attn_up1", h, half, cond)?;
        let h = g.upsample2(h, half)?;
        let h = g.concat_cols(&[h, skip0])?;
        let h = self.res_block(g, ps, "unet.up0", h, geom, temb)?;
        let h = self.cross_attn(g, ps, "unet.attn_up0", h, geom, cond)?;
        let h = layer_norm(g, ps, "unet.norm_out", h)?;
        let h = g.gelu(h);
        conv(g, ps, "unet.conv_out", h, geom)
    }

    fn res_block<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, p: &str, x: Var, geom: Spatial, temb: Var) -> Result<Var> {
        let h = layer_norm(g, ps, &format!("{p}.ln1"), x)?;
        let h = g.gelu(h);
        let h = conv(g, ps, &format!("{p}.conv1"), h, geom)?;
        let tproj = linear(g, ps, &format!("{p}.time"), temb)?;
        let h = g.add_repeated(h, tproj)?;
        let h = layer_norm(g, ps, &format!("{p}.ln2"), h)?;
        let h = g.gelu(h);
        let h = conv(g, ps, &format!("{p}.conv2"), h, geom)?;
        let skip_name = format!("{p}.skip");
        let skip = if ps.contains(&format!("{skip_name}.w")) {
            linear(g, ps, &skip_name, x)?
        } else {
            x
        };
        g.add(h, skip)
    }

    fn cross_attn<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, p: &str, x: Var, geom: Spatial, cond: Var) -> Result<Var> {
        let h = layer_norm(g, ps, &format!("{p}.ln"), x)?;
        let q = linear(g, ps, &format!("{p}.q"), h)?;
        let k = linear(g, ps, &format!("{p}.k"), cond)?;
        let v = linear(g, ps, &format!("{p}.v"), cond)?;
        let shape = AttnShape {
            heads: self.heads,
            q_len: geom.pixels(),
            kv_len: self.cond_len,
            causal: false,
        };
        let a = g.attention(q, k, v, shape)?;
        let o = linear(g, ps, &format!("{p}.o"), a)?;
        g.add(x, o)
    }
}

/// Sinusoidal embedding `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((step as f64 * f).sin()));
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((step as f64 * f).cos()));
        }
        data.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::from_fn(&[t.len(), dim], |i| data[i])
}
