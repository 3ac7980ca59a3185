//! Images, augmentation, positional interpolation, and the two vision
//! stems: a ResNet-style convolution stage and the linear patch projection
//! used by the "no conv stage" ablation.
//!
//! Patch tokens are always emitted in raster order: left to right, then top
//! to bottom. Relative-position buckets depend on this order.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor};

const GN_EPS: f64 = 1e-5;

/// An RGB image with values in `[0, 1]`, stored channel-major `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!("image data {} does not match {height}x{width}x{channels}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, channels: 3, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    /// Parse a binary PPM (P6, maxval 255); values are scaled by 1/255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("invalid PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only P6 is supported"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if fields[3] != "255" {
            return Err(bad("maxval must be 255"));
        }
        pos += 1;
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
        let mut img = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.set(c, y, x, body[(y * w + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Bilinear resample of the window `[top, top+h) x [left, left+w)` to
    /// `out_h x out_w`, sampling at pixel centers. Same-size windows are
    /// copied exactly.
    pub fn resize_window(&self, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(out_h, out_w, [0.0; 3]);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let p = |y: usize, x: usize| self.get(c, top + y, left + x) as f64;
                    let v = if wy == 0.0 && wx == 0.0 {
                        p(y0, x0)
                    } else {
                        let a = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                        let b = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                        a * (1.0 - wy) + b * wy
                    };
                    out.set(c, oy, ox, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resize_window(0, 0, self.height, self.width, out_h, out_w)
    }
}

/// Crop a random square-aspect window covering an area fraction drawn from
/// `scale_range`, then bilinearly resize it to `out_hw`.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Image,
    out_hw: (usize, usize),
    scale_range: (f64, f64),
    rng: &mut R,
) -> Result<Image> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("crop scale range ({lo}, {hi}) must lie in (0, 1]")));
    }
    let s = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side = s.sqrt();
    let h = ((image.height as f64 * side).round() as usize).clamp(1, image.height);
    let w = ((image.width as f64 * side).round() as usize).clamp(1, image.width);
    let top = rng.gen_range(0..=image.height - h);
    let left = rng.gen_range(0..=image.width - w);
    Ok(image.resize_window(top, left, h, w, out_hw.0, out_hw.1))
}

/// Linearly interpolate a `[T_old, D]` positional table onto `t_new` rows
/// along a normalized `[0, 1]` index grid. Endpoint rows are copied exactly.
pub fn interpolate_positions<T: Real>(pos: &Tensor<T>, t_new: usize) -> Result<Tensor<T>> {
    if pos.rank() != 2 || pos.shape()[0] < 2 {
        return Err(Error::Shape(format!("positional table {:?} needs at least 2 rows", pos.shape())));
    }
    if t_new < 1 {
        return Err(Error::Config("interpolation target must have at least one row".into()));
    }
    let (t_old, d) = (pos.shape()[0], pos.shape()[1]);
    let mut out = Vec::with_capacity(t_new * d);
    for i in 0..t_new {
        let x = if t_new == 1 { 0.0 } else { i as f64 * (t_old - 1) as f64 / (t_new - 1) as f64 };
        let lo = (x.floor() as usize).min(t_old - 1);
        let frac = x - lo as f64;
        if frac == 0.0 || lo == t_old - 1 {
            out.extend_from_slice(pos.row(lo));
        } else {
            let (a, b) = (pos.row(lo), pos.row(lo + 1));
            let f = T::from_f64(frac);
            let g = T::from_f64(1.0 - frac);
            out.extend(a.iter().zip(b).map(|(&u, &v)| u * g + v * f));
        }
    }
    Tensor::new(vec![t_new, d], out)
}

/// Separable 2D interpolation of a raster-ordered `[gh*gw, D]` table onto
/// a `new.0 x new.1` grid.
pub fn interpolate_grid<T: Real>(pos: &Tensor<T>, grid: (usize, usize), new: (usize, usize)) -> Result<Tensor<T>> {
    let (gh, gw) = grid;
    if pos.rank() != 2 || pos.shape()[0] != gh * gw {
        return Err(Error::Shape(format!("table {:?} does not match grid {gh}x{gw}", pos.shape())));
    }
    if grid == new {
        return Ok(pos.clone());
    }
    let d = pos.shape()[1];
    // along columns, one grid row at a time
    let mut wide = Vec::with_capacity(gh * new.1 * d);
    for r in 0..gh {
        let row = Tensor::from_parts(vec![gw, d], pos.data()[r * gw * d..(r + 1) * gw * d].to_vec());
        wide.extend(resample_axis(&row, new.1)?.into_data());
    }
    // along rows, one output column at a time
    let mut out = vec![T::ZERO; new.0 * new.1 * d];
    for c in 0..new.1 {
        let mut col = Vec::with_capacity(gh * d);
        for r in 0..gh {
            col.extend_from_slice(&wide[(r * new.1 + c) * d..(r * new.1 + c + 1) * d]);
        }
        let col = resample_axis(&Tensor::from_parts(vec![gh, d], col), new.0)?;
        for r in 0..new.0 {
            out[(r * new.1 + c) * d..(r * new.1 + c + 1) * d].copy_from_slice(col.row(r));
        }
    }
    Tensor::new(vec![new.0 * new.1, d], out)
}

fn resample_axis<T: Real>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if t.shape()[0] == n {
        Ok(t.clone())
    } else if t.shape()[0] == 1 {
        let mut out = Vec::with_capacity(n * t.len());
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        Tensor::new(vec![n, t.shape()[1]], out)
    } else {
        interpolate_positions(t, n)
    }
}

/// Shape of the ResNet-style convolution stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStageConfig {
    pub stem_channels: usize,
    /// Output channels of each residual block.
    pub widths: Vec<usize>,
    /// Stride of each residual block; the stem always has stride 2.
    pub strides: Vec<usize>,
}

impl ConvStageConfig {
    /// `num_blocks` residual blocks whose strides, together with the
    /// stride-2 stem, multiply to `patch`. Widths double once, at the first
    /// downsampling block.
    pub fn for_patch(num_blocks: usize, patch: usize, base_width: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Config("conv stage needs at least one block".into()));
        }
        if patch < 2 || !patch.is_multiple_of(2) || !(patch / 2).is_power_of_two() {
            return Err(Error::Config(format!("conv stage supports patch sizes 2*2^k, got {patch}")));
        }
        let mut strides = vec![1; num_blocks];
        let mut remaining = patch / 2;
        let order: Vec<usize> = (1..num_blocks).chain(std::iter::once(0)).collect();
        let mut i = 0;
        while remaining > 1 {
            strides[order[i % order.len()]] *= 2;
            remaining /= 2;
            i += 1;
        }
        let mut widths = Vec::with_capacity(num_blocks);
        let mut w = base_width;
        for &s in &strides {
            if s > 1 && !widths.is_empty() {
                w = base_width * 2;
            }
            widths.push(w);
        }
        Ok(ConvStageConfig { stem_channels: base_width, widths, strides })
    }

    pub fn num_blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn total_stride(&self) -> usize {
        2 * self.strides.iter().product::<usize>()
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.widths.len() != self.strides.len() || self.widths.is_empty() {
            return Err(Error::Config("conv stage widths and strides must be non-empty and equal length".into()));
        }
        if self.strides.contains(&0) {
            return Err(Error::Config("conv stage strides must be positive".into()));
        }
        if self.total_stride() != patch {
            return Err(Error::Config(format!(
                "conv stage cumulative stride {} does not equal patch size {patch}",
                self.total_stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    w: ParamId,
    b: ParamId,
    gn_g: ParamId,
    gn_b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvNorm {
    fn build<T: Real, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvNorm {
            w: pb.conv(&format!("{name}.w"), &[c_out, c_in, k, k])?,
            b: pb.zeros(&format!("{name}.b"), &[c_out])?,
            gn_g: pb.ones(&format!("{name}.gn.g"), &[c_out])?,
            gn_b: pb.zeros(&format!("{name}.gn.b"), &[c_out])?,
            stride,
            pad: k / 2,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b, gg, gb) = (g.param(self.w), g.param(self.b), g.param(self.gn_g), g.param(self.gn_b));
        let y = g.conv2d(x, w, Some(b), self.stride, self.pad)?;
        g.group_norm(y, gg, gb, GN_EPS)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: Option<(ParamId, ParamId, usize)>,
}

impl ResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match self.shortcut {
            Some((w, b, stride)) => {
                let (w, b) = (g.param(w), g.param(b));
                g.conv2d(x, w, Some(b), stride, 0)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        g.gelu(y)
    }
}

/// Stride-2 3x3 stem followed by residual blocks, then a per-token linear
/// projection to the model width.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub config: ConvStageConfig,
    stem: ConvNorm,
    blocks: Vec<ResBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl ConvStage {
    pub fn build<T: Real, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        config: &ConvStageConfig,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let stem = ConvNorm::build(pb, "convstage.stem", channels, config.stem_channels, 3, 2)?;
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (i, (&c_out, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let name = format!("convstage.block{i}");
            let conv1 = ConvNorm::build(pb, &format!("{name}.conv1"), c_in, c_out, 3, stride)?;
            let conv2 = ConvNorm::build(pb, &format!("{name}.conv2"), c_out, c_out, 3, 1)?;
            let shortcut = if stride != 1 || c_in != c_out {
                Some((
                    pb.conv(&format!("{name}.shortcut.w"), &[c_out, c_in, 1, 1])?,
                    pb.zeros(&format!("{name}.shortcut.b"), &[c_out])?,
                    stride,
                ))
            } else {
                None
            };
            blocks.push(ResBlock { conv1, conv2, shortcut });
            c_in = c_out;
        }
        let proj_w = pb.normal("convstage.proj.w", &[c_in, hidden])?;
        let proj_b = pb.zeros("convstage.proj.b", &[hidden])?;
        Ok(ConvStage { config: config.clone(), stem, blocks, proj_w, proj_b })
    }

    /// `x[C, H, W] -> [(H/P)(W/P), D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, x)?;
        h = g.gelu(h)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2]])?;
        let tokens = g.transpose(flat)?;
        let (w, b) = (g.param(self.proj_w), g.param(self.proj_b));
        let y = g.matmul(tokens, w)?;
        g.add_bias(y, b)
    }
}

/// ViT-style projection of flattened `P x P x C` patches.
#[derive(Clone, Debug)]
pub struct LinearPatch {
    pub patch: usize,
    w: ParamId,
    b: ParamId,
}

impl LinearPatch {
    pub fn build<T: Real, R: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, T, R>,
        patch: usize,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(LinearPatch {
            patch,
            w: pb.normal("convstage.patch.w", &[channels * patch * patch, hidden])?,
            b: pb.zeros("convstage.patch.b", &[hidden])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let patches = g.patchify(x, self.patch)?;
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(patches, w)?;
        g.add_bias(y, b)
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }
}

/// Either vision stem.
#[derive(Clone, Debug)]
pub enum VisionStem {
    Conv(ConvStage),
    Linear(LinearPatch),
}

impl VisionStem {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            VisionStem::Conv(c) => c.forward(g, x),
            VisionStem::Linear(l) => l.forward(g, x),
        }
    }
}

/// Number of patch tokens for an `h x w` image and patch size `p`.
pub fn num_patches(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Config(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    Ok((h / p) * (w / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_count_arithmetic() {
        assert_eq!(num_patches(224, 224, 16).unwrap(), 196);
        assert_eq!(num_patches(32, 32, 4).unwrap(), 64);
        assert!(num_patches(30, 32, 4).is_err());
    }

    #[test]
    fn stage_config_strides_multiply_to_patch() {
        for blocks in 2..=4 {
            for p in [2, 4, 8, 16] {
                let c = ConvStageConfig::for_patch(blocks, p, 8).unwrap();
                c.validate(p).unwrap();
                assert_eq!(c.num_blocks(), blocks);
            }
        }
        let mut bad = ConvStageConfig::for_patch(3, 4, 8).unwrap();
        bad.strides[0] = 2;
        assert!(bad.validate(4).is_err());
        assert!(ConvStageConfig::for_patch(3, 6, 8).is_err());
    }

    #[test]
    fn conv_stage_output_is_patch_grid() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ConvStageConfig::for_patch(3, 4, 4).unwrap();
        let stage = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, 0.02);
            ConvStage::build(&mut pb, &cfg, 3, 8).unwrap()
        };
        let mut g = Graph::with_params(&store);
        let img = Image::filled(32, 32, [0.5, 0.2, 0.9]);
        let x = g.constant(img.to_tensor());
        let y = stage.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[64, 8]);
    }

    #[test]
    fn small_image_one_token_and_zero_image() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, 0.02);
            LinearPatch::build(&mut pb, 2, 3, 5).unwrap()
        };
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        let y = lp.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_identity_endpoints_midpoint() {
        let pos = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 4.0, 3.0, 8.0]).unwrap();
        assert_eq!(interpolate_positions(&pos, 2).unwrap(), pos);
        let mid = interpolate_positions(&pos, 3).unwrap();
        assert_eq!(mid.row(1), &[2.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = Tensor::<f32>::randn(&[7, 4], 1.0, &mut rng);
        let up = interpolate_positions(&big, 19).unwrap();
        assert_eq!(up.row(0), big.row(0));
        assert_eq!(up.row(18), big.row(6));
        assert!(interpolate_positions(&big, 0).is_err());
        assert!(interpolate_positions(&Tensor::<f32>::zeros(&[1, 3]), 4).is_err());
    }

    #[test]
    fn grid_interpolation_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = Tensor::<f32>::randn(&[64, 3], 1.0, &mut rng);
        let up = interpolate_grid(&pos, (8, 8), (16, 16)).unwrap();
        assert_eq!(up.shape(), &[256, 3]);
        assert_eq!(up.row(0), pos.row(0));
        assert_eq!(up.row(255), pos.row(63));
        assert_eq!(interpolate_grid(&pos, (8, 8), (8, 8)).unwrap(), pos);
    }

    #[test]
    fn crop_full_scale_is_identity_and_deterministic() {
        let mut img = Image::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 0..8 {
                img.set(0, y, x, ((y * 8 + x) as f32) / 64.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let same = random_resized_crop(&img, (8, 8), (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(same, img);
        let a = random_resized_crop(&img, (8, 8), (0.3, 0.9), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = random_resized_crop(&img, (8, 8), (0.3, 0.9), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(random_resized_crop(&img, (8, 8), (0.0, 0.5), &mut rng).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let mut img = Image::filled(2, 3, [1.0, 0.0, 0.0]);
        img.set(2, 1, 2, 1.0);
        let bytes = img.to_ppm();
        assert_eq!(Image::from_ppm(&bytes).unwrap(), img);
        assert!(Image::from_ppm(b"P5\n1 1\n255\n\0").is_err());
    }
}
