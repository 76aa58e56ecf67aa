//! The frozen latent space: an autoencoder trained once on HQ images and
//! never updated afterwards, and the collapsible linear block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{from_batch, to_batch, Image};
use crate::nets::{collapse_pair, Arch};
use crate::numerics::{AdamWConfig, Checkpoint, Graph, OptimState, ParamSet, Tensor};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub enc_arch: Arch,
    pub dec_arch: Arch,
    pub enc: ParamSet<f32>,
    pub dec: ParamSet<f32>,
    /// `(H, W, C)` of the images it was built for.
    pub image_dims: (usize, usize, usize),
    /// `(c, h, w)` of one latent.
    pub latent_shape: (usize, usize, usize),
}

impl AutoEncoder {
    /// Builds an autoencoder with freshly initialized weights and infers the latent shape.
    pub fn new(enc_arch: Arch, dec_arch: Arch, image_dims: (usize, usize, usize), rng: &mut Rng) -> Result<Self> {
        let enc = enc_arch.init(rng);
        let dec = dec_arch.init(rng);
        Self::from_parts(enc_arch, dec_arch, enc, dec, image_dims)
    }

    pub fn from_parts(enc_arch: Arch, dec_arch: Arch, enc: ParamSet<f32>, dec: ParamSet<f32>, image_dims: (usize, usize, usize)) -> Result<Self> {
        let (h, w, c) = image_dims;
        let probe = Tensor::zeros(&[1, c, h, w]);
        let z = enc_arch.apply(&enc, &probe, None)?;
        let s = z.shape();
        ensure!(s.len() == 4, "encoder output must be (N, c, h, w), got {:?}", s);
        let latent_shape = (s[1], s[2], s[3]);
        let back = dec_arch.apply(&dec, &z, None)?;
        ensure!(back.shape() == probe.shape(), "decoder maps latent {:?} to {:?}, expected {:?}", s, back.shape(), probe.shape());
        Ok(Self { enc_arch, dec_arch, enc, dec, image_dims, latent_shape })
    }

    /// Two stride-2 convolutions per side: spatial compression 4.
    pub fn conv(image_dims: (usize, usize, usize), hidden: usize, latent_ch: usize, rng: &mut Rng) -> Result<Self> {
        let c = image_dims.2;
        Self::new(
            Arch::ConvEncoder { in_ch: c, hidden, latent_ch },
            Arch::ConvDecoder { latent_ch, hidden, out_ch: c },
            image_dims,
            rng,
        )
    }

    /// Single dense layer per side, latent as wide as the image: identity is reachable.
    pub fn linear(image_dims: (usize, usize, usize), rng: &mut Rng) -> Result<Self> {
        let d = image_dims.0 * image_dims.1 * image_dims.2;
        Self::new(Arch::Mlp { dims: vec![d, d], time: false }, Arch::Mlp { dims: vec![d, d], time: false }, image_dims, rng)
    }

    /// `E = D = id`: zero reconstruction error.
    pub fn identity(image_dims: (usize, usize, usize)) -> Self {
        let (h, w, c) = image_dims;
        Self { enc_arch: Arch::Identity, dec_arch: Arch::Identity, enc: ParamSet::new(), dec: ParamSet::new(), image_dims, latent_shape: (c, h, w) }
    }

    /// Rescales the latent space to unit standard deviation over `images` by
    /// folding `1/s` into the encoder's last convolution and `s` into the
    /// decoder's first. Reconstructions change only by rounding. Returns `s`;
    /// architectures other than the convolutional pair are left as they are.
    pub fn standardize_latents(&mut self, images: &[Image]) -> Result<f64> {
        if !matches!((&self.enc_arch, &self.dec_arch), (Arch::ConvEncoder { .. }, Arch::ConvDecoder { .. })) {
            return Ok(1.0);
        }
        let z = self.encode_images(images)?;
        let mean = z.mean_f64();
        let s = (z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        ensure!(s > 0.0 && s.is_finite(), "latent standard deviation is {s}");
        let scale = |p: &mut ParamSet<f32>, name: &str, by: f64| -> Result<()> {
            let t = p.get_mut(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
            t.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * by) as f32);
            Ok(())
        };
        scale(&mut self.enc, "conv2.w", 1.0 / s)?;
        scale(&mut self.enc, "conv2.b", 1.0 / s)?;
        scale(&mut self.dec, "conv1.w", s)?;
        Ok(s)
    }

    pub fn latent_dim(&self) -> usize {
        let (c, h, w) = self.latent_shape;
        c * h * w
    }

    pub fn compression_factor(&self) -> usize {
        self.image_dims.0 / self.latent_shape.1.max(1)
    }

    /// `(N, C, H, W) → (N, c, h, w)`.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w, c) = self.image_dims;
        ensure!(x.rank() == 4 && x.shape()[1..] == [c, h, w], "encoder expects (N, {c}, {h}, {w}), got {:?}", x.shape());
        self.enc_arch.apply(&self.enc, x, None)
    }

    /// `(N, c, h, w) → (N, C, H, W)`, unclipped.
    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = self.latent_shape;
        ensure!(z.rank() == 4 && z.shape()[1..] == [c, h, w], "decoder expects (N, {c}, {h}, {w}), got {:?}", z.shape());
        self.dec_arch.apply(&self.dec, z, None)
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Tensor<f32>> {
        self.encode(&to_batch(images)?)
    }

    /// Decodes and clips to the unit range.
    pub fn decode_images(&self, z: &Tensor<f32>) -> Result<Vec<Image>> {
        let (h, w, c) = self.image_dims;
        let x = self.decode(z)?;
        Ok(from_batch(&x, h, w, c)?.into_iter().map(|img| img.clip_unit()).collect())
    }

    pub fn to_checkpoint(&self, delta_hat: f64) -> Result<Checkpoint<f32>> {
        let mut params = ParamSet::new();
        params.extend_prefixed("enc.", &self.enc);
        params.extend_prefixed("dec.", &self.dec);
        params.step = self.enc.step;
        let (h, w, c) = self.image_dims;
        Ok(Checkpoint::new(params)
            .with_meta("kind", "autoencoder")
            .with_meta("encoder", arch_to_string(&self.enc_arch)?)
            .with_meta("decoder", arch_to_string(&self.dec_arch)?)
            .with_meta("image_dims", format!("{h}x{w}x{c}"))
            .with_meta("compression_factor", self.compression_factor())
            .with_meta("latent_channels", self.latent_shape.0)
            .with_meta("delta_ed", format!("{delta_hat:e}")))
    }

    /// Inverse of [`AutoEncoder::to_checkpoint`]; also returns the stored Δ̂.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<(Self, f64)> {
        let get = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Format(format!("autoencoder checkpoint has no `{k}` record")));
        let dims: Vec<usize> = get("image_dims")?.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| Error::Format("bad image_dims record".into()))?;
        ensure!(dims.len() == 3, "image_dims needs three components");
        let ae = Self::from_parts(
            arch_from_string(get("encoder")?)?,
            arch_from_string(get("decoder")?)?,
            ck.params.strip_prefix("enc."),
            ck.params.strip_prefix("dec."),
            (dims[0], dims[1], dims[2]),
        )?;
        Ok((ae, ck.meta_f64("delta_ed")?))
    }
}

pub fn arch_to_string(a: &Arch) -> Result<String> {
    toml::to_string(a).map_err(|e| Error::Format(format!("cannot serialize architecture: {e}")))
}

pub fn arch_from_string(s: &str) -> Result<Arch> {
    toml::from_str(s).map_err(|e| Error::Format(format!("cannot parse architecture record: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub hidden: usize,
    pub latent_ch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { hidden: 16, latent_ch: 4, epochs: 30, batch: 32, optim: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..AdamWConfig::default() } }
    }
}

#[derive(Debug, Clone)]
pub struct AeTrained {
    pub ae: AutoEncoder,
    /// Held-out mean squared reconstruction error per element.
    pub delta_hat: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean over images and elements of `(D(E(x)) − x)²`, unclipped decode, f64 accumulation.
pub fn reconstruction_mse(ae: &AutoEncoder, images: &[Image]) -> Result<f64> {
    ensure!(!images.is_empty(), "no images to evaluate");
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(256) {
        let x = to_batch(chunk)?;
        let r = ae.decode(&ae.encode(&x)?)?;
        total += r.mse_f64(&x)? * x.len() as f64;
        count += x.len();
    }
    Ok(total / count as f64)
}

/// Minimizes mean `‖D(E(x)) − x‖²` with AdamW and reports Δ̂ on `held_out`.
///
/// On a non-finite loss the weights from the last finite step are written to
/// `last_good` (when given) and a numeric error is returned.
pub fn train_autoencoder(mut ae: AutoEncoder, train: &[Image], held_out: &[Image], cfg: &AeTrainConfig, seed: u64, last_good: Option<&Path>) -> Result<AeTrained> {
    ensure!(!train.is_empty() && !held_out.is_empty(), "autoencoder training needs non-empty train and held-out sets");
    let mut opt_e = OptimState::new(cfg.optim, &ae.enc);
    let mut opt_d = OptimState::new(cfg.optim, &ae.dec);
    let mut shuffle = rng::stream(seed, "ae/shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = rng::shuffled_batches(&mut shuffle, train.len(), cfg.batch);
        for idx in &batches {
            let imgs: Vec<Image> = idx.iter().map(|&i| train[i].clone()).collect();
            let x = to_batch(&imgs)?;
            let mut g = Graph::<f32>::new();
            let be = g.bind(&ae.enc, true);
            let bd = g.bind(&ae.dec, true);
            let xv = g.constant(x);
            let z = ae.enc_arch.forward(&mut g, &be, xv, None)?;
            let r = ae.dec_arch.forward(&mut g, &bd, z, None)?;
            let loss = g.mse(r, xv)?;
            let value = g.value(loss).data()[0] as f64;
            let grads = match g.backward(loss) {
                Ok(gr) => gr,
                Err(e) => {
                    if let Some(path) = last_good {
                        ae.to_checkpoint(f64::NAN)?.save(path)?;
                    }
                    return Err(Error::numeric(format!("autoencoder diverged in epoch {epoch} ({e}); last good weights at step {} retained", ae.enc.step)));
                }
            };
            opt_e.step(&mut ae.enc, &be.gradients(&g, &grads))?;
            opt_d.step(&mut ae.dec, &bd.gradients(&g, &grads))?;
            sum += value;
        }
        epoch_losses.push(sum / batches.len().max(1) as f64);
    }
    ae.standardize_latents(train)?;
    let delta_hat = reconstruction_mse(&ae, held_out)?;
    Ok(AeTrained { ae, delta_hat, epoch_losses })
}

/// A 3×3 expansion followed by a 1×1 projection with no nonlinearity between.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsibleBlock {
    /// `(expansion·out, in, 3, 3)`.
    pub conv3: Tensor<f32>,
    pub bias3: Tensor<f32>,
    /// `(out, expansion·out, 1, 1)`.
    pub conv1: Tensor<f32>,
    pub bias1: Tensor<f32>,
}

impl CollapsibleBlock {
    pub fn random(c_in: usize, c_out: usize, expansion: usize, rng: &mut Rng) -> Self {
        let hidden = expansion * c_out;
        let normal = |rng: &mut Rng, shape: &[usize], std: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, rng::normals(rng, n, std).into_iter().map(|v| v as f32).collect()).expect("shape")
        };
        Self {
            conv3: normal(rng, &[hidden, c_in, 3, 3], 1.0 / (9.0 * c_in as f64).sqrt()),
            bias3: normal(rng, &[hidden], 0.1),
            conv1: normal(rng, &[c_out, hidden, 1, 1], 1.0 / (hidden as f64).sqrt()),
            bias1: normal(rng, &[c_out], 0.1),
        }
    }

    pub fn expansion(&self) -> usize {
        self.conv3.shape()[0] / self.conv1.shape()[0].max(1)
    }

    /// Single 3×3 kernel `(out, in, 3, 3)` and bias equivalent to the pair.
    pub fn collapse(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        collapse_pair(&self.conv3, &self.bias3, &self.conv1, &self.bias1)
    }

    /// Both convolutions in sequence, zero padding 1.
    pub fn forward_expanded(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let w3 = g.constant(self.conv3.clone());
        let b3 = g.constant(self.bias3.clone());
        let w1 = g.constant(self.conv1.clone());
        let b1 = g.constant(self.bias1.clone());
        let h = g.conv2d(xv, w3, 1, 1)?;
        let h = g.add_bias(h, b3)?;
        let y = g.conv2d(h, w1, 1, 0)?;
        let y = g.add_bias(y, b1)?;
        Ok(g.value(y).clone())
    }

    pub fn forward_collapsed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (w, b) = self.collapse()?;
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let bv = g.constant(b);
        let y = g.conv2d(xv, wv, 1, 1)?;
        let y = g.add_bias(y, bv)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut r = rng::stream(seed, "blobs");
        (0..n)
            .map(|_| {
                let cx = rand::Rng::random::<f32>(&mut r) * size as f32;
                let cy = rand::Rng::random::<f32>(&mut r) * size as f32;
                Image::from_fn(size, size, 1, |y, x, _| (-((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)) / 8.0).exp())
            })
            .collect()
    }

    #[test]
    fn reported_delta_is_the_direct_evaluation() {
        let ae = AutoEncoder::conv((16, 16, 1), 8, 4, &mut rng::stream(1, "init")).unwrap();
        let imgs = blobs(10, 16, 2);
        let mut direct = 0.0;
        for img in &imgs {
            let x = to_batch(std::slice::from_ref(img)).unwrap();
            let r = ae.decode(&ae.encode(&x).unwrap()).unwrap();
            direct += r.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
        }
        direct /= imgs.len() as f64;
        let reported = train_autoencoder(ae, &imgs, &imgs, &AeTrainConfig { epochs: 0, ..Default::default() }, 0, None).unwrap().delta_hat;
        assert!((reported - direct).abs() < 1e-6 && reported >= 0.0);
    }

    #[test]
    fn standardized_latents_have_unit_spread_and_same_reconstructions() {
        let mut ae = AutoEncoder::conv((16, 16, 1), 8, 4, &mut rng::stream(3, "init")).unwrap();
        let imgs = blobs(20, 16, 4);
        let before = ae.decode_images(&ae.encode_images(&imgs).unwrap()).unwrap();
        let s = ae.standardize_latents(&imgs).unwrap();
        assert!(s > 0.0 && s != 1.0);
        let z = ae.encode_images(&imgs).unwrap();
        let m = z.mean_f64();
        let sd = (z.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!((sd - 1.0).abs() < 1e-4, "{sd}");
        let after = ae.decode_images(&z).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-5));
        }
    }

    #[test]
    fn linear_autoencoder_reaches_identity() {
        let imgs = blobs(64, 4, 5);
        let ae = AutoEncoder::linear((4, 4, 1), &mut rng::stream(0, "init")).unwrap();
        let cfg = AeTrainConfig { epochs: 300, batch: 16, optim: AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() }, ..Default::default() };
        let out = train_autoencoder(ae, &imgs, &imgs, &cfg, 0, None).unwrap();
        assert!(out.delta_hat < 1e-4, "delta {}", out.delta_hat);
    }

    #[test]
    fn shapes_and_determinism() {
        let ae = AutoEncoder::conv((16, 16, 1), 8, 4, &mut rng::stream(1, "init")).unwrap();
        assert_eq!(ae.latent_shape, (4, 4, 4));
        assert_eq!(ae.compression_factor(), 4);
        let imgs = blobs(3, 16, 0);
        let z = ae.encode_images(&imgs).unwrap();
        assert_eq!(z, ae.encode_images(&imgs).unwrap());
        let back = ae.decode_images(&z).unwrap();
        assert!(back.iter().all(|b| b.dims() == (16, 16, 1)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = AutoEncoder::conv((16, 16, 1), 8, 4, &mut rng::stream(1, "init")).unwrap();
        let ck = Checkpoint::from_bytes(&ae.to_checkpoint(0.25).unwrap().to_bytes()).unwrap();
        let (back, d) = AutoEncoder::from_checkpoint(&ck).unwrap();
        assert_eq!(back, ae);
        assert_eq!(d, 0.25);
    }

    #[test]
    fn collapse_edge_cases() {
        let mut r = rng::stream(0, "block");
        let mut b = CollapsibleBlock::random(3, 2, 1, &mut r);
        b.conv1 = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        b.bias1 = Tensor::zeros(&[2]);
        let (w, bias) = b.collapse().unwrap();
        assert_eq!(w, b.conv3);
        assert_eq!(bias, b.bias3);

        let mut z = CollapsibleBlock::random(3, 2, 4, &mut r);
        z.conv1 = Tensor::zeros(&[2, 8, 1, 1]);
        let (w, _) = z.collapse().unwrap();
        assert_eq!(w.shape(), &[2, 3, 3, 3]);
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_matches_expanded_forward() {
        let mut r = rng::stream(7, "block");
        let b = CollapsibleBlock::random(3, 5, 4, &mut r);
        let x = Tensor::new(&[2, 3, 6, 6], rng::normals(&mut r, 216, 1.0).into_iter().map(|v| v as f32).collect()).unwrap();
        let d = b.forward_expanded(&x).unwrap().max_abs_diff(&b.forward_collapsed(&x).unwrap()).unwrap();
        assert!(d < 1e-5, "{d}");
    }
}
