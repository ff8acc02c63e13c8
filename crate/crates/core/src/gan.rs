//! Patch-level DCGAN for defect synthesis and copy-paste compositing of
//! generated patches onto clean boards.

use std::collections::BTreeMap;
use std::path::Path;

use image::Rgb;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::synth::defect_patch_batch;
use crate::data::{AnnotatedImage, BBox, DefectClass, ImageSource, Labeled};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::optim::{nadam_step, NadamHyper, OptState};
use crate::tensor::{standard_normal, Activation, ConvSpec, Fill, NodeId, ParamStore, Tape, Tensor};

/// Spatial size of the generator's first feature map.
const BASE: usize = 4;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub patch_size: usize,
    /// Channels of the generator's first feature map; halved per stage.
    pub gen_width: usize,
    /// Channels of the discriminator's first conv; doubled in the second.
    pub disc_width: usize,
    pub lr: f64,
    pub beta1: f64,
    pub batch: usize,
    pub steps: usize,
    /// Replaced per class by the pipeline's seed splitting.
    pub seed: u64,
    /// Generated patches are rejected above this moment distance.
    pub fidelity_gate: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 16,
            patch_size: 16,
            gen_width: 32,
            disc_width: 16,
            lr: 2e-4,
            beta1: 0.5,
            batch: 32,
            steps: 1500,
            seed: 0,
            fidelity_gate: 0.6,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 16 || !self.patch_size.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "patch_size must be a power of two >= 16, got {}",
                self.patch_size
            )));
        }
        if self.latent_dim == 0 || self.batch < 2 || self.gen_width < 8 || self.disc_width == 0 {
            return Err(Error::Parameter(
                "latent_dim >= 1, batch >= 2, gen_width >= 8 and disc_width >= 1 required".into(),
            ));
        }
        self.hyper().validate()
    }

    pub fn hyper(&self) -> NadamHyper {
        NadamHyper {
            lr: self.lr,
            beta1: self.beta1,
            ..NadamHyper::default()
        }
    }

    /// Channel widths of the generator's upsampling stages, input first.
    fn gen_channels(&self) -> Vec<usize> {
        let stages = (self.patch_size / BASE).trailing_zeros() as usize;
        let mut ch = vec![self.gen_width];
        for i in 1..stages {
            ch.push((self.gen_width >> i).max(8));
        }
        ch.push(3);
        ch
    }
}

/// Generator and discriminator weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GanPair {
    pub config: GanConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

fn normal(shape: &[usize], std: f64, seed: u64) -> Result<Tensor> {
    Tensor::filled(shape, Fill::Normal { std, seed })
}

impl GanPair {
    /// DCGAN-style N(0, 0.02) weights, zero biases.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let mut g = ParamStore::new();
        let ch = config.gen_channels();
        g.insert("proj.w", normal(&[config.latent_dim, ch[0] * BASE * BASE], 0.02, s ^ 1)?);
        g.insert("proj.b", Tensor::zeros(&[ch[0] * BASE * BASE])?);
        g.insert("bn_proj.gamma", Tensor::filled(&[ch[0]], Fill::Constant(1.0))?);
        g.insert("bn_proj.beta", Tensor::zeros(&[ch[0]])?);
        for i in 0..ch.len() - 1 {
            g.insert(format!("up{i}.w"), normal(&[ch[i], ch[i + 1], 4, 4], 0.02, s ^ (10 + i as u64))?);
            g.insert(format!("up{i}.b"), Tensor::zeros(&[ch[i + 1]])?);
            if i + 2 < ch.len() {
                g.insert(format!("bn{i}.gamma"), Tensor::filled(&[ch[i + 1]], Fill::Constant(1.0))?);
                g.insert(format!("bn{i}.beta"), Tensor::zeros(&[ch[i + 1]])?);
            }
        }
        let mut d = ParamStore::new();
        let dw = config.disc_width;
        d.insert("c0.w", normal(&[dw, 3, 4, 4], 0.02, s ^ 100)?);
        d.insert("c0.b", Tensor::zeros(&[dw])?);
        d.insert("c1.w", normal(&[2 * dw, dw, 4, 4], 0.02, s ^ 101)?);
        d.insert("c1.b", Tensor::zeros(&[2 * dw])?);
        let flat = 2 * dw * (config.patch_size / 4).pow(2);
        d.insert("fc.w", normal(&[flat, 1], 0.02, s ^ 102)?);
        d.insert("fc.b", Tensor::zeros(&[1])?);
        Ok(GanPair {
            config,
            generator: g,
            discriminator: d,
        })
    }

    /// Writes both networks into one container (`g.` / `d.` prefixes) and
    /// the config to a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self
            .generator
            .iter()
            .map(|(k, v)| (format!("g.{k}"), v))
            .chain(self.discriminator.iter().map(|(k, v)| (format!("d.{k}"), v)))
            .collect();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        checkpoint::write_tensors(std::io::BufWriter::new(file), named.iter().map(|(k, v)| (k.as_str(), *v)))?;
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: GanConfig = serde_json::from_str(&text)?;
        let mut pair = GanPair::new(config)?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (name, t) in checkpoint::read_tensors(std::io::BufReader::new(file))? {
            let (store, key) = match name.split_once('.') {
                Some(("g", k)) => (&mut pair.generator, k),
                Some(("d", k)) => (&mut pair.discriminator, k),
                _ => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
            };
            match store.get_mut(key) {
                Some(slot) if slot.shape() == t.shape() => *slot = t,
                _ => return Err(Error::Checkpoint(format!("tensor {name} does not fit the config"))),
            }
        }
        Ok(pair)
    }
}

fn get(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("missing GAN parameter {name}")))
}

fn record_generator(tape: &mut Tape, ids: &BTreeMap<String, NodeId>, z: NodeId, cfg: &GanConfig) -> Result<NodeId> {
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 2 || zs[1] != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "latent batch must be [B, {}], got {zs:?}",
            cfg.latent_dim
        )));
    }
    let ch = cfg.gen_channels();
    let y = tape.matmul(z, get(ids, "proj.w")?)?;
    let y = tape.add_bias(y, get(ids, "proj.b")?)?;
    let y = tape.reshape(y, &[zs[0], ch[0], BASE, BASE])?;
    let y = tape.batch_norm(y, get(ids, "bn_proj.gamma")?, get(ids, "bn_proj.beta")?, BN_EPS)?;
    let mut y = tape.activation(y, Activation::LeakyRelu)?;
    for i in 0..ch.len() - 1 {
        y = tape.conv_transpose2d(y, get(ids, &format!("up{i}.w"))?, ConvSpec::new(2, 1))?;
        y = tape.add_bias(y, get(ids, &format!("up{i}.b"))?)?;
        if i + 2 == ch.len() {
            y = tape.activation(y, Activation::Sigmoid)?;
        } else {
            y = tape.batch_norm(y, get(ids, &format!("bn{i}.gamma"))?, get(ids, &format!("bn{i}.beta"))?, BN_EPS)?;
            y = tape.activation(y, Activation::LeakyRelu)?;
        }
    }
    Ok(y)
}

fn record_discriminator(tape: &mut Tape, ids: &BTreeMap<String, NodeId>, x: NodeId) -> Result<NodeId> {
    let y = tape.conv2d(x, get(ids, "c0.w")?, ConvSpec::new(2, 1))?;
    let y = tape.add_bias(y, get(ids, "c0.b")?)?;
    let y = tape.activation(y, Activation::LeakyRelu)?;
    let y = tape.conv2d(y, get(ids, "c1.w")?, ConvSpec::new(2, 1))?;
    let y = tape.add_bias(y, get(ids, "c1.b")?)?;
    let y = tape.activation(y, Activation::LeakyRelu)?;
    let s = tape.value(y).shape().to_vec();
    let y = tape.reshape(y, &[s[0], s[1] * s[2] * s[3]])?;
    let y = tape.matmul(y, get(ids, "fc.w")?)?;
    tape.add_bias(y, get(ids, "fc.b")?)
}

fn constants(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, NodeId> {
    params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect()
}

/// `[B, latent] -> [B, 3, S, S]` patches in [0, 1]. The generator's batch
/// norms use the statistics of the batch being generated.
pub fn gan_generator_forward(z: &Tensor, pair: &GanPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = constants(&mut tape, &pair.generator);
    let zn = tape.constant(z.clone());
    let out = record_generator(&mut tape, &ids, zn, &pair.config)?;
    Ok(tape.value(out).clone())
}

/// Discriminator logits `[B, 1]`.
pub fn gan_discriminator_forward(x: &Tensor, pair: &GanPair) -> Result<Tensor> {
    check_patches(x, &pair.config)?;
    let mut tape = Tape::new();
    let ids = constants(&mut tape, &pair.discriminator);
    let xn = tape.constant(x.clone());
    let out = record_discriminator(&mut tape, &ids, xn)?;
    Ok(tape.value(out).clone())
}

fn check_patches(x: &Tensor, cfg: &GanConfig) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.patch_size || s[3] != cfg.patch_size {
        return Err(Error::Shape(format!(
            "patch batch must be [B, 3, {p}, {p}], got {s:?}",
            p = cfg.patch_size
        )));
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-mean[log D(real) + log(1 - D(fake))]` from logits, with its gradients.
pub fn discriminator_loss(real_logits: &[f64], fake_logits: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = real_logits.len() as f64;
    let m = fake_logits.len() as f64;
    let loss = real_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n
        + fake_logits.iter().map(|&l| softplus(l)).sum::<f64>() / m;
    let gr = real_logits.iter().map(|&l| (sigmoid(l) - 1.0) / n).collect();
    let gf = fake_logits.iter().map(|&l| sigmoid(l) / m).collect();
    (loss, gr, gf)
}

/// Non-saturating `-mean[log D(fake)]` from logits, with its gradient.
pub fn generator_loss(fake_logits: &[f64]) -> (f64, Vec<f64>) {
    let m = fake_logits.len() as f64;
    let loss = fake_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / m;
    (loss, fake_logits.iter().map(|&l| (sigmoid(l) - 1.0) / m).collect())
}

/// Optimizer state for both networks.
#[derive(Clone, Debug, Default)]
pub struct GanOptState {
    pub generator: OptState,
    pub discriminator: OptState,
}

/// One discriminator update against `real` and `G(z)` with G frozen.
pub fn discriminator_step(pair: &mut GanPair, real: &Tensor, z: &Tensor, state: &mut OptState) -> Result<f64> {
    check_patches(real, &pair.config)?;
    let fake = gan_generator_forward(z, pair)?;
    let mut tape = Tape::new();
    let ids = pair.discriminator.register(&mut tape);
    let xr = tape.constant(real.clone());
    let xf = tape.constant(fake);
    let lr_ = record_discriminator(&mut tape, &ids, xr)?;
    let lf = record_discriminator(&mut tape, &ids, xf)?;
    let (loss, gr, gf) = discriminator_loss(tape.value(lr_).data(), tape.value(lf).data());
    if !loss.is_finite() {
        return Err(Error::NonFinite("discriminator loss"));
    }
    let gr = Tensor::new(tape.value(lr_).shape(), gr)?;
    let gf = Tensor::new(tape.value(lf).shape(), gf)?;
    let node = tape.scalar_op(&[lr_, lf], loss, vec![gr, gf])?;
    let grads = tape.backward(node)?.by_name(&ids);
    let hyper = pair.config.hyper();
    nadam_step(&mut pair.discriminator, &grads, state, &hyper, hyper.lr)?;
    Ok(loss)
}

/// One generator update through the frozen discriminator.
pub fn generator_step(pair: &mut GanPair, z: &Tensor, state: &mut OptState) -> Result<f64> {
    let mut tape = Tape::new();
    let gids = pair.generator.register(&mut tape);
    let dids = constants(&mut tape, &pair.discriminator);
    let zn = tape.constant(z.clone());
    let fake = record_generator(&mut tape, &gids, zn, &pair.config)?;
    let lf = record_discriminator(&mut tape, &dids, fake)?;
    let (loss, gf) = generator_loss(tape.value(lf).data());
    if !loss.is_finite() {
        return Err(Error::NonFinite("generator loss"));
    }
    let gf = Tensor::new(tape.value(lf).shape(), gf)?;
    let node = tape.scalar_op(&[lf], loss, vec![gf])?;
    let grads = tape.backward(node)?.by_name(&gids);
    let hyper = pair.config.hyper();
    nadam_step(&mut pair.generator, &grads, state, &hyper, hyper.lr)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub loss_d: f64,
    pub loss_g: f64,
}

/// A discriminator update followed by a generator update on the same `z`.
pub fn gan_train_step(pair: &mut GanPair, real: &Tensor, z: &Tensor, state: &mut GanOptState) -> Result<GanLosses> {
    if real.shape().first().copied().unwrap_or(0) < 2 {
        return Err(Error::Parameter("GAN batch must hold at least 2 patches".into()));
    }
    let loss_d = discriminator_step(pair, real, z, &mut state.discriminator)?;
    let loss_g = generator_step(pair, z, &mut state.generator)?;
    Ok(GanLosses { loss_d, loss_g })
}

/// `[n, latent]` standard normal draws.
pub fn sample_latent(n: usize, latent: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::new(&[n, latent], (0..n * latent).map(|_| standard_normal(rng)).collect())
}

/// Trains a fresh GAN on procedurally rendered patches of `class`.
/// Returns the pair and the per-step losses.
pub fn train_gan(config: &GanConfig, class: DefectClass) -> Result<(GanPair, Vec<GanLosses>)> {
    let mut pair = GanPair::new(config.clone())?;
    let mut state = GanOptState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let real = defect_patch_batch(class, config.batch, config.patch_size, config.seed.wrapping_add(step as u64 + 1))?;
        let z = sample_latent(config.batch, config.latent_dim, &mut rng)?;
        history.push(gan_train_step(&mut pair, &real, &z, &mut state)?);
    }
    Ok((pair, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityStats {
    pub mean_diff: [f64; 3],
    pub std_diff: [f64; 3],
    /// `sum over channels of |d mean| + |d std|`.
    pub moment_distance: f64,
}

fn channel_moments(x: &Tensor) -> ([f64; 3], [f64; 3]) {
    let [n, _, h, w] = x.dims4();
    let per = h * w;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let vals = (0..n).flat_map(|b| x.data()[(b * 3 + c) * per..(b * 3 + c + 1) * per].iter());
        let count = (n * per) as f64;
        let m = vals.clone().sum::<f64>() / count;
        let var = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[c] = m;
        std[c] = var.sqrt();
    }
    (mean, std)
}

/// Per-channel |mean difference| and |std difference| between two patch
/// batches (population std over batch and pixels).
pub fn gan_fidelity_stats(real: &Tensor, fake: &Tensor) -> Result<FidelityStats> {
    if real.shape() != fake.shape() || real.rank() != 4 || real.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "fidelity needs equal [B, 3, H, W] batches, got {:?} and {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (mr, sr) = channel_moments(real);
    let (mf, sf) = channel_moments(fake);
    let mean_diff = std::array::from_fn(|c| (mr[c] - mf[c]).abs());
    let std_diff = std::array::from_fn(|c| (sr[c] - sf[c]).abs());
    let moment_distance = (0..3).map(|c| mean_diff[c] + std_diff[c]).sum();
    Ok(FidelityStats {
        mean_diff,
        std_diff,
        moment_distance,
    })
}

/// Pastes a `[3, S, S]` patch (values in [0, 1], rounded to 8 bits) with
/// its top-left corner at `(x, y)` and appends the box `(x, y, x+S, y+S)`.
pub fn composite_defect(
    board: &AnnotatedImage,
    patch: &Tensor,
    location: (u32, u32),
    class: DefectClass,
) -> Result<AnnotatedImage> {
    let s = patch.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::Shape(format!("patch must be [3, S, S], got {s:?}")));
    }
    let size = s[1] as u32;
    let (x, y) = location;
    if x.checked_add(size).is_none_or(|e| e > board.width()) || y.checked_add(size).is_none_or(|e| e > board.height()) {
        return Err(Error::Placement(format!(
            "{size}px patch at ({x}, {y}) leaves the {}x{} board",
            board.width(),
            board.height()
        )));
    }
    let mut out = board.clone();
    let n = (size * size) as usize;
    for py in 0..size {
        for px in 0..size {
            let i = (py * size + px) as usize;
            let px_val = |c: usize| (patch.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.image.put_pixel(x + px, y + py, Rgb([px_val(0), px_val(1), px_val(2)]));
        }
    }
    out.boxes.push(Labeled {
        bbox: BBox::new(x as f64, y as f64, (x + size) as f64, (y + size) as f64)?,
        class,
    });
    out.source = ImageSource::GanComposited;
    out.validate()?;
    Ok(out)
}
