//! Generator, discriminator, segmentation network and frozen feature
//! extractor.
//!
//! Every network owns a [`ParamSet`]. A forward pass takes the variables
//! returned by `params().bind(tape)`, so callers decide which tape the
//! parameters live on and collect their gradients afterwards.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use agct_tensor::{read_checkpoint, ConvSpec, ParamSet, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fanbeam::{detector_padding, scale_geometry, FanBeamGeometry, LiftPair, View};
use crate::phantoms::{HU_OFFSET, HU_SPAN, NUM_LABELS};

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_RELU_SLOPE * LEAKY_RELU_SLOPE) * fan_in as f64)).sqrt()
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// A convolution whose weight (and optional bias) live in a [`ParamSet`].
#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, kernel: &[usize], spec: ConvSpec, gain: f64) -> Self {
        let mut shape = vec![co, ci];
        shape.extend_from_slice(kernel);
        let fan_in = ci * kernel.iter().product::<usize>();
        let w = params.push(format!("{name}.w"), normal_tensor(rng, &shape, gain * he_std(fan_in)));
        let b = Some(params.push(format!("{name}.b"), Tensor::zeros(&[co])));
        Conv { w, b, spec }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(tape.conv(x, vars[self.w], self.b.map(|b| vars[b]), self.spec)?)
    }

    fn apply_act(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = self.apply(tape, vars, x)?;
        Ok(tape.leaky_relu(y))
    }
}

fn check_vars(params: &ParamSet, vars: &[Var], net: &str) -> Result<()> {
    if vars.len() != params.len() {
        return Err(Error::shape(format!("{net} parameters"), &[params.len()], &[vars.len()]));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    TransposeConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Per-level widths of each 2D encoder; its length is the level count.
    pub encoder_channels: Vec<usize>,
    /// 3D decoder widths from the coarsest level to the finest.
    pub decoder_channels: Vec<usize>,
    pub upsample: Upsample,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder_channels: vec![16, 32, 64],
            decoder_channels: vec![64, 32, 16],
            upsample: Upsample::Nearest,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    levels: Vec<Conv>,
    bottleneck: Conv,
}

impl Encoder {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, view: View, widths: &[usize]) -> Self {
        let mut ci = 1;
        let levels = widths
            .iter()
            .enumerate()
            .map(|(k, &co)| {
                let c = Conv::new(params, rng, &format!("enc_{}.{k}", view.name()), co, ci, &[3, 3], ConvSpec::SAME3, 1.0);
                ci = co;
                c
            })
            .collect();
        let bottleneck = Conv::new(params, rng, &format!("enc_{}.bottleneck", view.name()), ci, ci, &[3, 3], ConvSpec::SAME3, 1.0);
        Encoder { levels, bottleneck }
    }

    /// Feature maps at levels `0..=L`, `[B, C_k, U / 2^k, Z / 2^k]`.
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.levels.len() + 1);
        let mut e = x;
        for conv in &self.levels {
            let f = conv.apply_act(tape, vars, e)?;
            feats.push(f);
            e = tape.avg_pool2(f)?;
        }
        feats.push(self.bottleneck.apply_act(tape, vars, e)?);
        Ok(feats)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Option<Conv>,
    conv: Conv,
}

/// Dual 2D encoders, backprojection lifting at every level and a 3D
/// decoder with a sigmoid head.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    geometry: FanBeamGeometry,
    grid_z: usize,
    pad: usize,
    lifts: Vec<LiftPair>,
    enc_ap: Encoder,
    enc_lat: Encoder,
    dec_in: Conv,
    dec: Vec<DecoderLevel>,
    head: Conv,
}

impl Generator {
    /// `geometry` describes the input projections (a.p. orientation).
    pub fn new(config: &GeneratorConfig, geometry: &FanBeamGeometry, grid_z: usize) -> Result<Self> {
        let levels = config.encoder_channels.len();
        if levels == 0 || config.decoder_channels.len() != levels {
            return Err(Error::config(
                "generator.decoder_channels",
                format!("needs one width per encoder level ({levels})"),
            ));
        }
        if config.encoder_channels.iter().chain(&config.decoder_channels).any(|&c| c == 0) {
            return Err(Error::config("generator", "channel widths must be positive"));
        }
        let f = 1usize << levels;
        if !geometry.grid_n.is_multiple_of(f) || !grid_z.is_multiple_of(f) {
            return Err(Error::Geometry(format!(
                "generator with {levels} levels needs grid {}x{} divisible by {f}",
                geometry.grid_n, grid_z
            )));
        }
        let pad = detector_padding(geometry.n_detector_bins, levels as u32);
        let padded = geometry.with_view(View::Ap).padded(pad)?;
        let lifts = (0..=levels as u32)
            .map(|k| LiftPair::new(&scale_geometry(&padded, k)?))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let enc = &config.encoder_channels;
        let dec = &config.decoder_channels;
        let enc_ap = Encoder::new(&mut params, &mut rng, View::Ap, enc);
        let enc_lat = Encoder::new(&mut params, &mut rng, View::Lat, enc);
        let dec_in = Conv::new(&mut params, &mut rng, "dec.in", dec[0], enc[levels - 1], &[3, 3, 3], ConvSpec::SAME3, 1.0);
        let mut c = dec[0];
        let mut dec_levels = Vec::with_capacity(levels);
        for k in (0..levels).rev() {
            let up = match config.upsample {
                Upsample::Nearest => None,
                Upsample::TransposeConv => {
                    let std = he_std(c);
                    let w = params.push(format!("dec.{k}.up.w"), normal_tensor(&mut rng, &[c, c, 2, 2, 2], std));
                    let b = Some(params.push(format!("dec.{k}.up.b"), Tensor::zeros(&[c])));
                    Some(Conv {
                        w,
                        b,
                        spec: ConvSpec::new(2, 0),
                    })
                }
            };
            let co = dec[levels - 1 - k];
            let conv = Conv::new(&mut params, &mut rng, &format!("dec.{k}"), co, c + enc[k], &[3, 3, 3], ConvSpec::SAME3, 1.0);
            dec_levels.push(DecoderLevel { up, conv });
            c = co;
        }
        let head = Conv::new(&mut params, &mut rng, "head", 1, c, &[1, 1, 1], ConvSpec::new(1, 0), 0.5);
        Ok(Generator {
            config: config.clone(),
            params,
            geometry: geometry.with_view(View::Ap),
            grid_z,
            pad,
            lifts,
            enc_ap,
            enc_lat,
            dec_in,
            dec: dec_levels,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn grid_z(&self) -> usize {
        self.grid_z
    }

    pub fn levels(&self) -> usize {
        self.config.encoder_channels.len()
    }

    /// Zero bins added to each detector end before encoding.
    pub fn detector_padding(&self) -> usize {
        self.pad
    }

    /// Input shape `[B, 1, U, Z]` for batch size `b`.
    pub fn input_shape(&self, b: usize) -> [usize; 4] {
        [b, 1, self.geometry.n_detector_bins, self.grid_z]
    }

    /// Maps projections `[B, 1, U, Z]` of both views to a volume
    /// `[B, 1, N, N, Z]` with values in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x_ap: Var, x_lat: Var) -> Result<Var> {
        check_vars(&self.params, vars, "generator")?;
        let b = tape.shape(x_ap).first().copied().unwrap_or(0);
        let expected = self.input_shape(b.max(1));
        for (view, x) in [(View::Ap, x_ap), (View::Lat, x_lat)] {
            if tape.shape(x) != expected {
                return Err(Error::shape(format!("generator {} input", view.name()), &expected, tape.shape(x)));
            }
        }
        let encode = |tape: &mut Tape, enc: &Encoder, x: Var| -> Result<Vec<Var>> {
            let x = if self.pad > 0 { tape.pad_axis(x, 2, self.pad / 2, self.pad / 2)? } else { x };
            enc.forward(tape, vars, x)
        };
        let fa = encode(tape, &self.enc_ap, x_ap)?;
        let fl = encode(tape, &self.enc_lat, x_lat)?;
        let mut lifted = Vec::with_capacity(fa.len());
        for (k, ((&a, &l), pair)) in fa.iter().zip(&fl).zip(&self.lifts).enumerate() {
            let v = crate::fanbeam::lift_2d_to_3d(tape, &pair.ap, &pair.lat, a, l)
                .map_err(|e| Error::Geometry(format!("lift level {k}: {e}")))?;
            lifted.push(v);
        }
        let levels = self.levels();
        let mut d = self.dec_in.apply_act(tape, vars, lifted[levels])?;
        for (i, level) in self.dec.iter().enumerate() {
            let k = levels - 1 - i;
            d = match &level.up {
                None => tape.upsample2(d)?,
                Some(up) => tape.conv_transpose2(d, vars[up.w], up.b.map(|b| vars[b]))?,
            };
            d = tape.concat_channels(d, lifted[k])?;
            d = level.conv.apply_act(tape, vars, d)?;
        }
        let logits = self.head.apply(tape, vars, d)?;
        Ok(tape.sigmoid(logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![16, 32, 64],
            seed: 2,
        }
    }
}

/// Strided 3D patch classifier with a linear score map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    convs: Vec<Conv>,
    out: Conv,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::config("discriminator.channels", "needs at least one positive width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut ci = 1;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(k, &co)| {
                let c = Conv::new(&mut params, &mut rng, &format!("disc.{k}"), co, ci, &[4, 4, 4], ConvSpec::new(2, 1), 1.0);
                ci = co;
                c
            })
            .collect();
        let out = Conv::new(&mut params, &mut rng, "disc.out", 1, ci, &[3, 3, 3], ConvSpec::SAME3, 1.0);
        Ok(Discriminator {
            config: config.clone(),
            params,
            convs,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Spatial downsampling factor of the score map.
    pub fn stride(&self) -> usize {
        1 << self.convs.len()
    }

    /// Scores `[B, 1, N, N, Z]` volumes with a `[B, 1, N/s, N/s, Z/s]` map.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], v: Var) -> Result<Var> {
        check_vars(&self.params, vars, "discriminator")?;
        let shape = tape.shape(v).to_vec();
        let s = self.stride();
        if shape.len() != 5 || shape[1] != 1 || shape[2..].iter().any(|&d| d % s != 0) {
            let mut expected = shape.clone();
            expected.resize(5, 0);
            expected[1] = 1;
            return Err(Error::Shape {
                context: format!("discriminator input (spatial sizes divisible by {s})"),
                expected,
                got: shape,
            });
        }
        let mut x = v;
        for c in &self.convs {
            x = c.apply_act(tape, vars, x)?;
        }
        self.out.apply(tape, vars, x)
    }
}

/// Fixed affine applied to normalized input volumes before segmentation:
/// HU re-centered on soft tissue and scaled so organ contrasts are O(1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputWindow {
    pub center_hu: f64,
    pub width_hu: f64,
}

impl Default for InputWindow {
    fn default() -> Self {
        InputWindow {
            center_hu: 40.0,
            width_hu: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    /// Widths of the three resolution levels.
    pub channels: [usize; 3],
    pub input_window: InputWindow,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            channels: [8, 16, 32],
            input_window: InputWindow::default(),
            seed: 3,
        }
    }
}

/// Three-level 3D U-Net with a softmax over background, lung, liver and
/// bone.
#[derive(Debug)]
pub struct SegNet {
    config: SegNetConfig,
    params: ParamSet,
    enc: [[Conv; 2]; 3],
    dec: [[Conv; 2]; 2],
    head: Conv,
    calls: AtomicUsize,
}

impl Clone for SegNet {
    fn clone(&self) -> Self {
        SegNet {
            config: self.config.clone(),
            params: self.params.clone(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            head: self.head.clone(),
            calls: AtomicUsize::new(self.invocations()),
        }
    }
}

impl SegNet {
    pub fn new(config: &SegNetConfig) -> Result<Self> {
        if config.channels.contains(&0) {
            return Err(Error::config("segnet.channels", "widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let [w0, w1, w2] = config.channels;
        let k3 = [3, 3, 3];
        let mut conv = |p: &mut ParamSet, name: &str, co, ci| Conv::new(p, &mut rng, name, co, ci, &k3, ConvSpec::SAME3, 1.0);
        let enc = [
            [conv(&mut p, "seg.enc0.a", w0, 1), conv(&mut p, "seg.enc0.b", w0, w0)],
            [conv(&mut p, "seg.enc1.a", w1, w0), conv(&mut p, "seg.enc1.b", w1, w1)],
            [conv(&mut p, "seg.enc2.a", w2, w1), conv(&mut p, "seg.enc2.b", w2, w2)],
        ];
        let dec = [
            [conv(&mut p, "seg.dec1.a", w1, w2 + w1), conv(&mut p, "seg.dec1.b", w1, w1)],
            [conv(&mut p, "seg.dec0.a", w0, w1 + w0), conv(&mut p, "seg.dec0.b", w0, w0)],
        ];
        let head = Conv::new(&mut p, &mut rng, "seg.head", NUM_LABELS, w0, &[1, 1, 1], ConvSpec::new(1, 0), 1.0);
        Ok(SegNet {
            config: config.clone(),
            params: p,
            enc,
            dec,
            head,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        !self.params.is_trainable()
    }

    /// Number of forward passes run so far.
    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Class probabilities `[B, 4, N, N, Z]` of normalized volumes
    /// `[B, 1, N, N, Z]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], v: Var) -> Result<Var> {
        check_vars(&self.params, vars, "segnet")?;
        let shape = tape.shape(v).to_vec();
        if shape.len() != 5 || shape[1] != 1 || shape[2..].iter().any(|&d| d % 4 != 0) {
            let mut expected = shape.clone();
            expected.resize(5, 0);
            expected[1] = 1;
            return Err(Error::Shape {
                context: "segnet input (spatial sizes divisible by 4)".into(),
                expected,
                got: shape,
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let w = self.config.input_window;
        // normalized -> HU -> window
        let x = tape.mul_scalar(v, HU_SPAN / w.width_hu);
        let x = tape.add_scalar(x, (-HU_OFFSET - w.center_hu) / w.width_hu);

        let block = |tape: &mut Tape, convs: &[Conv; 2], x: Var| -> Result<Var> {
            let y = convs[0].apply_act(tape, vars, x)?;
            convs[1].apply_act(tape, vars, y)
        };
        let s0 = block(tape, &self.enc[0], x)?;
        let p0 = tape.avg_pool2(s0)?;
        let s1 = block(tape, &self.enc[1], p0)?;
        let p1 = tape.avg_pool2(s1)?;
        let b = block(tape, &self.enc[2], p1)?;
        let u1 = tape.upsample2(b)?;
        let c1 = tape.concat_channels(u1, s1)?;
        let d1 = block(tape, &self.dec[0], c1)?;
        let u0 = tape.upsample2(d1)?;
        let c0 = tape.concat_channels(u0, s0)?;
        let d0 = block(tape, &self.dec[1], c0)?;
        let logits = self.head.apply(tape, vars, d0)?;
        Ok(tape.softmax_channels(logits)?)
    }

    /// Convenience inference on a `[B, 1, N, N, Z]` tensor.
    pub fn predict(&self, v: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = bind_constant(&self.params, &mut tape);
        let x = tape.constant(v.clone());
        let p = self.forward(&mut tape, &vars, x)?;
        Ok(tape.to_tensor(p))
    }
}

/// Records parameters as constants regardless of their trainable flag.
pub fn bind_constant(params: &ParamSet, tape: &mut Tape) -> Vec<Var> {
    params.iter().map(|(_, t)| tape.constant(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"))).collect()
}

/// Argmax over the channel axis of `[B, C, rest...]` probabilities.
pub fn argmax_labels(probs: &[f64], batch: usize, channels: usize) -> Vec<u8> {
    let rest = probs.len() / (batch * channels);
    let mut out = Vec::with_capacity(batch * rest);
    for b in 0..batch {
        let base = b * channels * rest;
        for i in 0..rest {
            let mut best = 0;
            for c in 1..channels {
                if probs[base + c * rest + i] > probs[base + best * rest + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    pub channels: [usize; 4],
    pub seed: u64,
    /// Checkpoint with externally trained weights of the same layout.
    pub weights: Option<std::path::PathBuf>,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            channels: [16, 32, 64, 128],
            seed: 4,
            weights: None,
        }
    }
}

/// `rows x cols` matrix with orthonormal rows (or columns, whichever is
/// the shorter side), from the QR factorization of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    // Fix the sign ambiguity so the result is uniquely determined.
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Frozen 2D multi-scale filter bank used by the perceptual loss.
#[derive(Debug)]
pub struct FeatureExtractor {
    config: FeatureExtractorConfig,
    params: ParamSet,
    calls: AtomicUsize,
}

impl Clone for FeatureExtractor {
    fn clone(&self) -> Self {
        FeatureExtractor {
            config: self.config.clone(),
            params: self.params.clone(),
            calls: AtomicUsize::new(self.invocations()),
        }
    }
}

impl FeatureExtractor {
    pub fn new(config: &FeatureExtractorConfig) -> Result<Self> {
        if config.channels.contains(&0) {
            return Err(Error::config("features.channels", "widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut ci = 1;
        let gain = (2.0 / (1.0 + LEAKY_RELU_SLOPE * LEAKY_RELU_SLOPE)).sqrt();
        for (k, &co) in config.channels.iter().enumerate() {
            let data: Vec<f64> = orthogonal(&mut rng, co, ci * 9).into_iter().map(|v| v * gain).collect();
            params.push(format!("features.{k}.w"), Tensor::new(vec![co, ci, 3, 3], data).expect("shape"));
            ci = co;
        }
        if let Some(path) = &config.weights {
            let (_, values) = read_checkpoint(path)?;
            params.load_values(&values).map_err(|e| Error::config("features.weights", format!("{}: {e}", path.display())))?;
        }
        params.set_trainable(false);
        Ok(FeatureExtractor {
            config: config.clone(),
            params,
            calls: AtomicUsize::new(0),
        })
    }

    /// Loads external weights from a checkpoint at `path`.
    pub fn with_weights(config: &FeatureExtractorConfig, path: &Path) -> Result<Self> {
        FeatureExtractor::new(&FeatureExtractorConfig {
            weights: Some(path.to_path_buf()),
            ..config.clone()
        })
    }

    pub fn config(&self) -> &FeatureExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Features of slices `[S, 1, H, W]` at scales 1, 1/2, 1/4 and 1/8.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || !shape[2].is_multiple_of(8) || !shape[3].is_multiple_of(8) {
            let mut expected = shape.clone();
            expected.resize(4, 0);
            expected[1] = 1;
            return Err(Error::Shape {
                context: "feature extractor input (spatial sizes divisible by 8)".into(),
                expected,
                got: shape,
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let vars = bind_constant(&self.params, tape);
        let mut feats = Vec::with_capacity(vars.len());
        let mut h = x;
        for (k, &w) in vars.iter().enumerate() {
            if k > 0 {
                h = tape.avg_pool2(h)?;
            }
            let y = tape.conv(h, w, None, ConvSpec::SAME3)?;
            h = tape.leaky_relu(y);
            feats.push(h);
        }
        Ok(feats)
    }
}
