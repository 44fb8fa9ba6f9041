//! Raw-waveform encoder: learnable sinc band-pass front end, two convolution
//! blocks and two fully connected layers, mapping an N-sample chunk to an
//! M-dimensional embedding.
//!
//! ```text
//! layer_norm(input) -> sinc conv -> |.| -> max-pool -> layer_norm -> leaky-ReLU
//!   -> [conv -> max-pool -> layer_norm -> leaky-ReLU] x 2 -> flatten
//!   -> [linear -> batch_norm -> leaky-ReLU] x 2
//! ```

pub mod sinc;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{BatchNormState, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    /// Input samples per chunk (N).
    pub chunk_len: usize,
    pub sinc_filters: usize,
    /// Odd number of taps per sinc filter.
    pub sinc_len: usize,
    pub sinc_min_hz: f64,
    pub sinc_max_hz: f64,
    pub conv_filters: Vec<usize>,
    pub conv_len: Vec<usize>,
    pub pool: usize,
    /// Fully connected widths; the last one is the embedding size M.
    pub fc: Vec<usize>,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sample_rate: 16000,
            chunk_len: 3200,
            sinc_filters: 80,
            sinc_len: 251,
            sinc_min_hz: 30.0,
            sinc_max_hz: 8000.0,
            conv_filters: vec![60, 60],
            conv_len: vec![5, 5],
            pool: 3,
            fc: vec![2048, 1024],
            leaky_slope: 0.2,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.05,
        }
    }
}

impl EncoderConfig {
    /// 160-sample chunks, 4 sinc filters of 31 taps, 4-filter convs,
    /// FC 16 -> 8. Small enough for exhaustive finite differences.
    pub fn reduced() -> Self {
        EncoderConfig {
            chunk_len: 160,
            sinc_filters: 4,
            sinc_len: 31,
            conv_filters: vec![4, 4],
            conv_len: vec![5, 5],
            fc: vec![16, 8],
            ..Self::default()
        }
    }

    /// Full-length 200 ms chunks with a narrow network, sized for training
    /// runs on a single CPU core.
    pub fn desk() -> Self {
        EncoderConfig {
            sinc_filters: 8,
            sinc_len: 63,
            conv_filters: vec![8, 8],
            conv_len: vec![5, 5],
            fc: vec![64, 32],
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.fc.last().unwrap_or(&0)
    }

    /// `(channels, time)` after each of the three convolution blocks.
    pub fn block_shapes(&self) -> Result<Vec<(usize, usize)>> {
        if self.conv_filters.len() != self.conv_len.len() {
            return Err(Error::Config {
                key: "encoder.conv_len".into(),
                msg: "needs one length per conv layer".into(),
            });
        }
        if self.sinc_len % 2 == 0 || self.sinc_filters == 0 {
            return Err(Error::Config {
                key: "encoder.sinc_len".into(),
                msg: "sinc filters need an odd, positive length".into(),
            });
        }
        if self.fc.is_empty() || self.pool == 0 {
            return Err(Error::Config {
                key: "encoder.fc".into(),
                msg: "need at least one fully connected layer and pool >= 1".into(),
            });
        }
        let mut shapes = Vec::new();
        let mut t = self.chunk_len;
        let stages = std::iter::once((self.sinc_filters, self.sinc_len))
            .chain(self.conv_filters.iter().copied().zip(self.conv_len.iter().copied()));
        for (i, (filters, klen)) in stages.enumerate() {
            if klen > t || (t - klen + 1) < self.pool {
                return Err(Error::Config {
                    key: "encoder.chunk_len".into(),
                    msg: format!("block {i}: length {t} too short for kernel {klen} and pool {}", self.pool),
                });
            }
            t = (t - klen + 1) / self.pool;
            shapes.push((filters, t));
        }
        Ok(shapes)
    }

    pub fn flatten_width(&self) -> Result<usize> {
        let (c, t) = *self.block_shapes()?.last().expect("at least the sinc block");
        Ok(c * t)
    }

    /// SHA-256 over the architecture-defining fields.
    pub fn digest(&self) -> [u8; 32] {
        let text = format!(
            "sr={};n={};sinc={}x{};conv={:?}x{:?};pool={};fc={:?}",
            self.sample_rate,
            self.chunk_len,
            self.sinc_filters,
            self.sinc_len,
            self.conv_filters,
            self.conv_len,
            self.pool,
            self.fc
        );
        Sha256::digest(text.as_bytes()).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<F: Real> {
    cfg: EncoderConfig,
    flatten: usize,
    pub params: ParamStore<F>,
    pub bn: Vec<BatchNormState<F>>,
}

fn uniform_tensor<F: Real>(shape: &[usize], bound: f64, rng: &mut rng::Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Kaiming-uniform bound for a layer followed by leaky-ReLU.
pub(crate) fn fan_in_bound(fan_in: usize, slope: f64) -> f64 {
    (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

impl<F: Real> Encoder<F> {
    /// Fresh parameters: mel-spaced sinc cutoffs, fan-in scaled uniform
    /// weights, unit gains, zero offsets and biases.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let shapes = cfg.block_shapes()?;
        let flatten = cfg.flatten_width()?;
        let mut rng = rng::stream(seed, "init/encoder", 0);
        let mut p = ParamStore::default();
        let affine = |p: &mut ParamStore<F>, name: &str, n: usize| {
            p.insert(format!("encoder.{name}.gain"), Tensor::filled(&[n], F::one()));
            p.insert(format!("encoder.{name}.offset"), Tensor::zeros(&[n]));
        };

        affine(&mut p, "ln0", cfg.chunk_len);
        let (lows, bands) = sinc::mel_cutoffs(
            cfg.sinc_filters,
            cfg.sample_rate as f64,
            cfg.sinc_min_hz,
            cfg.sinc_max_hz,
        );
        p.insert("encoder.sinc.low", Tensor::from_f64(&[lows.len()], &lows)?);
        p.insert("encoder.sinc.band", Tensor::from_f64(&[bands.len()], &bands)?);
        let (c0, t0) = shapes[0];
        affine(&mut p, "ln1", c0 * t0);

        let mut in_ch = cfg.sinc_filters;
        for (i, (&filters, &klen)) in cfg.conv_filters.iter().zip(&cfg.conv_len).enumerate() {
            let bound = fan_in_bound(in_ch * klen, cfg.leaky_slope);
            p.insert(
                format!("encoder.conv{}.w", i + 1),
                uniform_tensor(&[filters, in_ch, klen], bound, &mut rng),
            );
            let (c, t) = shapes[i + 1];
            affine(&mut p, &format!("ln{}", i + 2), c * t);
            in_ch = filters;
        }

        let mut width = flatten;
        let mut bn = Vec::new();
        for (i, &units) in cfg.fc.iter().enumerate() {
            let bound = fan_in_bound(width, cfg.leaky_slope);
            p.insert(
                format!("encoder.fc{}.w", i + 1),
                uniform_tensor(&[units, width], bound, &mut rng),
            );
            p.insert(format!("encoder.fc{}.b", i + 1), Tensor::zeros(&[units]));
            affine(&mut p, &format!("bn{}", i + 1), units);
            bn.push(BatchNormState::new(units));
            width = units;
        }
        Ok(Encoder {
            cfg,
            flatten,
            params: p,
            bn,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// The same network stored at another precision.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            cfg: self.cfg.clone(),
            flatten: self.flatten,
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormState {
                    mean: s.mean.iter().map(|m| G::of(m.f64())).collect(),
                    var: s.var.iter().map(|v| G::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Flatten width between the conv stack and the first FC layer.
    pub fn flatten_width(&self) -> usize {
        self.flatten
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Encodes `x: [batch, chunk_len]` in train mode, updating running
    /// batch-norm statistics.
    pub fn forward_train(&mut self, tape: &mut Tape<F>, vars: &Bound, x: Var) -> Result<Var> {
        forward(&self.cfg, self.flatten, tape, vars, x, BnStates::Train(&mut self.bn))
    }

    pub fn forward_eval(&self, tape: &mut Tape<F>, vars: &Bound, x: Var) -> Result<Var> {
        forward(&self.cfg, self.flatten, tape, vars, x, BnStates::Eval(&self.bn))
    }

    /// Eval-mode embeddings of equally long chunks, one row per chunk.
    pub fn embed(&self, chunks: &[&[f32]]) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(chunk_batch(chunks, self.cfg.chunk_len)?);
        let z = self.forward_eval(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }
}

/// Packs chunks into a `[batch, chunk_len]` tensor.
pub fn chunk_batch<F: Real>(chunks: &[&[f32]], chunk_len: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(chunks.len() * chunk_len);
    for c in chunks {
        if c.len() != chunk_len {
            return Err(Error::dim(
                "encode",
                format!("chunk has {} samples, encoder expects {chunk_len}", c.len()),
            ));
        }
        data.extend(c.iter().map(|&s| F::of(s as f64)));
    }
    Tensor::new(vec![chunks.len(), chunk_len], data)
}

enum BnStates<'a, F> {
    Train(&'a mut [BatchNormState<F>]),
    Eval(&'a [BatchNormState<F>]),
}

fn forward<F: Real>(
    cfg: &EncoderConfig,
    flatten: usize,
    tape: &mut Tape<F>,
    vars: &Bound,
    x: Var,
    mut bn: BnStates<'_, F>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.chunk_len {
        return Err(Error::dim(
            "encode",
            format!("input {shape:?}, expected [batch, {}]", cfg.chunk_len),
        ));
    }
    let batch = shape[0];
    let p = |name: &str| vars.var(&format!("encoder.{name}"));

    let h = tape.layer_norm(x, p("ln0.gain"), p("ln0.offset"), cfg.ln_eps)?;
    let h = tape.reshape(h, &[batch, 1, cfg.chunk_len])?;
    let bank = sinc::sinc_bank(tape, p("sinc.low"), p("sinc.band"), cfg.sinc_len)?;
    let h = tape.conv1d(h, bank, 1)?;
    let h = tape.abs(h);
    let mut h = block_tail(tape, cfg, h, "ln1", &p)?;
    for i in 0..cfg.conv_filters.len() {
        let c = tape.conv1d(h, p(&format!("conv{}.w", i + 1)), 1)?;
        h = block_tail(tape, cfg, c, &format!("ln{}", i + 2), &p)?;
    }
    let s = tape.shape(h).to_vec();
    let width = s[1] * s[2];
    if width != flatten {
        return Err(Error::dim(
            "encode",
            format!("flatten width {width} drifted from constructed {flatten}"),
        ));
    }
    let mut h = tape.reshape(h, &[batch, width])?;
    for i in 0..cfg.fc.len() {
        let l = tape.linear(h, p(&format!("fc{}.w", i + 1)), p(&format!("fc{}.b", i + 1)))?;
        let (g, o) = (p(&format!("bn{}.gain", i + 1)), p(&format!("bn{}.offset", i + 1)));
        let n = match &mut bn {
            BnStates::Train(st) => {
                tape.batch_norm_train(l, g, o, &mut st[i], cfg.bn_momentum, cfg.bn_eps)?
            }
            BnStates::Eval(st) => tape.batch_norm_eval(l, g, o, &st[i], cfg.bn_eps)?,
        };
        h = tape.leaky_relu(n, cfg.leaky_slope);
    }
    Ok(h)
}

/// max-pool -> layer_norm -> leaky-ReLU
fn block_tail<F: Real>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    h: Var,
    ln: &str,
    p: &impl Fn(&str) -> Var,
) -> Result<Var> {
    let h = tape.max_pool1d(h, cfg.pool)?;
    let h = tape.layer_norm(h, p(&format!("{ln}.gain")), p(&format!("{ln}.offset")), cfg.ln_eps)?;
    Ok(tape.leaky_relu(h, cfg.leaky_slope))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_layout_flatten_width() {
        let cfg = EncoderConfig::default();
        assert_eq!(
            cfg.block_shapes().unwrap(),
            vec![(80, 983), (60, 326), (60, 107)]
        );
        assert_eq!(cfg.flatten_width().unwrap(), 6420);
        assert_eq!(cfg.embedding_dim(), 1024);
    }

    #[test]
    fn reduced_layout() {
        let cfg = EncoderConfig::reduced();
        assert_eq!(cfg.block_shapes().unwrap(), vec![(4, 43), (4, 13), (4, 3)]);
    }

    #[test]
    fn too_short_chunk_is_rejected() {
        let cfg = EncoderConfig {
            chunk_len: 40,
            ..EncoderConfig::reduced()
        };
        assert!(matches!(
            Encoder::<f32>::init(cfg, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn init_is_seeded_and_sorted() {
        let a = Encoder::<f32>::init(EncoderConfig::reduced(), 5).unwrap();
        let b = Encoder::<f32>::init(EncoderConfig::reduced(), 5).unwrap();
        let c = Encoder::<f32>::init(EncoderConfig::reduced(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let low = a.params.get("encoder.sinc.low").unwrap().data();
        assert!(low.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn wrong_chunk_length_is_a_dimension_error() {
        let enc = Encoder::<f32>::init(EncoderConfig::reduced(), 1).unwrap();
        let chunk = vec![0.1f32; 159];
        assert!(matches!(
            enc.embed(&[&chunk]),
            Err(Error::Dimension { .. })
        ));
    }
}
