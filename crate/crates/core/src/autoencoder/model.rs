use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{Block, BlockConfig, BlockTape, ForwardMode};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::ingest::NormalizationStats;

/// Architecture of the encoder/decoder stack.
///
/// The encoder maps `C → hidden → … → hidden → latent` over `blocks`
/// residual blocks; the decoder mirrors it back to `C`. Every block keeps the
/// time length, so the latent code is `latent × L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEConfig {
    pub blocks: usize,
    pub latent_channels: usize,
    pub input_channels: usize,
    pub window_length: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// Dilation of block `i`, applied identically on both sides.
    pub dilations: Vec<usize>,
    pub dropout_p: f64,
    pub seed: u64,
}

impl AEConfig {
    /// Full-size defaults: 10 blocks per side, 30 kernels of size 3,
    /// dilations `2^1 … 2^10`, 32 latent channels, dropout 0.2.
    pub fn new(input_channels: usize, window_length: usize) -> Self {
        Self {
            blocks: 10,
            latent_channels: 32,
            input_channels,
            window_length,
            hidden_channels: 30,
            kernel_size: 3,
            dilations: exponential_dilations(10),
            dropout_p: 0.2,
            seed: 0,
        }
    }

    /// Sets the block count and resets the dilation schedule to match.
    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self.dilations = exponential_dilations(blocks);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("need at least one block per side".into()));
        }
        if self.latent_channels == 0 || self.input_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.window_length == 0 {
            return Err(Error::Config("window length must be >= 1".into()));
        }
        if self.dilations.len() != self.blocks {
            return Err(Error::Config(format!(
                "{} dilations for {} blocks",
                self.dilations.len(),
                self.blocks
            )));
        }
        Ok(())
    }

    fn chain(&self, from: usize, to: usize) -> Vec<usize> {
        let mut ch = vec![from];
        ch.extend(std::iter::repeat_n(self.hidden_channels, self.blocks - 1));
        ch.push(to);
        ch
    }

    fn block_configs(&self, chain: &[usize]) -> Vec<BlockConfig> {
        chain
            .windows(2)
            .zip(&self.dilations)
            .map(|(io, &dilation)| BlockConfig {
                in_channels: io[0],
                out_channels: io[1],
                kernel_size: self.kernel_size,
                dilation,
                dropout_p: self.dropout_p,
                has_resample: io[0] != io[1],
            })
            .collect()
    }

    pub fn encoder_blocks(&self) -> Vec<BlockConfig> {
        self.block_configs(&self.chain(self.input_channels, self.latent_channels))
    }

    pub fn decoder_blocks(&self) -> Vec<BlockConfig> {
        self.block_configs(&self.chain(self.latent_channels, self.input_channels))
    }
}

/// `2^1, 2^2, …, 2^n`.
pub fn exponential_dilations(n: usize) -> Vec<usize> {
    (1..=n).map(|i| 1usize << i).collect()
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub reconstruction: Tensor,
    pub latent: Tensor,
}

/// Per-block intermediates of a training-mode pass.
#[derive(Debug, Clone)]
pub struct Tape {
    encoder: Vec<BlockTape>,
    decoder: Vec<BlockTape>,
}

/// Gradients aligned with [`Autoencoder::named_trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(k));
    }
}

/// Convolutional residual autoencoder plus the normalization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    config: AEConfig,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    normalization: Option<NormalizationStats>,
}

impl Autoencoder {
    pub fn init(config: AEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = config
            .encoder_blocks()
            .into_iter()
            .map(|b| Block::init(b, &mut rng))
            .collect::<Result<_>>()?;
        let decoder = config
            .decoder_blocks()
            .into_iter()
            .map(|b| Block::init(b, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            encoder,
            decoder,
            normalization: None,
        })
    }

    pub fn config(&self) -> &AEConfig {
        &self.config
    }

    pub fn normalization(&self) -> Option<&NormalizationStats> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, stats: NormalizationStats) -> Result<()> {
        if stats.n_channels() != self.config.input_channels {
            return Err(shape_err!(
                "model has {} input channels, stats cover {}",
                self.config.input_channels,
                stats.n_channels()
            ));
        }
        self.normalization = Some(stats);
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub(crate) fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    fn block_prefixes(&self) -> Vec<String> {
        (0..self.encoder.len())
            .map(|i| format!("encoder.{i}"))
            .chain((0..self.decoder.len()).map(|i| format!("decoder.{i}")))
            .collect()
    }

    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        self.blocks()
            .zip(self.block_prefixes())
            .flat_map(|(b, p)| {
                b.named_trainable()
                    .into_iter()
                    .map(move |(n, t)| (format!("{p}.{n}"), t))
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks_mut().flat_map(|b| b.trainable_mut()).collect()
    }

    /// Every persisted tensor: trainable parameters then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.named_trainable();
        for (b, p) in self.blocks().zip(self.block_prefixes()) {
            out.extend(
                b.named_buffers()
                    .into_iter()
                    .map(|(n, t)| (format!("{p}.{n}"), t)),
            );
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let mut buffers: Vec<&mut Tensor> = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let (train, buf) = split_block(b);
            out.extend(train);
            buffers.extend(buf);
        }
        out.extend(buffers);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, l) = x.bcl()?;
        if c != self.config.input_channels || l != self.config.window_length {
            return Err(shape_err!(
                "model expects {}x{} windows, got {c}x{l}",
                self.config.input_channels,
                self.config.window_length
            ));
        }
        Ok(())
    }

    /// Reconstructs a `[C, L]` window or `[B, C, L]` batch. Train mode also
    /// returns the tape needed by [`Autoencoder::backward`].
    pub fn forward(
        &self,
        x: &Tensor,
        mode: ForwardMode<'_>,
    ) -> Result<(ForwardOutput, Option<Tape>)> {
        self.check_input(x)?;
        let rank2 = x.shape().len() == 2;
        let (b, c, l) = x.bcl()?;
        let mut h = x.clone().reshape(vec![b, c, l])?;
        match mode {
            ForwardMode::Eval => {
                for blk in &self.encoder {
                    h = blk.forward(&h, ForwardMode::Eval)?.0;
                }
                let latent = h.clone();
                for blk in &self.decoder {
                    h = blk.forward(&h, ForwardMode::Eval)?.0;
                }
                Ok((finish(h, latent, rank2)?, None))
            }
            ForwardMode::Train(rng) => {
                let mut tape = Tape {
                    encoder: Vec::new(),
                    decoder: Vec::new(),
                };
                for blk in &self.encoder {
                    let (out, t) = blk.forward(&h, ForwardMode::Train(&mut *rng))?;
                    tape.encoder.push(t.expect("train mode records a tape"));
                    h = out;
                }
                let latent = h.clone();
                for blk in &self.decoder {
                    let (out, t) = blk.forward(&h, ForwardMode::Train(&mut *rng))?;
                    tape.decoder.push(t.expect("train mode records a tape"));
                    h = out;
                }
                Ok((finish(h, latent, rank2)?, Some(tape)))
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardOutput> {
        Ok(self.forward(x, ForwardMode::Eval)?.0)
    }

    pub fn forward_train(
        &self,
        x: &Tensor,
        rng: &mut dyn RngCore,
    ) -> Result<(ForwardOutput, Tape)> {
        let (out, tape) = self.forward(x, ForwardMode::Train(rng))?;
        Ok((out, tape.expect("train mode records a tape")))
    }

    /// Backpropagates `d_reconstruction` through a recorded pass.
    pub fn backward(&self, tape: &Tape, d_reconstruction: &Tensor) -> Result<Gradients> {
        let (b, c, l) = d_reconstruction.bcl()?;
        let mut g = d_reconstruction.clone().reshape(vec![b, c, l])?;
        let mut per_block: Vec<Vec<Tensor>> =
            Vec::with_capacity(self.encoder.len() + self.decoder.len());
        for (blk, t) in self.decoder.iter().zip(&tape.decoder).rev() {
            let (dx, grads) = blk.backward(t, &g)?;
            per_block.push(grads);
            g = dx;
        }
        for (blk, t) in self.encoder.iter().zip(&tape.encoder).rev() {
            let (dx, grads) = blk.backward(t, &g)?;
            per_block.push(grads);
            g = dx;
        }
        per_block.reverse();
        Ok(Gradients {
            tensors: per_block.into_iter().flatten().collect(),
        })
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (blk, t) in self.encoder.iter_mut().zip(&tape.encoder) {
            blk.update_running_stats(t);
        }
        for (blk, t) in self.decoder.iter_mut().zip(&tape.decoder) {
            blk.update_running_stats(t);
        }
    }

    /// Eval-mode reconstruction error of each channel-major `C·L` window,
    /// processed `batch` windows at a time.
    pub fn window_errors<W: AsRef<[f64]>>(&self, windows: &[W], batch: usize) -> Result<Vec<f64>> {
        let (c, l) = (self.config.input_channels, self.config.window_length);
        let mut errors = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch.max(1)) {
            let x = stack(chunk, c, l)?;
            let out = self.forward_eval(&x)?;
            errors.extend(per_window_errors(&x, &out.reconstruction)?);
        }
        Ok(errors)
    }
}

fn split_block(b: &mut Block) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
    // Two disjoint borrows of the same block's parameter struct.
    let p = &mut b.params;
    let mut train: Vec<&mut Tensor> = Vec::new();
    if let Some(r) = p.resample.as_mut() {
        train.push(r);
    }
    train.extend([
        &mut p.conv1_weight,
        &mut p.conv1_bias,
        &mut p.bn1.weight,
        &mut p.bn1.bias,
        &mut p.conv2_weight,
        &mut p.conv2_bias,
        &mut p.bn2.weight,
        &mut p.bn2.bias,
    ]);
    let buffers = vec![
        &mut p.bn1.running_mean,
        &mut p.bn1.running_var,
        &mut p.bn2.running_mean,
        &mut p.bn2.running_var,
    ];
    (train, buffers)
}

fn finish(h: Tensor, latent: Tensor, rank2: bool) -> Result<ForwardOutput> {
    if rank2 {
        let (_, c, l) = h.bcl()?;
        let (_, m, ll) = latent.bcl()?;
        Ok(ForwardOutput {
            reconstruction: h.reshape(vec![c, l])?,
            latent: latent.reshape(vec![m, ll])?,
        })
    } else {
        Ok(ForwardOutput {
            reconstruction: h,
            latent,
        })
    }
}

/// Packs channel-major windows into a `[B, C, L]` tensor.
pub fn stack<W: AsRef<[f64]>>(windows: &[W], channels: usize, length: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * channels * length);
    for w in windows {
        let w = w.as_ref();
        if w.len() != channels * length {
            return Err(shape_err!(
                "window has {} values, expected {}",
                w.len(),
                channels * length
            ));
        }
        data.extend_from_slice(w);
    }
    Tensor::new(vec![windows.len(), channels, length], data)
}

/// `Σ (x − x̂)²` over all elements.
pub fn reconstruction_error(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(shape_err!(
            "cannot compare {} values with {}",
            x.len(),
            x_hat.len()
        ));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn per_window_errors(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(shape_err!("shape {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let (b, _, _) = x.bcl()?;
    let per = x.len() / b.max(1);
    x.data()
        .chunks(per)
        .zip(x_hat.data().chunks(per))
        .map(|(a, b)| reconstruction_error(a, b))
        .collect()
}

/// Mean over the batch of the per-window error.
pub fn batch_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let errs = per_window_errors(x, x_hat)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Gradient of [`batch_loss`] w.r.t. the reconstruction.
pub fn batch_loss_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.shape() != x_hat.shape() {
        return Err(shape_err!("shape {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let (b, _, _) = x.bcl()?;
    let k = 2.0 / b as f64;
    let data = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(h, v)| k * (h - v))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
