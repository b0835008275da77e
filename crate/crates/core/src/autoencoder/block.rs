use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::layers::{self, BatchNormCache, BN_MOMENTUM};
use super::Tensor;
use crate::error::{Error, Result};

/// Shape and regularization settings of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub dropout_p: f64,
    pub has_resample: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout_p
            )));
        }
        if !self.has_resample && self.in_channels != self.out_channels {
            return Err(Error::Config(format!(
                "block maps {} -> {} channels without a resample layer",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(ch: usize) -> Self {
        Self {
            weight: Tensor::full(&[ch], 1.0),
            bias: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::full(&[ch], 1.0),
        }
    }

    fn update_running(&mut self, cache: &BatchNormCache) {
        let rm = self.running_mean.data_mut();
        for (r, m) in rm.iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.running_var.data_mut();
        for (r, v) in rv.iter_mut().zip(&cache.batch_var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `[C_out, C_in]`, present only when the channel count changes.
    pub resample: Option<Tensor>,
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub bn1: BatchNorm,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub bn2: BatchNorm,
}

pub enum ForwardMode<'r> {
    /// Batch statistics and active dropout, masks drawn from the given RNG.
    Train(&'r mut dyn RngCore),
    /// Running statistics, dropout disabled.
    Eval,
}

/// Intermediates recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BlockTape {
    input: Tensor,
    skip: Tensor,
    bn1_out: Tensor,
    bn1: BatchNormCache,
    mask: Vec<f64>,
    dropped: Tensor,
    bn2: BatchNormCache,
}

/// Optional resample, then Conv1D → BatchNorm → ReLU → Dropout → Conv1D →
/// BatchNorm, plus a skip connection taken after the resample.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub config: BlockConfig,
    pub params: BlockParams,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Block {
    /// Fan-in scaled uniform initialization; batch norm starts at identity.
    pub fn init(config: BlockConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let (ci, co, k) = (config.in_channels, config.out_channels, config.kernel_size);
        let resample = config
            .has_resample
            .then(|| uniform(&[co, ci], 1.0 / (ci as f64).sqrt(), rng));
        let bound = 1.0 / ((co * k) as f64).sqrt();
        let params = BlockParams {
            resample,
            conv1_weight: uniform(&[co, co, k], bound, rng),
            conv1_bias: uniform(&[co], bound, rng),
            bn1: BatchNorm::new(co),
            conv2_weight: uniform(&[co, co, k], bound, rng),
            conv2_bias: uniform(&[co], bound, rng),
            bn2: BatchNorm::new(co),
        };
        Ok(Self { config, params })
    }

    /// Trainable tensors with their local names, in gradient order.
    pub fn named_trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let p = &self.params;
        let mut out = Vec::with_capacity(9);
        if let Some(r) = &p.resample {
            out.push(("resample.weight", r));
        }
        out.extend([
            ("conv1.weight", &p.conv1_weight),
            ("conv1.bias", &p.conv1_bias),
            ("bn1.weight", &p.bn1.weight),
            ("bn1.bias", &p.bn1.bias),
            ("conv2.weight", &p.conv2_weight),
            ("conv2.bias", &p.conv2_bias),
            ("bn2.weight", &p.bn2.weight),
            ("bn2.bias", &p.bn2.bias),
        ]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.params;
        let mut out = Vec::with_capacity(9);
        if let Some(r) = p.resample.as_mut() {
            out.push(r);
        }
        out.extend([
            &mut p.conv1_weight,
            &mut p.conv1_bias,
            &mut p.bn1.weight,
            &mut p.bn1.bias,
            &mut p.conv2_weight,
            &mut p.conv2_bias,
            &mut p.bn2.weight,
            &mut p.bn2.bias,
        ]);
        out
    }

    /// Non-trainable state (running statistics).
    pub fn named_buffers(&self) -> Vec<(&'static str, &Tensor)> {
        let p = &self.params;
        vec![
            ("bn1.running_mean", &p.bn1.running_mean),
            ("bn1.running_var", &p.bn1.running_var),
            ("bn2.running_mean", &p.bn2.running_mean),
            ("bn2.running_var", &p.bn2.running_var),
        ]
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mode: ForwardMode<'_>,
    ) -> Result<(Tensor, Option<BlockTape>)> {
        let p = &self.params;
        let cfg = &self.config;
        let (_, c, _) = x.bcl()?;
        if c != cfg.in_channels {
            return Err(crate::error::shape_err!(
                "block expects {} channels, got {c}",
                cfg.in_channels
            ));
        }
        let skip = match &p.resample {
            Some(w) => layers::resample(x, w)?,
            None => x.clone(),
        };
        let h1 = layers::conv1d(&skip, &p.conv1_weight, &p.conv1_bias, cfg.dilation)?;
        match mode {
            ForwardMode::Eval => {
                let bn = &p.bn1;
                let n1 = layers::batch_norm_eval(
                    &h1,
                    bn.weight.data(),
                    bn.bias.data(),
                    bn.running_mean.data(),
                    bn.running_var.data(),
                )?;
                let a = layers::relu(&n1);
                let h2 = layers::conv1d(&a, &p.conv2_weight, &p.conv2_bias, cfg.dilation)?;
                let bn = &p.bn2;
                let mut out = layers::batch_norm_eval(
                    &h2,
                    bn.weight.data(),
                    bn.bias.data(),
                    bn.running_mean.data(),
                    bn.running_var.data(),
                )?;
                out.add_assign(&skip)?;
                Ok((out, None))
            }
            ForwardMode::Train(rng) => {
                let (n1, bn1) =
                    layers::batch_norm_train(&h1, p.bn1.weight.data(), p.bn1.bias.data())?;
                let a = layers::relu(&n1);
                let mask = layers::dropout_mask(a.len(), cfg.dropout_p, rng);
                let dropped = layers::apply_mask(&a, &mask);
                let h2 = layers::conv1d(&dropped, &p.conv2_weight, &p.conv2_bias, cfg.dilation)?;
                let (mut out, bn2) =
                    layers::batch_norm_train(&h2, p.bn2.weight.data(), p.bn2.bias.data())?;
                out.add_assign(&skip)?;
                let tape = BlockTape {
                    input: x.clone(),
                    skip,
                    bn1_out: n1,
                    bn1,
                    mask,
                    dropped,
                    bn2,
                };
                Ok((out, Some(tape)))
            }
        }
    }

    /// Returns the input gradient and the trainable gradients in
    /// [`Block::named_trainable`] order.
    pub fn backward(&self, tape: &BlockTape, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let p = &self.params;
        let dil = self.config.dilation;
        let (dh2, dg2, db2) =
            layers::batch_norm_train_backward(&tape.bn2, p.bn2.weight.data(), dy)?;
        let (dd, dw2, dbias2) =
            layers::conv1d_backward(&tape.dropped, &p.conv2_weight, &p.conv2_bias, dil, &dh2)?;
        let da = layers::apply_mask(&dd, &tape.mask);
        let dn1 = layers::relu_backward(&tape.bn1_out, &da);
        let (dh1, dg1, db1) =
            layers::batch_norm_train_backward(&tape.bn1, p.bn1.weight.data(), &dn1)?;
        let (mut dskip, dw1, dbias1) =
            layers::conv1d_backward(&tape.skip, &p.conv1_weight, &p.conv1_bias, dil, &dh1)?;
        dskip.add_assign(dy)?;

        let ch = [self.config.out_channels];
        let mut grads = Vec::with_capacity(9);
        let dx = match &p.resample {
            Some(w) => {
                let (dx, dw) = layers::resample_backward(&tape.input, w, &dskip)?;
                grads.push(dw);
                dx
            }
            None => dskip,
        };
        grads.extend([
            dw1,
            dbias1,
            Tensor::new(ch.to_vec(), dg1)?,
            Tensor::new(ch.to_vec(), db1)?,
            dw2,
            dbias2,
            Tensor::new(ch.to_vec(), dg2)?,
            Tensor::new(ch.to_vec(), db2)?,
        ]);
        Ok((dx, grads))
    }

    pub(crate) fn update_running_stats(&mut self, tape: &BlockTape) {
        self.params.bn1.update_running(&tape.bn1);
        self.params.bn2.update_running(&tape.bn2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(ci: usize, co: usize, p: f64) -> BlockConfig {
        BlockConfig {
            in_channels: ci,
            out_channels: co,
            kernel_size: 3,
            dilation: 2,
            dropout_p: p,
            has_resample: ci != co,
        }
    }

    fn input(b: usize, c: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&[b, c, l], 1.0, &mut rng)
    }

    #[test]
    fn zero_conv_branch_returns_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = Block::init(cfg(3, 3, 0.0), &mut rng).unwrap();
        for t in [
            &mut block.params.conv1_weight,
            &mut block.params.conv1_bias,
            &mut block.params.conv2_weight,
            &mut block.params.conv2_bias,
        ] {
            t.data_mut().fill(0.0);
        }
        let x = input(2, 3, 8, 5);
        let (y, _) = block.forward(&x, ForwardMode::Train(&mut rng)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = Block::init(cfg(2, 4, 0.2), &mut rng).unwrap();
        let x = input(3, 2, 16, 9);
        let (a, tape) = block.forward(&x, ForwardMode::Eval).unwrap();
        let (b, _) = block.forward(&x, ForwardMode::Eval).unwrap();
        assert!(tape.is_none());
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 4, 16]);
    }

    #[test]
    fn seeded_dropout_replays() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::init(cfg(3, 3, 0.2), &mut rng).unwrap();
        let x = input(2, 3, 16, 11);
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            block.forward(&x, ForwardMode::Train(&mut r)).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta.unwrap().mask, tb.unwrap().mask);
        let mut r = ChaCha8Rng::seed_from_u64(78);
        let (_, tc) = block.forward(&x, ForwardMode::Train(&mut r)).unwrap();
        assert_ne!(run().1.unwrap().mask, tc.unwrap().mask);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::init(cfg(3, 5, 0.0), &mut rng).unwrap();
        assert!(matches!(
            block.forward(&input(1, 2, 8, 1), ForwardMode::Eval),
            Err(Error::Shape(_))
        ));
        assert!(Block::init(
            BlockConfig {
                has_resample: false,
                ..cfg(3, 5, 0.0)
            },
            &mut rng
        )
        .is_err());
    }
}
