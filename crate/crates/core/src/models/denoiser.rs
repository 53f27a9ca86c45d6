use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{decode_checkpoint, encode_checkpoint, linear, load_bytes, Adam, ParamStore};
use crate::diffusion::{forward_sample, gaussian, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::{concat, Tape, Tensor, Var};
use crate::seed;

/// Architecture of the patch-token denoiser.
///
/// The latent is cut into `patch×patch` tokens, embedded to `d_model`, and
/// passed through `blocks` pre-norm self-attention + MLP residual blocks.
/// Block `mid_block` is the designated intermediate block whose output is
/// the semantic feature; every block exposes its attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub mid_block: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 32,
            width: 32,
            patch: 4,
            d_model: 32,
            mlp_hidden: 64,
            blocks: 5,
            mid_block: 2,
            seed: 17,
        }
    }
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Length of the flattened mid-block feature.
    pub fn mid_dim(&self) -> usize {
        self.tokens() * self.d_model
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::invalid(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("d_model must be even and >= 2"));
        }
        if self.blocks == 0 || self.mid_block >= self.blocks {
            return Err(Error::invalid(format!(
                "mid block {} outside 0..{}",
                self.mid_block, self.blocks
            )));
        }
        Ok(())
    }

    fn hyper(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("patch", self.patch.to_string()),
            ("d_model", self.d_model.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mid_block", self.mid_block.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

const HEAD: usize = 5;
const PER_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamStore,
    fingerprint: u64,
}

/// Products of one forward pass.
pub struct DenoiserOutputs<'t> {
    /// Noise prediction, shaped like the input.
    pub eps: Var<'t>,
    /// Output of the mid block, `[tokens·d_model]` per sample.
    pub mid: Var<'t>,
    /// One `[B·tokens, tokens]` row-stochastic map per block.
    pub attn: Vec<Var<'t>>,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[0xDE]);
        let (d, h, pd, n) = (
            config.d_model,
            config.mlp_hidden,
            config.patch_dim(),
            config.tokens(),
        );
        let mut p = ParamStore::new();
        p.push_init("embed.w", &[pd, d], 1.0, &mut rng);
        p.push_zeros("embed.b", &[d]);
        p.push_init("pos", &[n, d], (n as f64).sqrt() * 0.5, &mut rng);
        p.push_init("time.w", &[d, d], 1.0, &mut rng);
        p.push_zeros("time.b", &[d]);
        for b in 0..config.blocks {
            for name in ["q", "k", "v"] {
                p.push_init(&format!("block{b}.{name}"), &[d, d], 1.0, &mut rng);
            }
            p.push_init(&format!("block{b}.o"), &[d, d], 0.5, &mut rng);
            p.push_init(&format!("block{b}.mlp1.w"), &[d, h], 1.0, &mut rng);
            p.push_zeros(&format!("block{b}.mlp1.b"), &[h]);
            p.push_init(&format!("block{b}.mlp2.w"), &[h, d], 0.5, &mut rng);
            p.push_zeros(&format!("block{b}.mlp2.b"), &[d]);
        }
        p.push_init("out.w", &[d, pd], 1.0, &mut rng);
        p.push_zeros("out.b", &[pd]);
        let fingerprint = p.fingerprint("denoiser");
        Ok(DenoiserNet {
            config,
            params: p,
            fingerprint,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn id(&self) -> u64 {
        self.fingerprint
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.config.height, self.config.width]
    }

    fn patch_index(&self, batch: usize) -> Rc<Vec<usize>> {
        let c = &self.config;
        let (gw, p) = (c.width / c.patch, c.patch);
        let plane = c.height * c.width;
        let mut idx = Vec::with_capacity(batch * plane);
        for b in 0..batch {
            for tok in 0..c.tokens() {
                let (pr, pc) = (tok / gw, tok % gw);
                for i in 0..p {
                    for k in 0..p {
                        idx.push(b * plane + (pr * p + i) * c.width + pc * p + k);
                    }
                }
            }
        }
        Rc::new(idx)
    }

    fn unpatch_index(&self, batch: usize) -> Rc<Vec<usize>> {
        let fwd = self.patch_index(batch);
        let mut inv = vec![0; fwd.len()];
        for (token_pos, &pixel) in fwd.iter().enumerate() {
            inv[pixel] = token_pos;
        }
        Rc::new(inv)
    }

    fn time_embedding(&self, ts: &[usize]) -> Tensor {
        let d = self.config.d_model;
        let half = d / 2;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            let freqs: Vec<f64> = (0..half)
                .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp() * t as f64)
                .collect();
            data.extend(freqs.iter().map(|a| a.sin()));
            data.extend(freqs.iter().map(|a| a.cos()));
        }
        Tensor::new(&[ts.len(), d], data).expect("time embedding shape")
    }

    /// Batched forward. `x` is `[B, H, W]` (or `[H, W]` for a single
    /// sample) and `ts` holds one timestep per sample.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        ts: &[usize],
        w: &[Var<'t>],
    ) -> Result<DenoiserOutputs<'t>> {
        let c = &self.config;
        let shape = x.shape();
        let plane = [c.height, c.width];
        let batch = match shape.as_slice() {
            [h, wd] if [*h, *wd] == plane => 1,
            [b, h, wd] if [*h, *wd] == plane => *b,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "denoiser input",
                    left: shape,
                    right: plane.to_vec(),
                })
            }
        };
        if ts.len() != batch {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {batch}",
                ts.len()
            )));
        }
        let (n, d) = (c.tokens(), c.d_model);
        let scale_d = (d as f64).sqrt();

        let tokens = x.gather(self.patch_index(batch), &[batch * n, c.patch_dim()])?;
        let mut h = linear(tokens, w[0], w[1])?;
        h = h
            .reshape(&[batch, n, d])?
            .add(w[2])?
            .reshape(&[batch * n, d])?;
        let temb = linear(tape.constant(self.time_embedding(ts)), w[3], w[4])?;
        let expand: Vec<usize> = (0..batch * n)
            .flat_map(|r| (0..d).map(move |k| (r / n) * d + k))
            .collect();
        h = h.add(temb.gather(Rc::new(expand), &[batch * n, d])?)?;

        let mut attn = Vec::with_capacity(c.blocks);
        let mut mid = None;
        for b in 0..c.blocks {
            let p = &w[HEAD + b * PER_BLOCK..HEAD + (b + 1) * PER_BLOCK];
            let normed = h.normalize_rows()?.scale(scale_d);
            let q = normed.matmul(p[0])?;
            let k = normed.matmul(p[1])?;
            let v = normed.matmul(p[2])?;
            let mut maps = Vec::with_capacity(batch);
            let mut outs = Vec::with_capacity(batch);
            for s in 0..batch {
                let qs = q.slice_rows(s * n, n)?;
                let ks = k.slice_rows(s * n, n)?;
                let vs = v.slice_rows(s * n, n)?;
                let a = qs.matmul(ks.transpose()?)?.scale(1.0 / scale_d).softmax()?;
                outs.push(a.matmul(vs)?);
                maps.push(a);
            }
            let (a_all, o_all) = if batch == 1 {
                (maps[0], outs[0])
            } else {
                (concat(&maps)?, concat(&outs)?)
            };
            h = h.add(o_all.matmul(p[3])?)?;
            let normed = h.normalize_rows()?.scale(scale_d);
            let ff = linear(linear(normed, p[4], p[5])?.relu(), p[6], p[7])?;
            h = h.add(ff)?;
            attn.push(a_all);
            if b == c.mid_block {
                mid = Some(h.reshape(&[batch, n * d])?);
            }
        }
        let o = HEAD + c.blocks * PER_BLOCK;
        let normed = h.normalize_rows()?.scale(scale_d);
        let out_tokens = linear(normed, w[o], w[o + 1])?;
        let eps = out_tokens.gather(self.unpatch_index(batch), &shape)?;
        let mid = mid.expect("mid block within range");
        let mid = if batch == 1 {
            mid.reshape(&[n * d])?
        } else {
            mid
        };
        Ok(DenoiserOutputs { eps, mid, attn })
    }

    /// Single-sample forward with frozen weights, differentiable w.r.t. `x`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, t: usize) -> Result<DenoiserOutputs<'t>> {
        tape.touch_model(self.fingerprint);
        let w = self.params.bind(tape, false);
        self.forward_with(tape, x, &[t], &w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_checkpoint("denoiser", &self.config.hyper(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode_checkpoint("denoiser", bytes)?;
        let config = DenoiserConfig {
            height: raw.get("height")?,
            width: raw.get("width")?,
            patch: raw.get("patch")?,
            d_model: raw.get("d_model")?,
            mlp_hidden: raw.get("mlp_hidden")?,
            blocks: raw.get("blocks")?,
            mid_block: raw.get("mid_block")?,
            seed: raw.get("seed")?,
        };
        let fresh = DenoiserNet::new(config)?;
        let params = raw.into_params(&fresh.params)?;
        let fingerprint = params.fingerprint("denoiser");
        Ok(DenoiserNet {
            config: fresh.config,
            params,
            fingerprint,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&load_bytes(path)?)
    }
}

impl Denoiser for DenoiserNet {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(x_t.clone());
        Ok(self.forward(&tape, x, t)?.eps.value())
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// Per-step training losses, as mean squared noise norm per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
}

impl TrainCurve {
    /// Mean of the first `k` recorded losses.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `k` recorded losses.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Trains ε-prediction on forward-sampled pairs `(x_t, ε)` with uniform `t`.
pub fn train_denoiser(
    latents: &[Tensor],
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(DenoiserNet, TrainCurve)> {
    if latents.is_empty() {
        return Err(Error::Empty("train_denoiser"));
    }
    let mut net = DenoiserNet::new(config)?;
    let shape = net.latent_shape();
    if let Some(bad) = latents.iter().find(|l| l.shape() != shape) {
        return Err(Error::ShapeMismatch {
            op: "train_denoiser",
            left: bad.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    let dim = (shape[0] * shape[1]) as f64;
    let batch = batch.max(1);
    let mut opt = Adam::new(lr, &net.params);
    let mut rng = seed::rng(seed, &[0x7A]);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut curve = TrainCurve::default();
    let mut step = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let ts: Vec<usize> = chunk
                .iter()
                .map(|_| rng.random_range(1..=schedule.steps()))
                .collect();
            let mut xt = Vec::with_capacity(chunk.len() * shape[0] * shape[1]);
            let mut eps_all = Vec::with_capacity(xt.capacity());
            for (&i, &t) in chunk.iter().zip(&ts) {
                let eps = gaussian(&shape, seed, (step << 16) | i as u64);
                xt.extend_from_slice(forward_sample(&latents[i], t, &eps, schedule)?.data());
                eps_all.extend_from_slice(eps.data());
            }
            let bshape = [chunk.len(), shape[0], shape[1]];
            let tape = Tape::new();
            let w = net.params.bind(&tape, true);
            let x = tape.constant(Tensor::new(&bshape, xt)?);
            let target = tape.constant(Tensor::new(&bshape, eps_all)?);
            let out = net.forward_with(&tape, x, &ts, &w)?;
            let loss = out.eps.sub(target)?.square().mean();
            let value = loss.item() * dim;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("denoiser training loss at step {step}"),
                });
            }
            curve.losses.push(value);
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = w.iter().map(|v| tape.grad(*v)).collect();
            opt.step(&mut net.params, &grads);
            step += 1;
        }
    }
    if !net.params.all_finite() {
        return Err(Error::NonFinite {
            context: "denoiser weights after training".into(),
        });
    }
    net.fingerprint = net.params.fingerprint("denoiser");
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check_with, FdOptions};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            height: 8,
            width: 8,
            patch: 2,
            d_model: 8,
            mlp_hidden: 12,
            blocks: 3,
            mid_block: 1,
            seed: 3,
        }
    }

    fn input(cfg: &DenoiserConfig, seed: u64) -> Tensor {
        gaussian(&[cfg.height, cfg.width], seed, 0)
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let cfg = small();
        let net = DenoiserNet::new(cfg.clone()).unwrap();
        let tape = Tape::new();
        let x = tape.constant(input(&cfg, 1));
        let out = net.forward(&tape, x, 5).unwrap();
        assert_eq!(out.eps.shape(), vec![8, 8]);
        assert_eq!(out.mid.shape(), vec![cfg.mid_dim()]);
        assert_eq!(out.attn.len(), 3);
        for a in &out.attn {
            let v = a.value();
            assert_eq!(v.shape(), &[16, 16]);
            for row in v.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
        assert!(tape.touched_models().contains(&net.id()));
        let bad = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(net.forward(&tape, bad, 1).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let cfg = small();
        let net = DenoiserNet::new(cfg.clone()).unwrap();
        let (a, b) = (input(&cfg, 1), input(&cfg, 2));
        let e1 = net.predict_eps(&a, 3).unwrap();
        assert_eq!(e1, net.predict_eps(&a, 3).unwrap());
        let e2 = net.predict_eps(&b, 9).unwrap();

        let tape = Tape::new();
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let x = tape.constant(Tensor::new(&[2, 8, 8], both).unwrap());
        let w = net.params.bind(&tape, false);
        let out = net.forward_with(&tape, x, &[3, 9], &w).unwrap().eps.value();
        assert!(
            Tensor::new(&[8, 8], out.data()[..64].to_vec())
                .unwrap()
                .max_abs_diff(&e1)
                .unwrap()
                < 1e-12
        );
        assert!(
            Tensor::new(&[8, 8], out.data()[64..].to_vec())
                .unwrap()
                .max_abs_diff(&e2)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn mid_feature_gradient_matches_central_differences() {
        let cfg = small();
        let net = DenoiserNet::new(cfg.clone()).unwrap();
        let anchor = {
            let tape = Tape::new();
            let x = tape.constant(input(&cfg, 8));
            net.forward(&tape, x, 4).unwrap().mid.value()
        };
        let x = input(&cfg, 9);
        let opts = FdOptions::new(1e-5);
        let report = finite_diff_check_with(
            |tape, v| {
                let out = net.forward(tape, v, 4)?;
                out.mid.cosine_sim(tape.constant(anchor.clone()))
            },
            &x,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = small();
        let s = NoiseSchedule::scaled_linear(20).unwrap();
        let data: Vec<Tensor> = (0..16)
            .map(|i| input(&cfg, 100 + i).map(|v| 0.5 + 0.1 * v))
            .collect();
        let (net, curve) = train_denoiser(&data, &s, cfg.clone(), 8, 8, 3e-3, 1).unwrap();
        assert_eq!(curve.losses.len(), 16);
        assert!(
            curve.tail_mean(4) < curve.head_mean(4),
            "{:?}",
            curve.losses
        );
        let (again, _) = train_denoiser(&data, &s, cfg.clone(), 8, 8, 3e-3, 1).unwrap();
        assert_eq!(net, again);
        assert!(train_denoiser(&[], &s, cfg, 1, 1, 1e-3, 1).is_err());
    }

    #[test]
    fn zero_prediction_baseline_matches_latent_dimension() {
        // E‖ε‖² over standard normal noise equals the number of elements.
        let n = 400;
        let mean: f64 = (0..n)
            .map(|i| {
                gaussian(&[8, 8], 5, i)
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 64.0).abs() < 3.0, "{mean}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenoiserNet::new(small()).unwrap();
        let bytes = net.to_bytes();
        let back = DenoiserNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.fingerprint(), net.fingerprint());
    }
}
