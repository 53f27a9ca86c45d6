//! Small trainable stand-ins for the pretrained components: a patch-token
//! attention denoiser, a linear latent codec and identity embedders.

mod codec;
mod denoiser;
mod embedder;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use codec::{Codec, PcaCodec};
pub use denoiser::{train_denoiser, DenoiserConfig, DenoiserNet, DenoiserOutputs, TrainCurve};
pub use embedder::{
    measure_separation, train_embedder, train_embedders, Embedder, EmbedderConfig,
    EmbedderTrainConfig, Separation,
};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::io::{read_file, ByteReader, ByteWriter};
use crate::seed;

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Gaussian init with std `scale / √fan_in`.
    fn push_init(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut impl Rng) -> usize {
        let fan_in = shape[0] as f64;
        let n = shape.iter().product();
        let std = scale / fan_in.sqrt();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.push(name, Tensor::new(shape, data).expect("init shape"))
    }

    fn push_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, tracked only when training.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn fingerprint(&self, kind: &str) -> u64 {
        seed::fnv1a(
            kind.bytes().chain(
                self.tensors
                    .iter()
                    .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())),
            ),
        )
    }

    fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *w -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `x·W + b` for `x: rows×in`.
pub(crate) fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)
}

const CKPT_MAGIC: &[u8; 8] = b"ADVCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Versioned checkpoint: kind, `key=value` hyperparameter lines, then named
/// tensors in declaration order.
pub(crate) fn encode_checkpoint(
    kind: &str,
    hyper: &[(&str, String)],
    params: &ParamStore,
) -> Vec<u8> {
    let mut w = ByteWriter::with_header(CKPT_MAGIC, CKPT_VERSION);
    w.str(kind);
    let text: Vec<String> = hyper.iter().map(|(k, v)| format!("{k}={v}")).collect();
    w.str(&text.join("\n"));
    w.u64(params.tensors.len() as u64);
    for (name, t) in params.names.iter().zip(&params.tensors) {
        w.str(name).tensor(t);
    }
    w.finish()
}

pub(crate) struct RawCheckpoint {
    pub hyper: Vec<(String, String)>,
    pub params: ParamStore,
}

impl RawCheckpoint {
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .hyper
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::format("checkpoint", format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value for `{key}`: {v}")))
    }

    /// Validates that loaded tensors match a freshly built architecture.
    pub fn into_params(self, expected: &ParamStore) -> Result<ParamStore> {
        if self.params.names != expected.names {
            return Err(Error::format("checkpoint", "parameter names differ"));
        }
        for (name, (a, b)) in self
            .params
            .names
            .iter()
            .zip(self.params.tensors.iter().zip(&expected.tensors))
        {
            if a.shape() != b.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
        }
        Ok(self.params)
    }
}

pub(crate) fn decode_checkpoint(kind: &str, bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = ByteReader::open("checkpoint", bytes, CKPT_MAGIC, CKPT_VERSION)?;
    let found = r.str()?;
    if found != kind {
        return Err(Error::format(
            "checkpoint",
            format!("expected a {kind} checkpoint, found {found}"),
        ));
    }
    let hyper = r
        .str()?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format("checkpoint", format!("bad line `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        params.push(name, t);
    }
    r.finish()?;
    Ok(RawCheckpoint { hyper, params })
}

pub(crate) fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    read_file(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let tape = Tape::new();
            let w = p.bind(&tape, true);
            let loss = w[0].add_scalar(-1.0).square().sum();
            tape.backward(loss).unwrap();
            let g = vec![tape.grad(w[0])];
            opt.step(&mut p, &g);
        }
        for v in p.tensors()[0].data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn checkpoint_validation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.push_init("w", &[3, 2], 1.0, &mut rng);
        p.push_zeros("b", &[2]);
        let bytes = encode_checkpoint("toy", &[("width", "2".into())], &p);
        let raw = decode_checkpoint("toy", &bytes).unwrap();
        assert_eq!(raw.get::<usize>("width").unwrap(), 2);
        assert!(raw.get::<usize>("depth").is_err());
        assert_eq!(raw.into_params(&p).unwrap(), p);

        assert!(decode_checkpoint("other", &bytes).is_err());
        let mut q = ParamStore::new();
        q.push_zeros("w", &[2, 3]);
        q.push_zeros("b", &[2]);
        let raw = decode_checkpoint("toy", &bytes).unwrap();
        assert!(raw.into_params(&q).is_err());
    }
}
