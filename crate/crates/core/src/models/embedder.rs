use std::path::Path;

use rand::seq::SliceRandom;

use super::{decode_checkpoint, encode_checkpoint, linear, load_bytes, Adam, ParamStore};
use crate::data::{Dataset, RenderedSample};
use crate::error::{Error, Result};
use crate::grad::{cosine_similarity, Tape, Tensor, Var};
use crate::seed;

/// Dense identity embedder: `H·W → width → width → k`, tanh hidden layers,
/// unit-norm output. The classification head is only used in training.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl EmbedderConfig {
    fn hyper(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("hidden", self.hidden.to_string()),
            ("dim", self.dim.to_string()),
            ("classes", self.classes.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Logit temperature applied to the cosine classifier.
    pub logit_scale: f64,
    pub dim: usize,
    /// Held-out accuracy below this fails training outright.
    pub min_accuracy: f64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            epochs: 30,
            batch: 32,
            lr: 2e-3,
            logit_scale: 16.0,
            dim: 32,
            min_accuracy: 0.6,
        }
    }
}

const WIDTHS: [usize; 4] = [32, 48, 64, 96];

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    params: ParamStore,
    fingerprint: u64,
    /// Held-out identity accuracy measured after training.
    pub accuracy: f64,
    /// Mean same-identity cosine similarity on held-out renders.
    pub intra_mean: f64,
    pub inter_mean: f64,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        if config.hidden == 0 || config.dim == 0 || config.classes < 2 {
            return Err(Error::invalid(
                "embedder needs hidden, dim > 0 and >= 2 classes",
            ));
        }
        let mut rng = seed::rng(config.seed, &[0xE3]);
        let inp = config.height * config.width;
        let mut p = ParamStore::new();
        p.push_init("l1.w", &[inp, config.hidden], 1.0, &mut rng);
        p.push_zeros("l1.b", &[config.hidden]);
        p.push_init("l2.w", &[config.hidden, config.hidden], 1.0, &mut rng);
        p.push_zeros("l2.b", &[config.hidden]);
        p.push_init("l3.w", &[config.hidden, config.dim], 1.0, &mut rng);
        p.push_zeros("l3.b", &[config.dim]);
        p.push_init("head", &[config.dim, config.classes], 1.0, &mut rng);
        let fingerprint = p.fingerprint("embedder");
        Ok(Embedder {
            config,
            params: p,
            fingerprint,
            accuracy: 0.0,
            intra_mean: 0.0,
            inter_mean: 0.0,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn id(&self) -> u64 {
        self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Edits the weights in place and refreshes the fingerprint.
    pub fn edit_params(&mut self, f: impl FnOnce(&mut ParamStore)) {
        f(&mut self.params);
        self.fingerprint = self.params.fingerprint("embedder");
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.config.height, self.config.width]
    }

    fn features<'t>(&self, x: Var<'t>, rows: usize, w: &[Var<'t>]) -> Result<Var<'t>> {
        let inp = self.config.height * self.config.width;
        let x = x.reshape(&[rows, inp])?.add_scalar(-0.5);
        let h = linear(x, w[0], w[1])?.tanh();
        let h = linear(h, w[2], w[3])?.tanh();
        linear(h, w[4], w[5])?.normalize_rows()
    }

    /// Differentiable unit-norm embedding `[k]` of one `[H, W]` image.
    pub fn embed_var<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape != self.image_shape() {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: shape,
                right: self.image_shape().to_vec(),
            });
        }
        tape.touch_model(self.fingerprint);
        let w = self.params.bind(tape, false);
        self.features(image, 1, &w)?.reshape(&[self.config.dim])
    }

    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        Ok(self.embed_var(&tape, x)?.value())
    }

    /// Embeds many images in one pass; rows of the result are embeddings.
    pub fn embed_batch(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.image_shape();
        let mut data = Vec::with_capacity(images.len() * shape[0] * shape[1]);
        for im in images {
            if im.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    left: im.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            data.extend_from_slice(im.data());
        }
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        let x = tape.constant(Tensor::new(&[images.len(), shape[0], shape[1]], data)?);
        let e = self.features(x, images.len(), &w)?.value();
        Ok(e.data()
            .chunks(self.config.dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    fn logits<'t>(&self, emb: Var<'t>, w: &[Var<'t>], scale: f64) -> Result<Var<'t>> {
        Ok(emb
            .matmul(w[6].transpose()?.normalize_rows()?.transpose()?)?
            .scale(scale))
    }

    /// Fraction of samples whose nearest class direction is the true label.
    pub fn accuracy_on(&self, samples: &[RenderedSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("accuracy_on"));
        }
        let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let embs = self.embed_batch(&imgs)?;
        let head = self.params.tensors()[6].clone();
        let (k, c) = (self.config.dim, self.config.classes);
        let norms: Vec<f64> = (0..c)
            .map(|j| {
                (0..k)
                    .map(|i| head.data()[i * c + j].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let correct = embs
            .iter()
            .zip(samples)
            .filter(|(e, s)| {
                let best = (0..c)
                    .map(|j| (0..k).map(|i| e[i] * head.data()[i * c + j]).sum::<f64>() / norms[j])
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
                    );
                best.0 == s.label
            })
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hyper = self.config.hyper();
        hyper.push(("accuracy", self.accuracy.to_string()));
        hyper.push(("intra_mean", self.intra_mean.to_string()));
        hyper.push(("inter_mean", self.inter_mean.to_string()));
        encode_checkpoint("embedder", &hyper, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode_checkpoint("embedder", bytes)?;
        let config = EmbedderConfig {
            height: raw.get("height")?,
            width: raw.get("width")?,
            hidden: raw.get("hidden")?,
            dim: raw.get("dim")?,
            classes: raw.get("classes")?,
            seed: raw.get("seed")?,
        };
        let (accuracy, intra_mean, inter_mean) = (
            raw.get("accuracy")?,
            raw.get("intra_mean")?,
            raw.get("inter_mean")?,
        );
        let fresh = Embedder::new(config)?;
        let params = raw.into_params(&fresh.params)?;
        let fingerprint = params.fingerprint("embedder");
        Ok(Embedder {
            config: fresh.config,
            params,
            fingerprint,
            accuracy,
            intra_mean,
            inter_mean,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&load_bytes(path)?)
    }
}

/// Same- vs different-identity cosine statistics on a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub intra_mean: f64,
    pub inter_mean: f64,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.intra_mean - self.inter_mean
    }
}

pub fn measure_separation(m: &Embedder, samples: &[RenderedSample]) -> Result<Separation> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let embs = m.embed_batch(&imgs)?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let c = cosine_similarity(&embs[i], &embs[j])?;
            if samples[i].label == samples[j].label {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::invalid(
            "separation needs two renders of one identity and two identities",
        ));
    }
    Ok(Separation {
        intra_mean: intra / ni as f64,
        inter_mean: inter / nx as f64,
    })
}

/// Trains one embedder with a cosine-softmax identity head.
pub fn train_embedder(
    dataset: &Dataset,
    hidden: usize,
    seed: u64,
    cfg: &EmbedderTrainConfig,
) -> Result<Embedder> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Empty("train_embedder"));
    }
    let [h, w] = dataset.image_shape();
    let mut m = Embedder::new(EmbedderConfig {
        height: h,
        width: w,
        hidden,
        dim: cfg.dim,
        classes: dataset.num_identities(),
        seed,
    })?;
    let mut opt = Adam::new(cfg.lr, &m.params);
    let mut rng = seed::rng(seed, &[0xE7]);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut data = Vec::with_capacity(chunk.len() * h * w);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| {
                    data.extend_from_slice(dataset.train[i].image.data());
                    dataset.train[i].label
                })
                .collect();
            let tape = Tape::new();
            let wv = m.params.bind(&tape, true);
            let x = tape.constant(Tensor::new(&[chunk.len(), h, w], data)?);
            let emb = m.features(x, chunk.len(), &wv)?;
            let loss = m
                .logits(emb, &wv, cfg.logit_scale)?
                .cross_entropy(&labels)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    context: format!("embedder training loss at epoch {epoch}"),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = wv.iter().map(|v| tape.grad(*v)).collect();
            opt.step(&mut m.params, &grads);
        }
    }
    m.fingerprint = m.params.fingerprint("embedder");
    m.accuracy = m.accuracy_on(&dataset.test)?;
    if m.accuracy < cfg.min_accuracy {
        return Err(Error::ModelInvalid {
            name: format!("embedder(width={hidden}, seed={seed})"),
            reason: format!(
                "held-out accuracy {:.3} below {:.2}",
                m.accuracy, cfg.min_accuracy
            ),
        });
    }
    let sep = measure_separation(&m, &dataset.test)?;
    m.intra_mean = sep.intra_mean;
    m.inter_mean = sep.inter_mean;
    Ok(m)
}

/// Trains `count` embedders cycling through the widths 32, 48, 64, 96 with
/// one seed each.
pub fn train_embedders(
    dataset: &Dataset,
    count: usize,
    seeds: &[u64],
    cfg: &EmbedderTrainConfig,
) -> Result<Vec<Embedder>> {
    if count < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 embedders, got {count}"
        )));
    }
    if seeds.len() != count {
        return Err(Error::invalid(format!(
            "{} seeds for {count} embedders",
            seeds.len()
        )));
    }
    (0..count)
        .map(|i| train_embedder(dataset, WIDTHS[i % WIDTHS.len()], seeds[i], cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig, RenderConfig};
    use crate::grad::{finite_diff_check_with, FdOptions};

    fn tiny_data() -> Dataset {
        build_dataset(&DatasetConfig {
            identities: 6,
            renders_per_identity: 10,
            train_ratio: 0.7,
            jitter: 0.5,
            seed: 5,
            render: RenderConfig {
                height: 12,
                width: 12,
            },
        })
        .unwrap()
    }

    fn quick() -> EmbedderTrainConfig {
        EmbedderTrainConfig {
            epochs: 40,
            batch: 8,
            lr: 3e-3,
            dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_differentiable() {
        let d = tiny_data();
        let m = Embedder::new(EmbedderConfig {
            height: 12,
            width: 12,
            hidden: 16,
            dim: 8,
            classes: 6,
            seed: 1,
        })
        .unwrap();
        let e = m.embed(&d.test[0].image).unwrap();
        assert!((e.l2_norm() - 1.0).abs() < 1e-10);
        assert!(m.embed(&Tensor::zeros(&[4, 4])).is_err());

        let anchor = m.embed(&d.test[5].image).unwrap();
        let report = finite_diff_check_with(
            |tape, x| {
                m.embed_var(tape, x)?
                    .cosine_sim(tape.constant(anchor.clone()))
            },
            &d.test[0].image,
            &FdOptions::new(1e-5),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn trained_models_separate_identities() {
        let d = tiny_data();
        let ms = train_embedders(&d, 2, &[3, 4], &quick()).unwrap();
        for m in &ms {
            assert!(m.accuracy >= 0.9, "{}", m.accuracy);
            assert!(m.intra_mean - m.inter_mean >= 0.3);
        }
        assert_ne!(ms[0].id(), ms[1].id());
        let again = train_embedder(&d, 32, 3, &quick()).unwrap();
        assert_eq!(again, ms[0]);
        let back = Embedder::from_bytes(&ms[1].to_bytes()).unwrap();
        assert_eq!(back, ms[1]);
        assert!(train_embedders(&d, 1, &[1], &quick()).is_err());
    }

    #[test]
    fn undertrained_model_is_rejected() {
        let d = tiny_data();
        let cfg = EmbedderTrainConfig {
            epochs: 0,
            min_accuracy: 0.99,
            ..quick()
        };
        assert!(matches!(
            train_embedder(&d, 16, 1, &cfg),
            Err(Error::ModelInvalid { .. })
        ));
    }
}
