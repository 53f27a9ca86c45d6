//! Procedural identity-bearing grayscale images.
//!
//! An identity is a superposition of 3 to 5 oriented Gabor blobs. The
//! parameter vector has a fixed length of [`PARAM_LEN`]: one blob count
//! followed by [`MAX_BLOBS`] blocks of [`BLOB_PARAMS`] values. Blocks beyond
//! the count are generated but ignored by the renderer.
//!
//! | param       | range            |
//! |-------------|------------------|
//! | count       | {3, 4, 5}        |
//! | center x, y | [0.22, 0.78]     |
//! | orientation | [0, π)           |
//! | frequency   | [1.5, 4.5] cycles per image width |
//! | major sigma | [0.10, 0.22]     |
//! | minor sigma | [0.05, 0.11]     |
//! | amplitude   | ±[0.5, 1.0]      |
//! | phase       | [0, 2π)          |

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::io::{read_file, ByteReader, ByteWriter};
use crate::seed;

pub const MAX_BLOBS: usize = 5;
pub const BLOB_PARAMS: usize = 8;
pub const PARAM_LEN: usize = 1 + MAX_BLOBS * BLOB_PARAMS;
pub const MAX_JITTER: f64 = 2.0;

const RANGES: [(f64, f64); BLOB_PARAMS] = [
    (0.22, 0.78),
    (0.22, 0.78),
    (0.0, PI),
    (1.5, 4.5),
    (0.10, 0.22),
    (0.05, 0.11),
    (0.5, 1.0),
    (0.0, 2.0 * PI),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub label: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl SyntheticIdentity {
    pub fn blob_count(&self) -> usize {
        self.params[0] as usize
    }

    fn blob(&self, i: usize) -> &[f64] {
        &self.params[1 + i * BLOB_PARAMS..1 + (i + 1) * BLOB_PARAMS]
    }

    pub fn params_in_range(&self) -> bool {
        if self.params.len() != PARAM_LEN || !(3..=MAX_BLOBS).contains(&self.blob_count()) {
            return false;
        }
        (0..MAX_BLOBS).all(|b| {
            self.blob(b)
                .iter()
                .zip(RANGES)
                .enumerate()
                .all(|(k, (&v, (lo, hi)))| {
                    let v = if k == 6 { v.abs() } else { v };
                    v >= lo && v <= hi
                })
        })
    }
}

/// Deterministic identity parameters for `seed`.
pub fn gen_identity(label: usize, seed: u64) -> SyntheticIdentity {
    let mut rng = seed::rng(seed, &[0x1D]);
    let mut params = Vec::with_capacity(PARAM_LEN);
    params.push(rng.random_range(3..=MAX_BLOBS) as f64);
    for _ in 0..MAX_BLOBS {
        for (k, (lo, hi)) in RANGES.iter().enumerate() {
            let mut v = rng.random_range(*lo..*hi);
            if k == 6 && rng.random_bool(0.5) {
                v = -v;
            }
            params.push(v);
        }
    }
    SyntheticIdentity {
        label,
        seed,
        params,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    /// `[height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub variation_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 32,
            width: 32,
        }
    }
}

/// Renders `identity`. `jitter ∈ [0, MAX_JITTER]` scales a seeded shift of
/// up to ±0.03 image widths per unit, per-blob parameter wobble, a contrast
/// and brightness change, and additive pixel noise of std 0.015 per unit.
pub fn render(
    identity: &SyntheticIdentity,
    variation_seed: u64,
    jitter: f64,
    cfg: RenderConfig,
) -> Result<RenderedSample> {
    if !(0.0..=MAX_JITTER).contains(&jitter) {
        return Err(Error::invalid(format!(
            "jitter {jitter} outside [0, {MAX_JITTER}]"
        )));
    }
    let mut rng = seed::rng(variation_seed, &[identity.seed, 0x5A]);
    let mut u = |scale: f64| -> f64 { rng.random_range(-1.0..1.0) * scale * jitter };
    let (dx, dy) = (u(0.03), u(0.03));
    let contrast = 1.0 + u(0.08);
    let brightness = u(0.04);
    let wobble: Vec<[f64; 3]> = (0..MAX_BLOBS)
        .map(|_| [u(0.01), u(0.01), u(0.05)])
        .collect();
    let noise_std = 0.015 * jitter;
    let mut noise_rng = seed::rng(variation_seed, &[identity.seed, 0x7E]);

    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let mut v = 0.0;
            for b in 0..identity.blob_count() {
                let p = identity.blob(b);
                let [wx, wy, wt] = wobble[b];
                let (cx, cy) = (p[0] + dx + wx, p[1] + dy + wy);
                let theta = p[2] + wt;
                let (px, py) = (x - cx, y - cy);
                let along = px * theta.cos() + py * theta.sin();
                let across = -px * theta.sin() + py * theta.cos();
                let env = (-(along * along) / (2.0 * p[4] * p[4])
                    - (across * across) / (2.0 * p[5] * p[5]))
                    .exp();
                v += p[6] * env * (2.0 * PI * p[3] * along + p[7]).cos();
            }
            let mut pixel = 0.5 + contrast * 0.3 * v + brightness;
            if noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(&mut noise_rng);
                pixel += noise_std * n;
            }
            data.push(pixel.clamp(0.0, 1.0));
        }
    }
    Ok(RenderedSample {
        image: Tensor::new(&[h, w], data)?,
        label: identity.label,
        variation_seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub identities: usize,
    pub renders_per_identity: usize,
    pub train_ratio: f64,
    pub jitter: f64,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            identities: 60,
            renders_per_identity: 40,
            train_ratio: 0.8,
            jitter: 1.0,
            seed: 2024,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub identities: Vec<SyntheticIdentity>,
    pub train: Vec<RenderedSample>,
    pub test: Vec<RenderedSample>,
}

/// Number of training renders per identity for a split ratio.
pub fn train_count(renders: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = (renders as f64 * ratio).round() as usize;
    if n == 0 || n >= renders {
        return Err(Error::invalid(format!(
            "ratio {ratio} with {renders} renders leaves an empty split"
        )));
    }
    Ok(n)
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.identities < 2 {
        return Err(Error::invalid("dataset needs at least two identities"));
    }
    let n_train = train_count(cfg.renders_per_identity, cfg.train_ratio)?;
    let identities: Vec<_> = (0..cfg.identities)
        .map(|i| gen_identity(i, seed::derive(cfg.seed, &[0x1D, i as u64])))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for id in &identities {
        for r in 0..cfg.renders_per_identity {
            let vs = seed::derive(cfg.seed, &[0xAA, id.label as u64, r as u64]);
            let sample = render(id, vs, cfg.jitter, cfg.render)?;
            if r < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        identities,
        train,
        test,
    })
}

const DATA_MAGIC: &[u8; 8] = b"ADVDSET\0";
const DATA_VERSION: u32 = 1;

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.config.render.height, self.config.render.width]
    }

    /// Layout after the header: `height, width, identities,
    /// renders_per_identity, seed: u64; train_ratio, jitter: f64;
    /// param_len: u64`; identity table (`label, seed: u64`, params); sample
    /// index (`count: u64`, then `label, variation_seed, split: u64` per
    /// sample, split 0 = train, 1 = test); then the pixel arrays in index
    /// order, `height·width` `f64` values each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::with_header(DATA_MAGIC, DATA_VERSION);
        w.u64(c.render.height as u64)
            .u64(c.render.width as u64)
            .u64(c.identities as u64)
            .u64(c.renders_per_identity as u64)
            .u64(c.seed)
            .f64(c.train_ratio)
            .f64(c.jitter)
            .u64(PARAM_LEN as u64);
        for id in &self.identities {
            w.u64(id.label as u64).u64(id.seed).f64s(&id.params);
        }
        let all: Vec<(&RenderedSample, u64)> = self
            .train
            .iter()
            .map(|s| (s, 0))
            .chain(self.test.iter().map(|s| (s, 1)))
            .collect();
        w.u64(all.len() as u64);
        for (s, split) in &all {
            w.u64(s.label as u64).u64(s.variation_seed).u64(*split);
        }
        for (s, _) in &all {
            w.f64s(s.image.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("dataset", bytes, DATA_MAGIC, DATA_VERSION)?;
        let height = r.usize()?;
        let width = r.usize()?;
        let identities = r.usize()?;
        let renders_per_identity = r.usize()?;
        let seed = r.u64()?;
        let train_ratio = r.f64()?;
        let jitter = r.f64()?;
        if r.usize()? != PARAM_LEN {
            return Err(Error::format("dataset", "parameter length mismatch"));
        }
        let ids = (0..identities)
            .map(|_| {
                Ok(SyntheticIdentity {
                    label: r.usize()?,
                    seed: r.u64()?,
                    params: r.f64s(PARAM_LEN)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = r.usize()?;
        let index = (0..n)
            .map(|_| Ok((r.usize()?, r.u64()?, r.u64()?)))
            .collect::<Result<Vec<_>>>()?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (label, variation_seed, split) in index {
            let image = Tensor::new(&[height, width], r.f64s(height * width)?)?;
            let s = RenderedSample {
                image,
                label,
                variation_seed,
            };
            match split {
                0 => train.push(s),
                1 => test.push(s),
                other => return Err(Error::format("dataset", format!("bad split {other}"))),
            }
        }
        r.finish()?;
        Ok(Dataset {
            config: DatasetConfig {
                identities,
                renders_per_identity,
                train_ratio,
                jitter,
                seed,
                render: RenderConfig { height, width },
            },
            identities: ids,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// One binary PGM per sample, named `{split}_{label:03}_{index:03}.pgm`.
    pub fn export_pgm(&self, dir: &Path) -> Result<usize> {
        let mut count = 0;
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            let mut per_label = std::collections::HashMap::new();
            for s in samples.iter() {
                let k = per_label.entry(s.label).or_insert(0usize);
                let name = format!("{split}_{:03}_{:03}.pgm", s.label, k);
                *k += 1;
                write_pgm(&dir.join(name), &s.image)?;
                count += 1;
            }
        }
        Ok(count)
    }
}

/// Binary P5 with maxval 255; values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = image_dims(image)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    crate::io::write_atomic(path, &encode_pgm(image)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |why: &str| Error::format("pgm", why.to_string());
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
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated pixels"))?;
    Tensor::new(
        &[h, w],
        pixels.iter().map(|&p| p as f64 / max as f64).collect(),
    )
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read_file(path)?)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<[usize; 2]> {
    match image.shape() {
        [h, w] => Ok([*h, *w]),
        other => Err(Error::invalid(format!(
            "expected a 2-D image, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn identities_are_deterministic_distinct_and_in_range() {
        assert_eq!(gen_identity(0, 5), gen_identity(0, 5));
        let ids: Vec<_> = (0..100).map(|s| gen_identity(s as usize, s)).collect();
        for (i, a) in ids.iter().enumerate() {
            assert!(a.params_in_range());
            for b in &ids[i + 1..] {
                assert_ne!(a.params, b.params);
            }
        }
    }

    #[test]
    fn zero_jitter_is_canonical() {
        let id = gen_identity(0, 77);
        let cfg = RenderConfig::default();
        let a = render(&id, 1, 0.0, cfg).unwrap();
        let b = render(&id, 2, 0.0, cfg).unwrap();
        assert_eq!(a.image, b.image);
        let j = render(&id, 1, 1.0, cfg).unwrap();
        assert_ne!(a.image, j.image);
        for s in [a, j] {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[32, 32]);
        }
        assert!(render(&id, 1, MAX_JITTER + 0.1, cfg).is_err());
        assert!(render(&id, 1, -0.1, cfg).is_err());
    }

    #[test]
    fn same_identity_renders_are_closer_than_different_identities() {
        let cfg = RenderConfig::default();
        let ids: Vec<_> = (0..20).map(|i| gen_identity(i, 1000 + i as u64)).collect();
        let (mut intra, mut inter) = (0.0, 0.0);
        for k in 0..100 {
            let a = &ids[k % 20];
            let b = &ids[(k + 1 + k / 20) % 20];
            let r1 = render(a, 2 * k as u64, 1.0, cfg).unwrap();
            let r2 = render(a, 2 * k as u64 + 1, 1.0, cfg).unwrap();
            let r3 = render(b, 2 * k as u64 + 1, 1.0, cfg).unwrap();
            intra += mse(&r1.image, &r2.image);
            inter += mse(&r1.image, &r3.image);
        }
        assert!(intra < inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn dataset_splits() {
        let cfg = DatasetConfig {
            identities: 4,
            renders_per_identity: 10,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 32);
        assert_eq!(ds.test.len(), 8);
        for l in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.label == l).count(), 8);
            assert_eq!(ds.test.iter().filter(|s| s.label == l).count(), 2);
        }
        for a in &ds.train {
            assert!(!ds
                .test
                .iter()
                .any(|b| a.label == b.label && a.variation_seed == b.variation_seed));
        }
        assert_eq!(build_dataset(&cfg).unwrap(), ds);

        let bad = DatasetConfig {
            train_ratio: 1.0,
            ..cfg.clone()
        };
        assert!(build_dataset(&bad).is_err());
        let one = DatasetConfig {
            identities: 1,
            ..cfg.clone()
        };
        assert!(build_dataset(&one).is_err());
    }

    #[test]
    fn dataset_and_pgm_round_trip() {
        let cfg = DatasetConfig {
            identities: 3,
            renders_per_identity: 4,
            train_ratio: 0.5,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..8], b"ADVDSET\0");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);

        let img = &ds.train[0].image;
        let pgm = encode_pgm(img).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        let back = decode_pgm(&pgm).unwrap();
        assert!(back.max_abs_diff(img).unwrap() <= 0.5 / 255.0 + 1e-12);

        let dir = tempfile::tempdir().unwrap();
        assert_eq!(ds.export_pgm(dir.path()).unwrap(), 12);
        assert!(dir.path().join("test_002_001.pgm").exists());
    }
}
