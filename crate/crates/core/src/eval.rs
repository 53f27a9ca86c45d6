//! Verification and identification metrics, image quality and lossy
//! transforms.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::image_dims;
use crate::error::{Error, Result};
use crate::grad::{cosine_similarity, Tensor};
use crate::models::Embedder;

/// Minimum number of impostor pairs accepted for threshold calibration.
pub const MIN_IMPOSTOR_PAIRS: usize = 100;

/// Quantile rule: with similarities sorted ascending as `s[0..n]`,
/// `τ = s[⌈(1 − far)·n⌉ − 1]`. At most `far·n` pairs lie strictly above `τ`.
pub fn quantile_threshold(sims: &[f64], far: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::Empty("quantile_threshold"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::invalid(format!("FAR {far} not in (0, 1)")));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "impostor similarities".into(),
        });
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against (1 − far)·n landing a hair above an integer.
    let pos = (((1.0 - far) * n as f64) - 1e-9).ceil() as usize;
    Ok(sorted[pos.clamp(1, n) - 1])
}

/// Cosine similarities of cross-identity image pairs under `m`.
pub fn pair_similarities(m: &Embedder, pairs: &[(&Tensor, &Tensor)]) -> Result<Vec<f64>> {
    let left: Vec<&Tensor> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<&Tensor> = pairs.iter().map(|p| p.1).collect();
    let (a, b) = (m.embed_batch(&left)?, m.embed_batch(&right)?);
    a.iter()
        .zip(&b)
        .map(|(x, y)| cosine_similarity(x, y))
        .collect()
}

/// Embedder plus an acceptance threshold.
#[derive(Clone, Debug)]
pub struct VerificationProtocol<'m> {
    pub embedder: &'m Embedder,
    pub threshold: f64,
    /// FAR the threshold was calibrated at, if it was calibrated.
    pub far: Option<f64>,
}

pub fn calibrate_threshold<'m>(
    m: &'m Embedder,
    impostor_pairs: &[(&Tensor, &Tensor)],
    far: f64,
) -> Result<VerificationProtocol<'m>> {
    if impostor_pairs.len() < MIN_IMPOSTOR_PAIRS {
        return Err(Error::invalid(format!(
            "{} impostor pairs, need at least {MIN_IMPOSTOR_PAIRS}",
            impostor_pairs.len()
        )));
    }
    let sims = pair_similarities(m, impostor_pairs)?;
    Ok(VerificationProtocol {
        embedder: m,
        threshold: quantile_threshold(&sims, far)?,
        far: Some(far),
    })
}

/// Fraction of similarities strictly above `tau`.
pub fn acceptance_rate(sims: &[f64], tau: f64) -> f64 {
    if sims.is_empty() {
        return 0.0;
    }
    sims.iter().filter(|&&s| s > tau).count() as f64 / sims.len() as f64
}

/// Fraction of `adv` images accepted as `target` under `protocol`.
pub fn verification_asr(
    adv: &[&Tensor],
    target: &Tensor,
    protocol: &VerificationProtocol,
) -> Result<f64> {
    if adv.is_empty() {
        return Err(Error::Empty("verification_asr"));
    }
    let t = protocol.embedder.embed(target)?;
    let embs = protocol.embedder.embed_batch(adv)?;
    let sims = embs
        .iter()
        .map(|e| cosine_similarity(e, t.data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(acceptance_rate(&sims, protocol.threshold))
}

/// Closed-set identification gallery with one image per label.
#[derive(Clone, Debug)]
pub struct Gallery {
    entries: Vec<(usize, Tensor)>,
}

impl Gallery {
    pub fn new(entries: Vec<(usize, Tensor)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("Gallery"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (label, _) in &entries {
            if !seen.insert(*label) {
                return Err(Error::invalid(format!("gallery label {label} repeated")));
            }
        }
        Ok(Gallery { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn embed(&self, m: &Embedder) -> Result<GalleryEmbeddings> {
        let imgs: Vec<&Tensor> = self.entries.iter().map(|e| &e.1).collect();
        Ok(GalleryEmbeddings {
            labels: self.labels().collect(),
            embeddings: m.embed_batch(&imgs)?,
        })
    }
}

/// Gallery embeddings precomputed under one model.
#[derive(Clone, Debug)]
pub struct GalleryEmbeddings {
    pub labels: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

impl GalleryEmbeddings {
    /// 1-based rank of `label` for a probe embedding. Entries are sorted by
    /// descending similarity; ties keep gallery insertion order.
    pub fn rank_of(&self, probe: &[f64], label: usize) -> Result<usize> {
        let pos = self
            .labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::invalid(format!("label {label} not in gallery")))?;
        let sims = self
            .embeddings
            .iter()
            .map(|e| cosine_similarity(probe, e))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
        Ok(order.iter().position(|&i| i == pos).expect("present") + 1)
    }
}

/// True iff `target` ranks within the top `n` gallery candidates for `probe`.
pub fn rank_n_t(
    probe: &Tensor,
    target: usize,
    gallery: &Gallery,
    m: &Embedder,
    n: usize,
) -> Result<bool> {
    if n == 0 {
        return Err(Error::invalid("rank N must be >= 1"));
    }
    let g = gallery.embed(m)?;
    Ok(g.rank_of(m.embed(probe)?.data(), target)? <= n)
}

/// PSNR in dB for unit peak. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_peak(a, b, 1.0)
}

pub fn psnr_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::invalid(format!("peak {peak} must be positive")));
    }
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Formats a metric, writing the infinite PSNR sentinel as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

pub const SSIM_WINDOW: usize = 8;

/// Stabilizing constants `C1 = (k1·L)²`, `C2 = (k2·L)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Mean SSIM over every `window×window` placement (stride 1, uniform
/// weights, population statistics).
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, c: SsimConstants) -> Result<f64> {
    let [h, w] = image_dims(a)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if window == 0 || h < window || w < window {
        return Err(Error::invalid(format!(
            "{h}x{w} image smaller than SSIM window {window}"
        )));
    }
    let c1 = (c.k1 * c.dynamic_range).powi(2);
    let c2 = (c.k2 * c.dynamic_range).powi(2);
    let (da, db) = (a.data(), b.data());
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - window {
        for col in 0..=w - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + window {
                for j in col..col + window {
                    let (x, y) = (da[i * w + j], db[i * w + j]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

pub fn ssim_default(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SsimConstants::default())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossyKind {
    /// Quantize `[0, 1]` to `2^bits` levels.
    BitReduce(u32),
    /// Nearest-neighbour downscale by the factor, then back up.
    ResizeDownUp(f64),
}

impl LossyKind {
    pub fn parse(kind: &str, param: f64) -> Result<Self> {
        let k = match kind {
            "bit-reduce" => LossyKind::BitReduce(param as u32),
            "resize-down-up" | "resize" => LossyKind::ResizeDownUp(param),
            other => {
                return Err(Error::invalid(format!(
                    "lossy kind `{other}` (expected bit-reduce|resize-down-up)"
                )))
            }
        };
        if let LossyKind::BitReduce(_) = k {
            if param.fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "bit depth {param} is not an integer"
                )));
            }
        }
        Ok(k)
    }

    pub fn label(&self) -> String {
        match self {
            LossyKind::BitReduce(b) => format!("bit-reduce({b})"),
            LossyKind::ResizeDownUp(s) => format!("resize({s})"),
        }
    }
}

fn nearest(dst: usize, src: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

pub fn lossy_transform(kind: LossyKind, image: &Tensor) -> Result<Tensor> {
    let [h, w] = image_dims(image)?;
    match kind {
        LossyKind::BitReduce(bits) => {
            if !(1..=8).contains(&bits) {
                return Err(Error::invalid(format!("bit depth {bits} not in 1..=8")));
            }
            let levels = ((1u32 << bits) - 1) as f64;
            Ok(image.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels))
        }
        LossyKind::ResizeDownUp(scale) => {
            if !(scale > 0.0 && scale < 1.0) {
                return Err(Error::invalid(format!(
                    "resize scale {scale} not in (0, 1)"
                )));
            }
            let dh = ((h as f64 * scale).round() as usize).max(1);
            let dw = ((w as f64 * scale).round() as usize).max(1);
            let (down_r, down_c) = (nearest(dh, h), nearest(dw, w));
            let (up_r, up_c) = (nearest(h, dh), nearest(w, dw));
            let d = image.data();
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(d[down_r[up_r[r]] * w + down_c[up_c[c]]]);
                }
            }
            Tensor::new(&[h, w], out)
        }
    }
}

/// Writes a CSV file with a header row; fields must not contain commas.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::invalid(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    crate::io::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(&[h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn quantile_rule_matches_sort_and_index() {
        let sims: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let tau = quantile_threshold(&sims, 0.1).unwrap();
        assert!((tau - 0.8).abs() < 1e-12);
        assert!((acceptance_rate(&sims, tau) - 0.1).abs() < 1e-12);
        assert_eq!(quantile_threshold(&sims, 1e-9).unwrap(), 0.9);
        let doubled: Vec<f64> = sims.iter().chain(&sims).copied().collect();
        assert_eq!(quantile_threshold(&doubled, 0.1).unwrap(), tau);
        assert!(quantile_threshold(&sims, 0.0).is_err());
        assert!(quantile_threshold(&[], 0.1).is_err());
    }

    #[test]
    fn acceptance_is_monotone_in_threshold() {
        let sims = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2, 0.6, 0.4, 0.8, 0.0];
        assert!((acceptance_rate(&sims, 0.65) - 0.3).abs() < 1e-12);
        let mut prev = 1.0;
        for k in 0..=20 {
            let r = acceptance_rate(&sims, -0.05 + k as f64 * 0.05);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn ranking_with_hand_set_embeddings() {
        let g = GalleryEmbeddings {
            labels: vec![10, 11, 12, 13, 14],
            embeddings: vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.6, 0.8],
                vec![0.8, 0.6],
                vec![1.0, 0.0],
            ],
        };
        let probe = [0.9, 0.1];
        let sims: Vec<f64> = g
            .embeddings
            .iter()
            .map(|e| cosine_similarity(&probe, e).unwrap())
            .collect();
        for (i, &l) in g.labels.iter().enumerate() {
            // Brute force: entries strictly better, plus equal ones inserted earlier.
            let better = (0..5)
                .filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i))
                .count();
            assert_eq!(g.rank_of(&probe, l).unwrap(), better + 1);
        }
        // Ties keep insertion order: label 10 precedes the identical label 14.
        assert_eq!(g.rank_of(&probe, 10).unwrap(), 1);
        assert_eq!(g.rank_of(&probe, 14).unwrap(), 2);
        assert!(g.rank_of(&probe, 99).is_err());
    }

    #[test]
    fn gallery_rejects_duplicates() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(Gallery::new(vec![(1, t.clone()), (1, t.clone())]).is_err());
        assert!(Gallery::new(vec![]).is_err());
        assert_eq!(Gallery::new(vec![(1, t.clone()), (2, t)]).unwrap().len(), 2);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(fmt_metric(f64::INFINITY), "inf");
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        let c = Tensor::vector(vec![0.1, 0.8]);
        let mse: f64 = (0.01 + 0.04) / 2.0;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &c).unwrap() - expect).abs() < 1e-12);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
        assert!((psnr_peak(&a, &c, 2.0).unwrap() - 10.0 * (4.0 / mse).log10()).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn ssim_properties() {
        let a = img(12, 12, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let b = img(12, 12, |r, c| ((r * 5 + c * 2) % 9) as f64 / 8.0);
        assert!((ssim_default(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ssim_default(&a, &b).unwrap(), ssim_default(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));

        let checker = img(8, 8, |r, c| ((r + c) % 2) as f64);
        let inverted = checker.map(|v| 1.0 - v);
        assert!(ssim_default(&checker, &inverted).unwrap() < 0.0);
        assert!(ssim_default(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn lossy_transforms() {
        let q = img(4, 4, |r, c| ((r * 4 + c) * 13 % 256) as f64 / 255.0);
        assert_eq!(lossy_transform(LossyKind::BitReduce(8), &q).unwrap(), q);
        let one = lossy_transform(LossyKind::BitReduce(1), &q).unwrap();
        let mut vals: Vec<f64> = one.data().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert!(vals.len() <= 2);

        let grad = img(4, 4, |r, c| (r * 4 + c) as f64);
        let out = lossy_transform(LossyKind::ResizeDownUp(0.5), &grad).unwrap();
        let expect = vec![
            5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0, 13.0, 13.0, 15.0, 15.0, 13.0, 13.0, 15.0, 15.0,
        ];
        assert_eq!(out.data(), expect.as_slice());

        assert!(lossy_transform(LossyKind::BitReduce(0), &q).is_err());
        assert!(lossy_transform(LossyKind::BitReduce(9), &q).is_err());
        assert!(lossy_transform(LossyKind::ResizeDownUp(1.0), &q).is_err());
        assert!(LossyKind::parse("jpeg", 50.0).is_err());
        assert!(LossyKind::parse("bit-reduce", 6.5).is_err());
    }

    #[test]
    fn csv_rows_must_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_csv(&p, &["a", "b"], &[vec!["1".into(), "inf".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,inf\n");
        assert!(write_csv(&p, &["a"], &[vec![]]).is_err());
    }
}
