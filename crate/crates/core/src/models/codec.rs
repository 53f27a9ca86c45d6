use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::load_bytes;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::io::{ByteReader, ByteWriter};

/// Image ↔ latent mapping. `Identity` runs the attack in pixel space.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Codec {
    #[default]
    Identity,
    Pca(PcaCodec),
}

/// Linear codec onto the leading principal components of the training
/// images. Latents are scaled to unit standard deviation and laid out as a
/// square `[side, side]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaCodec {
    image: [usize; 2],
    side: usize,
    mean: Vec<f64>,
    /// `[pixels, side²]`, orthonormal columns.
    basis: Tensor,
    scale: f64,
    /// Reconstruction PSNR on held-out images, measured after fitting.
    pub heldout_psnr: f64,
}

impl Codec {
    pub fn name(&self) -> &'static str {
        match self {
            Codec::Identity => "identity",
            Codec::Pca(_) => "pca",
        }
    }

    pub fn latent_shape(&self, image: [usize; 2]) -> [usize; 2] {
        match self {
            Codec::Identity => image,
            Codec::Pca(p) => [p.side, p.side],
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(image.clone()),
            Codec::Pca(p) => p.encode(image),
        }
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(latent.clone());
        Ok(self.decode_var(&tape, x)?.value())
    }

    pub fn decode_var<'t>(&self, tape: &'t Tape, latent: Var<'t>) -> Result<Var<'t>> {
        match self {
            Codec::Identity => Ok(latent),
            Codec::Pca(p) => p.decode_var(tape, latent),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(CODEC_MAGIC, CODEC_VERSION);
        match self {
            Codec::Identity => {
                w.str("identity");
            }
            Codec::Pca(p) => {
                w.str("pca")
                    .u64(p.image[0] as u64)
                    .u64(p.image[1] as u64)
                    .u64(p.side as u64)
                    .f64(p.scale)
                    .f64(p.heldout_psnr)
                    .f64s(&p.mean)
                    .tensor(&p.basis);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("codec", bytes, CODEC_MAGIC, CODEC_VERSION)?;
        let codec = match r.str()?.as_str() {
            "identity" => Codec::Identity,
            "pca" => {
                let image = [r.usize()?, r.usize()?];
                let side = r.usize()?;
                let scale = r.f64()?;
                let heldout_psnr = r.f64()?;
                let mean = r.f64s(image[0] * image[1])?;
                let basis = r.tensor()?;
                let pixels = image[0] * image[1];
                if mean.len() != pixels || basis.shape() != [pixels, side * side] || scale <= 0.0 {
                    return Err(Error::format("codec", "inconsistent PCA dimensions"));
                }
                Codec::Pca(PcaCodec {
                    image,
                    side,
                    mean,
                    basis,
                    scale,
                    heldout_psnr,
                })
            }
            other => return Err(Error::format("codec", format!("unknown kind `{other}`"))),
        };
        r.finish()?;
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&load_bytes(path)?)
    }
}

const CODEC_MAGIC: &[u8; 8] = b"ADVCODC\0";
const CODEC_VERSION: u32 = 1;

impl PcaCodec {
    /// Fits a `side²`-component PCA on `train` and records the PSNR on
    /// `heldout`.
    pub fn fit(train: &[&Tensor], heldout: &[&Tensor], side: usize) -> Result<Self> {
        let first = train.first().ok_or(Error::Empty("PcaCodec::fit"))?;
        let image = crate::data::image_dims(first)?;
        let pixels = image[0] * image[1];
        let m = side * side;
        if m == 0 || m > pixels {
            return Err(Error::invalid(format!(
                "{m} components for {pixels}-pixel images"
            )));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; pixels];
        for im in train {
            if im.shape() != image {
                return Err(Error::ShapeMismatch {
                    op: "PcaCodec::fit",
                    left: im.shape().to_vec(),
                    right: image.to_vec(),
                });
            }
            mean.iter_mut()
                .zip(im.data())
                .for_each(|(a, v)| *a += v / n);
        }
        let centered = DMatrix::from_fn(train.len(), pixels, |r, c| train[r].data()[c] - mean[c]);
        let cov = centered.transpose() * &centered / n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..pixels).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = vec![0.0; pixels * m];
        for (j, &col) in order[..m].iter().enumerate() {
            for i in 0..pixels {
                basis[i * m + j] = eig.eigenvectors[(i, col)];
            }
        }
        let var: f64 = order[..m]
            .iter()
            .map(|&c| eig.eigenvalues[c].max(0.0))
            .sum::<f64>()
            / m as f64;
        let scale = var.sqrt().max(1e-12);
        let mut codec = PcaCodec {
            image,
            side,
            mean,
            basis: Tensor::new(&[pixels, m], basis)?,
            scale,
            heldout_psnr: f64::NAN,
        };
        let eval = if heldout.is_empty() { train } else { heldout };
        let mut total = 0.0;
        for im in eval {
            let rec = Codec::Pca(codec.clone()).decode(&codec.encode(im)?)?;
            total += crate::eval::psnr(im, &rec)?.min(100.0);
        }
        codec.heldout_psnr = total / eval.len() as f64;
        Ok(codec)
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.image {
            return Err(Error::ShapeMismatch {
                op: "codec encode",
                left: image.shape().to_vec(),
                right: self.image.to_vec(),
            });
        }
        let pixels = self.mean.len();
        let m = self.side * self.side;
        let centered: Vec<f64> = image
            .data()
            .iter()
            .zip(&self.mean)
            .map(|(v, mu)| v - mu)
            .collect();
        let mut z = vec![0.0; m];
        for (i, c) in centered.iter().enumerate().take(pixels) {
            let row = &self.basis.data()[i * m..(i + 1) * m];
            z.iter_mut().zip(row).for_each(|(a, b)| *a += c * b);
        }
        z.iter_mut().for_each(|v| *v /= self.scale);
        Tensor::new(&[self.side, self.side], z)
    }

    fn decode_var<'t>(&self, tape: &'t Tape, latent: Var<'t>) -> Result<Var<'t>> {
        let shape = latent.shape();
        if shape != [self.side, self.side] {
            return Err(Error::ShapeMismatch {
                op: "codec decode",
                left: shape,
                right: vec![self.side, self.side],
            });
        }
        let m = self.side * self.side;
        let basis_t = tape.constant(self.basis.clone()).transpose()?;
        let mean = tape.constant(Tensor::new(&[1, self.mean.len()], self.mean.clone())?);
        latent
            .reshape(&[1, m])?
            .scale(self.scale)
            .matmul(basis_t)?
            .add(mean)?
            .reshape(&self.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig, RenderConfig};
    use crate::grad::{finite_diff_check_with, FdOptions};

    #[test]
    fn identity_codec_is_exact() {
        let x = Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = Codec::Identity;
        assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
        assert_eq!(Codec::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn pca_codec_reconstructs_and_differentiates() {
        let d = build_dataset(&DatasetConfig {
            identities: 10,
            renders_per_identity: 20,
            train_ratio: 0.8,
            jitter: 1.0,
            seed: 9,
            render: RenderConfig {
                height: 16,
                width: 16,
            },
        })
        .unwrap();
        let train: Vec<&Tensor> = d.train.iter().map(|s| &s.image).collect();
        let test: Vec<&Tensor> = d.test.iter().map(|s| &s.image).collect();
        let pca = PcaCodec::fit(&train, &test, 10).unwrap();
        assert!(pca.heldout_psnr >= 30.0, "{}", pca.heldout_psnr);
        let c = Codec::Pca(pca);
        let z = c.encode(test[0]).unwrap();
        assert_eq!(z.shape(), &[10, 10]);
        assert!(c.encode(&Tensor::zeros(&[3, 3])).is_err());
        assert!(c.decode(&Tensor::zeros(&[3, 3])).is_err());
        assert_eq!(Codec::from_bytes(&c.to_bytes()).unwrap(), c);

        let target = test[1].clone();
        let report = finite_diff_check_with(
            |tape, x| {
                Ok(c.decode_var(tape, x)?
                    .sub(tape.constant(target.clone()))?
                    .square()
                    .sum())
            },
            &z,
            &FdOptions::new(1e-5),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    }
}
