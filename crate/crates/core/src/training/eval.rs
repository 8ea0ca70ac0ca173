//! Evaluation sweeps over the latent space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Generator, GeneratorKind};
use crate::structured::mirror;
use crate::tensor::Tensor;

fn single(z: &Tensor, z_dim: usize) -> Result<Tensor> {
    if z.numel() != z_dim {
        return Err(Error::Shape(format!("expected one latent of length {z_dim}, got {:?}", z.shape())));
    }
    z.clone().reshape(&[1, z_dim])
}

/// `t` from 1 down to -1 in `n` evenly spaced values.
pub fn linspace_down(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| 1.0 - 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `z_t = (1+t)/2 * z + (1-t)/2 * z_N`. For the z′ encoding this is
/// `[t z′; z″]`.
pub fn interpolation_latents(gen: &Generator, z: &Tensor, n: usize) -> Result<Tensor> {
    if gen.spec.kind == GeneratorKind::Cyclic {
        return Err(Error::Config("cyclic tile generators have no mirror partner latent".into()));
    }
    let d = gen.spec.z_dim;
    let z = single(z, d)?;
    let zn = gen.partner(&z);
    let mut data = Vec::with_capacity(n * d);
    for t in linspace_down(n) {
        let (a, b) = ((1.0 + t) / 2.0, (1.0 - t) / 2.0);
        data.extend(z.data().iter().zip(zn.data()).map(|(&p, &q)| (a * p as f64 + b * q as f64) as f32));
    }
    Tensor::new(&[n, d], data)
}

/// `n` images along the path from `z` to its partner `z_N`.
pub fn yaw_sweep(gen: &Generator, z: &Tensor, n: usize) -> Result<Tensor> {
    gen.generate(&interpolation_latents(gen, z, n)?)
}

/// `(G(z) + mirror(G(z_N))) / 2`.
pub fn overlay_average(gen: &Generator, z: &Tensor) -> Result<Tensor> {
    let z = single(z, gen.spec.z_dim)?;
    let a = gen.generate(&z)?;
    let b = gen.generate(&gen.partner(&z))?;
    a.zip_map(&mirror(&b), |p, q| (p + q) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Image `i` against the mirror of image `n-1-i`, its z_N partner.
    #[default]
    Partner,
    /// Image `i` against its own mirror.
    SelfMirror,
}

fn mse_f64(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / n
}

/// Per-image mirror discrepancy along the sweep.
pub fn mse_curve(gen: &Generator, z: &Tensor, n: usize, pairing: Pairing) -> Result<Vec<f64>> {
    let imgs = yaw_sweep(gen, z, n)?;
    mse_curve_of(&imgs, pairing)
}

pub fn mse_curve_of(imgs: &Tensor, pairing: Pairing) -> Result<Vec<f64>> {
    let n = imgs.shape()[0];
    let mirrored = mirror(imgs);
    let per = imgs.numel() / n.max(1);
    Ok((0..n)
        .map(|i| {
            let j = match pairing {
                Pairing::Partner => n - 1 - i,
                Pairing::SelfMirror => i,
            };
            mse_f64(&imgs.data()[i * per..(i + 1) * per], &mirrored.data()[j * per..(j + 1) * per])
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Every z′ entry set to the swept value.
    All,
    /// z′ entry `k` set to the swept value, the other z′ entries zero.
    Coordinate(usize),
}

/// `lo, lo+step, ..., hi`, with the count rounded so that `hi` is included.
pub fn sweep_values(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Config(format!("bad sweep range [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step).round() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Images for each swept value with z″ held fixed.
pub fn scalar_sweep(gen: &Generator, z: &Tensor, values: &[f64], mode: SweepMode) -> Result<Tensor> {
    if gen.spec.kind != GeneratorKind::Zprime {
        return Err(Error::Config(format!("scalar sweeps need a z' generator, got {:?}", gen.spec.kind)));
    }
    let (d, zp) = (gen.spec.z_dim, gen.spec.zprime_dim);
    let z = single(z, d)?;
    if let SweepMode::Coordinate(k) = mode {
        if k >= zp {
            return Err(Error::Config(format!("coordinate {k} outside the {zp} z' entries")));
        }
    }
    let mut data = Vec::with_capacity(values.len() * d);
    for &v in values {
        let mut row = z.data().to_vec();
        for (i, e) in row[..zp].iter_mut().enumerate() {
            *e = match mode {
                SweepMode::All => v as f32,
                SweepMode::Coordinate(k) if k == i => v as f32,
                SweepMode::Coordinate(_) => 0.0,
            };
        }
        data.extend(row);
    }
    gen.generate(&Tensor::new(&[values.len(), d], data)?)
}
